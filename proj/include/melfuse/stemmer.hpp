#pragma once

#include <string>

namespace melfuse::metrics {

// Classic Porter stemmer (the 1980 algorithm, steps 1a-5b). Input is
// expected lowercase; words of length <= 2 pass through unchanged.
std::string porter_stem(const std::string& word);

}  // namespace melfuse::metrics
