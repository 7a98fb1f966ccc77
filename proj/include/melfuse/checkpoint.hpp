#pragma once

// Named-tensor container: `<prefix>.manifest` (UTF-8 text; one record per
// tensor with name, dtype, shape and byte offset, plus an optional metadata
// line) and `<prefix>.blob` (little-endian f32, tensors back to back).
// Round-trips are bit-exact.

#include <optional>
#include <string>
#include <vector>

#include "melfuse/tensor.hpp"

namespace melfuse {

struct ContainerEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Container {
  std::vector<ContainerEntry> entries;
  std::string meta;  // optional single-line payload (JSON by convention)

  const ContainerEntry* find(const std::string& name) const;
};

void save_container(const std::string& prefix, const Container& c);
Container load_container(const std::string& prefix);

}  // namespace melfuse
