#pragma once

// Mono PCM WAV I/O: 16-bit integer or 32-bit float. Multi-channel input is
// averaged down to mono.

#include <string>

#include "melfuse/audio.hpp"

namespace melfuse::audio {

AudioClip read_wav(const std::string& path);

enum class WavFormat { pcm16, float32 };
void write_wav(const std::string& path, const AudioClip& clip,
               WavFormat format = WavFormat::float32);

}  // namespace melfuse::audio
