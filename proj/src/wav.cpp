#include "melfuse/wav.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace melfuse::audio {

namespace {

std::uint32_t rd_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t rd_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

void wr_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 24) & 0xff));
}

void wr_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

AudioClip read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_wav: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  if (buf.size() < 44 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw std::runtime_error("read_wav: " + path + " is not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;

  std::size_t off = 12;
  while (off + 8 <= buf.size()) {
    const std::uint32_t chunk_len = rd_u32(p + off + 4);
    const unsigned char* body = p + off + 8;
    if (off + 8 + chunk_len > buf.size())
      throw std::runtime_error("read_wav: truncated chunk in " + path);
    if (std::memcmp(p + off, "fmt ", 4) == 0) {
      if (chunk_len < 16) throw std::runtime_error("read_wav: short fmt chunk in " + path);
      format = rd_u16(body);
      channels = rd_u16(body + 2);
      rate = rd_u32(body + 4);
      bits = rd_u16(body + 14);
    } else if (std::memcmp(p + off, "data", 4) == 0) {
      data = body;
      data_len = chunk_len;
    }
    off += 8 + chunk_len + (chunk_len & 1);  // chunks are word-aligned
  }
  if (!data || channels == 0 || rate == 0)
    throw std::runtime_error("read_wav: missing fmt/data chunk in " + path);
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32)
    throw std::runtime_error("read_wav: unsupported format in " + path +
                             " (need 16-bit PCM or 32-bit float)");

  const std::size_t bytes_per = bits / 8;
  const std::size_t frames = data_len / (bytes_per * channels);
  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* s = data + (i * channels + c) * bytes_per;
      if (pcm16) {
        const std::int16_t v = static_cast<std::int16_t>(rd_u16(s));
        acc += static_cast<double>(v) / 32768.0;
      } else {
        acc += static_cast<double>(std::bit_cast<float>(rd_u32(s)));
      }
    }
    clip.samples[i] = static_cast<float>(acc / channels);
  }
  return clip;
}

void write_wav(const std::string& path, const AudioClip& clip, WavFormat format) {
  if (clip.sample_rate <= 0) throw std::invalid_argument("write_wav: invalid sample rate");
  const std::uint16_t bits = format == WavFormat::pcm16 ? 16 : 32;
  const std::uint16_t fmt_code = format == WavFormat::pcm16 ? 1 : 3;
  const std::uint32_t data_len = static_cast<std::uint32_t>(clip.samples.size() * bits / 8);

  std::string s;
  s += "RIFF";
  wr_u32(s, 36 + data_len);
  s += "WAVEfmt ";
  wr_u32(s, 16);
  wr_u16(s, fmt_code);
  wr_u16(s, 1);  // mono
  wr_u32(s, static_cast<std::uint32_t>(clip.sample_rate));
  wr_u32(s, static_cast<std::uint32_t>(clip.sample_rate) * bits / 8);
  wr_u16(s, static_cast<std::uint16_t>(bits / 8));
  wr_u16(s, bits);
  s += "data";
  wr_u32(s, data_len);
  for (float v : clip.samples) {
    if (format == WavFormat::pcm16) {
      const double clamped = std::max(-1.0, std::min(1.0, static_cast<double>(v)));
      const auto q = static_cast<std::int16_t>(std::lround(clamped * 32767.0));
      wr_u16(s, static_cast<std::uint16_t>(q));
    } else {
      wr_u32(s, std::bit_cast<std::uint32_t>(v));
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_wav: cannot write " + path);
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace melfuse::audio
