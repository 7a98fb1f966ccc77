#include "melfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace melfuse {

namespace {

constexpr char kMagic[] = "melfuse-checkpoint v1";

void put_le32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

}  // namespace

const ContainerEntry* Container::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

void save_container(const std::string& prefix, const Container& c) {
  std::string blob;
  std::ostringstream manifest;
  manifest << kMagic << "\n";
  if (!c.meta.empty()) {
    if (c.meta.find('\n') != std::string::npos)
      throw std::invalid_argument("save_container: meta must be a single line");
    manifest << "meta " << c.meta << "\n";
  }
  manifest << "tensors " << c.entries.size() << "\n";
  for (const auto& e : c.entries) {
    if (e.name.empty() || e.name.find_first_of(" \n") != std::string::npos)
      throw std::invalid_argument("save_container: invalid tensor name '" + e.name + "'");
    if (shape_numel(e.shape) != e.values.size())
      throw std::invalid_argument("save_container: shape/value mismatch for " + e.name);
    manifest << e.name << " f32 ";
    for (std::size_t i = 0; i < e.shape.size(); ++i) {
      if (i) manifest << ',';
      manifest << e.shape[i];
    }
    if (e.shape.empty()) manifest << "-";
    manifest << ' ' << blob.size() << "\n";
    for (float v : e.values) put_le32(blob, std::bit_cast<std::uint32_t>(v));
  }
  {
    std::ofstream mf(prefix + ".manifest", std::ios::binary);
    if (!mf) throw std::runtime_error("save_container: cannot write " + prefix + ".manifest");
    mf << manifest.str();
  }
  {
    std::ofstream bf(prefix + ".blob", std::ios::binary);
    if (!bf) throw std::runtime_error("save_container: cannot write " + prefix + ".blob");
    bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
}

Container load_container(const std::string& prefix) {
  std::ifstream mf(prefix + ".manifest", std::ios::binary);
  if (!mf) throw std::runtime_error("load_container: missing " + prefix + ".manifest");
  std::ifstream bf(prefix + ".blob", std::ios::binary);
  if (!bf) throw std::runtime_error("load_container: missing " + prefix + ".blob");
  std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  std::string line;
  if (!std::getline(mf, line) || line != kMagic)
    throw std::runtime_error("load_container: bad header in " + prefix + ".manifest");

  Container c;
  std::size_t count = 0;
  bool have_count = false;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "meta") {
      std::string rest;
      std::getline(ls, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(0, 1);
      c.meta = rest;
      continue;
    }
    if (head == "tensors") {
      ls >> count;
      have_count = true;
      continue;
    }
    ContainerEntry e;
    e.name = head;
    std::string dtype, dims;
    std::size_t offset = 0;
    if (!(ls >> dtype >> dims >> offset) || dtype != "f32")
      throw std::runtime_error("load_container: malformed record '" + line + "'");
    if (dims != "-") {
      std::istringstream ds(dims);
      std::string tok;
      while (std::getline(ds, tok, ',')) e.shape.push_back(std::stoull(tok));
    }
    const std::size_t n = shape_numel(e.shape);
    if (offset + n * 4 > blob.size())
      throw std::runtime_error("load_container: blob too small for " + e.name);
    e.values.resize(n);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
    for (std::size_t i = 0; i < n; ++i)
      e.values[i] = std::bit_cast<float>(get_le32(p + i * 4));
    c.entries.push_back(std::move(e));
  }
  if (have_count && c.entries.size() != count)
    throw std::runtime_error("load_container: expected " + std::to_string(count) + " tensors, got " +
                             std::to_string(c.entries.size()));
  return c;
}

}  // namespace melfuse
