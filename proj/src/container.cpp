// SPDX-License-Identifier: Apache-2.0
#include "ux2/container.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include "ux2/error.hpp"

namespace ux2 {

namespace {

constexpr char kMagic[4] = {'U', 'X', '2', 'C'};

void put_u16(std::ostream& os, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }

uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint8_t get_u8(std::istream& is) {
  char c;
  is.get(c);
  return static_cast<uint8_t>(c);
}

template <typename T>
void put_payload(std::ostream& os, const TensorT<T>& t) {
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * static_cast<int64_t>(sizeof(T))));
}

template <typename T>
TensorT<T> get_payload(std::istream& is, Shape shape) {
  TensorT<T> t(std::move(shape));
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * static_cast<int64_t>(sizeof(T))));
  return t;
}

}  // namespace

void write_container(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  os.write(kMagic, 4);
  put_u32(os, kContainerVersion);
  if (tensors.size() > std::numeric_limits<uint32_t>::max())
    throw IoError("too many tensors for container");
  put_u32(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    if (nt.name.size() > std::numeric_limits<uint16_t>::max())
      throw IoError("tensor name too long: " + nt.name);
    put_u16(os, static_cast<uint16_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    const Shape& shape = nt.shape();
    if (shape.size() > 255) throw IoError("tensor rank too large: " + nt.name);
    put_u8(os, static_cast<uint8_t>(shape.size()));
    for (int64_t d : shape) {
      if (d < 0 || d > std::numeric_limits<uint32_t>::max())
        throw IoError("dimension out of range in " + nt.name);
      put_u32(os, static_cast<uint32_t>(d));
    }
    put_u8(os, static_cast<uint8_t>(nt.dtype()));
    if (nt.dtype() == Dtype::F32) put_payload(os, std::get<TensorF>(nt.value));
    else put_payload(os, std::get<TensorD>(nt.value));
  }
  if (!os) throw IoError("container write failed");
}

std::vector<NamedTensor> read_container(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("bad container magic (expected UX2C)");
  uint32_t version = get_u32(is);
  if (version != kContainerVersion)
    throw IoError("unsupported container version " + std::to_string(version));
  uint32_t count = get_u32(is);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = get_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint8_t rank = get_u8(is);
    Shape shape(rank);
    for (uint8_t d = 0; d < rank; ++d) shape[d] = get_u32(is);
    uint8_t dtype = get_u8(is);
    if (!is) throw IoError("truncated container while reading " + name);
    NamedTensor nt;
    nt.name = std::move(name);
    if (dtype == static_cast<uint8_t>(Dtype::F32)) nt.value = get_payload<float>(is, shape);
    else if (dtype == static_cast<uint8_t>(Dtype::F64)) nt.value = get_payload<double>(is, shape);
    else throw IoError("unknown dtype tag " + std::to_string(dtype) + " for " + nt.name);
    if (!is) throw IoError("truncated container while reading " + nt.name);
    out.push_back(std::move(nt));
  }
  return out;
}

void save_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  write_container(os, tensors);
}

std::vector<NamedTensor> load_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return read_container(is);
}

}  // namespace ux2
