// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "ux2/tensor.hpp"

namespace ux2 {

/// One entry of the named-tensor container. f32 and f64 tensors may be
/// mixed freely in a file; the dtype tag disambiguates on load.
struct NamedTensor {
  std::string name;
  std::variant<TensorF, TensorD> value;

  Dtype dtype() const { return value.index() == 0 ? Dtype::F32 : Dtype::F64; }
  const Shape& shape() const {
    return value.index() == 0 ? std::get<TensorF>(value).shape() : std::get<TensorD>(value).shape();
  }
};

/// Binary container layout (all integers little-endian):
///   magic "UX2C" | format version u32 | tensor count u32
///   per tensor: name length u16, UTF-8 name, rank u8, dims u32 each,
///               dtype u8 (0 = f32, 1 = f64), raw IEEE-754 payload.
/// Round-trips are bit-exact.
constexpr uint32_t kContainerVersion = 1;

void write_container(std::ostream& os, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_container(std::istream& is);

void save_container(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_container(const std::string& path);

}  // namespace ux2
