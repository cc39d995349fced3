// SPDX-License-Identifier: Apache-2.0

// Checkpoint container, all integers little-endian:
//
//   "CINRCKPT"  u32 version  u64 header_len  header (JSON, UTF-8)
//   u32 tensor_count
//   per tensor: u32 name_len  name  u32 ndim  u64 dims[ndim]  f32 data[prod(dims)]
//
// Tensor data is row-major.

#pragma once

#include "cinr/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cinr {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const;
};

std::string serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::string_view bytes, const std::string& source = "<memory>");

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
NamedTensor to_named(const Parameter<T>& p);

template <typename T>
void append(Checkpoint& ckpt, const ParamRefs<T>& params);

// Copies tensors into params by name; every parameter must be present with
// a matching shape.
template <typename T>
void restore(const Checkpoint& ckpt, const ParamRefs<T>& params);

// Content hash of the serialized checkpoint.
std::string checkpoint_id(const Checkpoint& ckpt);

}  // namespace cinr
