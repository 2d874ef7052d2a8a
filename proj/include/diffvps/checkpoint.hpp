#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

namespace diffvps {

using TensorMap = std::map<std::string, torch::Tensor>;

// Versioned binary container: a JSON metadata block followed by named,
// shape-tagged tensors in name order. Layout (little endian):
//   "DVPSTNSR" | u32 version | u64 meta_len | meta (UTF-8 JSON)
//   u64 count | { u32 name_len | name | u8 dtype | u32 ndim | i64 dims[ndim] | raw data }*
// dtype codes: 0 float32, 1 float64, 2 int64.
inline constexpr uint32_t kContainerVersion = 1;

void write_tensor_container(const std::filesystem::path& path, const TensorMap& tensors,
                            const nlohmann::json& meta);
TensorMap read_tensor_container(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

struct Checkpoint {
  nlohmann::json config;  // TrainConfig snapshot
  TensorMap params;       // model parameters, by qualified name
  TensorMap optimizer;    // optimizer moments, "<optimizer>.<m|v>.<param name>"
  int64_t step = 0;
  int64_t epoch = 0;
  int64_t gen_opt_steps = 0;
  int64_t disc_opt_steps = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace diffvps
