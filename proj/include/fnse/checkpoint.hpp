#pragma once

// fnse-ckpt-1 checkpoint files.
//
// Layout: u64 little-endian header length N, then N bytes of UTF-8 JSON, then
// the tensor payload as contiguous little-endian float64. The header is
//   {"version": "fnse-ckpt-1",
//    "meta": {...},
//    "tensors": {"<name>": {"dtype": "f64", "shape": [...], "offset": <bytes>}}}
// with offsets relative to the start of the payload.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fnse/nn.hpp"

namespace fnse::ckpt {

inline constexpr const char* kVersion = "fnse-ckpt-1";

struct StoredTensor {
  ad::Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, StoredTensor> tensors;
};

void save(const std::filesystem::path& path, const nn::ParamRefs& params,
          const nlohmann::json& meta);
void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

// Copies stored values into params by name. Every param must be present with a
// matching shape unless allow_missing is set.
void restore(const Checkpoint& ckpt, const nn::ParamRefs& params, bool allow_missing = false);

Checkpoint snapshot(const nn::ParamRefs& params, const nlohmann::json& meta = {});

}  // namespace fnse::ckpt
