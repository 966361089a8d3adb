#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "countocc/core/tensor.hpp"
#include "json.hpp"

namespace countocc {

/// Checkpoint format: <prefix>.json manifest (name -> shape/offset plus an
/// embedded flat config) and <prefix>.bin holding the concatenated float32
/// little-endian arrays in manifest order.
struct CheckpointEntry {
  std::string name;
  Tensor<double>* tensor = nullptr;
};

inline void save_checkpoint(const std::string& prefix,
                            const std::vector<CheckpointEntry>& entries,
                            const nlohmann::ordered_json& config) {
  nlohmann::ordered_json manifest;
  manifest["format"] = "countocc-checkpoint-v1";
  manifest["config"] = config;
  manifest["params"] = nlohmann::ordered_json::array();

  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open for write: " + prefix + ".bin");
  std::size_t offset = 0;
  for (const auto& e : entries) {
    nlohmann::ordered_json p;
    p["name"] = e.name;
    p["shape"] = e.tensor->shape();
    p["offset"] = offset;
    manifest["params"].push_back(p);
    std::vector<float> data(e.tensor->size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>((*e.tensor)[i]);
    bin.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
    offset += data.size();
  }

  std::ofstream man(prefix + ".json");
  if (!man) throw std::runtime_error("cannot open for write: " + prefix + ".json");
  man << manifest.dump(2) << "\n";
}

struct CheckpointLoadResult {
  std::size_t loaded = 0;
  std::size_t missing = 0;  // entries present in the model but not the file
  nlohmann::json config;
};

/// Loads by name; shape mismatches are errors, names absent from the file are
/// left at their current values (so ablation configs can share weights).
inline CheckpointLoadResult load_checkpoint(const std::string& prefix,
                                            const std::vector<CheckpointEntry>& entries) {
  std::ifstream man(prefix + ".json");
  if (!man) throw std::runtime_error("cannot open for read: " + prefix + ".json");
  nlohmann::json manifest;
  man >> manifest;
  if (manifest.value("format", std::string{}) != "countocc-checkpoint-v1")
    throw std::runtime_error("unrecognized checkpoint format: " + prefix);

  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open for read: " + prefix + ".bin");

  struct Stored {
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
  };
  std::vector<std::pair<std::string, Stored>> stored;
  for (const auto& p : manifest.at("params"))
    stored.emplace_back(p.at("name"),
                        Stored{p.at("shape").get<std::vector<std::size_t>>(), p.at("offset")});

  CheckpointLoadResult result;
  result.config = manifest.value("config", nlohmann::json::object());
  for (const auto& e : entries) {
    const Stored* found = nullptr;
    for (const auto& [name, s] : stored)
      if (name == e.name) {
        found = &s;
        break;
      }
    if (!found) {
      ++result.missing;
      continue;
    }
    if (found->shape != e.tensor->shape())
      throw std::runtime_error("checkpoint shape mismatch for " + e.name);
    bin.seekg(static_cast<std::streamoff>(found->offset * sizeof(float)));
    std::vector<float> data(e.tensor->size());
    bin.read(reinterpret_cast<char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!bin) throw std::runtime_error("truncated checkpoint payload: " + prefix + ".bin");
    for (std::size_t i = 0; i < data.size(); ++i) (*e.tensor)[i] = static_cast<double>(data[i]);
    ++result.loaded;
  }
  return result;
}

}  // namespace countocc
