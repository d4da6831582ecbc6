#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace cosam {

/// Checkpoint archive: magic, length-prefixed JSON header (config block +
/// tensor table), then raw float32 little-endian tensor data.
struct Checkpoint {
    std::string config_json;
    std::vector<std::pair<std::string, torch::Tensor>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const std::string& config_json,
                     const torch::nn::Module& module);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies tensors into the module's parameters/buffers by name.
/// Throws when a named tensor is missing or has a mismatched shape.
void load_into_module(const Checkpoint& ckpt, torch::nn::Module& module);

}  // namespace cosam
