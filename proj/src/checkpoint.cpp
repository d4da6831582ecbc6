#include "cosam/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace cosam {

using json = nlohmann::json;

namespace {
constexpr char kMagic[] = "COSAMCKPT1\n";
constexpr size_t kMagicLen = sizeof(kMagic) - 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::string& config_json,
                     const torch::nn::Module& module) {
    json header;
    header["config"] = json::parse(config_json.empty() ? "{}" : config_json);
    header["tensors"] = json::array();

    std::vector<torch::Tensor> blobs;
    uint64_t offset = 0;
    auto add = [&](const std::string& name, const torch::Tensor& t) {
        auto cpu = t.detach().to(torch::kFloat32).contiguous();
        json entry;
        entry["name"] = name;
        entry["shape"] = std::vector<int64_t>(cpu.sizes().begin(), cpu.sizes().end());
        entry["offset"] = offset;
        entry["numel"] = cpu.numel();
        header["tensors"].push_back(entry);
        offset += static_cast<uint64_t>(cpu.numel()) * sizeof(float);
        blobs.push_back(cpu);
    };
    for (const auto& p : module.named_parameters(/*recurse=*/true)) add(p.key(), p.value());
    for (const auto& b : module.named_buffers(/*recurse=*/true)) add("buffer/" + b.key(), b.value());

    const std::string header_str = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    out.write(kMagic, static_cast<std::streamsize>(kMagicLen));
    const uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& t : blobs)
        out.write(static_cast<const char*>(t.const_data_ptr()),
                  static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());

    char magic[kMagicLen];
    in.read(magic, static_cast<std::streamsize>(kMagicLen));
    if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path.string());

    uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path.string());

    json header;
    try {
        header = json::parse(header_str);
    } catch (const json::exception& e) {
        throw std::runtime_error("load_checkpoint: invalid header JSON: " + std::string(e.what()));
    }

    Checkpoint ckpt;
    ckpt.config_json = header.at("config").dump();
    for (const auto& entry : header.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        const auto numel = entry.at("numel").get<int64_t>();
        auto t = torch::empty(shape, torch::kFloat32);
        in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(numel * sizeof(float)));
        if (!in) throw std::runtime_error("load_checkpoint: truncated tensor \"" + name + "\"");
        ckpt.tensors.emplace_back(name, std::move(t));
    }
    return ckpt;
}

void load_into_module(const Checkpoint& ckpt, torch::nn::Module& module) {
    std::map<std::string, torch::Tensor> table(ckpt.tensors.begin(), ckpt.tensors.end());
    torch::NoGradGuard guard;

    auto copy = [&](const std::string& name, torch::Tensor dst) {
        auto it = table.find(name);
        if (it == table.end())
            throw std::runtime_error("load_into_module: checkpoint missing tensor \"" + name + "\"");
        if (it->second.sizes() != dst.sizes())
            throw std::runtime_error("load_into_module: shape mismatch for \"" + name + "\"");
        dst.copy_(it->second.to(dst.dtype()));
    };
    for (const auto& p : module.named_parameters(/*recurse=*/true)) copy(p.key(), p.value());
    for (const auto& b : module.named_buffers(/*recurse=*/true)) copy("buffer/" + b.key(), b.value());
}

}  // namespace cosam
