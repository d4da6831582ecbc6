#include "cosam/volume.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <random>
#include <stdexcept>

namespace cosam {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json_file(const fs::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string(what) + ": invalid JSON in " + path.string() + ": " + e.what());
    }
    return j;
}

std::vector<char> read_raw_file(const fs::path& path, size_t expected_bytes, const char* field) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_volume: missing file " + path.string());
    std::vector<char> buf(expected_bytes);
    in.read(buf.data(), static_cast<std::streamsize>(expected_bytes));
    if (static_cast<size_t>(in.gcount()) != expected_bytes)
        throw std::runtime_error("load_volume: " + std::string(field) + " shorter than declared extents (" +
                                 path.string() + ")");
    char extra;
    if (in.read(&extra, 1))
        throw std::runtime_error("load_volume: " + std::string(field) + " larger than declared extents (" +
                                 path.string() + ")");
    return buf;
}

}  // namespace

LoadedVolume load_volume(const fs::path& dir) {
    const json meta_j = read_json_file(dir / "meta.json", "load_volume");

    VolumeMeta meta;
    try {
        const auto ext = meta_j.at("extents");
        meta.extents = {ext.at(0).get<int64_t>(), ext.at(1).get<int64_t>(), ext.at(2).get<int64_t>()};
        const auto sp = meta_j.at("spacing_mm");
        meta.spacing_mm = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
        meta.dtype = meta_j.at("dtype").get<std::string>();
        const auto slab = meta_j.at("roi_slab");
        meta.roi_slab = {slab.at(0).get<int>(), slab.at(1).get<int>()};
        meta.normalized = meta_j.value("normalized", false);
    } catch (const json::exception& e) {
        throw std::runtime_error("load_volume: meta.json field error: " + std::string(e.what()));
    }

    if (meta.dtype != "f32")
        throw std::runtime_error("load_volume: unsupported dtype \"" + meta.dtype + "\"");
    const auto [L, H, W] = meta.extents;
    if (L < 1 || H < 1 || W < 1)
        throw std::runtime_error("load_volume: extents must all be >= 1");
    for (double s : meta.spacing_mm)
        if (!(s > 0)) throw std::runtime_error("load_volume: spacing_mm components must be > 0");

    const size_t n = static_cast<size_t>(L) * H * W;
    auto img_bytes = read_raw_file(dir / "image.raw", n * sizeof(float), "image.raw");
    auto lbl_bytes = read_raw_file(dir / "label.raw", n, "label.raw");

    torch::Tensor img = torch::from_blob(img_bytes.data(), {L, H, W}, torch::kFloat32).clone();
    if (!torch::isfinite(img).all().item<bool>())
        throw std::runtime_error("load_volume: image.raw contains non-finite values");

    torch::Tensor lbl = torch::from_blob(lbl_bytes.data(), {L, H, W}, torch::kUInt8).clone();
    lbl = (lbl != 0).to(torch::kUInt8);  // any nonzero -> 1

    CtVolume vol{img.contiguous(), meta.spacing_mm, meta.normalized};
    if (meta.normalized) {
        const float lo = img.min().item<float>();
        const float hi = img.max().item<float>();
        if (lo < 0.f || hi > 1.f)
            throw std::runtime_error("load_volume: image.raw declared normalized but values outside [0,1]");
    }
    return LoadedVolume{std::move(vol), LabelVolume{lbl.contiguous()}, meta, dir.filename().string()};
}

void write_volume(const fs::path& dir, const CtVolume& vol, const LabelVolume& label,
                  const VolumeMeta& meta) {
    fs::create_directories(dir);

    json meta_j;
    meta_j["extents"] = {vol.slices(), vol.height(), vol.width()};
    meta_j["spacing_mm"] = {meta.spacing_mm[0], meta.spacing_mm[1], meta.spacing_mm[2]};
    meta_j["dtype"] = "f32";
    meta_j["roi_slab"] = {meta.roi_slab[0], meta.roi_slab[1]};
    meta_j["normalized"] = vol.normalized;
    std::ofstream meta_out(dir / "meta.json");
    meta_out << meta_j.dump(2) << "\n";
    if (!meta_out) throw std::runtime_error("write_volume: cannot write " + (dir / "meta.json").string());

    auto img = vol.data.contiguous();
    std::ofstream img_out(dir / "image.raw", std::ios::binary);
    img_out.write(static_cast<const char*>(img.const_data_ptr()),
                  static_cast<std::streamsize>(img.numel() * sizeof(float)));
    if (!img_out) throw std::runtime_error("write_volume: cannot write image.raw");

    auto lbl = label.data.contiguous();
    std::ofstream lbl_out(dir / "label.raw", std::ios::binary);
    lbl_out.write(static_cast<const char*>(lbl.const_data_ptr()),
                  static_cast<std::streamsize>(lbl.numel()));
    if (!lbl_out) throw std::runtime_error("write_volume: cannot write label.raw");
}

std::vector<ManifestEntry> DatasetManifest::split(const std::string& tag) const {
    std::vector<ManifestEntry> out;
    for (const auto& v : volumes)
        if (v.split == tag) out.push_back(v);
    return out;
}

DatasetManifest load_manifest(const fs::path& manifest_path) {
    const json j = read_json_file(manifest_path, "load_manifest");
    DatasetManifest m;
    m.root = manifest_path.parent_path();
    for (const auto& e : j.at("volumes")) {
        m.volumes.push_back(ManifestEntry{e.at("id").get<std::string>(), e.at("dir").get<std::string>(),
                                          e.at("split").get<std::string>()});
    }
    return m;
}

void write_manifest(const fs::path& manifest_path, const std::vector<ManifestEntry>& volumes) {
    json j;
    j["volumes"] = json::array();
    for (const auto& v : volumes)
        j["volumes"].push_back({{"id", v.id}, {"dir", v.dir}, {"split", v.split}});
    std::ofstream out(manifest_path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("write_manifest: cannot write " + manifest_path.string());
}

CtVolume truncate_and_normalize(const CtVolume& vol, float lo, float hi) {
    if (vol.normalized)
        throw std::invalid_argument("truncate_and_normalize: volume is already normalized");
    if (!(lo < hi))
        throw std::invalid_argument("truncate_and_normalize: need lo < hi");

    auto out = (vol.data.clamp(lo, hi) - lo) / (hi - lo);
    return CtVolume{out.contiguous(), vol.spacing_mm, /*normalized=*/true};
}

namespace {

// Row-major scan; BFS flood fill with 8-connectivity. Returns the per-pixel
// component id (-1 for background) and per-component tight boxes in
// first-pixel order.
std::pair<std::vector<int>, std::vector<GtBox>> label_components(const torch::Tensor& label_slice,
                                                                 int slice_index) {
    TORCH_CHECK(label_slice.dim() == 2, "boxes_from_mask: expected a 2-D slice");
    auto mask = label_slice.to(torch::kUInt8).contiguous();
    const int H = static_cast<int>(mask.size(0));
    const int W = static_cast<int>(mask.size(1));
    const uint8_t* m = mask.const_data_ptr<uint8_t>();

    std::vector<int> comp(static_cast<size_t>(H) * W, -1);
    std::vector<GtBox> boxes;
    int next_id = 0;

    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const size_t idx = static_cast<size_t>(y) * W + x;
            if (m[idx] == 0 || comp[idx] >= 0) continue;

            int minx = x, maxx = x, miny = y, maxy = y;
            std::deque<std::pair<int, int>> queue{{y, x}};
            comp[idx] = next_id;
            while (!queue.empty()) {
                auto [cy, cx] = queue.front();
                queue.pop_front();
                minx = std::min(minx, cx); maxx = std::max(maxx, cx);
                miny = std::min(miny, cy); maxy = std::max(maxy, cy);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                        const size_t nidx = static_cast<size_t>(ny) * W + nx;
                        if (m[nidx] == 0 || comp[nidx] >= 0) continue;
                        comp[nidx] = next_id;
                        queue.emplace_back(ny, nx);
                    }
                }
            }
            boxes.push_back(GtBox{Box{static_cast<float>(minx), static_cast<float>(miny),
                                      static_cast<float>(maxx + 1), static_cast<float>(maxy + 1)},
                                  slice_index, next_id});
            ++next_id;
        }
    }
    return {std::move(comp), std::move(boxes)};
}

}  // namespace

std::vector<GtBox> boxes_from_mask(const torch::Tensor& label_slice, int slice_index) {
    return label_components(label_slice, slice_index).second;
}

std::vector<torch::Tensor> component_masks(const torch::Tensor& label_slice) {
    auto [comp, boxes] = label_components(label_slice, 0);
    const auto H = label_slice.size(0);
    const auto W = label_slice.size(1);
    std::vector<torch::Tensor> masks;
    std::vector<uint8_t*> ptrs;
    masks.reserve(boxes.size());
    for (size_t i = 0; i < boxes.size(); ++i) {
        masks.push_back(torch::zeros({H, W}, torch::kUInt8));
        ptrs.push_back(masks.back().data_ptr<uint8_t>());
    }
    for (size_t i = 0; i < comp.size(); ++i)
        if (comp[i] >= 0) ptrs[static_cast<size_t>(comp[i])][i] = 1;
    return masks;
}

std::vector<SlicePair> build_slice_pairs(const CtVolume& vol, const LabelVolume& label,
                                         const std::array<int, 2>& roi_slab,
                                         const std::string& volume_id) {
    const auto [lo, hi] = roi_slab;
    if (lo < 0 || hi > vol.slices() || lo >= hi)
        throw std::invalid_argument("build_slice_pairs: roi_slab [" + std::to_string(lo) + "," +
                                    std::to_string(hi) + ") outside volume extents");
    TORCH_CHECK(label.data.sizes() == vol.data.sizes(),
                "build_slice_pairs: label extents differ from volume extents");

    std::vector<SlicePair> pairs;
    pairs.reserve(static_cast<size_t>(hi - lo));
    for (int s = lo; s < hi; ++s)
        pairs.push_back(SlicePair{vol.data[s], label.data[s], volume_id, s});
    return pairs;
}

SliceSequence extract_window(const CtVolume& vol, int center, int window_size) {
    if (window_size < 1 || window_size % 2 == 0)
        throw std::invalid_argument("extract_window: window_size must be odd and >= 1");
    const int L = static_cast<int>(vol.slices());
    if (center < 0 || center >= L)
        throw std::invalid_argument("extract_window: center slice out of range");

    const int half = window_size / 2;
    std::vector<torch::Tensor> frames;
    std::vector<bool> pad(window_size, false);
    frames.reserve(window_size);
    for (int k = -half; k <= half; ++k) {
        const int raw = center + k;
        const int clamped = std::clamp(raw, 0, L - 1);  // edge replication
        pad[static_cast<size_t>(k + half)] = (raw != clamped);
        frames.push_back(vol.data[clamped]);
    }
    return SliceSequence{torch::stack(frames, 0), half, std::move(pad), center};
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_dataset(
    std::vector<std::string> volume_ids, double train_fraction, uint64_t seed) {
    if (volume_ids.size() < 2)
        throw std::invalid_argument("split_dataset: need at least 2 volumes");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw std::invalid_argument("split_dataset: train_fraction must be in (0,1)");

    std::mt19937_64 rng(seed);
    std::shuffle(volume_ids.begin(), volume_ids.end(), rng);

    const auto n = static_cast<int64_t>(volume_ids.size());
    const auto n_train = std::clamp<int64_t>(std::llround(train_fraction * static_cast<double>(n)),
                                             1, n - 1);

    std::vector<std::string> train(volume_ids.begin(), volume_ids.begin() + n_train);
    std::vector<std::string> test(volume_ids.begin() + n_train, volume_ids.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {std::move(train), std::move(test)};
}

}  // namespace cosam
