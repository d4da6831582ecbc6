#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "cosam/geometry.hpp"

namespace cosam {

/// A volumetric scan: (L slices x H rows x W cols), float32, values in
/// Hounsfield units or, once truncate_and_normalize ran, in [0,1].
struct CtVolume {
    torch::Tensor data;                          // (L,H,W) float32, contiguous
    std::array<double, 3> spacing_mm{1, 1, 1};   // (z,y,x)
    bool normalized = false;

    int64_t slices() const { return data.size(0); }
    int64_t height() const { return data.size(1); }
    int64_t width() const { return data.size(2); }
};

/// Binary label raster paired with a CtVolume (same extents).
struct LabelVolume {
    torch::Tensor data;  // (L,H,W) uint8 in {0,1}

    int64_t slices() const { return data.size(0); }
    int64_t height() const { return data.size(1); }
    int64_t width() const { return data.size(2); }
};

struct SlicePair {
    torch::Tensor image;  // (H,W) float32 in [0,1]
    torch::Tensor label;  // (H,W) uint8
    std::string volume_id;
    int slice_index = 0;
};

/// A window of window_size consecutive slices centered on an anchor slice.
/// Out-of-volume positions are edge-replicated and flagged in pad_mask.
struct SliceSequence {
    torch::Tensor slices;          // (window_size, H, W) float32
    int anchor_index = 0;          // position of the central slice in `slices`
    std::vector<bool> pad_mask;    // true where the frame is boundary padding
    int volume_slice = 0;          // index of the anchor slice in the volume

    int window_size() const { return static_cast<int>(slices.size(0)); }
};

struct VolumeMeta {
    std::array<int64_t, 3> extents{0, 0, 0};     // [L,H,W]
    std::array<double, 3> spacing_mm{1, 1, 1};   // [z,y,x]
    std::string dtype = "f32";
    std::array<int, 2> roi_slab{0, 0};           // [lo,hi)
    bool normalized = false;
};

struct LoadedVolume {
    CtVolume image;
    LabelVolume label;
    VolumeMeta meta;
    std::string id;
};

// ---- on-disk format -------------------------------------------------------
// Volume directory: meta.json + image.raw (float32 LE, slice-major row-major)
// + label.raw (uint8, same order).

LoadedVolume load_volume(const std::filesystem::path& dir);
void write_volume(const std::filesystem::path& dir, const CtVolume& vol,
                  const LabelVolume& label, const VolumeMeta& meta);

/// Dataset manifest: JSON list of volume directories with split tags.
struct ManifestEntry {
    std::string id;
    std::string dir;       // relative to the manifest's directory
    std::string split;     // "train" | "test"
};

struct DatasetManifest {
    std::vector<ManifestEntry> volumes;
    std::filesystem::path root;  // directory containing manifest.json

    std::vector<ManifestEntry> split(const std::string& tag) const;
};

DatasetManifest load_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const std::filesystem::path& manifest_path,
                    const std::vector<ManifestEntry>& volumes);

// ---- preprocessing --------------------------------------------------------

/// Clamp to [lo,hi] HU and map affinely so lo->0, hi->1.
CtVolume truncate_and_normalize(const CtVolume& vol, float lo = -100.f,
                                float hi = 100.f);

/// One tight box per 8-connected foreground component of a binary slice,
/// ordered by the component's first pixel in row-major order.
std::vector<GtBox> boxes_from_mask(const torch::Tensor& label_slice,
                                   int slice_index = 0);

/// Per-component binary masks, same component order as boxes_from_mask.
std::vector<torch::Tensor> component_masks(const torch::Tensor& label_slice);

/// Retain exactly the slices inside [roi_slab[0], roi_slab[1]).
std::vector<SlicePair> build_slice_pairs(const CtVolume& vol,
                                         const LabelVolume& label,
                                         const std::array<int, 2>& roi_slab,
                                         const std::string& volume_id = "");

SliceSequence extract_window(const CtVolume& vol, int center, int window_size);

/// Volume-level split, deterministic for a fixed seed. No id appears in both
/// partitions; union equals the input.
std::pair<std::vector<std::string>, std::vector<std::string>> split_dataset(
    std::vector<std::string> volume_ids, double train_fraction, uint64_t seed);

}  // namespace cosam
