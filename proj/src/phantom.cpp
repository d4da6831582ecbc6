#include "cosam/phantom.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

namespace cosam {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Trilinearly interpolated lattice of N(0,1) values; the building block for
// both the low-frequency background texture and the radial shape noise.
class ValueNoise {
public:
    ValueNoise(std::mt19937_64& rng, int nz, int ny, int nx) : nz_(nz), ny_(ny), nx_(nx) {
        std::normal_distribution<double> gauss(0.0, 1.0);
        values_.resize(static_cast<size_t>(nz) * ny * nx);
        for (auto& v : values_) v = gauss(rng);
    }

    double sample(double z, double y, double x) const {
        const auto clampf = [](double v, int n) { return std::clamp(v, 0.0, static_cast<double>(n - 1) - 1e-6); };
        z = clampf(z, nz_); y = clampf(y, ny_); x = clampf(x, nx_);
        const int z0 = static_cast<int>(z), y0 = static_cast<int>(y), x0 = static_cast<int>(x);
        const double fz = z - z0, fy = y - y0, fx = x - x0;
        auto at = [&](int zz, int yy, int xx) {
            return values_[(static_cast<size_t>(zz) * ny_ + yy) * nx_ + xx];
        };
        double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x0 + 1) * fx;
        double c01 = at(z0, y0 + 1, x0) * (1 - fx) + at(z0, y0 + 1, x0 + 1) * fx;
        double c10 = at(z0 + 1, y0, x0) * (1 - fx) + at(z0 + 1, y0, x0 + 1) * fx;
        double c11 = at(z0 + 1, y0 + 1, x0) * (1 - fx) + at(z0 + 1, y0 + 1, x0 + 1) * fx;
        double c0 = c00 * (1 - fy) + c01 * fy;
        double c1 = c10 * (1 - fy) + c11 * fy;
        return c0 * (1 - fz) + c1 * fz;
    }

private:
    int nz_, ny_, nx_;
    std::vector<double> values_;
};

struct Vec3 {
    double z, y, x;
};

// One randomly oriented, radially perturbed ellipsoid.
struct BlobShape {
    Vec3 center;
    double axes[3];      // semi-axes in the body frame (z,y,x order)
    double rot[3][3];    // world -> body rotation
    double perturb_amp;
    ValueNoise noise;

    bool contains(double z, double y, double x) const {
        const double d[3] = {z - center.z, y - center.y, x - center.x};
        double b[3];
        for (int i = 0; i < 3; ++i)
            b[i] = rot[i][0] * d[0] + rot[i][1] * d[1] + rot[i][2] * d[2];
        const double q[3] = {b[0] / axes[0], b[1] / axes[1], b[2] / axes[2]};
        const double r = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
        if (r < 1e-9) return true;
        // Shape noise is attached to the body frame so it rotates with the blob.
        const double inv = 1.0 / r;
        const double thresh =
            1.0 + perturb_amp * noise.sample(2.0 + q[0] * inv * 1.6, 2.0 + q[1] * inv * 1.6,
                                             2.0 + q[2] * inv * 1.6);
        return r <= std::max(0.2, thresh);
    }

    double bound_radius() const {
        return std::max({axes[0], axes[1], axes[2]}) * (1.0 + std::abs(perturb_amp) * 3.0) + 1.0;
    }
};

void random_rotation(std::mt19937_64& rng, double rot[3][3]) {
    // Uniform random quaternion.
    std::normal_distribution<double> gauss(0.0, 1.0);
    double q[4];
    double norm = 0;
    for (auto& c : q) { c = gauss(rng); }
    for (auto c : q) norm += c * c;
    norm = std::sqrt(norm);
    for (auto& c : q) c /= norm;
    const double w = q[0], xq = q[1], yq = q[2], zq = q[3];
    rot[0][0] = 1 - 2 * (yq * yq + zq * zq);
    rot[0][1] = 2 * (xq * yq - w * zq);
    rot[0][2] = 2 * (xq * zq + w * yq);
    rot[1][0] = 2 * (xq * yq + w * zq);
    rot[1][1] = 1 - 2 * (xq * xq + zq * zq);
    rot[1][2] = 2 * (yq * zq - w * xq);
    rot[2][0] = 2 * (xq * zq - w * yq);
    rot[2][1] = 2 * (yq * zq + w * xq);
    rot[2][2] = 1 - 2 * (xq * xq + yq * yq);
}

struct Raster {
    std::vector<std::array<int, 3>> voxels;  // (z,y,x)
    int zmin = 0, zmax = 0;
};

Raster rasterize(const BlobShape& shape, double axis_scale, const std::array<int64_t, 3>& ext) {
    BlobShape s = shape;
    for (auto& a : s.axes) a *= axis_scale;
    const double r = s.bound_radius() * axis_scale + 1.0;
    Raster out;
    out.zmin = 1 << 30;
    out.zmax = -(1 << 30);
    const int z0 = std::max<int>(0, static_cast<int>(std::floor(s.center.z - r)));
    const int z1 = std::min<int>(static_cast<int>(ext[0]) - 1, static_cast<int>(std::ceil(s.center.z + r)));
    const int y0 = std::max<int>(0, static_cast<int>(std::floor(s.center.y - r)));
    const int y1 = std::min<int>(static_cast<int>(ext[1]) - 1, static_cast<int>(std::ceil(s.center.y + r)));
    const int x0 = std::max<int>(0, static_cast<int>(std::floor(s.center.x - r)));
    const int x1 = std::min<int>(static_cast<int>(ext[2]) - 1, static_cast<int>(std::ceil(s.center.x + r)));
    for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                if (s.contains(z, y, x)) {
                    out.voxels.push_back({z, y, x});
                    out.zmin = std::min(out.zmin, z);
                    out.zmax = std::max(out.zmax, z);
                }
    return out;
}

}  // namespace

void PhantomConfig::validate() const {
    if (extents[0] < 9 || extents[1] < 32 || extents[2] < 32)
        throw std::invalid_argument("PhantomConfig: extents must be at least (9,32,32)");
    if (target_voxels_range.second > target_voxel_cap)
        throw std::invalid_argument("PhantomConfig: target_voxels_range max exceeds the voxel cap");
    if (target_voxels_range.first < 8 || target_voxels_range.first > target_voxels_range.second)
        throw std::invalid_argument("PhantomConfig: bad target_voxels_range");
    if (!(contrast_delta > 0)) throw std::invalid_argument("PhantomConfig: contrast_delta must be > 0");
    if (n_targets_range.first < 0 || n_targets_range.first > n_targets_range.second)
        throw std::invalid_argument("PhantomConfig: bad n_targets_range");
    if (shape_irregularity < 0 || shape_irregularity > 1)
        throw std::invalid_argument("PhantomConfig: shape_irregularity must be in [0,1]");
}

std::array<int, 2> phantom_roi_slab(const std::array<int64_t, 3>& extents) {
    return {2, static_cast<int>(extents[0]) - 2};
}

std::pair<CtVolume, LabelVolume> generate_phantom(const PhantomConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    const auto [L, H, W] = cfg.extents;

    // Smooth soft-tissue-like background: two octaves of value noise.
    ValueNoise oct_a(rng, static_cast<int>(L / 12) + 3, static_cast<int>(H / 16) + 3,
                     static_cast<int>(W / 16) + 3);
    ValueNoise oct_b(rng, static_cast<int>(L / 6) + 3, static_cast<int>(H / 8) + 3,
                     static_cast<int>(W / 8) + 3);

    torch::Tensor image = torch::empty({L, H, W}, torch::kFloat32);
    float* img = image.data_ptr<float>();
    for (int64_t z = 0; z < L; ++z)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const double v = 0.45 + 0.05 * oct_a.sample(z / 12.0, y / 16.0, x / 16.0) +
                                 0.025 * oct_b.sample(z / 6.0, y / 8.0, x / 8.0);
                img[(z * H + y) * W + x] = static_cast<float>(v);
            }

    torch::Tensor label = torch::zeros({L, H, W}, torch::kUInt8);
    uint8_t* lbl = label.data_ptr<uint8_t>();

    const auto slab = phantom_roi_slab(cfg.extents);
    std::uniform_int_distribution<int> n_targets_dist(cfg.n_targets_range.first, cfg.n_targets_range.second);
    const int n_targets = n_targets_dist(rng);

    struct Placed {
        Vec3 center;
        double radius;
    };
    std::vector<Placed> placed;

    std::uniform_int_distribution<int> voxels_dist(cfg.target_voxels_range.first,
                                                   cfg.target_voxels_range.second);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (int t = 0; t < n_targets; ++t) {
        bool done = false;
        for (int attempt = 0; attempt < 60 && !done; ++attempt) {
            const int want_voxels = voxels_dist(rng);
            const double r0 = std::cbrt(want_voxels * 3.0 / (4.0 * M_PI));

            BlobShape shape{
                Vec3{0, 0, 0},
                {std::max(1.4, r0 * (0.6 + 0.6 * unit(rng))), r0 * (0.7 + 0.7 * unit(rng)),
                 r0 * (0.7 + 0.7 * unit(rng))},
                {},
                cfg.shape_irregularity * 0.35,
                ValueNoise(rng, 5, 5, 5)};
            random_rotation(rng, shape.rot);

            const double margin = shape.bound_radius() + 1.5;
            const double zmargin = std::min(margin, 4.0);
            shape.center = Vec3{slab[0] + zmargin + unit(rng) * std::max(1.0, (slab[1] - slab[0]) - 2 * zmargin),
                                margin + unit(rng) * std::max(1.0, H - 2 * margin),
                                margin + unit(rng) * std::max(1.0, W - 2 * margin)};

            bool clash = false;
            for (const auto& p : placed) {
                const double dz = p.center.z - shape.center.z;
                const double dy = p.center.y - shape.center.y;
                const double dx = p.center.x - shape.center.x;
                if (std::sqrt(dz * dz + dy * dy + dx * dx) < p.radius + shape.bound_radius() + 2.5)
                    clash = true;
            }
            if (clash) continue;

            // Calibrate the axis scale so the rasterized count lands on the
            // requested voxel volume.
            double lo_s = 0.5, hi_s = 1.8;
            Raster raster;
            for (int it = 0; it < 12; ++it) {
                const double mid = 0.5 * (lo_s + hi_s);
                raster = rasterize(shape, mid, cfg.extents);
                if (static_cast<int>(raster.voxels.size()) < want_voxels)
                    lo_s = mid;
                else
                    hi_s = mid;
            }
            raster = rasterize(shape, hi_s, cfg.extents);

            const auto count = static_cast<double>(raster.voxels.size());
            if (count < want_voxels * 0.85 || count > want_voxels * 1.15) continue;
            if (raster.zmax - raster.zmin < 1) continue;  // must span >= 2 slices
            if (raster.zmin < slab[0] || raster.zmax >= slab[1]) continue;

            for (const auto& [z, y, x] : raster.voxels) {
                lbl[(static_cast<int64_t>(z) * H + y) * W + x] = 1;
                img[(static_cast<int64_t>(z) * H + y) * W + x] += static_cast<float>(cfg.contrast_delta);
            }
            placed.push_back(Placed{shape.center, shape.bound_radius() * hi_s});
            done = true;
        }
        if (!done)
            throw std::runtime_error("generate_phantom: could not place target without overlap");
    }

    // Unlabeled tube-like distractors (vessel analogue): swept spheres along a
    // mostly-axial polyline, same contrast polarity as the targets. Painted
    // into a separate mask first so crossings do not stack contrast.
    std::vector<uint8_t> distractor(static_cast<size_t>(L) * H * W, 0);
    std::uniform_int_distribution<int> n_distractors_dist(cfg.n_distractors_range.first,
                                                          cfg.n_distractors_range.second);
    const int n_distractors = n_distractors_dist(rng);
    std::uniform_real_distribution<double> radius_dist(cfg.distractor_radius_range.first,
                                                       cfg.distractor_radius_range.second);
    for (int d = 0; d < n_distractors; ++d) {
        for (int attempt = 0; attempt < 40; ++attempt) {
            const double radius = radius_dist(rng);
            const int len = 6 + static_cast<int>(unit(rng) * 12);
            const int zc0 = static_cast<int>(unit(rng) * std::max<int64_t>(1, L - len));
            double py = 6 + unit(rng) * (H - 12);
            double px = 6 + unit(rng) * (W - 12);
            const double drift_y = (unit(rng) - 0.5) * 2.2;
            const double drift_x = (unit(rng) - 0.5) * 2.2;

            std::vector<Vec3> spine;
            bool clash = false;
            for (int k = 0; k < len; ++k) {
                Vec3 p{static_cast<double>(zc0 + k), py, px};
                for (const auto& q : placed) {
                    const double dz = q.center.z - p.z, dy = q.center.y - p.y, dx = q.center.x - p.x;
                    if (std::sqrt(dz * dz + dy * dy + dx * dx) < q.radius + radius + 2.0) clash = true;
                }
                spine.push_back(p);
                py += drift_y + (unit(rng) - 0.5);
                px += drift_x + (unit(rng) - 0.5);
            }
            if (clash) continue;

            for (const auto& p : spine) {
                const int z = static_cast<int>(p.z);
                if (z < 0 || z >= L) continue;
                const int y0 = std::max(0, static_cast<int>(p.y - radius - 1));
                const int y1 = std::min<int>(static_cast<int>(H) - 1, static_cast<int>(p.y + radius + 1));
                const int x0 = std::max(0, static_cast<int>(p.x - radius - 1));
                const int x1 = std::min<int>(static_cast<int>(W) - 1, static_cast<int>(p.x + radius + 1));
                for (int y = y0; y <= y1; ++y)
                    for (int x = x0; x <= x1; ++x) {
                        const double dy = y - p.y, dx = x - p.x;
                        if (dy * dy + dx * dx <= radius * radius)
                            distractor[(static_cast<size_t>(z) * H + y) * W + x] = 1;
                    }
            }
            break;
        }
    }
    // Flicker blobs: target-like cross sections confined to 1-2 slices.
    std::uniform_int_distribution<int> n_flicker_dist(cfg.n_flicker_range.first,
                                                      cfg.n_flicker_range.second);
    const int n_flicker = n_flicker_dist(rng);
    for (int f = 0; f < n_flicker; ++f) {
        for (int attempt = 0; attempt < 40; ++attempt) {
            BlobShape shape{Vec3{0, 0, 0},
                            {0.7 + 0.6 * unit(rng), 2.5 + 2.5 * unit(rng), 2.5 + 2.5 * unit(rng)},
                            {},
                            cfg.shape_irregularity * 0.3,
                            ValueNoise(rng, 5, 5, 5)};
            // In-plane rotation only, so the thin axis stays axial.
            const double ang = unit(rng) * 2 * M_PI;
            shape.rot[0][0] = 1; shape.rot[0][1] = 0; shape.rot[0][2] = 0;
            shape.rot[1][0] = 0; shape.rot[1][1] = std::cos(ang); shape.rot[1][2] = -std::sin(ang);
            shape.rot[2][0] = 0; shape.rot[2][1] = std::sin(ang); shape.rot[2][2] = std::cos(ang);
            const double margin = shape.bound_radius() + 1.5;
            shape.center = Vec3{2 + unit(rng) * std::max(1.0, static_cast<double>(L) - 4),
                                margin + unit(rng) * std::max(1.0, H - 2 * margin),
                                margin + unit(rng) * std::max(1.0, W - 2 * margin)};
            bool clash = false;
            for (const auto& q : placed) {
                const double dz = q.center.z - shape.center.z;
                const double dy = q.center.y - shape.center.y;
                const double dx = q.center.x - shape.center.x;
                if (std::sqrt(dz * dz + dy * dy + dx * dx) < q.radius + shape.bound_radius() + 2.0)
                    clash = true;
            }
            if (clash) continue;
            const auto raster = rasterize(shape, 1.0, cfg.extents);
            for (const auto& [z, y, x] : raster.voxels)
                distractor[(static_cast<size_t>(z) * H + y) * W + x] = 1;
            break;
        }
    }

    const auto bump = static_cast<float>(cfg.contrast_delta * cfg.distractor_contrast_scale);
    for (size_t i = 0; i < distractor.size(); ++i)
        if (distractor[i]) img[i] += bump;

    // Measurement noise, then clamp into the normalized range.
    std::normal_distribution<double> gauss(0.0, cfg.noise_sigma);
    for (int64_t i = 0; i < image.numel(); ++i)
        img[i] = std::clamp(img[i] + static_cast<float>(gauss(rng)), 0.f, 1.f);

    CtVolume vol{image, {1.0, 0.625, 0.625}, /*normalized=*/true};
    return {std::move(vol), LabelVolume{label}};
}

PhantomConfig phantom_config_from_json(const std::string& json_text) {
    const json j = json::parse(json_text);
    PhantomConfig cfg;
    if (j.contains("extents"))
        cfg.extents = {j["extents"][0].get<int64_t>(), j["extents"][1].get<int64_t>(),
                       j["extents"][2].get<int64_t>()};
    auto pair_of = [&](const char* key, auto& field) {
        if (j.contains(key)) field = {j[key][0], j[key][1]};
    };
    pair_of("n_targets_range", cfg.n_targets_range);
    pair_of("target_voxels_range", cfg.target_voxels_range);
    pair_of("n_distractors_range", cfg.n_distractors_range);
    pair_of("n_flicker_range", cfg.n_flicker_range);
    pair_of("distractor_radius_range", cfg.distractor_radius_range);
    cfg.target_voxel_cap = j.value("target_voxel_cap", cfg.target_voxel_cap);
    cfg.contrast_delta = j.value("contrast_delta", cfg.contrast_delta);
    cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
    cfg.shape_irregularity = j.value("shape_irregularity", cfg.shape_irregularity);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.distractor_contrast_scale = j.value("distractor_contrast_scale", cfg.distractor_contrast_scale);
    cfg.validate();
    return cfg;
}

std::string phantom_config_to_json(const PhantomConfig& cfg) {
    json j;
    j["extents"] = {cfg.extents[0], cfg.extents[1], cfg.extents[2]};
    j["n_targets_range"] = {cfg.n_targets_range.first, cfg.n_targets_range.second};
    j["target_voxels_range"] = {cfg.target_voxels_range.first, cfg.target_voxels_range.second};
    j["target_voxel_cap"] = cfg.target_voxel_cap;
    j["contrast_delta"] = cfg.contrast_delta;
    j["noise_sigma"] = cfg.noise_sigma;
    j["shape_irregularity"] = cfg.shape_irregularity;
    j["seed"] = cfg.seed;
    j["n_distractors_range"] = {cfg.n_distractors_range.first, cfg.n_distractors_range.second};
    j["distractor_contrast_scale"] = cfg.distractor_contrast_scale;
    j["distractor_radius_range"] = {cfg.distractor_radius_range.first, cfg.distractor_radius_range.second};
    j["n_flicker_range"] = {cfg.n_flicker_range.first, cfg.n_flicker_range.second};
    return j.dump(2);
}

std::filesystem::path generate_dataset(const PhantomConfig& cfg, int n_volumes,
                                       const fs::path& out_dir, double train_fraction) {
    cfg.validate();
    if (n_volumes < 2) throw std::invalid_argument("generate_dataset: need at least 2 volumes");
    fs::create_directories(out_dir);

    std::vector<std::string> ids;
    ids.reserve(n_volumes);
    for (int i = 0; i < n_volumes; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "vol_%04d", i);
        ids.emplace_back(name);
    }
    const auto [train_ids, test_ids] = split_dataset(ids, train_fraction, cfg.seed);
    std::set<std::string> train_set(train_ids.begin(), train_ids.end());

    std::vector<ManifestEntry> entries;
    for (int i = 0; i < n_volumes; ++i) {
        PhantomConfig vcfg = cfg;
        vcfg.seed = cfg.seed + static_cast<uint64_t>(i);
        auto [vol, label] = generate_phantom(vcfg);

        VolumeMeta meta;
        meta.extents = cfg.extents;
        meta.spacing_mm = vol.spacing_mm;
        meta.roi_slab = phantom_roi_slab(cfg.extents);
        meta.normalized = true;
        write_volume(out_dir / ids[i], vol, label, meta);

        entries.push_back(ManifestEntry{ids[i], ids[i],
                                        train_set.count(ids[i]) ? "train" : "test"});
    }

    const auto manifest_path = out_dir / "manifest.json";
    write_manifest(manifest_path, entries);
    std::ofstream cfg_out(out_dir / "phantom_config.json");
    cfg_out << phantom_config_to_json(cfg) << "\n";
    return manifest_path;
}

}  // namespace cosam
