
#include <torch/torch.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "cosam/volume.hpp"

// doctest last: torch's logging headers define a conflicting CHECK macro.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

using namespace cosam;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
    auto dir = fs::temp_directory_path() / (std::string("cosam_test_") + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

CtVolume make_volume(int64_t L, int64_t H, int64_t W, float fill = 0.f) {
    return CtVolume{torch::full({L, H, W}, fill, torch::kFloat32), {1, 1, 1}, false};
}

// Independent component oracle: gather pixel sets by repeated neighborhood
// expansion over an explicit pixel list, then take min/max extents.
std::vector<Box> brute_force_boxes(const torch::Tensor& mask) {
    auto m = mask.to(torch::kUInt8).contiguous();
    const int H = static_cast<int>(m.size(0));
    const int W = static_cast<int>(m.size(1));
    const uint8_t* p = m.const_data_ptr<uint8_t>();

    std::set<std::pair<int, int>> remaining;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (p[y * W + x]) remaining.insert({y, x});

    std::vector<std::pair<std::pair<int, int>, Box>> found;  // (first pixel, box)
    while (!remaining.empty()) {
        std::set<std::pair<int, int>> comp{*remaining.begin()};
        remaining.erase(remaining.begin());
        bool grew = true;
        while (grew) {
            grew = false;
            for (auto it = remaining.begin(); it != remaining.end();) {
                bool adjacent = false;
                for (const auto& [cy, cx] : comp)
                    if (std::abs(cy - it->first) <= 1 && std::abs(cx - it->second) <= 1) adjacent = true;
                if (adjacent) {
                    comp.insert(*it);
                    it = remaining.erase(it);
                    grew = true;
                } else {
                    ++it;
                }
            }
        }
        int minx = W, maxx = -1, miny = H, maxy = -1;
        for (const auto& [y, x] : comp) {
            minx = std::min(minx, x);
            maxx = std::max(maxx, x);
            miny = std::min(miny, y);
            maxy = std::max(maxy, y);
        }
        found.emplace_back(*comp.begin(),  // the set orders pixels row-major
                           Box{static_cast<float>(minx), static_cast<float>(miny),
                               static_cast<float>(maxx + 1), static_cast<float>(maxy + 1)});
    }
    // boxes_from_mask orders components by their first pixel, row-major.
    std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<Box> out;
    for (const auto& [fp, box] : found) out.push_back(box);
    return out;
}

}  // namespace

TEST_CASE("truncate_and_normalize pins the HU window endpoints") {
    auto vol = make_volume(1, 1, 5);
    vol.data = torch::tensor({{{-100.f, 0.f, 100.f, 250.f, -300.f}}});
    auto out = truncate_and_normalize(vol);
    CHECK(out.normalized);
    auto a = out.data.accessor<float, 3>();
    CHECK(a[0][0][0] == 0.0f);  // the map is exact at the window endpoints
    CHECK(a[0][0][1] == 0.5f);
    CHECK(a[0][0][2] == 1.0f);
    CHECK(a[0][0][3] == 1.0f);  // clamp above hi
    CHECK(a[0][0][4] == 0.0f);
}

TEST_CASE("truncate_and_normalize rejects bad inputs") {
    auto vol = make_volume(1, 2, 2);
    CHECK_THROWS_AS(truncate_and_normalize(vol, 100.f, -100.f), std::invalid_argument);
    auto norm = truncate_and_normalize(vol);
    CHECK_THROWS_AS(truncate_and_normalize(norm), std::invalid_argument);
}

TEST_CASE("normalization is monotone and affine on clamped inputs") {
    std::mt19937 rng(11);
    std::uniform_real_distribution<float> hu(-400.f, 400.f);
    auto vol = make_volume(2, 8, 8);
    auto acc = vol.data.accessor<float, 3>();
    for (int64_t l = 0; l < 2; ++l)
        for (int64_t y = 0; y < 8; ++y)
            for (int64_t x = 0; x < 8; ++x) acc[l][y][x] = hu(rng);
    auto out = truncate_and_normalize(vol);

    auto flat_in = vol.data.flatten();
    auto flat_out = out.data.flatten();
    for (int i = 0; i + 1 < flat_in.numel(); ++i) {
        const float v1 = flat_in[i].item<float>(), v2 = flat_in[i + 1].item<float>();
        const float o1 = flat_out[i].item<float>(), o2 = flat_out[i + 1].item<float>();
        if (v1 <= v2) CHECK(o1 <= o2);
        else CHECK(o1 >= o2);
        const float c = std::clamp(v1, -100.f, 100.f);
        CHECK(o1 == doctest::Approx((c + 100.f) / 200.f).epsilon(1e-6));
    }
}

TEST_CASE("boxes_from_mask basic contracts") {
    auto empty = torch::zeros({8, 8}, torch::kUInt8);
    CHECK(boxes_from_mask(empty).empty());

    auto block = torch::zeros({8, 10}, torch::kUInt8);
    block.slice(0, 2, 5).slice(1, 5, 8) = 1;  // rows 2..4, cols 5..7
    auto boxes = boxes_from_mask(block);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].box.x1 == 5);
    CHECK(boxes[0].box.y1 == 2);
    CHECK(boxes[0].box.x2 == 8);
    CHECK(boxes[0].box.y2 == 5);

    // Diagonally touching pixels form one component under 8-connectivity.
    auto diag = torch::zeros({2, 2}, torch::kUInt8);
    diag[0][0] = 1;
    diag[1][1] = 1;
    CHECK(boxes_from_mask(diag).size() == 1);
}

TEST_CASE("boxes_from_mask matches the brute-force component oracle") {
    std::mt19937 rng(23);
    std::bernoulli_distribution bit(0.18);
    for (int trial = 0; trial < 40; ++trial) {
        auto mask = torch::zeros({16, 16}, torch::kUInt8);
        auto acc = mask.accessor<uint8_t, 2>();
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) acc[y][x] = bit(rng) ? 1 : 0;

        const auto got = boxes_from_mask(mask);
        const auto expected = brute_force_boxes(mask);
        REQUIRE(got.size() == expected.size());
        for (size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].box.x1 == expected[i].x1);
            CHECK(got[i].box.y1 == expected[i].y1);
            CHECK(got[i].box.x2 == expected[i].x2);
            CHECK(got[i].box.y2 == expected[i].y2);
        }
    }
}

TEST_CASE("painted disjoint rectangles round-trip exactly") {
    std::mt19937 rng(7);
    std::uniform_int_distribution<int> coord(0, 20);
    std::uniform_int_distribution<int> side(1, 6);
    for (int trial = 0; trial < 30; ++trial) {
        auto mask = torch::zeros({28, 28}, torch::kUInt8);
        std::vector<Box> painted;
        for (int k = 0; k < 4; ++k) {
            const int x1 = coord(rng), y1 = coord(rng);
            const int x2 = std::min(28, x1 + side(rng)), y2 = std::min(28, y1 + side(rng));
            if (x1 >= x2 || y1 >= y2) continue;
            // Keep a 2-pixel clearance so components stay separate under
            // 8-connectivity.
            bool clash = false;
            for (const auto& b : painted)
                if (x1 < b.x2 + 2 && b.x1 < x2 + 2 && y1 < b.y2 + 2 && b.y1 < y2 + 2) clash = true;
            if (clash) continue;
            mask.slice(0, y1, y2).slice(1, x1, x2) = 1;
            painted.push_back(Box{static_cast<float>(x1), static_cast<float>(y1),
                                  static_cast<float>(x2), static_cast<float>(y2)});
        }
        auto boxes = boxes_from_mask(mask);
        REQUIRE(boxes.size() == painted.size());
        std::sort(painted.begin(), painted.end(),
                  [](const Box& a, const Box& b) { return std::tie(a.y1, a.x1) < std::tie(b.y1, b.x1); });
        std::sort(boxes.begin(), boxes.end(), [](const GtBox& a, const GtBox& b) {
            return std::tie(a.box.y1, a.box.x1) < std::tie(b.box.y1, b.box.x1);
        });
        for (size_t i = 0; i < boxes.size(); ++i) {
            CHECK(boxes[i].box.x1 == painted[i].x1);
            CHECK(boxes[i].box.y1 == painted[i].y1);
            CHECK(boxes[i].box.x2 == painted[i].x2);
            CHECK(boxes[i].box.y2 == painted[i].y2);
        }
    }
}

TEST_CASE("component_masks aligns with boxes_from_mask") {
    auto mask = torch::zeros({10, 10}, torch::kUInt8);
    mask.slice(0, 1, 3).slice(1, 1, 3) = 1;
    mask.slice(0, 6, 9).slice(1, 5, 8) = 1;
    auto boxes = boxes_from_mask(mask);
    auto comps = component_masks(mask);
    REQUIRE(boxes.size() == comps.size());
    torch::Tensor acc = torch::zeros({10, 10}, torch::kUInt8);
    for (size_t i = 0; i < comps.size(); ++i) {
        // Every component's pixels sit inside its box.
        auto b = boxes[i].box;
        auto outside = comps[i].clone();
        outside.slice(0, static_cast<int64_t>(b.y1), static_cast<int64_t>(b.y2))
            .slice(1, static_cast<int64_t>(b.x1), static_cast<int64_t>(b.x2)) = 0;
        CHECK(outside.sum().item<int64_t>() == 0);
        acc = acc | comps[i];
    }
    CHECK(torch::equal(acc, mask));
}

TEST_CASE("volume directory round trip") {
    auto dir = temp_dir("volio");
    torch::manual_seed(3);
    CtVolume vol{torch::rand({6, 8, 10}), {1.0, 0.625, 0.625}, true};
    LabelVolume label{(torch::rand({6, 8, 10}) > 0.8).to(torch::kUInt8)};
    VolumeMeta meta;
    meta.extents = {6, 8, 10};
    meta.spacing_mm = vol.spacing_mm;
    meta.roi_slab = {1, 5};
    meta.normalized = true;
    write_volume(dir / "v0", vol, label, meta);

    auto loaded = load_volume(dir / "v0");
    CHECK(torch::equal(loaded.image.data, vol.data));
    CHECK(torch::equal(loaded.label.data, label.data));
    CHECK(loaded.image.normalized);
    CHECK(loaded.meta.roi_slab[0] == 1);
    CHECK(loaded.meta.roi_slab[1] == 5);
    CHECK(loaded.id == "v0");
}

TEST_CASE("load_volume binarizes labels and validates extents") {
    auto dir = temp_dir("volio2");
    CtVolume vol{torch::zeros({2, 4, 4}), {1, 1, 1}, false};
    LabelVolume label{torch::zeros({2, 4, 4}, torch::kUInt8)};
    label.data[1][2][2] = 3;  // any nonzero becomes 1
    VolumeMeta meta;
    meta.extents = {2, 4, 4};
    meta.roi_slab = {0, 2};
    write_volume(dir / "v", vol, label, meta);
    auto loaded = load_volume(dir / "v");
    CHECK(loaded.label.data[1][2][2].item<int>() == 1);
    CHECK(loaded.label.data.sum().item<int64_t>() == 1);

    SUBCASE("declared extents must match the raster size") {
        // meta says 3 slices, raster has 2
        std::ifstream in(dir / "v" / "meta.json");
        std::string meta_text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        auto pos = meta_text.find("2,");
        meta_text.replace(pos, 1, "3");
        std::ofstream out(dir / "v" / "meta.json");
        out << meta_text;
        out.close();
        CHECK_THROWS_WITH_AS(static_cast<void>(load_volume(dir / "v")),
                             doctest::Contains("image.raw"), std::runtime_error);
    }

    SUBCASE("missing file is reported") {
        fs::remove(dir / "v" / "label.raw");
        CHECK_THROWS_WITH_AS(static_cast<void>(load_volume(dir / "v")),
                             doctest::Contains("label.raw"), std::runtime_error);
    }
}

TEST_CASE("load_volume rejects non-finite image data") {
    auto dir = temp_dir("volio3");
    CtVolume vol{torch::zeros({1, 2, 2}), {1, 1, 1}, false};
    vol.data[0][0][0] = std::numeric_limits<float>::infinity();
    VolumeMeta meta;
    meta.extents = {1, 2, 2};
    meta.roi_slab = {0, 1};
    write_volume(dir / "v", vol, LabelVolume{torch::zeros({1, 2, 2}, torch::kUInt8)}, meta);
    CHECK_THROWS_WITH_AS(static_cast<void>(load_volume(dir / "v")),
                         doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("build_slice_pairs keeps exactly the roi slab") {
    auto vol = make_volume(40, 4, 4);
    vol.normalized = true;
    LabelVolume label{torch::zeros({40, 4, 4}, torch::kUInt8)};

    auto pairs = build_slice_pairs(vol, label, {10, 30}, "v");
    CHECK(pairs.size() == 20);
    CHECK(pairs.front().slice_index == 10);
    CHECK(pairs.back().slice_index == 29);

    CHECK(build_slice_pairs(vol, label, {0, 40}, "v").size() == 40);
    CHECK_THROWS_AS(build_slice_pairs(vol, label, {35, 45}, "v"), std::invalid_argument);
}

TEST_CASE("extract_window replicates edges and flags padding") {
    auto vol = make_volume(40, 4, 4);
    for (int s = 0; s < 40; ++s) vol.data[s] = static_cast<float>(s);

    SUBCASE("interior window has no padding") {
        auto seq = extract_window(vol, 20, 9);
        CHECK(seq.window_size() == 9);
        CHECK(seq.anchor_index == 4);
        for (int j = 0; j < 9; ++j) {
            CHECK_FALSE(seq.pad_mask[j]);
            CHECK(seq.slices[j][0][0].item<float>() == static_cast<float>(16 + j));
        }
    }

    SUBCASE("boundary window replicates the edge slice") {
        auto seq = extract_window(vol, 0, 5);
        const float expect[5] = {0, 0, 0, 1, 2};
        const bool pad[5] = {true, true, false, false, false};
        for (int j = 0; j < 5; ++j) {
            CHECK(seq.slices[j][0][0].item<float>() == expect[j]);
            CHECK(seq.pad_mask[j] == pad[j]);
        }
    }

    SUBCASE("degenerate window") {
        auto seq = extract_window(vol, 7, 1);
        CHECK(seq.window_size() == 1);
        CHECK(seq.anchor_index == 0);
        CHECK(seq.slices[0][0][0].item<float>() == 7.f);
    }

    CHECK_THROWS_AS(extract_window(vol, 5, 4), std::invalid_argument);
    CHECK_THROWS_AS(extract_window(vol, 40, 5), std::invalid_argument);
}

TEST_CASE("extract_window output length always equals window_size") {
    auto vol = make_volume(12, 4, 4);
    for (int center = 0; center < 12; ++center)
        for (int w : {1, 3, 5, 9, 11})
            CHECK(extract_window(vol, center, w).window_size() == w);
}

TEST_CASE("split_dataset reproduces the paper-scale split and is a partition") {
    std::vector<std::string> ids;
    for (int i = 0; i < 269; ++i) ids.push_back("case_" + std::to_string(i));
    auto [train, test] = split_dataset(ids, 214.0 / 269.0, 42);
    CHECK(train.size() == 214);
    CHECK(test.size() == 55);

    auto [train2, test2] = split_dataset(ids, 214.0 / 269.0, 42);
    CHECK(train == train2);
    CHECK(test == test2);

    std::set<std::string> all(train.begin(), train.end());
    for (const auto& id : test) {
        CHECK(all.count(id) == 0);
        all.insert(id);
    }
    CHECK(all.size() == ids.size());
}

TEST_CASE("split_dataset edge cases") {
    std::vector<std::string> ten;
    for (int i = 0; i < 10; ++i) ten.push_back(std::to_string(i));
    auto [tr, te] = split_dataset(ten, 0.8, 1);
    CHECK(tr.size() == 8);
    CHECK(te.size() == 2);

    CHECK_THROWS_AS(split_dataset({"only"}, 0.5, 0), std::invalid_argument);
    CHECK_THROWS_AS(split_dataset(ten, 1.5, 0), std::invalid_argument);
}
