// Acceptance suite: one pass/fail line per criterion.
//
//   1  dice/iou vs brute-force pixel counting + the dice/iou identity
//   2  ap50 vs hand-computed PR cases and an independent greedy oracle
//   3  query matching vs exhaustive assignment enumeration
//   4  forward shape law across the window-size sweep set {5..15}
//   5  500-step overfit reductions for detection and segmentation losses
//   6  end-to-end ablation direction on phantoms (separate < E2E < E2E+CCM)
//   7  preprocessing pins (HU window, box round trip, dataset split)
//   8  CLI training determinism for a fixed seed
//   9  detection/segmentation consistency of emitted high-score boxes
//
// Runs everything by default; `--only N [N ...]` selects criteria.

#include <torch/torch.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cosam/checkpoint.hpp"
#include "cosam/collab.hpp"
#include "cosam/metrics.hpp"
#include "cosam/phantom.hpp"
#include "cosam/training.hpp"

using namespace cosam;
namespace fs = std::filesystem;
using json = nlohmann::json;
using clk = std::chrono::steady_clock;

#ifndef COSAM_CLI_BIN
#define COSAM_CLI_BIN "cosam"
#endif

namespace {

struct Context {
    fs::path work;            // scratch directory
    fs::path c6_model_ckpt;   // trained model from criterion 6, reused by 9
    fs::path c6_dataset;      // phantom dataset from criterion 6
};

std::string format_seconds(double s) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1fs", s);
    return buf;
}

// ---------------------------------------------------------------------------
// criterion 1: dice/iou oracle

bool criterion_dice_iou(Context&, std::string& detail) {
    std::mt19937 rng(101);
    std::bernoulli_distribution bit(0.3);
    double max_err = 0;
    for (int trial = 0; trial < 200; ++trial) {
        auto p = torch::zeros({16, 16}, torch::kUInt8);
        auto g = torch::zeros({16, 16}, torch::kUInt8);
        auto pa = p.accessor<uint8_t, 2>();
        auto ga = g.accessor<uint8_t, 2>();
        int64_t np = 0, ng = 0, ni = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                pa[y][x] = bit(rng) ? 1 : 0;
                ga[y][x] = bit(rng) ? 1 : 0;
                np += pa[y][x];
                ng += ga[y][x];
                ni += pa[y][x] && ga[y][x];
            }
        const double expect_dice = (np + ng) == 0 ? 1.0 : 2.0 * ni / static_cast<double>(np + ng);
        const double expect_iou =
            (np + ng - ni) == 0 ? 1.0 : static_cast<double>(ni) / static_cast<double>(np + ng - ni);
        const double d = dice(p, g);
        const double i = iou(p, g);
        max_err = std::max({max_err, std::abs(d - expect_dice), std::abs(i - expect_iou)});
        if (np + ng > 0) max_err = std::max(max_err, std::abs(d - 2.0 * i / (1.0 + i)));
    }
    detail = "200 mask pairs, max deviation " + std::to_string(max_err);
    return max_err <= 1e-12;
}

// ---------------------------------------------------------------------------
// criterion 2: ap50 oracle

double oracle_ap(std::vector<EvalDetection> dets, const std::vector<EvalGtBox>& gts) {
    if (gts.empty()) return dets.empty() ? 1.0 : 0.0;
    std::stable_sort(dets.begin(), dets.end(),
                     [](const EvalDetection& a, const EvalDetection& b) { return a.score > b.score; });
    std::vector<bool> used(gts.size(), false);
    std::vector<int> tp_flags;
    for (const auto& d : dets) {
        int best = -1;
        double best_iou = 0;
        for (size_t g = 0; g < gts.size(); ++g) {
            if (used[g] || gts[g].volume_id != d.volume_id || gts[g].slice_index != d.slice_index)
                continue;
            const double x1 = std::max(d.box.x1, gts[g].box.x1);
            const double y1 = std::max(d.box.y1, gts[g].box.y1);
            const double x2 = std::min(d.box.x2, gts[g].box.x2);
            const double y2 = std::min(d.box.y2, gts[g].box.y2);
            const double inter = std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1);
            const double uni = (d.box.x2 - d.box.x1) * (d.box.y2 - d.box.y1) +
                               (gts[g].box.x2 - gts[g].box.x1) * (gts[g].box.y2 - gts[g].box.y1) -
                               inter;
            const double v = uni > 0 ? inter / uni : 0;
            if (v > best_iou) {
                best_iou = v;
                best = static_cast<int>(g);
            }
        }
        if (best >= 0 && best_iou >= 0.5) {
            used[static_cast<size_t>(best)] = true;
            tp_flags.push_back(1);
        } else {
            tp_flags.push_back(0);
        }
    }
    double ap = 0, prev_r = 0;
    int tp = 0;
    for (size_t i = 0; i < tp_flags.size(); ++i) {
        tp += tp_flags[i];
        const double r = static_cast<double>(tp) / static_cast<double>(gts.size());
        double envelope = 0;
        int tp2 = 0;
        for (size_t j = 0; j < tp_flags.size(); ++j) {
            tp2 += tp_flags[j];
            if (j >= i)
                envelope = std::max(envelope, static_cast<double>(tp2) / static_cast<double>(j + 1));
        }
        ap += (r - prev_r) * envelope;
        prev_r = r;
    }
    return ap;
}

bool criterion_ap50(Context&, std::string& detail) {
    const std::vector<EvalGtBox> one{EvalGtBox{"v", 0, Box{10, 10, 20, 20}}};
    const auto tp_fp = ap50({EvalDetection{"v", 0, Box{10, 10, 20, 20}, 0.9},
                             EvalDetection{"v", 0, Box{40, 40, 50, 50}, 0.8}},
                            one);
    const auto fp_tp = ap50({EvalDetection{"v", 0, Box{40, 40, 50, 50}, 0.9},
                             EvalDetection{"v", 0, Box{10, 10, 20, 20}, 0.8}},
                            one);
    if (std::abs(tp_fp - 1.0) > 1e-12 || std::abs(fp_tp - 0.5) > 1e-12) {
        detail = "hand-computed PR cases: got " + std::to_string(tp_fp) + ", " + std::to_string(fp_tp);
        return false;
    }

    std::mt19937 rng(202);
    std::uniform_real_distribution<float> pos(0.f, 40.f);
    std::uniform_real_distribution<float> side(4.f, 16.f);
    std::uniform_real_distribution<double> score(0.0, 1.0);
    double max_err = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<EvalGtBox> gts;
        std::vector<EvalDetection> dets;
        for (int g = 0; g < trial % 4; ++g) {
            const float x = pos(rng), y = pos(rng), w = side(rng), h = side(rng);
            gts.push_back(EvalGtBox{"v", trial % 3, Box{x, y, x + w, y + h}});
        }
        for (int d = 0; d < 3; ++d) {
            const float x = pos(rng), y = pos(rng), w = side(rng), h = side(rng);
            dets.push_back(EvalDetection{"v", trial % 3, Box{x, y, x + w, y + h}, score(rng)});
        }
        max_err = std::max(max_err, std::abs(ap50(dets, gts) - oracle_ap(dets, gts)));
    }
    detail = "hand cases exact; 100 random scenes, max deviation " + std::to_string(max_err);
    return max_err <= 1e-12;
}

// ---------------------------------------------------------------------------
// criterion 3: matching oracle

double assignment_cost(const MatchResult& m, const std::vector<Box>& preds,
                       const std::vector<float>& confs, const std::vector<Box>& gts,
                       const LossWeights& wt) {
    double total = 0;
    for (const auto& [q, g] : m.pairs) {
        const double l1 = std::abs(preds[q].x1 - gts[g].x1) / 64.0 +
                          std::abs(preds[q].y1 - gts[g].y1) / 64.0 +
                          std::abs(preds[q].x2 - gts[g].x2) / 64.0 +
                          std::abs(preds[q].y2 - gts[g].y2) / 64.0;
        total += wt.cls * (1.0 - confs[q]) + wt.box * l1 + wt.giou * (1.0 - box_giou(preds[q], gts[g]));
    }
    return total;
}

bool criterion_matching(Context&, std::string& detail) {
    std::mt19937 rng(303);
    std::uniform_real_distribution<float> pos(0.f, 50.f);
    std::uniform_real_distribution<float> side(2.f, 14.f);
    std::uniform_real_distribution<float> conf(0.f, 1.f);
    const LossWeights wt;
    double max_gap = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int nq = 1 + static_cast<int>(rng() % 6);
        const int ng = static_cast<int>(rng() % 5);
        std::vector<Box> preds, gts;
        std::vector<float> confs;
        for (int q = 0; q < nq; ++q) {
            const float x = pos(rng), y = pos(rng);
            preds.push_back(Box{x, y, x + side(rng), y + side(rng)});
            confs.push_back(conf(rng));
        }
        for (int g = 0; g < ng; ++g) {
            const float x = pos(rng), y = pos(rng);
            gts.push_back(Box{x, y, x + side(rng), y + side(rng)});
        }
        const auto got = match_queries(preds, confs, gts, 64, 64, wt);
        if (static_cast<int>(got.pairs.size()) != std::min(nq, ng)) {
            detail = "pair count mismatch";
            return false;
        }
        if (ng == 0) continue;

        // Exhaustive enumeration over all one-to-one assignments.
        const int small = std::min(nq, ng);
        std::vector<int> idx(static_cast<size_t>(std::max(nq, ng)));
        std::iota(idx.begin(), idx.end(), 0);
        double best = std::numeric_limits<double>::infinity();
        std::sort(idx.begin(), idx.end());
        do {
            MatchResult cand;
            for (int k = 0; k < small; ++k)
                cand.pairs.emplace_back(nq <= ng ? k : idx[k], nq <= ng ? idx[k] : k);
            best = std::min(best, assignment_cost(cand, preds, confs, gts, wt));
        } while (std::next_permutation(idx.begin(), idx.end()));

        max_gap = std::max(max_gap, std::abs(assignment_cost(got, preds, confs, gts, wt) - best));
    }
    detail = "200 instances, max cost gap to enumeration " + std::to_string(max_gap);
    return max_gap <= 1e-9;
}

// ---------------------------------------------------------------------------
// criterion 4: shape law across the window-size sweep

bool criterion_shape_law(Context&, std::string& detail) {
    PhantomConfig pc;
    pc.extents = {20, 64, 64};
    pc.seed = 404;
    auto [vol, label] = generate_phantom(pc);

    for (int w : {5, 7, 9, 11, 13, 15}) {
        torch::manual_seed(1000 + w);
        ModelConfig mc;
        mc.window_size = w;
        CosamModel model(mc);
        model->eval();
        torch::NoGradGuard guard;

        auto window = extract_window(vol, 10, w);
        auto det = model->detector_->forward(window.slices.unsqueeze(0));
        if (det.query_boxes.sizes() != torch::IntArrayRef({1, mc.n_queries, 4})) {
            detail = "window " + std::to_string(w) + ": box shape violation";
            return false;
        }
        const bool conf_ok = (det.query_conf >= 0).all().item<bool>() &&
                             (det.query_conf <= 1).all().item<bool>();
        if (!conf_ok) {
            detail = "window " + std::to_string(w) + ": confidence range violation";
            return false;
        }
        ForwardOptions opts;
        opts.emit_floor = 0.05f;
        auto result = model->forward_window(window, opts);
        if (result.segmentation.mask.sizes() != torch::IntArrayRef({64, 64})) {
            detail = "window " + std::to_string(w) + ": merged mask is not full resolution";
            return false;
        }
    }
    detail = "window sizes {5,7,9,11,13,15}: N_q boxes, conf in [0,1], full-res mask";
    return true;
}

// ---------------------------------------------------------------------------
// criterion 5: overfit reductions

bool criterion_overfit(Context&, std::string& detail) {
    PhantomConfig pc;
    pc.seed = 4;
    pc.n_targets_range = {1, 1};
    auto [vol, label] = generate_phantom(pc);
    int anchor = 0;
    int64_t best_fg = -1;
    for (int s = 0; s < vol.slices(); ++s) {
        const auto n = label.data[s].sum().item<int64_t>();
        if (n > best_fg) {
            best_fg = n;
            anchor = s;
        }
    }

    ModelConfig mc;  // D = 64, 64x64 slices
    double det_reduction = 0, seg_reduction = 0;
    {
        torch::manual_seed(1);
        Detector det(mc);
        det->train();
        torch::optim::Adam opt(det->parameters(), torch::optim::AdamOptions(1e-3));
        auto batch = extract_window(vol, anchor, mc.window_size).slices.unsqueeze(0);
        std::vector<Box> gt;
        for (const auto& g : boxes_from_mask(label.data[anchor])) gt.push_back(g.box);

        double initial = 0, final_loss = 0;
        for (int step = 0; step <= 500; ++step) {
            auto out = det->forward(batch);
            auto pb = out.query_boxes.squeeze(0);
            auto conf = out.query_conf.squeeze(0);
            std::vector<Box> pbv;
            std::vector<float> pcv;
            auto pbd = pb.detach();
            auto pcd = conf.detach();
            for (int64_t i = 0; i < pbd.size(0); ++i) {
                pbv.push_back(Box{pbd[i][0].item<float>(), pbd[i][1].item<float>(),
                                  pbd[i][2].item<float>(), pbd[i][3].item<float>()});
                pcv.push_back(pcd[i].item<float>());
            }
            auto loss = detection_loss(pb, conf, gt, match_queries(pbv, pcv, gt, 64, 64, {}), 64, 64, {});
            if (step == 0) initial = loss.item<double>();
            final_loss = loss.item<double>();
            if (step == 500) break;
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
        det_reduction = 1.0 - final_loss / initial;
    }
    {
        torch::manual_seed(2);
        Segmenter seg(mc);
        seg->train();
        torch::optim::Adam opt(seg->parameters(), torch::optim::AdamOptions(1e-3));
        auto slice = vol.data[anchor];
        const auto boxes = boxes_from_mask(label.data[anchor]);
        const auto target = component_masks(label.data[anchor])[0].to(torch::kFloat32);

        double initial = 0, final_loss = 0;
        for (int step = 0; step <= 500; ++step) {
            auto emb = seg->encode_image(slice);
            auto r = seg->decode_mask(emb, boxes[0].box);
            auto loss = segmentation_loss(r.mask, target, {});
            if (step == 0) initial = loss.item<double>();
            final_loss = loss.item<double>();
            if (step == 500) break;
            opt.zero_grad();
            loss.backward();
            opt.step();
        }
        seg_reduction = 1.0 - final_loss / initial;
    }
    char buf[128];
    std::snprintf(buf, sizeof(buf), "detection loss -%.1f%%, segmentation loss -%.1f%% (need >= 90%%)",
                  det_reduction * 100, seg_reduction * 100);
    detail = buf;
    return det_reduction >= 0.9 && seg_reduction >= 0.9;
}

// ---------------------------------------------------------------------------
// criterion 6: end-to-end ablation direction

struct C6Scale {
    int n_volumes = 80;  // 60 train / 20 test at fraction 0.75
    int pretrain_epochs = 12;
    int joint_epochs = 12;
    int n_seeds = 3;
};

struct ArmScores {
    double dice = 0, ap = 0;
};

bool criterion_ablation(Context& ctx, std::string& detail, const C6Scale& scale) {
    const auto dir = ctx.work / "c6";
    fs::create_directories(dir);

    PhantomConfig pc;
    pc.extents = {20, 64, 64};
    pc.n_targets_range = {1, 3};
    pc.target_voxels_range = {150, 1200};
    pc.contrast_delta = 0.15;
    pc.noise_sigma = 0.05;
    pc.shape_irregularity = 0.3;
    pc.n_distractors_range = {2, 5};
    pc.n_flicker_range = {1, 2};
    pc.seed = 1000;
    const auto manifest_path = dir / "data" / "manifest.json";
    if (!fs::exists(manifest_path))
        generate_dataset(pc, scale.n_volumes, dir / "data", 0.75);
    auto manifest = load_manifest(manifest_path);
    ctx.c6_dataset = manifest_path;

    ModelConfig mc;  // window 9, D = 64
    TrainConfig base;
    base.batch_size = 8;
    base.lr_detector = 3e-4;
    base.lr_segmenter = 3e-4;
    base.lr_joint_head = 1e-3;

    ForwardOptions eval_opts;
    eval_opts.emit_floor = 0.05f;

    int wins = 0;
    std::ostringstream log;
    for (int seed = 1; seed <= scale.n_seeds; ++seed) {
        TrainConfig tc = base;
        tc.seed = static_cast<uint64_t>(seed);

        const auto det_ckpt = dir / ("det_s" + std::to_string(seed) + ".ckpt");
        const auto seg_ckpt = dir / ("seg_s" + std::to_string(seed) + ".ckpt");
        pretrain_detector(tc, mc, manifest, det_ckpt, nullptr, scale.pretrain_epochs);
        pretrain_segmenter(tc, mc, manifest, seg_ckpt, nullptr, scale.pretrain_epochs);

        // Arm A: separate pretraining only.
        torch::manual_seed(0);
        auto model_a = compose_model(det_ckpt, seg_ckpt);
        ForwardOptions opts_a = eval_opts;
        opts_a.use_ccm = false;
        auto report_a = evaluate(make_window_predictor(model_a, opts_a), manifest, "test",
                                 mc.window_size, "armA");

        // Arm B: end-to-end joint training, no CCM.
        TrainConfig tc_b = tc;
        tc_b.use_ccm = false;
        const auto b_ckpt = dir / ("joint_noccm_s" + std::to_string(seed) + ".ckpt");
        joint_train(tc_b, mc, det_ckpt, seg_ckpt, manifest, b_ckpt, nullptr, scale.joint_epochs);
        auto model_b = model_from_checkpoint(b_ckpt);
        ForwardOptions opts_b = eval_opts;
        opts_b.use_ccm = false;
        auto report_b = evaluate(make_window_predictor(model_b, opts_b), manifest, "test",
                                 mc.window_size, "armB");

        // Arm C: end-to-end with the collaborative classification module.
        TrainConfig tc_c = tc;
        tc_c.use_ccm = true;
        const auto c_ckpt = dir / ("joint_ccm_s" + std::to_string(seed) + ".ckpt");
        joint_train(tc_c, mc, det_ckpt, seg_ckpt, manifest, c_ckpt, nullptr, scale.joint_epochs);
        auto model_c = model_from_checkpoint(c_ckpt);
        ForwardOptions opts_c = eval_opts;
        opts_c.use_ccm = true;
        auto report_c = evaluate(make_window_predictor(model_c, opts_c), manifest, "test",
                                 mc.window_size, "armC");
        ctx.c6_model_ckpt = c_ckpt;

        const bool dice_order = report_c.dice >= report_b.dice + 0.01 &&
                                report_b.dice >= report_a.dice + 0.01;
        const bool ap_order = report_c.ap50 >= report_b.ap50 + 0.005;
        if (dice_order && ap_order) ++wins;

        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "seed %d: dice A=%.4f B=%.4f C=%.4f | ap50 A=%.4f B=%.4f C=%.4f %s; ",
                      seed, report_a.dice, report_b.dice, report_c.dice, report_a.ap50,
                      report_b.ap50, report_c.ap50, (dice_order && ap_order) ? "ok" : "MISS");
        log << buf;
    }
    detail = log.str() + std::to_string(wins) + "/" + std::to_string(scale.n_seeds) + " seeds ordered";
    return 2 * wins > scale.n_seeds;
}

// ---------------------------------------------------------------------------
// criterion 7: preprocessing pins

bool criterion_preprocessing(Context&, std::string& detail) {
    auto vol = CtVolume{torch::tensor({{{-100.f, 0.f, 100.f}}}), {1, 1, 1}, false};
    auto out = truncate_and_normalize(vol);
    auto a = out.data.accessor<float, 3>();
    if (a[0][0][0] != 0.f || a[0][0][1] != 0.5f || a[0][0][2] != 1.f) {
        detail = "HU window map is not exact";
        return false;
    }

    std::mt19937 rng(707);
    std::uniform_int_distribution<int> coord(0, 20);
    std::uniform_int_distribution<int> side(1, 6);
    for (int trial = 0; trial < 50; ++trial) {
        auto mask = torch::zeros({28, 28}, torch::kUInt8);
        std::vector<Box> painted;
        for (int k = 0; k < 4; ++k) {
            const int x1 = coord(rng), y1 = coord(rng);
            const int x2 = std::min(28, x1 + side(rng)), y2 = std::min(28, y1 + side(rng));
            if (x1 >= x2 || y1 >= y2) continue;
            bool clash = false;
            for (const auto& b : painted)
                if (x1 < b.x2 + 2 && b.x1 < x2 + 2 && y1 < b.y2 + 2 && b.y1 < y2 + 2) clash = true;
            if (clash) continue;
            mask.slice(0, y1, y2).slice(1, x1, x2) = 1;
            painted.push_back(Box{static_cast<float>(x1), static_cast<float>(y1),
                                  static_cast<float>(x2), static_cast<float>(y2)});
        }
        auto boxes = boxes_from_mask(mask);
        if (boxes.size() != painted.size()) {
            detail = "painted rectangles did not round-trip (count)";
            return false;
        }
        std::set<std::array<float, 4>> want, got;
        for (const auto& b : painted) want.insert({b.x1, b.y1, b.x2, b.y2});
        for (const auto& b : boxes) got.insert({b.box.x1, b.box.y1, b.box.x2, b.box.y2});
        if (want != got) {
            detail = "painted rectangles did not round-trip (coordinates)";
            return false;
        }
    }

    std::vector<std::string> ids;
    for (int i = 0; i < 269; ++i) ids.push_back("case_" + std::to_string(i));
    const auto [train, test] = split_dataset(ids, 214.0 / 269.0, 7);
    if (train.size() != 214 || test.size() != 55) {
        detail = "269-case split gave " + std::to_string(train.size()) + "/" + std::to_string(test.size());
        return false;
    }
    detail = "HU pins exact; 50 rectangle round trips; split 214/55";
    return true;
}

// ---------------------------------------------------------------------------
// criterion 8: CLI determinism

bool criterion_determinism(Context& ctx, std::string& detail) {
    const auto dir = ctx.work / "c8";
    fs::create_directories(dir);

    PhantomConfig pc;
    pc.extents = {12, 32, 32};
    pc.target_voxels_range = {60, 220};
    pc.n_targets_range = {1, 2};
    pc.seed = 808;
    const auto manifest = generate_dataset(pc, 6, dir / "data", 0.75);

    const auto config = dir / "config.json";
    {
        std::ofstream out(config);
        out << R"({"batch_size":4,"model":{"window_size":5,"feat_dim":32,"seg_dim":32,"top_m":32,"n_queries":8}})";
    }

    auto run = [&](const std::string& out_dir) {
        std::ostringstream cmd;
        cmd << COSAM_CLI_BIN << " train --phase detector --epochs 2 --seed 7 --config " << config
            << " --data " << manifest << " --out " << (dir / out_dir) << " > /dev/null 2>&1";
        return std::system(cmd.str().c_str());
    };
    if (run("run1") != 0 || run("run2") != 0) {
        detail = "CLI training run failed";
        return false;
    }

    auto slurp = [](const fs::path& p) {
        std::ifstream in(p);
        return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    const auto log1 = slurp(dir / "run1" / "train_log.jsonl");
    const auto log2 = slurp(dir / "run2" / "train_log.jsonl");
    if (log1.empty()) {
        detail = "missing training logs";
        return false;
    }
    if (log1 == log2) {
        detail = "two CLI runs produced byte-identical loss logs";
        return true;
    }

    // Fallback documented by the criterion: per-step agreement within 1e-5.
    std::istringstream s1(log1), s2(log2);
    std::string l1, l2;
    double max_gap = 0;
    while (std::getline(s1, l1) && std::getline(s2, l2)) {
        const auto j1 = json::parse(l1);
        const auto j2 = json::parse(l2);
        max_gap = std::max(max_gap, std::abs(j1["loss_total"].get<double>() -
                                             j2["loss_total"].get<double>()));
    }
    detail = "logs differ; max per-epoch loss gap " + std::to_string(max_gap) + " (tolerance 1e-5)";
    return max_gap <= 1e-5;
}

// ---------------------------------------------------------------------------
// criterion 9: consistency of emitted boxes with the merged mask

bool criterion_consistency(Context& ctx, std::string& detail) {
    fs::path ckpt = ctx.c6_model_ckpt;
    fs::path manifest_path = ctx.c6_dataset;
    if (ckpt.empty() || !fs::exists(ckpt)) {
        // Standalone fallback: train a small model on a fresh phantom set.
        const auto dir = ctx.work / "c9";
        fs::create_directories(dir);
        PhantomConfig pc;
        pc.extents = {16, 64, 64};
        pc.seed = 909;
        manifest_path = generate_dataset(pc, 12, dir / "data", 0.75);
        auto manifest = load_manifest(manifest_path);
        ModelConfig mc;
        TrainConfig tc;
        tc.batch_size = 8;
        tc.seed = 9;
        pretrain_detector(tc, mc, manifest, dir / "det.ckpt", nullptr, 2);
        pretrain_segmenter(tc, mc, manifest, dir / "seg.ckpt", nullptr, 2);
        joint_train(tc, mc, dir / "det.ckpt", dir / "seg.ckpt", manifest, dir / "cosam.ckpt",
                    nullptr, 2);
        ckpt = dir / "cosam.ckpt";
    }

    auto model = model_from_checkpoint(ckpt);
    auto manifest = load_manifest(manifest_path);
    ForwardOptions opts;
    opts.emit_floor = 0.05f;

    int64_t checked = 0, violations = 0;
    torch::NoGradGuard guard;
    for (const auto& entry : manifest.split("test")) {
        const auto volume = load_volume(manifest.root / entry.dir);
        const auto [lo, hi] = volume.meta.roi_slab;
        for (int s = lo; s < hi; ++s) {
            const auto window = extract_window(volume.image, s, model->cfg_.window_size);
            const auto result = model->forward_window(window, opts);
            const auto H = result.segmentation.mask.size(0);
            const auto W = result.segmentation.mask.size(1);
            for (const auto& [box, score] : result.detections) {
                if (score < 0.5f) continue;
                ++checked;
                Box b = box.clipped(static_cast<float>(W), static_cast<float>(H));
                const auto y1 = static_cast<int64_t>(std::floor(b.y1));
                const auto y2 = std::max<int64_t>(y1 + 1, static_cast<int64_t>(std::ceil(b.y2)));
                const auto x1 = static_cast<int64_t>(std::floor(b.x1));
                const auto x2 = std::max<int64_t>(x1 + 1, static_cast<int64_t>(std::ceil(b.x2)));
                auto inside = result.segmentation.mask.slice(0, y1, std::min(y2, H))
                                  .slice(1, x1, std::min(x2, W));
                if (inside.sum().item<int64_t>() == 0) ++violations;
            }
        }
    }
    detail = std::to_string(checked) + " emitted boxes with final score >= 0.5, " +
             std::to_string(violations) + " without mask foreground";
    return violations == 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    C6Scale c6;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--only") {
            for (int j = i + 1; j < argc && argv[j][0] != '-'; ++j, ++i) only.insert(std::atoi(argv[j]));
        } else if (arg == "--c6-scale" && i + 1 < argc) {
            // dev knob: n_volumes,pretrain_epochs,joint_epochs,n_seeds
            std::sscanf(argv[++i], "%d,%d,%d,%d", &c6.n_volumes, &c6.pretrain_epochs,
                        &c6.joint_epochs, &c6.n_seeds);
        }
    }

    Context ctx;
    ctx.work = fs::temp_directory_path() / "cosam_acceptance";
    fs::create_directories(ctx.work);

    struct Entry {
        int id;
        const char* name;
        std::function<bool(Context&, std::string&)> run;
    };
    const std::vector<Entry> criteria{
        {1, "dice/iou match brute-force pixel counting; dice = 2*iou/(1+iou)",
         [](Context& c, std::string& d) { return criterion_dice_iou(c, d); }},
        {2, "ap50 matches hand-computed PR cases and the greedy-matching oracle",
         [](Context& c, std::string& d) { return criterion_ap50(c, d); }},
        {3, "query matching equals exhaustive assignment enumeration",
         [](Context& c, std::string& d) { return criterion_matching(c, d); }},
        {4, "forward shape law holds for every window size in {5,7,9,11,13,15}",
         [](Context& c, std::string& d) { return criterion_shape_law(c, d); }},
        {5, "500 optimizer steps cut detection and segmentation losses by >= 90%",
         [](Context& c, std::string& d) { return criterion_overfit(c, d); }},
        {6, "phantom ablation direction: Dice/AP50 improve from separate to E2E to E2E+CCM",
         [&c6](Context& c, std::string& d) { return criterion_ablation(c, d, c6); }},
        {7, "preprocessing pins: HU window, box round trip, 214/55 split",
         [](Context& c, std::string& d) { return criterion_preprocessing(c, d); }},
        {8, "fixed-seed CLI training runs produce identical loss logs",
         [](Context& c, std::string& d) { return criterion_determinism(c, d); }},
        {9, "every emitted box with final score >= 0.5 contains merged-mask foreground",
         [](Context& c, std::string& d) { return criterion_consistency(c, d); }},
    };

    int failures = 0;
    for (const auto& entry : criteria) {
        if (!only.empty() && !only.count(entry.id)) continue;
        const auto start = clk::now();
        std::string detail;
        bool ok = false;
        try {
            ok = entry.run(ctx, detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(clk::now() - start).count();
        std::printf("[%s] criterion %d: %s (%s) [%s]\n", ok ? "PASS" : "FAIL", entry.id, entry.name,
                    detail.c_str(), format_seconds(secs).c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    return failures == 0 ? 0 : 1;
}
