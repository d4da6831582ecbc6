#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdlib>
#include <random>
#include <thread>

#include "cosam/checkpoint.hpp"
#include "cosam/training.hpp"

namespace cosam {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (a + 1) + 0xbf58476d1ce4e5b9ULL * (b + 1);
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
}

int env_workers() {
    if (const char* v = std::getenv("COSAM_NUM_WORKERS")) {
        const int n = std::atoi(v);
        if (n >= 1) return std::min(n, 16);
    }
    return 2;
}

torch::Tensor extract_window_any(const torch::Tensor& volume, int center, int wsize) {
    const int L = static_cast<int>(volume.size(0));
    const int half = wsize / 2;
    std::vector<torch::Tensor> frames;
    frames.reserve(wsize);
    for (int k = -half; k <= half; ++k)
        frames.push_back(volume[std::clamp(center + k, 0, L - 1)]);
    return torch::stack(frames, 0);
}

std::vector<bool> window_pad_flags(int center, int wsize, int L) {
    const int half = wsize / 2;
    std::vector<bool> pad(wsize, false);
    for (int k = -half; k <= half; ++k)
        pad[static_cast<size_t>(k + half)] = (center + k < 0 || center + k >= L);
    return pad;
}

struct WindowSample {
    torch::Tensor image;   // (L, h, w) float32
    torch::Tensor labels;  // (L, h, w) uint8
    std::vector<bool> pad;
    std::vector<GtBox> gt_anchor;
    std::vector<torch::Tensor> gt_comp_masks;
};

WindowSample make_window_sample(const LoadedVolume& vol, int anchor, int wsize,
                                const TrainConfig& cfg, uint64_t aug_seed, bool do_augment) {
    WindowSample s;
    s.image = extract_window_any(vol.image.data, anchor, wsize);
    s.labels = extract_window_any(vol.label.data, anchor, wsize);
    s.pad = window_pad_flags(anchor, wsize, static_cast<int>(vol.image.slices()));

    if (do_augment) {
        AugmentOptions opts{cfg.aug_flip, cfg.aug_crop, cfg.aug_contrast};
        const auto p = sample_augment(opts, s.image.size(1), s.image.size(2), aug_seed);
        s.image = apply_augment_image(s.image, p);
        s.labels = apply_augment_label(s.labels, p);
    }
    const auto anchor_label = s.labels[wsize / 2];
    s.gt_anchor = boxes_from_mask(anchor_label, anchor);
    s.gt_comp_masks = component_masks(anchor_label);
    return s;
}

std::vector<Box> boxes_of(const torch::Tensor& boxes_2d) {
    auto acc = boxes_2d.accessor<float, 2>();
    std::vector<Box> out;
    out.reserve(boxes_2d.size(0));
    for (int64_t i = 0; i < boxes_2d.size(0); ++i)
        out.push_back(Box{acc[i][0], acc[i][1], acc[i][2], acc[i][3]});
    return out;
}

struct Stage1Targets {
    torch::Tensor obj;       // (G,)
    torch::Tensor boxes;     // (G, L, 4)
    torch::Tensor box_mask;  // (G, L)
};

Stage1Targets build_stage1_targets(const WindowSample& s, int stride, int gh, int gw) {
    const auto L = s.labels.size(0);
    const int64_t G = static_cast<int64_t>(gh) * gw;
    Stage1Targets t;
    t.obj = torch::zeros({G}, torch::kFloat32);
    t.boxes = torch::zeros({G, L, 4}, torch::kFloat32);
    t.box_mask = torch::zeros({G, L}, torch::kFloat32);

    std::vector<std::vector<GtBox>> frame_boxes(static_cast<size_t>(L));
    for (int64_t j = 0; j < L; ++j) frame_boxes[static_cast<size_t>(j)] = boxes_from_mask(s.labels[j]);

    auto oacc = t.obj.accessor<float, 1>();
    auto bacc = t.boxes.accessor<float, 3>();
    auto macc = t.box_mask.accessor<float, 2>();
    for (const auto& gt : s.gt_anchor) {
        const int gx = std::clamp(static_cast<int>(gt.box.cx()) / stride, 0, gw - 1);
        const int gy = std::clamp(static_cast<int>(gt.box.cy()) / stride, 0, gh - 1);
        oacc[static_cast<int64_t>(gy) * gw + gx] = 1.f;

        for (int64_t j = 0; j < L; ++j) {
            // Track the component across frames by overlap with the anchor box.
            const GtBox* best = nullptr;
            float best_iou = 0.f;
            for (const auto& fb : frame_boxes[static_cast<size_t>(j)]) {
                const float v = box_iou(fb.box, gt.box);
                if (v > best_iou) {
                    best_iou = v;
                    best = &fb;
                }
            }
            const Box* target = nullptr;
            if (best != nullptr && best_iou > 0.05f)
                target = &best->box;
            else if (j == L / 2)
                target = &gt.box;
            if (target == nullptr) continue;

            // Box regression is supervised on the 3x3 column neighborhood so
            // every proposal the decoder may route to tracks the target.
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int ny = gy + dy, nx = gx + dx;
                    if (ny < 0 || ny >= gh || nx < 0 || nx >= gw) continue;
                    const int64_t g = static_cast<int64_t>(ny) * gw + nx;
                    bacc[g][j][0] = target->x1;
                    bacc[g][j][1] = target->y1;
                    bacc[g][j][2] = target->x2;
                    bacc[g][j][3] = target->y2;
                    macc[g][j] = 1.f;
                }
        }
    }
    return t;
}

torch::Tensor stage1_loss(const torch::Tensor& obj_logits, const torch::Tensor& pred_boxes,
                          const Stage1Targets& t, int64_t h, int64_t w) {
    auto pos_weight = torch::tensor({8.f});
    auto obj = torch::nn::functional::binary_cross_entropy_with_logits(
        obj_logits, t.obj,
        torch::nn::functional::BinaryCrossEntropyWithLogitsFuncOptions().pos_weight(pos_weight));

    auto scale = torch::tensor({static_cast<float>(w), static_cast<float>(h),
                                static_cast<float>(w), static_cast<float>(h)});
    auto diff = ((pred_boxes - t.boxes) / scale).abs() * t.box_mask.unsqueeze(-1);
    auto box = diff.sum() / (t.box_mask.sum() * 4).clamp_min(1.0);
    return obj + box;
}

Box clip_prompt(Box b, float w, float h) {
    b = b.clipped(w, h);
    if (b.x2 - b.x1 < 1.f) {
        b.x2 = std::min(w, b.x1 + 1.f);
        b.x1 = b.x2 - 1.f;
    }
    if (b.y2 - b.y1 < 1.f) {
        b.y2 = std::min(h, b.y1 + 1.f);
        b.y1 = b.y2 - 1.f;
    }
    return b;
}

std::string ckpt_config(const char* kind, const ModelConfig& model_cfg, const TrainConfig& cfg) {
    json j;
    j["kind"] = kind;
    j["model"] = json::parse(model_cfg.to_json());
    j["train"] = json::parse(cfg.to_json());
    j["use_ccm"] = cfg.use_ccm;
    return j.dump();
}

double scalar(const torch::Tensor& t) { return t.detach().item<double>(); }

}  // namespace

TrainData load_train_data(const DatasetManifest& manifest, const std::string& split) {
    const auto entries = manifest.split(split);
    TrainData data;
    data.volumes.resize(entries.size());

    const int workers = std::min<int>(env_workers(), std::max<size_t>(1, entries.size()));
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t)
        pool.emplace_back([&]() {
            for (size_t i = next.fetch_add(1); i < entries.size(); i = next.fetch_add(1))
                data.volumes[i] = load_volume(manifest.root / entries[i].dir);
        });
    for (auto& th : pool) th.join();

    for (size_t v = 0; v < data.volumes.size(); ++v) {
        const auto [lo, hi] = data.volumes[v].meta.roi_slab;
        for (int s = lo; s < hi; ++s) data.windows.emplace_back(static_cast<int>(v), s);
    }
    return data;
}

std::filesystem::path pretrain_detector(const TrainConfig& cfg, const ModelConfig& model_cfg,
                                        const DatasetManifest& manifest, const fs::path& out_ckpt,
                                        const EpochLogger& log, int epochs_override) {
    cfg.validate();
    model_cfg.validate();
    torch::manual_seed(cfg.seed);

    auto data = load_train_data(manifest);
    if (data.windows.empty()) throw std::runtime_error("pretrain_detector: empty dataset");

    Detector model(model_cfg);
    model->train();
    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.lr_detector));

    const int epochs = epochs_override >= 0 ? epochs_override : cfg.pretrain_epochs_det;
    const int L = model_cfg.window_size;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto order = data.windows;
        std::shuffle(order.begin(), order.end(), std::mt19937_64(mix_seed(cfg.seed, 1, epoch)));

        double sum_total = 0, sum_det = 0, sum_s1 = 0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<WindowSample> samples;
            for (size_t i = start; i < end; ++i) {
                const auto [v, slice] = order[i];
                samples.push_back(make_window_sample(data.volumes[static_cast<size_t>(v)], slice, L,
                                                     cfg, mix_seed(cfg.seed, epoch, i), true));
            }

            std::vector<torch::Tensor> imgs;
            for (const auto& s : samples) imgs.push_back(s.image);
            auto batch = torch::stack(imgs, 0);
            const auto h = batch.size(2);
            const auto w = batch.size(3);

            auto det = model->forward(batch);
            torch::Tensor loss_det = torch::zeros({});
            torch::Tensor loss_s1 = torch::zeros({});
            for (size_t b = 0; b < samples.size(); ++b) {
                std::vector<Box> gt;
                for (const auto& g : samples[b].gt_anchor) gt.push_back(g.box);
                auto pred_boxes = det.query_boxes[static_cast<int64_t>(b)];
                auto pred_conf = det.query_conf[static_cast<int64_t>(b)];
                auto pb = boxes_of(pred_boxes.detach());
                std::vector<float> pc(pb.size());
                auto conf_cpu = pred_conf.detach().contiguous();
                std::copy_n(conf_cpu.const_data_ptr<float>(), pb.size(), pc.begin());

                const auto match = match_queries(pb, pc, gt, h, w, cfg.weights);
                loss_det = loss_det + detection_loss(pred_boxes, pred_conf, gt, match, h, w, cfg.weights);
                const auto targets = build_stage1_targets(samples[b], model_cfg.backbone_stride,
                                                          det.grid_h, det.grid_w);
                loss_s1 = loss_s1 + stage1_loss(det.stage1_obj[static_cast<int64_t>(b)],
                                                det.stage1_boxes[static_cast<int64_t>(b)], targets, h, w);
            }
            const auto n = static_cast<double>(samples.size());
            auto total = (loss_det + loss_s1) / n;
            opt.zero_grad();
            total.backward();
            opt.step();

            sum_total += scalar(total);
            sum_det += scalar(loss_det) / n;
            sum_s1 += scalar(loss_s1) / n;
            ++batches;
        }

        if (log) {
            json line;
            line["epoch"] = epoch;
            line["phase"] = "detector";
            line["loss_total"] = sum_total / batches;
            line["loss_det"] = sum_det / batches;
            line["loss_stage1"] = sum_s1 / batches;
            line["lr"] = cfg.lr_detector;
            log(line.dump());
        }
    }

    save_checkpoint(out_ckpt, ckpt_config("detector", model_cfg, cfg), *model);
    return out_ckpt;
}

std::filesystem::path pretrain_segmenter(const TrainConfig& cfg, const ModelConfig& model_cfg,
                                         const DatasetManifest& manifest, const fs::path& out_ckpt,
                                         const EpochLogger& log, int epochs_override) {
    cfg.validate();
    model_cfg.validate();
    torch::manual_seed(cfg.seed + 1);

    auto data = load_train_data(manifest);
    if (data.windows.empty()) throw std::runtime_error("pretrain_segmenter: empty dataset");

    Segmenter model(model_cfg);
    model->train();
    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.lr_segmenter));

    const int epochs = epochs_override >= 0 ? epochs_override : cfg.pretrain_epochs_seg;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto order = data.windows;  // (volume, slice) pairs double as slice samples
        std::shuffle(order.begin(), order.end(), std::mt19937_64(mix_seed(cfg.seed, 2, epoch)));

        double sum_total = 0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);

            std::vector<torch::Tensor> slices;
            std::vector<torch::Tensor> targets;
            std::vector<float> prompt_boxes;
            std::vector<int64_t> image_index;
            for (size_t i = start; i < end; ++i) {
                const auto [v, slice_idx] = order[i];
                const auto& vol = data.volumes[static_cast<size_t>(v)];
                auto image = vol.image.data[slice_idx];
                auto label = vol.label.data[slice_idx];
                if (cfg.aug_flip || cfg.aug_crop || cfg.aug_contrast) {
                    AugmentOptions opts{cfg.aug_flip, cfg.aug_crop, cfg.aug_contrast};
                    const auto p = sample_augment(opts, image.size(0), image.size(1),
                                                  mix_seed(cfg.seed, 1000 + epoch, i));
                    image = apply_augment_image(image, p);
                    label = apply_augment_label(label, p);
                }
                const auto boxes = boxes_from_mask(label);
                if (boxes.empty()) continue;
                const auto comps = component_masks(label);
                const auto img_idx = static_cast<int64_t>(slices.size());
                slices.push_back(image);
                for (size_t k = 0; k < boxes.size(); ++k) {
                    const Box& b = boxes[k].box;
                    prompt_boxes.insert(prompt_boxes.end(), {b.x1, b.y1, b.x2, b.y2});
                    image_index.push_back(img_idx);
                    targets.push_back(comps[k]);
                }
            }
            if (slices.empty()) continue;

            auto emb = model->encode_image_batch(torch::stack(slices, 0).unsqueeze(1));
            auto boxes_t = torch::from_blob(prompt_boxes.data(),
                                            {static_cast<int64_t>(image_index.size()), 4},
                                            torch::kFloat32)
                               .clone();
            auto [masks, tokens] =
                model->decode_boxes_batched(emb, boxes_t, torch::tensor(image_index, torch::kLong));
            auto target_t = torch::stack(targets, 0).to(torch::kFloat32);
            auto loss = segmentation_loss(masks, target_t, cfg.weights);

            opt.zero_grad();
            loss.backward();
            opt.step();
            sum_total += scalar(loss);
            ++batches;
        }

        if (log) {
            json line;
            line["epoch"] = epoch;
            line["phase"] = "segmenter";
            line["loss_total"] = batches ? sum_total / batches : 0.0;
            line["loss_seg"] = batches ? sum_total / batches : 0.0;
            line["lr"] = cfg.lr_segmenter;
            log(line.dump());
        }
    }

    save_checkpoint(out_ckpt, ckpt_config("segmenter", model_cfg, cfg), *model);
    return out_ckpt;
}

namespace {

void check_kind(const Checkpoint& ckpt, const std::string& expected) {
    const auto j = json::parse(ckpt.config_json);
    const auto kind = j.value("kind", std::string("?"));
    if (kind != expected)
        throw std::runtime_error("checkpoint kind \"" + kind + "\" where \"" + expected +
                                 "\" was expected");
}

ModelConfig ckpt_model_config(const Checkpoint& ckpt) {
    const auto j = json::parse(ckpt.config_json);
    return ModelConfig::from_json(j.at("model").dump());
}

}  // namespace

std::filesystem::path joint_train(const TrainConfig& cfg, const ModelConfig& model_cfg,
                                  const fs::path& det_ckpt, const fs::path& seg_ckpt,
                                  const DatasetManifest& manifest, const fs::path& out_ckpt,
                                  const EpochLogger& log, int epochs_override) {
    cfg.validate();
    model_cfg.validate();
    torch::manual_seed(cfg.seed + 2);

    const auto det_c = load_checkpoint(det_ckpt);
    const auto seg_c = load_checkpoint(seg_ckpt);
    check_kind(det_c, "detector");
    check_kind(seg_c, "segmenter");
    if (ckpt_model_config(det_c).to_json() != model_cfg.to_json() ||
        ckpt_model_config(seg_c).to_json() != model_cfg.to_json())
        throw std::runtime_error("joint_train: checkpoint model config does not match");

    auto data = load_train_data(manifest);
    if (data.windows.empty()) throw std::runtime_error("joint_train: empty dataset");

    CosamModel model(model_cfg);
    load_into_module(det_c, *model->detector_);
    load_into_module(seg_c, *model->segmenter_);
    model->train();

    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(model->detector_->parameters(),
                        std::make_unique<torch::optim::AdamOptions>(cfg.lr_detector));
    groups.emplace_back(model->segmenter_->parameters(),
                        std::make_unique<torch::optim::AdamOptions>(cfg.lr_segmenter));
    groups.emplace_back(model->joint_head_->parameters(),
                        std::make_unique<torch::optim::AdamOptions>(cfg.lr_joint_head));
    torch::optim::Adam opt(groups, torch::optim::AdamOptions(cfg.lr_detector));

    const int epochs = epochs_override >= 0 ? epochs_override : cfg.joint_epochs;
    const int L = model_cfg.window_size;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto order = data.windows;
        std::shuffle(order.begin(), order.end(), std::mt19937_64(mix_seed(cfg.seed, 3, epoch)));

        double sum_total = 0, sum_det = 0, sum_seg = 0, sum_joint = 0;
        int64_t batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<WindowSample> samples;
            for (size_t i = start; i < end; ++i) {
                const auto [v, slice] = order[i];
                samples.push_back(make_window_sample(data.volumes[static_cast<size_t>(v)], slice, L,
                                                     cfg, mix_seed(cfg.seed, 2000 + epoch, i), true));
            }

            std::vector<torch::Tensor> imgs;
            for (const auto& s : samples) imgs.push_back(s.image);
            auto batch = torch::stack(imgs, 0);
            const auto h = batch.size(2);
            const auto w = batch.size(3);

            auto det = model->detector_->forward(batch);

            // Detector-side losses (set prediction + stage-1 supervision).
            torch::Tensor loss_det = torch::zeros({});
            for (size_t b = 0; b < samples.size(); ++b) {
                std::vector<Box> gt;
                for (const auto& g : samples[b].gt_anchor) gt.push_back(g.box);
                auto pred_boxes = det.query_boxes[static_cast<int64_t>(b)];
                auto pred_conf = det.query_conf[static_cast<int64_t>(b)];
                auto pb = boxes_of(pred_boxes.detach());
                std::vector<float> pc(pb.size());
                auto conf_cpu = pred_conf.detach().contiguous();
                std::copy_n(conf_cpu.const_data_ptr<float>(), pb.size(), pc.begin());
                const auto match = match_queries(pb, pc, gt, h, w, cfg.weights);
                loss_det = loss_det + detection_loss(pred_boxes, pred_conf, gt, match, h, w, cfg.weights);
                const auto targets = build_stage1_targets(samples[b], model_cfg.backbone_stride,
                                                          det.grid_h, det.grid_w);
                loss_det = loss_det + stage1_loss(det.stage1_obj[static_cast<int64_t>(b)],
                                                  det.stage1_boxes[static_cast<int64_t>(b)], targets, h, w);
            }
            loss_det = loss_det / static_cast<double>(samples.size());

            // Prompt plan: teacher-forced GT boxes plus detached detector
            // boxes. Box coordinates are stopped; collaboration gradients flow
            // through mask tokens and sequence features.
            struct PromptPlan {
                int64_t image;
                Box box;
                int target_comp;
                int sample;
                int query;           // -1 for GT prompts
                int64_t sf_proposal; // proposal index feeding the joint head
                float joint_label;
            };
            std::vector<PromptPlan> plan;
            std::vector<torch::Tensor> anchors;
            auto anchor_rois = det.screened_rois.select(2, L / 2).contiguous();  // (B, M, 4)
            auto roi_acc = anchor_rois.accessor<float, 3>();
            const auto M = anchor_rois.size(1);
            for (size_t b = 0; b < samples.size(); ++b) {
                anchors.push_back(samples[b].image[L / 2]);
                for (size_t k = 0; k < samples[b].gt_anchor.size(); ++k) {
                    // Ground-truth prompts double as clean positives for the
                    // joint head; their sequence features come from the
                    // proposal whose anchor roi overlaps the box most.
                    const Box& gtb = samples[b].gt_anchor[k].box;
                    int64_t best_m = 0;
                    float best_iou = -1.f;
                    for (int64_t m = 0; m < M; ++m) {
                        const Box roi{roi_acc[b][m][0], roi_acc[b][m][1], roi_acc[b][m][2],
                                      roi_acc[b][m][3]};
                        const float v = box_iou(roi, gtb);
                        if (v > best_iou) {
                            best_iou = v;
                            best_m = m;
                        }
                    }
                    plan.push_back(PromptPlan{static_cast<int64_t>(b), gtb, static_cast<int>(k),
                                              static_cast<int>(b), -1, best_m, 1.f});
                }

                DetectionSet dset{det.query_boxes[static_cast<int64_t>(b)].detach(),
                                  det.query_conf[static_cast<int64_t>(b)].detach(),
                                  det.f_det[static_cast<int64_t>(b)].detach()};
                auto selected = select_detections(dset, 0.05f, 0.5f);
                if (selected.size() > 6) selected.resize(6);  // cap the per-window prompt load
                std::vector<Box> gt_boxes;
                for (const auto& g : samples[b].gt_anchor) gt_boxes.push_back(g.box);
                for (const auto& sel : selected) {
                    int target = -1;
                    float best = 0.f;
                    for (size_t k = 0; k < samples[b].gt_anchor.size(); ++k) {
                        const float v = box_iou(sel.box, samples[b].gt_anchor[k].box);
                        if (v > best) {
                            best = v;
                            target = static_cast<int>(k);
                        }
                    }
                    const int label = joint_label_for(sel.box, gt_boxes);
                    plan.push_back(PromptPlan{static_cast<int64_t>(b),
                                              clip_prompt(sel.box, static_cast<float>(w), static_cast<float>(h)),
                                              label ? target : -1, static_cast<int>(b),
                                              sel.query_index, -1, static_cast<float>(label)});
                }
            }

            torch::Tensor loss_seg = torch::zeros({});
            torch::Tensor loss_joint = torch::zeros({});
            if (!plan.empty()) {
                auto emb = model->segmenter_->encode_image_batch(torch::stack(anchors, 0).unsqueeze(1));
                auto boxes_t = torch::empty({static_cast<int64_t>(plan.size()), 4});
                auto bacc = boxes_t.accessor<float, 2>();
                std::vector<int64_t> image_index;
                for (size_t p = 0; p < plan.size(); ++p) {
                    bacc[p][0] = plan[p].box.x1;
                    bacc[p][1] = plan[p].box.y1;
                    bacc[p][2] = plan[p].box.x2;
                    bacc[p][3] = plan[p].box.y2;
                    image_index.push_back(plan[p].image);
                }
                auto [masks, tokens] = model->segmenter_->decode_boxes_batched(
                    emb, boxes_t, torch::tensor(image_index, torch::kLong));

                std::vector<int64_t> seg_rows;
                std::vector<torch::Tensor> seg_targets;
                for (size_t p = 0; p < plan.size(); ++p) {
                    if (plan[p].target_comp < 0) continue;
                    seg_rows.push_back(static_cast<int64_t>(p));
                    seg_targets.push_back(
                        samples[static_cast<size_t>(plan[p].sample)]
                            .gt_comp_masks[static_cast<size_t>(plan[p].target_comp)]);
                }
                if (!seg_rows.empty()) {
                    auto pred = masks.index_select(0, torch::tensor(seg_rows, torch::kLong));
                    auto target = torch::stack(seg_targets, 0).to(torch::kFloat32);
                    loss_seg = segmentation_loss(pred, target, cfg.weights);
                }

                if (cfg.use_ccm) {
                    std::vector<int64_t> joint_rows;
                    std::vector<torch::Tensor> sfs;
                    std::vector<float> labels;
                    for (size_t p = 0; p < plan.size(); ++p) {
                        const auto& pad = samples[static_cast<size_t>(plan[p].sample)].pad;
                        joint_rows.push_back(static_cast<int64_t>(p));
                        if (plan[p].query >= 0)
                            sfs.push_back(model->sf_summary(det, plan[p].image, plan[p].query, pad));
                        else
                            sfs.push_back(model->pool_proposal_features(det, plan[p].image,
                                                                        plan[p].sf_proposal, pad));
                        labels.push_back(plan[p].joint_label);
                    }
                    if (!joint_rows.empty()) {
                        auto t = tokens.index_select(0, torch::tensor(joint_rows, torch::kLong));
                        auto probs = model->joint_head_->forward(t, torch::stack(sfs, 0));
                        auto label_t = torch::tensor(labels, torch::kFloat32);
                        // Positives are scarce among detector candidates;
                        // balance the BCE so the keep gate calibrates.
                        const double n_pos = label_t.sum().item<double>();
                        const double n_neg = static_cast<double>(labels.size()) - n_pos;
                        const double pos_w = n_pos > 0 ? std::clamp(n_neg / n_pos, 1.0, 4.0) : 1.0;
                        auto weight = torch::where(label_t > 0.5f, torch::full({1}, pos_w),
                                                   torch::ones({1}));
                        auto bce = torch::binary_cross_entropy(probs.clamp(1e-6, 1.0 - 1e-6),
                                                               label_t, {}, torch::Reduction::None);
                        loss_joint = (bce * weight).sum() / weight.sum();
                    }
                }
            }

            auto total = loss_det + loss_seg + cfg.weights.joint * loss_joint;
            opt.zero_grad();
            total.backward();
            opt.step();

            sum_total += scalar(total);
            sum_det += scalar(loss_det);
            sum_seg += scalar(loss_seg);
            sum_joint += scalar(loss_joint);
            ++batches;
        }

        if (log) {
            json line;
            line["epoch"] = epoch;
            line["phase"] = "joint";
            line["loss_total"] = sum_total / batches;
            line["loss_det"] = sum_det / batches;
            line["loss_seg"] = sum_seg / batches;
            line["loss_joint"] = sum_joint / batches;
            line["lr_detector"] = cfg.lr_detector;
            line["lr_segmenter"] = cfg.lr_segmenter;
            line["lr_joint_head"] = cfg.lr_joint_head;
            log(line.dump());
        }
    }

    save_checkpoint(out_ckpt, ckpt_config("cosam", model_cfg, cfg), *model);
    return out_ckpt;
}

CosamModel model_from_checkpoint(const fs::path& ckpt_path) {
    const auto ckpt = load_checkpoint(ckpt_path);
    check_kind(ckpt, "cosam");
    CosamModel model(ckpt_model_config(ckpt));
    load_into_module(ckpt, *model);
    model->eval();
    return model;
}

CosamModel compose_model(const fs::path& det_ckpt, const fs::path& seg_ckpt) {
    const auto det_c = load_checkpoint(det_ckpt);
    const auto seg_c = load_checkpoint(seg_ckpt);
    check_kind(det_c, "detector");
    check_kind(seg_c, "segmenter");
    const auto cfg = ckpt_model_config(det_c);
    if (ckpt_model_config(seg_c).to_json() != cfg.to_json())
        throw std::runtime_error("compose_model: detector and segmenter configs differ");
    CosamModel model(cfg);
    load_into_module(det_c, *model->detector_);
    load_into_module(seg_c, *model->segmenter_);
    model->eval();
    return model;
}

WindowPredictor make_window_predictor(CosamModel model, const ForwardOptions& opts) {
    return [model, opts](const SliceSequence& window, const LoadedVolume&) mutable {
        torch::NoGradGuard guard;
        model->eval();
        auto result = model->forward_window(window, opts);
        WindowPrediction pred;
        pred.mask = result.segmentation.mask;
        for (const auto& [box, score] : result.detections)
            pred.detections.emplace_back(box, static_cast<double>(score));
        return pred;
    };
}

}  // namespace cosam
