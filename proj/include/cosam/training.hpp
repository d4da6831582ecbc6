#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cosam/collab.hpp"
#include "cosam/config.hpp"
#include "cosam/geometry.hpp"
#include "cosam/metrics.hpp"
#include "cosam/volume.hpp"

namespace cosam {

struct LossWeights {
    double cls = 1.0;
    double box = 5.0;
    double giou = 2.0;
    double mask_dice = 1.0;
    double mask_bce = 1.0;
    double joint = 1.0;
};

struct TrainConfig {
    int pretrain_epochs_det = 100;
    int pretrain_epochs_seg = 100;
    int joint_epochs = 100;
    double lr_detector = 1e-4;
    double lr_segmenter = 1e-4;
    double lr_joint_head = 1e-3;
    int batch_size = 8;
    uint64_t seed = 0;
    LossWeights weights;
    bool aug_flip = true;
    bool aug_crop = true;
    bool aug_contrast = true;
    bool use_ccm = true;  // train the collaborative classification module

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& json_text);
};

// ---- set-prediction matching ----------------------------------------------

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (query_index, gt_index)
    std::vector<int> unmatched_queries;
};

/// Minimum-cost one-to-one assignment between queries and ground-truth boxes,
/// cost = cls*(1-conf) + box*L1(normalized) + giou*(1-GIoU). Deterministic.
MatchResult match_queries(const std::vector<Box>& pred_boxes, const std::vector<float>& pred_conf,
                          const std::vector<Box>& gt_boxes, int64_t slice_h, int64_t slice_w,
                          const LossWeights& weights = {});

// ---- losses ----------------------------------------------------------------

/// Differentiable GIoU between row-aligned (K,4) box tensors.
torch::Tensor giou_tensor(const torch::Tensor& a, const torch::Tensor& b);

/// DETR-style: matched pairs get L1 + (1-GIoU) + BCE(conf, 1); unmatched
/// queries get BCE(conf, 0).
torch::Tensor detection_loss(const torch::Tensor& pred_boxes, const torch::Tensor& pred_conf,
                             const std::vector<Box>& gt_boxes, const MatchResult& match,
                             int64_t slice_h, int64_t slice_w, const LossWeights& weights = {});

/// mask_dice * soft-Dice + mask_bce * BCE over probability masks.
torch::Tensor segmentation_loss(const torch::Tensor& pred_mask_prob, const torch::Tensor& gt_mask,
                                const LossWeights& weights = {});

/// BCE over candidate keep probabilities; labels in {0,1}.
torch::Tensor joint_classification_loss(const torch::Tensor& keep_probs, const torch::Tensor& labels);

/// Candidate target rule: positive iff box IoU with any ground-truth box >= 0.5.
int joint_label_for(const Box& candidate, const std::vector<Box>& gt_boxes);

// ---- augmentation -----------------------------------------------------------

struct AugmentOptions {
    bool flip = true;
    bool crop = true;
    bool contrast = true;
    double crop_fraction = 0.875;  // crop side relative to the input
};

struct AugmentParams {
    bool flip_h = false;
    bool flip_v = false;
    int crop_y = 0, crop_x = 0;
    int64_t crop_h = 0, crop_w = 0;  // 0 means no crop
    float gain = 1.f;
};

AugmentParams sample_augment(const AugmentOptions& opts, int64_t h, int64_t w, uint64_t seed);
torch::Tensor apply_augment_image(const torch::Tensor& image, const AugmentParams& p);
torch::Tensor apply_augment_label(const torch::Tensor& label, const AugmentParams& p);

/// The same geometric transform on image and label; contrast on the image only.
std::pair<torch::Tensor, torch::Tensor> augment(const torch::Tensor& image,
                                                const torch::Tensor& label, uint64_t seed,
                                                const AugmentOptions& opts = {});

// ---- training ---------------------------------------------------------------

/// Train-split volumes held in memory plus the (volume, anchor slice) index.
struct TrainData {
    std::vector<LoadedVolume> volumes;
    std::vector<std::pair<int, int>> windows;  // (volume index, anchor slice)
};

/// COSAM_NUM_WORKERS caps the number of concurrent volume loads.
TrainData load_train_data(const DatasetManifest& manifest, const std::string& split = "train");

/// Per-epoch entries: {"epoch", "phase", "loss_total", components..., "lr"}.
/// Lines are timestamp-free so identical runs produce identical logs.
using EpochLogger = std::function<void(const std::string& json_line)>;

std::filesystem::path pretrain_detector(const TrainConfig& cfg, const ModelConfig& model_cfg,
                                        const DatasetManifest& manifest,
                                        const std::filesystem::path& out_ckpt,
                                        const EpochLogger& log, int epochs_override = -1);

std::filesystem::path pretrain_segmenter(const TrainConfig& cfg, const ModelConfig& model_cfg,
                                         const DatasetManifest& manifest,
                                         const std::filesystem::path& out_ckpt,
                                         const EpochLogger& log, int epochs_override = -1);

std::filesystem::path joint_train(const TrainConfig& cfg, const ModelConfig& model_cfg,
                                  const std::filesystem::path& det_ckpt,
                                  const std::filesystem::path& seg_ckpt,
                                  const DatasetManifest& manifest,
                                  const std::filesystem::path& out_ckpt, const EpochLogger& log,
                                  int epochs_override = -1);

/// Builds a CosamModel from a joint checkpoint, or composes one from separate
/// detector/segmenter checkpoints (joint head left at init).
CosamModel model_from_checkpoint(const std::filesystem::path& ckpt_path);
CosamModel compose_model(const std::filesystem::path& det_ckpt, const std::filesystem::path& seg_ckpt);

/// Wraps a model as an evaluation predictor (no-grad, eval mode).
WindowPredictor make_window_predictor(CosamModel model, const ForwardOptions& opts);

}  // namespace cosam
