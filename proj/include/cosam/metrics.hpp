#pragma once

#include <torch/torch.h>

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cosam/geometry.hpp"
#include "cosam/volume.hpp"

namespace cosam {

/// One detection emitted during evaluation.
struct EvalDetection {
    std::string volume_id;
    int slice_index = 0;
    Box box;
    double score = 0.0;
};

struct EvalGtBox {
    std::string volume_id;
    int slice_index = 0;
    Box box;
};

/// 2|P∩G| / (|P|+|G|); both empty -> 1.0.
double dice(const torch::Tensor& pred, const torch::Tensor& gt);

/// |P∩G| / |P∪G|; both empty -> 1.0.
double iou(const torch::Tensor& pred, const torch::Tensor& gt);

/// Average precision at box-IoU 0.5: sort by score descending, greedy match to
/// unmatched ground truth, all-points interpolation (area under the exact
/// precision envelope staircase). No GT and no predictions -> 1.0; no GT with
/// predictions -> 0.0.
double ap50(std::vector<EvalDetection> predictions, const std::vector<EvalGtBox>& ground_truth,
            double iou_threshold = 0.5);

/// The same computation, also returning the PR staircase for plotting:
/// points are (recall, precision) after each prediction in score order.
struct PrCurve {
    std::vector<std::pair<double, double>> points;
    double ap = 0.0;
};
PrCurve ap50_curve(std::vector<EvalDetection> predictions, const std::vector<EvalGtBox>& ground_truth,
                   double iou_threshold = 0.5);

struct VolumeScores {
    double dice = 0.0;
    double iou = 0.0;
    int64_t slices = 0;
};

struct EvalReport {
    double dice = 0.0;   // micro-averaged over summed pixel counts
    double iou = 0.0;
    double ap50 = 0.0;
    double dice_macro = 0.0;  // mean of per-volume dice
    double iou_macro = 0.0;
    std::map<std::string, VolumeScores> per_volume;
    std::vector<std::pair<double, double>> pr_curve;
    std::vector<double> dice_per_slice;
    std::string config_fingerprint;

    std::string to_json() const;
};

/// Prediction for one window: anchor-slice binary mask + scored boxes.
struct WindowPrediction {
    torch::Tensor mask;  // (H,W) uint8
    std::vector<std::pair<Box, double>> detections;
};

using WindowPredictor = std::function<WindowPrediction(const SliceSequence&, const LoadedVolume&)>;

/// Runs the predictor over every anchor slice inside each test volume's
/// roi_slab and aggregates Dice/IoU (micro and macro) plus AP50. Deterministic:
/// volumes in manifest order, slices in ascending order.
EvalReport evaluate(const WindowPredictor& predict, const DatasetManifest& manifest,
                    const std::string& split, int window_size,
                    const std::string& config_fingerprint = "");

}  // namespace cosam
