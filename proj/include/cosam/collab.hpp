#pragma once

#include <torch/torch.h>

#include <vector>

#include "cosam/config.hpp"
#include "cosam/detector.hpp"
#include "cosam/segmenter.hpp"
#include "cosam/volume.hpp"

namespace cosam {

/// Mask token + pooled sequence features of one detection candidate, the
/// joint classification head's input.
struct JointCandidate {
    torch::Tensor token;  // (D_s,)
    torch::Tensor sf;     // (D,) mean over non-padded frames of the routed proposal
    float confidence = 0.f;
    Box box;
};

struct SliceSegmentation {
    torch::Tensor mask;  // (H, W) uint8 in {0,1}
    std::vector<int> contributing;  // query indices of merged candidates
};

/// MLP over concat(t_i, sf_i) -> keep probability.
struct JointHeadImpl : torch::nn::Module {
    explicit JointHeadImpl(const ModelConfig& cfg);

    torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& sfs);  // (K,) probs
    torch::Tensor joint_classify(const JointCandidate& c);                         // scalar prob

    Mlp mlp_{nullptr};
    int expected_in_ = 0;
};
TORCH_MODULE(JointHead);

/// Drop candidates with keep probability below the threshold. Survivors carry
/// final score = detector confidence x keep probability.
struct SuppressedCandidate {
    size_t index;        // into the input list
    float final_score;
};
std::vector<SuppressedCandidate> suppress(const std::vector<JointCandidate>& candidates,
                                          const std::vector<float>& keep_probs,
                                          float keep_threshold);

/// Pixelwise maximum of the probability masks, then threshold. Empty input
/// yields an all-zero mask of the given extents.
SliceSegmentation merge_partial_masks(const std::vector<PartialMaskResult>& results,
                                      float binarize_threshold, int64_t slice_h, int64_t slice_w);

struct ForwardOptions {
    float conf_threshold = 0.5f;      // detector confidence gate for mask merging
    float keep_threshold = 0.5f;      // joint head gate
    float binarize_threshold = 0.5f;
    float nms_iou = 0.5f;
    float emit_floor = 0.5f;          // lowest confidence still emitted as a detection
    bool use_ccm = true;              // collaborative classification module on/off
};

struct ForwardResult {
    SliceSegmentation segmentation;
    std::vector<std::pair<Box, float>> detections;  // (box, final score)
    // Diagnostics for training and tests:
    std::vector<PartialMaskResult> partial_masks;
    std::vector<JointCandidate> candidates;
    std::vector<float> keep_probs;
};

/// The full collaborative model: sequence detector, prompt segmenter, joint
/// classification head.
struct CosamModelImpl : torch::nn::Module {
    explicit CosamModelImpl(const ModelConfig& cfg);

    /// detector -> select_detections -> segment anchor slice -> joint
    /// classify / suppress -> merge surviving masks. Candidates whose
    /// binarized mask is empty inside their own box are deleted entirely
    /// (detections stay consistent with the segmentation).
    ForwardResult forward_window(const SliceSequence& window, const ForwardOptions& opts = {});

    /// Pools the routed proposal's encoded sequence features over non-padded
    /// frames for one query.
    torch::Tensor sf_summary(const DetectorBatchOutput& det, int64_t batch_index, int query,
                             const std::vector<bool>& pad_mask);

    /// The same pooling for an explicit proposal index.
    torch::Tensor pool_proposal_features(const DetectorBatchOutput& det, int64_t batch_index,
                                         int64_t proposal, const std::vector<bool>& pad_mask);

    ModelConfig cfg_;
    Detector detector_{nullptr};
    Segmenter segmenter_{nullptr};
    JointHead joint_head_{nullptr};
};
TORCH_MODULE(CosamModel);

}  // namespace cosam
