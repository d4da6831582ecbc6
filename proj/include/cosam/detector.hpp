#pragma once

#include <torch/torch.h>

#include <vector>

#include "cosam/config.hpp"
#include "cosam/geometry.hpp"
#include "cosam/nn_blocks.hpp"
#include "cosam/volume.hpp"

namespace cosam {

/// A columnar stack of per-slice 2-D RoIs tracking one putative target
/// through the window, with its stage-1 objectness score.
struct SequenceProposal {
    std::vector<Box> rois;    // one per frame, length window_size
    float stage1_score = 0.f;
    int column_id = 0;
};

/// Decoded query outputs on the anchor slice.
struct DetectionSet {
    torch::Tensor boxes;             // (N_q, 4) pixel coords, x1<x2, y1<y2
    torch::Tensor confidences;       // (N_q,) in [0,1]
    torch::Tensor objective_tokens;  // (N_q, D)
};

/// Shared-weight per-frame feature extractor.
struct BackboneImpl : torch::nn::Module {
    explicit BackboneImpl(const ModelConfig& cfg);

    /// (B, 1, H, W) -> (B, D, H/stride, W/stride)
    torch::Tensor forward(const torch::Tensor& frames);

    torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(Backbone);

/// Everything the training loop and the collaborative unit need from one
/// batched detector pass. Per-window structures index the batch dimension.
struct DetectorBatchOutput {
    torch::Tensor query_boxes;    // (B, N_q, 4) pixels, differentiable
    torch::Tensor query_conf;     // (B, N_q) in [0,1], differentiable
    torch::Tensor f_det;          // (B, N_q, D) objective tokens
    torch::Tensor sf_encoded;     // (B, M, L, D) encoded sequence features
    torch::Tensor routing;        // (B, N_q) long: proposal index per query
    torch::Tensor stage1_obj;     // (B, G) objectness logits (G grid cells)
    torch::Tensor stage1_boxes;   // (B, G, L, 4) per-frame boxes, pixels
    torch::Tensor screened_cols;  // (B, M) long column ids
    torch::Tensor screened_rois;  // (B, M, L, 4) pixels (detached)
    int grid_h = 0, grid_w = 0;
};

struct DetectorImpl : torch::nn::Module {
    explicit DetectorImpl(const ModelConfig& cfg);

    /// windows: (B, L, H, W) normalized slices. H and W must be divisible by
    /// the backbone stride.
    DetectorBatchOutput forward(const torch::Tensor& windows);

    /// Single-window helpers mirroring the pipeline stages; all of them are
    /// thin views over the batched path.
    std::vector<torch::Tensor> backbone_features(const SliceSequence& seq);
    std::vector<SequenceProposal> generate_sequence_proposals(
        const std::vector<torch::Tensor>& frame_features);
    torch::Tensor roi_pool(const torch::Tensor& feature_map, const Box& roi);
    torch::Tensor build_sequence_features(const std::vector<SequenceProposal>& screened,
                                          const std::vector<torch::Tensor>& frame_features);
    torch::Tensor encode_sequences(const torch::Tensor& sf);
    std::pair<torch::Tensor, torch::Tensor> decode_queries(const torch::Tensor& sf_prime);

    /// Decode each objective token into a box by refining a reference box
    /// (the routed proposal's anchor-frame roi in the full pipeline; the whole
    /// slice when refs is left undefined).
    DetectionSet predict_boxes(const torch::Tensor& f_det, int64_t slice_h, int64_t slice_w,
                               const torch::Tensor& refs = {});

    DetectionSet run(const SliceSequence& seq);

    static constexpr int kRoiPosDim = 64;

    ModelConfig cfg_;
    Backbone backbone_{nullptr};
    torch::nn::Conv2d proposal_head_{nullptr};
    torch::Tensor roi_fourier_;  // (4, kRoiPosDim/2) fixed coordinate basis
    torch::nn::Linear roi_proj_{nullptr};
    torch::Tensor seq_pos_embed_;  // (L, D), learned, sequence axis only
    std::vector<EncoderLayer> encoder_layers_;
    std::vector<DecoderLayer> decoder_layers_;
    torch::Tensor queries_;        // (N_q, D) learnable
    torch::nn::LayerNorm decoder_norm_{nullptr};
    Mlp box_head_{nullptr};
    torch::nn::Linear conf_head_{nullptr};

private:
    // Internals of the batched path, split for readability.
    std::pair<torch::Tensor, torch::Tensor> stage1_predict(const torch::Tensor& feats,
                                                           int64_t img_h, int64_t img_w);
    torch::Tensor pool_screened(const torch::Tensor& feats, const torch::Tensor& rois);
    torch::Tensor decode_boxes(const torch::Tensor& f_det, const torch::Tensor& refs,
                               int64_t img_h, int64_t img_w);
};
TORCH_MODULE(Detector);

/// Retain the min(top_m, N) highest-scoring proposals, ordered by score
/// descending then column_id ascending.
std::vector<SequenceProposal> screen_proposals(std::vector<SequenceProposal> proposals, int top_m);

struct SelectedDetection {
    Box box;
    float confidence = 0.f;
    int query_index = 0;
};

/// Confidence filter followed by greedy NMS; result sorted by confidence.
std::vector<SelectedDetection> select_detections(const DetectionSet& dets, float conf_threshold,
                                                 float nms_iou);

}  // namespace cosam
