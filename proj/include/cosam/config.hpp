#pragma once

#include <cstdint>
#include <string>

namespace cosam {

/// Architecture hyperparameters shared by the detector, segmenter, and
/// collaborative head. Toy-scale defaults; everything is config-exposed.
struct ModelConfig {
    int window_size = 9;
    int feat_dim = 64;          // D: sequence feature width
    int n_queries = 16;         // learnable queries
    int top_m = 64;             // proposals kept after screening
    int backbone_stride = 4;
    int roi_pool_size = 3;      // P: RoI pooling output is P x P
    int encoder_layers = 2;
    int decoder_layers = 2;
    int n_heads = 4;
    double proposal_base_scale = 3.0;  // column base box side, in strides

    int seg_dim = 64;           // D_s: segmenter embedding width
    int seg_down_stages = 3;    // U-shaped encoder depth (stride 2^stages)
    int joint_hidden = 64;      // joint classification head hidden width

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& json_text);
};

}  // namespace cosam
