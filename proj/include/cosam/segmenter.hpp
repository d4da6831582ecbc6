#pragma once

#include <torch/torch.h>

#include <vector>

#include "cosam/config.hpp"
#include "cosam/geometry.hpp"
#include "cosam/nn_blocks.hpp"

namespace cosam {

/// Bottleneck features plus the skip pyramid of the U-shaped encoder.
/// skips[i] sits at resolution H/2^i (i = 0 is full resolution).
struct ImageEmbedding {
    torch::Tensor bottleneck;          // (B, D_s, H/2^S, W/2^S)
    std::vector<torch::Tensor> skips;  // S entries, fine to coarse
};

struct PartialMaskResult {
    torch::Tensor mask;   // (H, W) probabilities in [0,1]
    torch::Tensor token;  // (D_s,) post-attention mask token state
    Box source_box;
    int query_index = 0;
};

/// Box prompt encoder: the two corners go through a fixed random-Fourier
/// positional encoding plus learned corner-type embeddings.
struct PromptEncoderImpl : torch::nn::Module {
    explicit PromptEncoderImpl(const ModelConfig& cfg);

    /// (K, 4) pixel boxes -> (K, 2, D_s). Corners are canonicalized first.
    torch::Tensor encode_boxes(const torch::Tensor& boxes, int64_t slice_h, int64_t slice_w);
    torch::Tensor encode_box(const Box& box, int64_t slice_h, int64_t slice_w);

    /// Fourier positional embedding for a feature grid, (h*w, D_s).
    torch::Tensor encode_grid(int64_t h, int64_t w);

    torch::Tensor fourier_w_;     // buffer (2, D_s/2)
    torch::Tensor corner_embed_;  // parameter (2, D_s)
    int dim_;
};
TORCH_MODULE(PromptEncoder);

struct ImageEncoderImpl : torch::nn::Module {
    explicit ImageEncoderImpl(const ModelConfig& cfg);

    /// (B, 1, H, W) -> bottleneck + skip pyramid. H and W must be divisible
    /// by 2^seg_down_stages.
    ImageEmbedding forward(const torch::Tensor& slices);

    std::vector<torch::nn::Sequential> stages_;
    int down_stages_;
};
TORCH_MODULE(ImageEncoder);

struct MaskDecoderImpl : torch::nn::Module {
    MaskDecoderImpl(const ModelConfig& cfg, PromptEncoder prompt_encoder);

    /// Batched decode: prompts (P, 2, D_s) against the image embedding rows
    /// selected by image_index (P,). Returns (masks (P,H,W) probs, tokens (P,D_s)).
    std::pair<torch::Tensor, torch::Tensor> forward(const ImageEmbedding& emb,
                                                    const torch::Tensor& prompts,
                                                    const torch::Tensor& image_index);

    struct TwoWayBlock {
        MultiheadAttention token_self{nullptr}, token_to_image{nullptr}, image_to_token{nullptr};
        FeedForward ffn{nullptr};
        torch::nn::LayerNorm n1{nullptr}, n2{nullptr}, n4{nullptr};
    };

    PromptEncoder prompt_encoder_;  // shared for the grid positional encoding
    torch::Tensor mask_token_;      // (1, D_s)
    std::vector<TwoWayBlock> blocks_;
    std::vector<torch::nn::Sequential> up_;   // upsampling path, coarse to fine
    torch::nn::Conv2d pixel_embed_{nullptr};  // final per-pixel embedding
    Mlp token_head_{nullptr};
    torch::Tensor mask_bias_;
    int dim_;
};
TORCH_MODULE(MaskDecoder);

/// The prompt-based segmentation network: U-shaped image encoder, box prompt
/// encoder, and a two-way attention mask decoder emitting one mask and one
/// mask token per prompt.
struct SegmenterImpl : torch::nn::Module {
    explicit SegmenterImpl(const ModelConfig& cfg);

    ImageEmbedding encode_image(const torch::Tensor& slice);          // (H, W)
    ImageEmbedding encode_image_batch(const torch::Tensor& slices);   // (B, 1, H, W)

    PartialMaskResult decode_mask(const ImageEmbedding& emb, const Box& box);

    /// One result per box, input order preserved; K = 0 yields an empty list.
    std::vector<PartialMaskResult> segment_candidates(const torch::Tensor& slice,
                                                      const std::vector<Box>& boxes);

    /// Batched path used by training: boxes (P, 4), image_index (P,) selecting
    /// rows of a batched embedding. Returns (masks (P,H,W), tokens (P,D_s)).
    std::pair<torch::Tensor, torch::Tensor> decode_boxes_batched(const ImageEmbedding& emb,
                                                                 const torch::Tensor& boxes,
                                                                 const torch::Tensor& image_index);

    ModelConfig cfg_;
    PromptEncoder prompt_encoder_{nullptr};
    ImageEncoder image_encoder_{nullptr};
    MaskDecoder mask_decoder_{nullptr};
};
TORCH_MODULE(Segmenter);

}  // namespace cosam
