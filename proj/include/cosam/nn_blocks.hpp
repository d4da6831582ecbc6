#pragma once

#include <torch/torch.h>

#include <utility>

namespace cosam {

/// Multi-head attention over (B, N, D) tensors. Hand-rolled so the averaged
/// attention weights are available to callers (the decoder's routing needs
/// them) and so no positional information sneaks in beyond what the caller
/// adds to the inputs.
struct MultiheadAttentionImpl : torch::nn::Module {
    MultiheadAttentionImpl(int dim, int heads)
        : dim_(dim),
          heads_(heads),
          q_proj_(register_module("q_proj", torch::nn::Linear(dim, dim))),
          k_proj_(register_module("k_proj", torch::nn::Linear(dim, dim))),
          v_proj_(register_module("v_proj", torch::nn::Linear(dim, dim))),
          out_proj_(register_module("out_proj", torch::nn::Linear(dim, dim))) {
        TORCH_CHECK(dim % heads == 0, "attention dim must divide heads");
    }

    /// query (B, Nq, D), key/value (B, Nk, D).
    /// Returns (output (B, Nq, D), head-averaged weights (B, Nq, Nk)).
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& query,
                                                    const torch::Tensor& key,
                                                    const torch::Tensor& value) {
        const auto B = query.size(0);
        const auto Nq = query.size(1);
        const auto Nk = key.size(1);
        const auto dh = dim_ / heads_;

        auto q = q_proj_(query).view({B, Nq, heads_, dh}).transpose(1, 2);
        auto k = k_proj_(key).view({B, Nk, heads_, dh}).transpose(1, 2);
        auto v = v_proj_(value).view({B, Nk, heads_, dh}).transpose(1, 2);

        auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(dh)),
                                   /*dim=*/-1);                        // (B,h,Nq,Nk)
        auto out = torch::matmul(attn, v).transpose(1, 2).reshape({B, Nq, dim_});
        return {out_proj_(out), attn.mean(1)};
    }

    int dim_;
    int heads_;
    torch::nn::Linear q_proj_{nullptr}, k_proj_{nullptr}, v_proj_{nullptr}, out_proj_{nullptr};
};
TORCH_MODULE(MultiheadAttention);

struct FeedForwardImpl : torch::nn::Module {
    FeedForwardImpl(int dim, int hidden)
        : fc1_(register_module("fc1", torch::nn::Linear(dim, hidden))),
          fc2_(register_module("fc2", torch::nn::Linear(hidden, dim))) {}

    torch::Tensor forward(const torch::Tensor& x) { return fc2_(torch::relu(fc1_(x))); }

    torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(FeedForward);

/// Pre-norm transformer encoder layer (self-attention within a sequence).
struct EncoderLayerImpl : torch::nn::Module {
    EncoderLayerImpl(int dim, int heads)
        : attn_(register_module("attn", MultiheadAttention(dim, heads))),
          ffn_(register_module("ffn", FeedForward(dim, dim * 4))),
          norm1_(register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})))),
          norm2_(register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})))) {}

    torch::Tensor forward(torch::Tensor x) {
        auto n = norm1_(x);
        x = x + attn_->forward(n, n, n).first;
        x = x + ffn_(norm2_(x));
        return x;
    }

    MultiheadAttention attn_{nullptr};
    FeedForward ffn_{nullptr};
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
};
TORCH_MODULE(EncoderLayer);

/// Pre-norm decoder layer: query self-attention then cross-attention over a
/// memory sequence. Exposes the cross-attention weights of the call.
struct DecoderLayerImpl : torch::nn::Module {
    DecoderLayerImpl(int dim, int heads)
        : self_attn_(register_module("self_attn", MultiheadAttention(dim, heads))),
          cross_attn_(register_module("cross_attn", MultiheadAttention(dim, heads))),
          ffn_(register_module("ffn", FeedForward(dim, dim * 4))),
          norm1_(register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})))),
          norm2_(register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})))),
          norm3_(register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})))) {}

    std::pair<torch::Tensor, torch::Tensor> forward(torch::Tensor q, const torch::Tensor& memory) {
        auto n = norm1_(q);
        q = q + self_attn_->forward(n, n, n).first;
        auto [cross, weights] = cross_attn_->forward(norm2_(q), memory, memory);
        q = q + cross;
        q = q + ffn_(norm3_(q));
        return {q, weights};
    }

    MultiheadAttention self_attn_{nullptr}, cross_attn_{nullptr};
    FeedForward ffn_{nullptr};
    torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, norm3_{nullptr};
};
TORCH_MODULE(DecoderLayer);

/// Small MLP head: Linear-ReLU blocks ending in a plain Linear.
struct MlpImpl : torch::nn::Module {
    MlpImpl(int in, int hidden, int out, int layers = 2) {
        int d = in;
        for (int i = 0; i < layers - 1; ++i) {
            fcs_.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(d, hidden)));
            d = hidden;
        }
        fcs_.push_back(register_module("fc" + std::to_string(layers - 1), torch::nn::Linear(d, out)));
    }

    torch::Tensor forward(torch::Tensor x) {
        for (size_t i = 0; i + 1 < fcs_.size(); ++i) x = torch::relu(fcs_[i](x));
        return fcs_.back()(x);
    }

    std::vector<torch::nn::Linear> fcs_;
};
TORCH_MODULE(Mlp);

}  // namespace cosam
