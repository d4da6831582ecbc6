#include "cosam/segmenter.hpp"

#include <cmath>
#include <stdexcept>

namespace cosam {

namespace {
constexpr double kTwoPi = 6.283185307179586;

int stage_channels(int level, int seg_dim) {
    // 32, 48, 64, ... capped at the segmenter width.
    return std::min(seg_dim, 32 + 16 * level);
}
}  // namespace

PromptEncoderImpl::PromptEncoderImpl(const ModelConfig& cfg) : dim_(cfg.seg_dim) {
    fourier_w_ = register_buffer("fourier_w", torch::randn({2, cfg.seg_dim / 2}));
    corner_embed_ = register_parameter("corner_embed", torch::randn({2, cfg.seg_dim}) * 0.02);
}

torch::Tensor PromptEncoderImpl::encode_boxes(const torch::Tensor& boxes, int64_t slice_h,
                                              int64_t slice_w) {
    TORCH_CHECK(boxes.dim() == 2 && boxes.size(1) == 4, "encode_boxes expects (K, 4)");
    auto b = boxes.to(torch::kFloat32);
    auto x1 = torch::min(b.select(1, 0), b.select(1, 2));
    auto x2 = torch::max(b.select(1, 0), b.select(1, 2));
    auto y1 = torch::min(b.select(1, 1), b.select(1, 3));
    auto y2 = torch::max(b.select(1, 1), b.select(1, 3));

    auto corners = torch::stack({torch::stack({x1, y1}, -1), torch::stack({x2, y2}, -1)}, 1);  // (K,2,2)
    auto scale = torch::tensor({static_cast<float>(slice_w), static_cast<float>(slice_h)});
    auto p = corners / scale * 2.0 - 1.0;                      // [-1,1]
    auto f = torch::matmul(p, fourier_w_) * kTwoPi;            // (K,2,D_s/2)
    auto emb = torch::cat({torch::sin(f), torch::cos(f)}, -1); // (K,2,D_s)
    return emb + corner_embed_.unsqueeze(0);
}

torch::Tensor PromptEncoderImpl::encode_box(const Box& box, int64_t slice_h, int64_t slice_w) {
    if (!box.valid())
        throw std::invalid_argument("encode_box: degenerate box");
    if (box.x1 < 0 || box.y1 < 0 || box.x2 > static_cast<float>(slice_w) ||
        box.y2 > static_cast<float>(slice_h))
        throw std::invalid_argument("encode_box: box outside slice extents");
    auto t = torch::tensor({box.x1, box.y1, box.x2, box.y2}).view({1, 4});
    return encode_boxes(t, slice_h, slice_w).squeeze(0);
}

torch::Tensor PromptEncoderImpl::encode_grid(int64_t h, int64_t w) {
    auto ys = (torch::arange(h, torch::kFloat32) + 0.5) / static_cast<double>(h);
    auto xs = (torch::arange(w, torch::kFloat32) + 0.5) / static_cast<double>(w);
    auto grid_y = ys.view({h, 1}).expand({h, w});
    auto grid_x = xs.view({1, w}).expand({h, w});
    auto p = torch::stack({grid_x, grid_y}, -1).reshape({h * w, 2}) * 2.0 - 1.0;
    auto f = torch::matmul(p, fourier_w_) * kTwoPi;
    return torch::cat({torch::sin(f), torch::cos(f)}, -1);  // (h*w, D_s)
}

ImageEncoderImpl::ImageEncoderImpl(const ModelConfig& cfg) : down_stages_(cfg.seg_down_stages) {
    using namespace torch::nn;
    auto block = [](int in, int out, int stride) {
        return Sequential(Conv2d(Conv2dOptions(in, out, 3).stride(stride).padding(1)),
                          GroupNorm(GroupNormOptions(8, out)), ReLU(),
                          Conv2d(Conv2dOptions(out, out, 3).padding(1)),
                          GroupNorm(GroupNormOptions(8, out)), ReLU());
    };
    int ch = 1;
    for (int lvl = 0; lvl <= down_stages_; ++lvl) {
        const int out = lvl == down_stages_ ? cfg.seg_dim : stage_channels(lvl, cfg.seg_dim);
        auto stage = block(ch, out, lvl == 0 ? 1 : 2);
        stages_.push_back(register_module("stage" + std::to_string(lvl), stage));
        ch = out;
    }
}

ImageEmbedding ImageEncoderImpl::forward(const torch::Tensor& slices) {
    TORCH_CHECK(slices.dim() == 4 && slices.size(1) == 1, "image encoder expects (B,1,H,W)");
    const int64_t div = 1 << down_stages_;
    if (slices.size(2) % div != 0 || slices.size(3) % div != 0)
        throw std::invalid_argument("encode_image: extents not divisible by the total stride");

    ImageEmbedding emb;
    auto x = slices.to(torch::kFloat32);
    for (int lvl = 0; lvl <= down_stages_; ++lvl) {
        x = stages_[static_cast<size_t>(lvl)]->forward(x);
        if (lvl < down_stages_)
            emb.skips.push_back(x);
        else
            emb.bottleneck = x;
    }
    return emb;
}

MaskDecoderImpl::MaskDecoderImpl(const ModelConfig& cfg, PromptEncoder prompt_encoder)
    : prompt_encoder_(std::move(prompt_encoder)), dim_(cfg.seg_dim) {
    register_module("prompt_encoder_ref", prompt_encoder_);
    mask_token_ = register_parameter("mask_token", torch::randn({1, dim_}) * 0.02);

    const int heads = cfg.n_heads;
    for (int i = 0; i < 2; ++i) {
        TwoWayBlock b;
        const auto tag = std::to_string(i);
        b.token_self = register_module("tw_self_" + tag, MultiheadAttention(dim_, heads));
        b.token_to_image = register_module("tw_t2i_" + tag, MultiheadAttention(dim_, heads));
        b.image_to_token = register_module("tw_i2t_" + tag, MultiheadAttention(dim_, heads));
        b.ffn = register_module("tw_ffn_" + tag, FeedForward(dim_, dim_ * 2));
        b.n1 = register_module("tw_n1_" + tag, torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim_})));
        b.n2 = register_module("tw_n2_" + tag, torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim_})));
        b.n4 = register_module("tw_n4_" + tag, torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim_})));
        blocks_.push_back(std::move(b));
    }

    using namespace torch::nn;
    int ch = dim_;
    for (int lvl = cfg.seg_down_stages - 1; lvl >= 0; --lvl) {
        // Decoder runs once per prompt; half-width channels keep it cheap.
        const int out = std::max(16, stage_channels(lvl, cfg.seg_dim) / 2);
        auto up = Sequential(
            ConvTranspose2d(ConvTranspose2dOptions(ch, out, 2).stride(2)),
            GroupNorm(GroupNormOptions(8, out)), ReLU());
        up_.push_back(register_module("up_" + std::to_string(lvl), up));
        auto fuse = Sequential(
            Conv2d(Conv2dOptions(out + stage_channels(lvl, cfg.seg_dim), out, 3).padding(1)),
            GroupNorm(GroupNormOptions(8, out)), ReLU());
        up_.push_back(register_module("fuse_" + std::to_string(lvl), fuse));
        ch = out;
    }
    pixel_embed_ = register_module("pixel_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, 32, 1)));
    token_head_ = register_module("token_head", Mlp(dim_, dim_, 32, 2));
    mask_bias_ = register_parameter("mask_bias", torch::zeros({1}));
}

std::pair<torch::Tensor, torch::Tensor> MaskDecoderImpl::forward(const ImageEmbedding& emb,
                                                                 const torch::Tensor& prompts,
                                                                 const torch::Tensor& image_index) {
    const auto P = prompts.size(0);
    const auto hb = emb.bottleneck.size(2);
    const auto wb = emb.bottleneck.size(3);

    auto img = emb.bottleneck.index_select(0, image_index);  // (P, D_s, hb, wb)
    auto img_seq = img.flatten(2).transpose(1, 2);           // (P, hb*wb, D_s)
    auto pos = prompt_encoder_->encode_grid(hb, wb).unsqueeze(0);  // (1, hb*wb, D_s)

    auto tokens = torch::cat({mask_token_.unsqueeze(0).expand({P, 1, dim_}), prompts}, 1);  // (P,3,D_s)
    for (auto& b : blocks_) {
        auto n = b.n1(tokens);
        tokens = tokens + b.token_self->forward(n, n, n).first;
        tokens = tokens + b.token_to_image->forward(b.n2(tokens), img_seq + pos, img_seq).first;
        img_seq = img_seq + b.image_to_token->forward(img_seq + pos, tokens, tokens).first;
        tokens = tokens + b.ffn(b.n4(tokens));
    }
    auto t_i = tokens.select(1, 0);  // mask token occupies position 0

    auto x = img_seq.transpose(1, 2).reshape({P, dim_, hb, wb});
    for (size_t lvl = 0; lvl < up_.size(); lvl += 2) {
        const size_t skip_level = emb.skips.size() - 1 - lvl / 2;
        auto skip = emb.skips[skip_level].index_select(0, image_index);
        x = up_[lvl]->forward(x);
        x = up_[lvl + 1]->forward(torch::cat({x, skip}, 1));
    }
    auto pixels = pixel_embed_(x);                        // (P, 32, H, W)
    auto th = token_head_(t_i);                           // (P, 32)
    auto logits = torch::einsum("pc,pchw->phw", {th, pixels}) + mask_bias_;
    return {torch::sigmoid(logits), t_i};
}

SegmenterImpl::SegmenterImpl(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    prompt_encoder_ = register_module("prompt_encoder", PromptEncoder(cfg_));
    image_encoder_ = register_module("image_encoder", ImageEncoder(cfg_));
    mask_decoder_ = register_module("mask_decoder", MaskDecoder(cfg_, prompt_encoder_));
}

ImageEmbedding SegmenterImpl::encode_image(const torch::Tensor& slice) {
    TORCH_CHECK(slice.dim() == 2, "encode_image expects a 2-D slice");
    return image_encoder_->forward(slice.unsqueeze(0).unsqueeze(0));
}

ImageEmbedding SegmenterImpl::encode_image_batch(const torch::Tensor& slices) {
    return image_encoder_->forward(slices);
}

std::pair<torch::Tensor, torch::Tensor> SegmenterImpl::decode_boxes_batched(
    const ImageEmbedding& emb, const torch::Tensor& boxes, const torch::Tensor& image_index) {
    const auto H = emb.skips.empty() ? emb.bottleneck.size(2) : emb.skips[0].size(2);
    const auto W = emb.skips.empty() ? emb.bottleneck.size(3) : emb.skips[0].size(3);
    auto prompts = prompt_encoder_->encode_boxes(boxes, H, W);
    return mask_decoder_->forward(emb, prompts, image_index);
}

PartialMaskResult SegmenterImpl::decode_mask(const ImageEmbedding& emb, const Box& box) {
    auto boxes = torch::tensor({box.x1, box.y1, box.x2, box.y2}).view({1, 4});
    const auto H = emb.skips[0].size(2);
    const auto W = emb.skips[0].size(3);
    if (!box.valid() || box.x1 < 0 || box.y1 < 0 || box.x2 > static_cast<float>(W) ||
        box.y2 > static_cast<float>(H))
        throw std::invalid_argument("decode_mask: invalid prompt box");
    auto [masks, tokens] = decode_boxes_batched(emb, boxes, torch::zeros({1}, torch::kLong));
    PartialMaskResult out;
    out.mask = masks.squeeze(0);
    out.token = tokens.squeeze(0);
    out.source_box = box;
    return out;
}

std::vector<PartialMaskResult> SegmenterImpl::segment_candidates(const torch::Tensor& slice,
                                                                 const std::vector<Box>& boxes) {
    std::vector<PartialMaskResult> results;
    if (boxes.empty()) return results;

    auto emb = encode_image(slice);
    auto box_tensor = torch::empty({static_cast<int64_t>(boxes.size()), 4});
    auto acc = box_tensor.accessor<float, 2>();
    for (size_t i = 0; i < boxes.size(); ++i) {
        acc[i][0] = boxes[i].x1;
        acc[i][1] = boxes[i].y1;
        acc[i][2] = boxes[i].x2;
        acc[i][3] = boxes[i].y2;
    }
    auto [masks, tokens] =
        decode_boxes_batched(emb, box_tensor, torch::zeros({static_cast<int64_t>(boxes.size())}, torch::kLong));
    results.reserve(boxes.size());
    for (size_t i = 0; i < boxes.size(); ++i) {
        PartialMaskResult r;
        r.mask = masks[static_cast<int64_t>(i)];
        r.token = tokens[static_cast<int64_t>(i)];
        r.source_box = boxes[i];
        r.query_index = static_cast<int>(i);
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace cosam
