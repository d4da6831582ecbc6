#include "cosam/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cosam {

namespace {

// Deterministic screening order: score descending, column id ascending.
std::vector<int64_t> screening_order(const float* scores, int64_t n) {
    std::vector<int64_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    return idx;
}

}  // namespace

BackboneImpl::BackboneImpl(const ModelConfig& cfg) {
    using namespace torch::nn;
    Sequential net;
    const int d = cfg.feat_dim;
    net->push_back(Conv2d(Conv2dOptions(1, 24, 3).padding(1)));
    net->push_back(GroupNorm(GroupNormOptions(8, 24)));
    net->push_back(ReLU());
    int stride_left = cfg.backbone_stride;
    int ch = 24;
    while (stride_left > 1) {
        const int next = stride_left > 2 ? 48 : d;
        net->push_back(Conv2d(Conv2dOptions(ch, next, 3).stride(2).padding(1)));
        net->push_back(GroupNorm(GroupNormOptions(8, next)));
        net->push_back(ReLU());
        ch = next;
        stride_left /= 2;
    }
    net->push_back(Conv2d(Conv2dOptions(ch, d, 3).padding(1)));
    layers_ = register_module("layers", net);
}

torch::Tensor BackboneImpl::forward(const torch::Tensor& frames) {
    return layers_->forward(frames);
}

DetectorImpl::DetectorImpl(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.feat_dim;
    const int L = cfg_.window_size;
    const int p = cfg_.roi_pool_size;

    backbone_ = register_module("backbone", Backbone(cfg_));
    proposal_head_ = register_module(
        "proposal_head", torch::nn::Conv2d(torch::nn::Conv2dOptions(L * d, 1 + 4 * L, 1)));
    // Pooled content carries no location, so each RoI's normalized coordinates
    // enter the projection through a fixed Fourier basis.
    roi_fourier_ = register_buffer("roi_fourier", torch::randn({4, kRoiPosDim / 2}));
    roi_proj_ = register_module("roi_proj", torch::nn::Linear(d * p * p + kRoiPosDim, d));
    seq_pos_embed_ = register_parameter("seq_pos_embed", torch::randn({L, d}) * 0.02);
    for (int i = 0; i < cfg_.encoder_layers; ++i)
        encoder_layers_.push_back(
            register_module("encoder_" + std::to_string(i), EncoderLayer(d, cfg_.n_heads)));
    for (int i = 0; i < cfg_.decoder_layers; ++i)
        decoder_layers_.push_back(
            register_module("decoder_" + std::to_string(i), DecoderLayer(d, cfg_.n_heads)));
    queries_ = register_parameter("queries", torch::randn({cfg_.n_queries, d}) * 0.02);
    decoder_norm_ = register_module("decoder_norm",
                                    torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    box_head_ = register_module("box_head", Mlp(d, d, 4, 3));
    conf_head_ = register_module("conf_head", torch::nn::Linear(d, 1));
}

std::pair<torch::Tensor, torch::Tensor> DetectorImpl::stage1_predict(const torch::Tensor& feats,
                                                                     int64_t img_h, int64_t img_w) {
    const auto B = feats.size(0);
    const auto L = feats.size(1);
    const auto h = feats.size(3);
    const auto w = feats.size(4);
    const auto G = h * w;
    const auto s = static_cast<double>(cfg_.backbone_stride);
    const double side = cfg_.proposal_base_scale * s;

    auto out = proposal_head_(feats.reshape({B, L * feats.size(2), h, w}));
    auto obj = out.slice(1, 0, 1).reshape({B, G});
    // (B, 4L, h, w) -> (B, G, L, 4), G in row-major (gy*w + gx) order.
    auto deltas = out.slice(1, 1).reshape({B, L, 4, h, w}).permute({0, 3, 4, 1, 2}).reshape({B, G, L, 4});

    auto gx = torch::arange(w, torch::kFloat32);
    auto gy = torch::arange(h, torch::kFloat32);
    auto base_cx = ((gx + 0.5) * s).repeat({h}).reshape({G, 1});          // (G,1)
    auto base_cy = ((gy + 0.5) * s).repeat_interleave(w).reshape({G, 1}); // (G,1)

    auto cx = base_cx + torch::tanh(deltas.select(-1, 0)) * side;
    auto cy = base_cy + torch::tanh(deltas.select(-1, 1)) * side;
    auto bw = side * torch::exp(deltas.select(-1, 2).clamp(-1.5, 1.5));
    auto bh = side * torch::exp(deltas.select(-1, 3).clamp(-1.5, 1.5));

    auto x1 = (cx - bw * 0.5).clamp(0.0, static_cast<double>(img_w) - 1.0);
    auto y1 = (cy - bh * 0.5).clamp(0.0, static_cast<double>(img_h) - 1.0);
    auto x2 = torch::max((cx + bw * 0.5).clamp(0.0, static_cast<double>(img_w)), x1 + 0.5);
    auto y2 = torch::max((cy + bh * 0.5).clamp(0.0, static_cast<double>(img_h)), y1 + 0.5);

    auto boxes = torch::stack({x1, y1, x2, y2}, -1);  // (B, G, L, 4)
    return {obj, boxes};
}

torch::Tensor DetectorImpl::pool_screened(const torch::Tensor& feats, const torch::Tensor& rois) {
    const auto B = feats.size(0);
    const auto L = feats.size(1);
    const auto D = feats.size(2);
    const auto h = feats.size(3);
    const auto w = feats.size(4);
    const auto M = rois.size(1);
    const int P = cfg_.roi_pool_size;
    const auto s = static_cast<double>(cfg_.backbone_stride);

    // Fractional sample offsets within the box: (k+0.5)/P for k in [0,P).
    auto frac = (torch::arange(P, torch::kFloat32) + 0.5) / static_cast<double>(P);

    // All frames pooled in one grid_sample call: fold L into the batch.
    auto f = feats.reshape({B * L, D, h, w});
    auto r = rois.permute({0, 2, 1, 3}).reshape({B * L, M, 4}).to(torch::kFloat32) / s;
    auto x1 = r.select(-1, 0).unsqueeze(-1);  // (B*L, M, 1)
    auto y1 = r.select(-1, 1).unsqueeze(-1);
    auto x2 = r.select(-1, 2).unsqueeze(-1);
    auto y2 = r.select(-1, 3).unsqueeze(-1);
    auto us = x1 + frac.view({1, 1, P}) * (x2 - x1);  // (B*L, M, P)
    auto vs = y1 + frac.view({1, 1, P}) * (y2 - y1);

    // grid_sample with align_corners=false: pixel i center maps to
    // (i+0.5)/size*2-1.
    auto gx = us / static_cast<double>(w) * 2.0 - 1.0;
    auto gy = vs / static_cast<double>(h) * 2.0 - 1.0;
    auto grid_x = gx.unsqueeze(2).expand({B * L, M, P, P});  // vary along last axis
    auto grid_y = gy.unsqueeze(3).expand({B * L, M, P, P});
    auto grid = torch::stack({grid_x, grid_y}, -1).reshape({B * L, M * P, P, 2});

    auto pooled = torch::nn::functional::grid_sample(
        f, grid,
        torch::nn::functional::GridSampleFuncOptions()
            .mode(torch::kBilinear)
            .padding_mode(torch::kBorder)
            .align_corners(false));  // (B*L, D, M*P, P)
    auto stacked = pooled.reshape({B, L, D, M, P, P})
                       .permute({0, 3, 1, 2, 4, 5})
                       .reshape({B, M, L, D * P * P});

    auto scale = torch::tensor({static_cast<float>(w), static_cast<float>(h),
                                static_cast<float>(w), static_cast<float>(h)});
    auto norm = (r.reshape({B, L, M, 4}).permute({0, 2, 1, 3}) / scale) * 2.0 - 1.0;  // (B,M,L,4)
    auto freqs = torch::matmul(norm, roi_fourier_) * 6.283185307179586;
    auto coord_feats = torch::cat({torch::sin(freqs), torch::cos(freqs)}, -1);  // (B,M,L,kRoiPosDim)
    return roi_proj_(torch::cat({stacked, coord_feats}, -1));  // (B, M, L, D)
}

DetectorBatchOutput DetectorImpl::forward(const torch::Tensor& windows) {
    TORCH_CHECK(windows.dim() == 4, "detector expects (B, L, H, W) windows");
    const auto B = windows.size(0);
    const auto L = windows.size(1);
    TORCH_CHECK(L == cfg_.window_size, "window length does not match model window_size");
    const auto H = windows.size(2);
    const auto W = windows.size(3);
    TORCH_CHECK(H % cfg_.backbone_stride == 0 && W % cfg_.backbone_stride == 0,
                "slice extents must be divisible by the backbone stride");

    auto feats = backbone_->forward(windows.reshape({B * L, 1, H, W}).to(torch::kFloat32));
    const auto h = feats.size(2);
    const auto w = feats.size(3);
    feats = feats.reshape({B, L, cfg_.feat_dim, h, w});

    auto [obj, boxes] = stage1_predict(feats, H, W);  // (B,G), (B,G,L,4)
    const auto G = obj.size(1);
    const auto M = std::min<int64_t>(cfg_.top_m, G);

    // Deterministic per-window screening on CPU scores.
    auto scores = torch::sigmoid(obj).detach().contiguous();
    auto keep = torch::empty({B, M}, torch::kLong);
    {
        auto keep_acc = keep.accessor<int64_t, 2>();
        const float* sc = scores.const_data_ptr<float>();
        for (int64_t b = 0; b < B; ++b) {
            const auto order = screening_order(sc + b * G, G);
            for (int64_t m = 0; m < M; ++m) keep_acc[b][m] = order[static_cast<size_t>(m)];
        }
    }

    auto roi_index = keep.view({B, M, 1, 1}).expand({B, M, L, 4});
    auto screened_rois = boxes.detach().gather(1, roi_index);  // (B, M, L, 4)

    auto sf = pool_screened(feats, screened_rois);             // (B, M, L, D)

    // Positional embedding along the sequence axis only; proposals stay an
    // unordered set.
    auto x = (sf + seq_pos_embed_.view({1, 1, L, cfg_.feat_dim})).reshape({B * M, L, cfg_.feat_dim});
    for (auto& layer : encoder_layers_) x = layer(x);
    auto sf_encoded = x.reshape({B, M, L, cfg_.feat_dim});

    auto memory = sf_encoded.reshape({B, M * L, cfg_.feat_dim});
    auto q = queries_.unsqueeze(0).expand({B, cfg_.n_queries, cfg_.feat_dim});
    torch::Tensor cross_weights;
    for (auto& layer : decoder_layers_) {
        auto [q_next, weights] = layer(q, memory);
        q = q_next;
        cross_weights = weights;  // final layer's weights win
    }
    auto f_det = decoder_norm_(q);  // (B, N_q, D)

    // Route each query to the proposal holding maximal summed attention; ties
    // resolve to the lowest proposal index.
    auto per_proposal = cross_weights.reshape({B, cfg_.n_queries, M, L}).sum(-1).detach().contiguous();
    auto routing = torch::empty({B, cfg_.n_queries}, torch::kLong);
    {
        auto racc = routing.accessor<int64_t, 2>();
        const float* pw = per_proposal.const_data_ptr<float>();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t qi = 0; qi < cfg_.n_queries; ++qi) {
                const float* row = pw + (b * cfg_.n_queries + qi) * M;
                int64_t best = 0;
                for (int64_t m = 1; m < M; ++m)
                    if (row[m] > row[best]) best = m;
                racc[b][qi] = best;
            }
    }

    // Each query refines the anchor-frame roi of its routed proposal.
    auto anchor_rois = screened_rois.select(2, L / 2);  // (B, M, 4)
    auto refs = anchor_rois.gather(1, routing.unsqueeze(-1).expand({B, cfg_.n_queries, 4}));
    auto query_boxes = decode_boxes(f_det, refs, H, W);
    auto query_conf = torch::sigmoid(conf_head_(f_det)).squeeze(-1);  // (B, N_q)

    DetectorBatchOutput out;
    out.query_boxes = query_boxes;
    out.query_conf = query_conf;
    out.f_det = f_det;
    out.sf_encoded = sf_encoded;
    out.routing = routing;
    out.stage1_obj = obj;
    out.stage1_boxes = boxes;
    out.screened_cols = keep;
    out.screened_rois = screened_rois;
    out.grid_h = static_cast<int>(h);
    out.grid_w = static_cast<int>(w);
    return out;
}

torch::Tensor DetectorImpl::decode_boxes(const torch::Tensor& f_det, const torch::Tensor& refs,
                                         int64_t img_h, int64_t img_w) {
    auto raw = torch::sigmoid(box_head_(f_det));  // (..., 4): center offset + log-scale in (0,1)
    auto ref_w = (refs.select(-1, 2) - refs.select(-1, 0)).clamp_min(1.0);
    auto ref_h = (refs.select(-1, 3) - refs.select(-1, 1)).clamp_min(1.0);
    auto ref_cx = (refs.select(-1, 0) + refs.select(-1, 2)) * 0.5;
    auto ref_cy = (refs.select(-1, 1) + refs.select(-1, 3)) * 0.5;

    auto cx = (ref_cx + (raw.select(-1, 0) * 2.0 - 1.0) * ref_w).clamp(0.0, static_cast<double>(img_w));
    auto cy = (ref_cy + (raw.select(-1, 1) * 2.0 - 1.0) * ref_h).clamp(0.0, static_cast<double>(img_h));
    // extent spans [ref/4, 4*ref], clamped into [1, image side]
    auto bw = (ref_w * torch::pow(4.0, raw.select(-1, 2) * 2.0 - 1.0))
                  .clamp(1.0, static_cast<double>(img_w));
    auto bh = (ref_h * torch::pow(4.0, raw.select(-1, 3) * 2.0 - 1.0))
                  .clamp(1.0, static_cast<double>(img_h));
    return torch::stack({cx - bw * 0.5, cy - bh * 0.5, cx + bw * 0.5, cy + bh * 0.5}, -1);
}

std::vector<torch::Tensor> DetectorImpl::backbone_features(const SliceSequence& seq) {
    const auto L = seq.slices.size(0);
    auto feats = backbone_->forward(seq.slices.unsqueeze(1).to(torch::kFloat32));
    std::vector<torch::Tensor> maps;
    maps.reserve(L);
    for (int64_t j = 0; j < L; ++j) maps.push_back(feats[j]);
    return maps;
}

std::vector<SequenceProposal> DetectorImpl::generate_sequence_proposals(
    const std::vector<torch::Tensor>& frame_features) {
    TORCH_CHECK(!frame_features.empty(), "no frame features");
    const auto L = static_cast<int64_t>(frame_features.size());
    TORCH_CHECK(L == cfg_.window_size, "frame count does not match window_size");
    const auto h = frame_features[0].size(1);
    const auto w = frame_features[0].size(2);
    const auto img_h = h * cfg_.backbone_stride;
    const auto img_w = w * cfg_.backbone_stride;

    auto feats = torch::stack(frame_features, 0).unsqueeze(0);  // (1, L, D, h, w)
    auto [obj, boxes] = stage1_predict(feats, img_h, img_w);
    auto scores = torch::sigmoid(obj).squeeze(0).contiguous();
    auto boxes_cpu = boxes.squeeze(0).detach().contiguous();

    const auto G = scores.size(0);
    const float* sc = scores.const_data_ptr<float>();
    auto bacc = boxes_cpu.accessor<float, 3>();
    std::vector<SequenceProposal> proposals;
    proposals.reserve(G);
    for (int64_t g = 0; g < G; ++g) {
        SequenceProposal p;
        p.column_id = static_cast<int>(g);
        p.stage1_score = sc[g];
        p.rois.reserve(L);
        for (int64_t j = 0; j < L; ++j)
            p.rois.push_back(Box{bacc[g][j][0], bacc[g][j][1], bacc[g][j][2], bacc[g][j][3]});
        proposals.push_back(std::move(p));
    }
    return proposals;
}

torch::Tensor DetectorImpl::roi_pool(const torch::Tensor& feature_map, const Box& roi) {
    auto feats = feature_map.unsqueeze(0).unsqueeze(0);  // (1, 1, D, h, w)
    auto rois = torch::tensor({roi.x1, roi.y1, roi.x2, roi.y2}, torch::kFloat32).view({1, 1, 1, 4});
    return pool_screened(feats, rois).reshape({cfg_.feat_dim});
}

torch::Tensor DetectorImpl::build_sequence_features(const std::vector<SequenceProposal>& screened,
                                                    const std::vector<torch::Tensor>& frame_features) {
    const auto N = static_cast<int64_t>(screened.size());
    const auto L = static_cast<int64_t>(frame_features.size());
    TORCH_CHECK(N > 0, "no screened proposals");
    auto rois = torch::empty({1, N, L, 4}, torch::kFloat32);
    auto racc = rois.accessor<float, 4>();
    for (int64_t i = 0; i < N; ++i) {
        TORCH_CHECK(static_cast<int64_t>(screened[i].rois.size()) == L,
                    "proposal roi count does not match frame count");
        for (int64_t j = 0; j < L; ++j) {
            const Box& b = screened[i].rois[j];
            racc[0][i][j][0] = b.x1;
            racc[0][i][j][1] = b.y1;
            racc[0][i][j][2] = b.x2;
            racc[0][i][j][3] = b.y2;
        }
    }
    auto feats = torch::stack(frame_features, 0).unsqueeze(0);  // (1, L, D, h, w)
    return pool_screened(feats, rois).squeeze(0);               // (N, L, D)
}

torch::Tensor DetectorImpl::encode_sequences(const torch::Tensor& sf) {
    TORCH_CHECK(sf.dim() == 3, "encode_sequences expects (N, L, D)");
    auto x = sf + seq_pos_embed_.unsqueeze(0);
    for (auto& layer : encoder_layers_) x = layer(x);
    return x;
}

std::pair<torch::Tensor, torch::Tensor> DetectorImpl::decode_queries(const torch::Tensor& sf_prime) {
    TORCH_CHECK(sf_prime.dim() == 3, "decode_queries expects (N, L, D)");
    auto memory = sf_prime.reshape({1, sf_prime.size(0) * sf_prime.size(1), cfg_.feat_dim});
    auto q = queries_.unsqueeze(0);
    torch::Tensor weights;
    for (auto& layer : decoder_layers_) {
        auto [q_next, w] = layer(q, memory);
        q = q_next;
        weights = w;
    }
    return {decoder_norm_(q).squeeze(0), weights.squeeze(0)};
}

DetectionSet DetectorImpl::predict_boxes(const torch::Tensor& f_det, int64_t slice_h,
                                         int64_t slice_w, const torch::Tensor& refs) {
    auto references = refs;
    if (!references.defined()) {
        // Without routed proposals the whole slice is the reference box.
        references = torch::tensor({0.f, 0.f, static_cast<float>(slice_w),
                                    static_cast<float>(slice_h)})
                         .expand({f_det.size(0), 4});
    }
    DetectionSet set;
    set.boxes = decode_boxes(f_det, references, slice_h, slice_w);
    set.confidences = torch::sigmoid(conf_head_(f_det)).squeeze(-1);
    set.objective_tokens = f_det;
    return set;
}

DetectionSet DetectorImpl::run(const SliceSequence& seq) {
    auto maps = backbone_features(seq);
    auto proposals = screen_proposals(generate_sequence_proposals(maps), cfg_.top_m);
    auto sf = build_sequence_features(proposals, maps);
    auto sf_prime = encode_sequences(sf);
    auto [f_det, weights] = decode_queries(sf_prime);

    // Same routing rule as the batched path: argmax of summed attention.
    const auto M = static_cast<int64_t>(proposals.size());
    const auto L = cfg_.window_size;
    auto per_proposal = weights.reshape({cfg_.n_queries, M, L}).sum(-1).detach().contiguous();
    auto refs = torch::empty({cfg_.n_queries, 4});
    auto racc = refs.accessor<float, 2>();
    const float* pw = per_proposal.const_data_ptr<float>();
    for (int64_t qi = 0; qi < cfg_.n_queries; ++qi) {
        const float* row = pw + qi * M;
        int64_t best = 0;
        for (int64_t m = 1; m < M; ++m)
            if (row[m] > row[best]) best = m;
        const Box& anchor_roi = proposals[static_cast<size_t>(best)].rois[static_cast<size_t>(L / 2)];
        racc[qi][0] = anchor_roi.x1;
        racc[qi][1] = anchor_roi.y1;
        racc[qi][2] = anchor_roi.x2;
        racc[qi][3] = anchor_roi.y2;
    }
    return predict_boxes(f_det, seq.slices.size(1), seq.slices.size(2), refs);
}

std::vector<SequenceProposal> screen_proposals(std::vector<SequenceProposal> proposals, int top_m) {
    if (top_m < 1) throw std::invalid_argument("screen_proposals: top_m must be >= 1");
    std::sort(proposals.begin(), proposals.end(), [](const SequenceProposal& a, const SequenceProposal& b) {
        if (a.stage1_score != b.stage1_score) return a.stage1_score > b.stage1_score;
        return a.column_id < b.column_id;
    });
    if (static_cast<int>(proposals.size()) > top_m) proposals.resize(top_m);
    return proposals;
}

std::vector<SelectedDetection> select_detections(const DetectionSet& dets, float conf_threshold,
                                                 float nms_iou) {
    auto boxes = dets.boxes.detach().to(torch::kFloat32).contiguous();
    auto conf = dets.confidences.detach().to(torch::kFloat32).contiguous();
    const auto n = conf.size(0);
    auto bacc = boxes.accessor<float, 2>();
    const float* c = conf.const_data_ptr<float>();

    std::vector<SelectedDetection> candidates;
    for (int64_t i = 0; i < n; ++i)
        if (c[i] >= conf_threshold)
            candidates.push_back(SelectedDetection{
                Box{bacc[i][0], bacc[i][1], bacc[i][2], bacc[i][3]}, c[i], static_cast<int>(i)});

    std::sort(candidates.begin(), candidates.end(), [](const SelectedDetection& a, const SelectedDetection& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.query_index < b.query_index;
    });

    std::vector<SelectedDetection> kept;
    for (const auto& cand : candidates) {
        bool suppressed = false;
        for (const auto& k : kept)
            if (box_iou(cand.box, k.box) > nms_iou) suppressed = true;
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

}  // namespace cosam
