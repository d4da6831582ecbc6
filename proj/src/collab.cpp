#include "cosam/collab.hpp"

#include <stdexcept>

namespace cosam {

JointHeadImpl::JointHeadImpl(const ModelConfig& cfg) : expected_in_(cfg.seg_dim + cfg.feat_dim) {
    mlp_ = register_module("mlp", Mlp(expected_in_, cfg.joint_hidden, 1, 2));
}

torch::Tensor JointHeadImpl::forward(const torch::Tensor& tokens, const torch::Tensor& sfs) {
    TORCH_CHECK(tokens.dim() == 2 && sfs.dim() == 2, "joint head expects (K, D_s) and (K, D)");
    auto in = torch::cat({tokens, sfs}, -1);
    if (in.size(1) != expected_in_)
        throw std::invalid_argument("joint_classify: feature size " + std::to_string(in.size(1)) +
                                    " does not match configured D_s+D " + std::to_string(expected_in_));
    return torch::sigmoid(mlp_(in)).squeeze(-1);
}

torch::Tensor JointHeadImpl::joint_classify(const JointCandidate& c) {
    return forward(c.token.unsqueeze(0), c.sf.unsqueeze(0)).squeeze(0);
}

std::vector<SuppressedCandidate> suppress(const std::vector<JointCandidate>& candidates,
                                          const std::vector<float>& keep_probs,
                                          float keep_threshold) {
    TORCH_CHECK(candidates.size() == keep_probs.size(), "suppress: size mismatch");
    std::vector<SuppressedCandidate> out;
    for (size_t i = 0; i < candidates.size(); ++i) {
        if (keep_probs[i] < keep_threshold) continue;
        out.push_back(SuppressedCandidate{i, candidates[i].confidence * keep_probs[i]});
    }
    return out;
}

SliceSegmentation merge_partial_masks(const std::vector<PartialMaskResult>& results,
                                      float binarize_threshold, int64_t slice_h, int64_t slice_w) {
    SliceSegmentation seg;
    if (results.empty()) {
        seg.mask = torch::zeros({slice_h, slice_w}, torch::kUInt8);
        return seg;
    }
    auto merged = results[0].mask;
    if (merged.size(0) != slice_h || merged.size(1) != slice_w)
        throw std::invalid_argument("merge_partial_masks: mask extents differ from slice extents");
    seg.contributing.push_back(results[0].query_index);
    for (size_t i = 1; i < results.size(); ++i) {
        if (results[i].mask.sizes() != merged.sizes())
            throw std::invalid_argument("merge_partial_masks: mask extent mismatch");
        merged = torch::max(merged, results[i].mask);
        seg.contributing.push_back(results[i].query_index);
    }
    seg.mask = (merged >= binarize_threshold).to(torch::kUInt8);
    return seg;
}

CosamModelImpl::CosamModelImpl(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    detector_ = register_module("detector", Detector(cfg_));
    segmenter_ = register_module("segmenter", Segmenter(cfg_));
    joint_head_ = register_module("joint_head", JointHead(cfg_));
}

torch::Tensor CosamModelImpl::sf_summary(const DetectorBatchOutput& det, int64_t batch_index,
                                         int query, const std::vector<bool>& pad_mask) {
    return pool_proposal_features(det, batch_index, det.routing[batch_index][query].item<int64_t>(),
                                  pad_mask);
}

torch::Tensor CosamModelImpl::pool_proposal_features(const DetectorBatchOutput& det,
                                                     int64_t batch_index, int64_t proposal,
                                                     const std::vector<bool>& pad_mask) {
    auto row = det.sf_encoded[batch_index][proposal];  // (L, D)
    std::vector<int64_t> keep;
    for (size_t j = 0; j < pad_mask.size(); ++j)
        if (!pad_mask[j]) keep.push_back(static_cast<int64_t>(j));
    if (keep.empty() || keep.size() == pad_mask.size()) return row.mean(0);
    return row.index_select(0, torch::tensor(keep, torch::kLong)).mean(0);
}

ForwardResult CosamModelImpl::forward_window(const SliceSequence& window, const ForwardOptions& opts) {
    const auto H = window.slices.size(1);
    const auto W = window.slices.size(2);

    ForwardResult result;
    auto det = detector_->forward(window.slices.unsqueeze(0));
    DetectionSet dets{det.query_boxes.squeeze(0), det.query_conf.squeeze(0),
                      det.f_det.squeeze(0)};

    const float selection_floor = std::min(opts.emit_floor, opts.conf_threshold);
    auto selected = select_detections(dets, selection_floor, opts.nms_iou);
    if (selected.empty()) {
        result.segmentation.mask = torch::zeros({H, W}, torch::kUInt8);
        return result;
    }

    // One image embedding per anchor slice, shared across all prompts.
    const auto anchor = window.slices[window.anchor_index];
    auto boxes = torch::empty({static_cast<int64_t>(selected.size()), 4});
    {
        auto acc = boxes.accessor<float, 2>();
        for (size_t i = 0; i < selected.size(); ++i) {
            // Clip the prompt into the slice; enforce a minimum extent of one
            // pixel so the prompt encoder always sees a valid box.
            Box b = selected[i].box.clipped(static_cast<float>(W), static_cast<float>(H));
            if (b.x2 - b.x1 < 1.f) b.x2 = std::min(static_cast<float>(W), b.x1 + 1.f), b.x1 = b.x2 - 1.f;
            if (b.y2 - b.y1 < 1.f) b.y2 = std::min(static_cast<float>(H), b.y1 + 1.f), b.y1 = b.y2 - 1.f;
            acc[i][0] = b.x1;
            acc[i][1] = b.y1;
            acc[i][2] = b.x2;
            acc[i][3] = b.y2;
        }
    }
    auto emb = segmenter_->encode_image(anchor);
    auto [masks, tokens] = segmenter_->decode_boxes_batched(
        emb, boxes, torch::zeros({static_cast<int64_t>(selected.size())}, torch::kLong));

    for (size_t i = 0; i < selected.size(); ++i) {
        PartialMaskResult pm;
        pm.mask = masks[static_cast<int64_t>(i)];
        pm.token = tokens[static_cast<int64_t>(i)];
        pm.source_box = selected[i].box;
        pm.query_index = selected[i].query_index;
        result.partial_masks.push_back(pm);

        JointCandidate c;
        c.token = pm.token;
        c.sf = sf_summary(det, 0, selected[i].query_index, window.pad_mask);
        c.confidence = selected[i].confidence;
        c.box = selected[i].box;
        result.candidates.push_back(std::move(c));
    }

    result.keep_probs.resize(selected.size(), 1.f);
    if (opts.use_ccm) {
        std::vector<torch::Tensor> ts, ss;
        for (const auto& c : result.candidates) {
            ts.push_back(c.token);
            ss.push_back(c.sf);
        }
        auto probs = joint_head_->forward(torch::stack(ts), torch::stack(ss)).detach();
        for (size_t i = 0; i < selected.size(); ++i)
            result.keep_probs[i] = probs[static_cast<int64_t>(i)].item<float>();
    }

    // Candidates contribute masks when they pass both gates; a candidate whose
    // binarized mask is empty inside its own box is deleted outright.
    std::vector<PartialMaskResult> merge_set;
    std::vector<char> deleted(selected.size(), 0);
    for (size_t i = 0; i < selected.size(); ++i) {
        if (result.candidates[i].confidence < opts.conf_threshold) continue;
        if (result.keep_probs[i] < opts.keep_threshold) continue;

        Box b = result.candidates[i].box.clipped(static_cast<float>(W), static_cast<float>(H));
        const auto y1 = static_cast<int64_t>(std::floor(b.y1));
        const auto y2 = std::max<int64_t>(y1 + 1, static_cast<int64_t>(std::ceil(b.y2)));
        const auto x1 = static_cast<int64_t>(std::floor(b.x1));
        const auto x2 = std::max<int64_t>(x1 + 1, static_cast<int64_t>(std::ceil(b.x2)));
        auto inside = result.partial_masks[i].mask.slice(0, y1, std::min(y2, H)).slice(1, x1, std::min(x2, W));
        const bool has_pixel = (inside >= opts.binarize_threshold).any().item<bool>();
        if (!has_pixel) {
            deleted[i] = 1;  // segmentation vetoes this candidate
            continue;
        }
        merge_set.push_back(result.partial_masks[i]);
    }
    result.segmentation = merge_partial_masks(merge_set, opts.binarize_threshold, H, W);

    for (size_t i = 0; i < selected.size(); ++i) {
        if (deleted[i]) continue;
        const float final_score = result.candidates[i].confidence * result.keep_probs[i];
        if (result.candidates[i].confidence < opts.emit_floor) continue;
        result.detections.emplace_back(result.candidates[i].box, final_score);
    }
    return result;
}

}  // namespace cosam
