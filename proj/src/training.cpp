#include "cosam/training.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace cosam {

using json = nlohmann::json;

void TrainConfig::validate() const {
    if (pretrain_epochs_det < 0 || pretrain_epochs_seg < 0 || joint_epochs < 0)
        throw std::invalid_argument("TrainConfig: epoch counts must be >= 0");
    if (!(lr_detector > 0) || !(lr_segmenter > 0) || !(lr_joint_head > 0))
        throw std::invalid_argument("TrainConfig: learning rates must be positive");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    for (double w : {weights.cls, weights.box, weights.giou, weights.mask_dice, weights.mask_bce,
                     weights.joint})
        if (!std::isfinite(w) || w < 0)
            throw std::invalid_argument("TrainConfig: loss weights must be finite and >= 0");
}

std::string TrainConfig::to_json() const {
    json j;
    j["pretrain_epochs_det"] = pretrain_epochs_det;
    j["pretrain_epochs_seg"] = pretrain_epochs_seg;
    j["joint_epochs"] = joint_epochs;
    j["lr_detector"] = lr_detector;
    j["lr_segmenter"] = lr_segmenter;
    j["lr_joint_head"] = lr_joint_head;
    j["batch_size"] = batch_size;
    j["seed"] = seed;
    j["lambda_cls"] = weights.cls;
    j["lambda_box"] = weights.box;
    j["lambda_giou"] = weights.giou;
    j["lambda_mask_dice"] = weights.mask_dice;
    j["lambda_mask_bce"] = weights.mask_bce;
    j["lambda_joint"] = weights.joint;
    j["aug_flip"] = aug_flip;
    j["aug_crop"] = aug_crop;
    j["aug_contrast"] = aug_contrast;
    j["use_ccm"] = use_ccm;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& json_text) {
    const json j = json::parse(json_text);
    TrainConfig c;
    c.pretrain_epochs_det = j.value("pretrain_epochs_det", c.pretrain_epochs_det);
    c.pretrain_epochs_seg = j.value("pretrain_epochs_seg", c.pretrain_epochs_seg);
    c.joint_epochs = j.value("joint_epochs", c.joint_epochs);
    c.lr_detector = j.value("lr_detector", c.lr_detector);
    c.lr_segmenter = j.value("lr_segmenter", c.lr_segmenter);
    c.lr_joint_head = j.value("lr_joint_head", c.lr_joint_head);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.weights.cls = j.value("lambda_cls", c.weights.cls);
    c.weights.box = j.value("lambda_box", c.weights.box);
    c.weights.giou = j.value("lambda_giou", c.weights.giou);
    c.weights.mask_dice = j.value("lambda_mask_dice", c.weights.mask_dice);
    c.weights.mask_bce = j.value("lambda_mask_bce", c.weights.mask_bce);
    c.weights.joint = j.value("lambda_joint", c.weights.joint);
    c.aug_flip = j.value("aug_flip", c.aug_flip);
    c.aug_crop = j.value("aug_crop", c.aug_crop);
    c.aug_contrast = j.value("aug_contrast", c.aug_contrast);
    c.use_ccm = j.value("use_ccm", c.use_ccm);
    c.validate();
    return c;
}

// ---- matching ---------------------------------------------------------------

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path assignment (potentials form). cost is n x m with
// n <= m; returns for each row its assigned column.
std::vector<int> solve_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    const int m = static_cast<int>(cost[0].size());
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);

    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = kInf;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }

    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

double pair_cost(const Box& pred, float conf, const Box& gt, int64_t h, int64_t w,
                 const LossWeights& weights) {
    const auto sw = static_cast<double>(w);
    const auto sh = static_cast<double>(h);
    const double l1 = std::abs(pred.x1 - gt.x1) / sw + std::abs(pred.y1 - gt.y1) / sh +
                      std::abs(pred.x2 - gt.x2) / sw + std::abs(pred.y2 - gt.y2) / sh;
    return weights.cls * (1.0 - static_cast<double>(conf)) + weights.box * l1 +
           weights.giou * (1.0 - static_cast<double>(box_giou(pred, gt)));
}

}  // namespace

MatchResult match_queries(const std::vector<Box>& pred_boxes, const std::vector<float>& pred_conf,
                          const std::vector<Box>& gt_boxes, int64_t slice_h, int64_t slice_w,
                          const LossWeights& weights) {
    MatchResult result;
    const int nq = static_cast<int>(pred_boxes.size());
    const int ng = static_cast<int>(gt_boxes.size());
    if (ng == 0) {
        for (int q = 0; q < nq; ++q) result.unmatched_queries.push_back(q);
        return result;
    }

    if (ng <= nq) {
        std::vector<std::vector<double>> cost(ng, std::vector<double>(nq));
        for (int g = 0; g < ng; ++g)
            for (int q = 0; q < nq; ++q)
                cost[g][q] = pair_cost(pred_boxes[q], pred_conf[q], gt_boxes[g], slice_h, slice_w,
                                       weights);
        const auto gt_to_query = solve_assignment(cost);
        for (int g = 0; g < ng; ++g) result.pairs.emplace_back(gt_to_query[g], g);
    } else {
        std::vector<std::vector<double>> cost(nq, std::vector<double>(ng));
        for (int q = 0; q < nq; ++q)
            for (int g = 0; g < ng; ++g)
                cost[q][g] = pair_cost(pred_boxes[q], pred_conf[q], gt_boxes[g], slice_h, slice_w,
                                       weights);
        const auto query_to_gt = solve_assignment(cost);
        for (int q = 0; q < nq; ++q)
            if (query_to_gt[q] >= 0) result.pairs.emplace_back(q, query_to_gt[q]);
    }

    std::sort(result.pairs.begin(), result.pairs.end());
    std::vector<char> matched(nq, 0);
    for (const auto& [q, g] : result.pairs) matched[static_cast<size_t>(q)] = 1;
    for (int q = 0; q < nq; ++q)
        if (!matched[q]) result.unmatched_queries.push_back(q);
    return result;
}

// ---- losses -----------------------------------------------------------------

torch::Tensor giou_tensor(const torch::Tensor& a, const torch::Tensor& b) {
    auto ax1 = a.select(-1, 0), ay1 = a.select(-1, 1), ax2 = a.select(-1, 2), ay2 = a.select(-1, 3);
    auto bx1 = b.select(-1, 0), by1 = b.select(-1, 1), bx2 = b.select(-1, 2), by2 = b.select(-1, 3);
    auto inter = (torch::min(ax2, bx2) - torch::max(ax1, bx1)).clamp_min(0) *
                 (torch::min(ay2, by2) - torch::max(ay1, by1)).clamp_min(0);
    auto area_a = (ax2 - ax1).clamp_min(0) * (ay2 - ay1).clamp_min(0);
    auto area_b = (bx2 - bx1).clamp_min(0) * (by2 - by1).clamp_min(0);
    auto uni = area_a + area_b - inter;
    auto iou = inter / uni.clamp_min(1e-7);
    auto hull = (torch::max(ax2, bx2) - torch::min(ax1, bx1)) *
                (torch::max(ay2, by2) - torch::min(ay1, by1));
    return iou - (hull - uni) / hull.clamp_min(1e-7);
}

torch::Tensor detection_loss(const torch::Tensor& pred_boxes, const torch::Tensor& pred_conf,
                             const std::vector<Box>& gt_boxes, const MatchResult& match,
                             int64_t slice_h, int64_t slice_w, const LossWeights& weights) {
    const auto nq = pred_conf.size(0);
    auto conf_target = torch::zeros({nq}, torch::kFloat32);
    // Unmatched ("no object") queries dominate the query set; their BCE is
    // down-weighted so matched confidences are not drowned out.
    auto conf_weight = torch::full({nq}, 0.1f);
    for (const auto& [q, g] : match.pairs) {
        conf_target[q] = 1.f;
        conf_weight[q] = 1.f;
    }
    auto bce = torch::binary_cross_entropy(pred_conf.clamp(1e-6, 1.0 - 1e-6), conf_target,
                                           /*weight=*/{}, torch::Reduction::None);
    auto cls = (bce * conf_weight).sum() / conf_weight.sum();

    auto loss = weights.cls * cls;
    if (!match.pairs.empty()) {
        std::vector<int64_t> q_idx;
        auto gt = torch::empty({static_cast<int64_t>(match.pairs.size()), 4}, torch::kFloat32);
        auto gacc = gt.accessor<float, 2>();
        for (size_t k = 0; k < match.pairs.size(); ++k) {
            const auto [q, g] = match.pairs[k];
            q_idx.push_back(q);
            gacc[k][0] = gt_boxes[static_cast<size_t>(g)].x1;
            gacc[k][1] = gt_boxes[static_cast<size_t>(g)].y1;
            gacc[k][2] = gt_boxes[static_cast<size_t>(g)].x2;
            gacc[k][3] = gt_boxes[static_cast<size_t>(g)].y2;
        }
        auto matched_pred = pred_boxes.index_select(0, torch::tensor(q_idx, torch::kLong));
        auto scale = torch::tensor({static_cast<float>(slice_w), static_cast<float>(slice_h),
                                    static_cast<float>(slice_w), static_cast<float>(slice_h)});
        auto l1 = ((matched_pred - gt) / scale).abs().sum(-1).mean();
        auto giou_loss = (1.0 - giou_tensor(matched_pred, gt)).mean();
        loss = loss + weights.box * l1 + weights.giou * giou_loss;
    }
    return loss;
}

torch::Tensor segmentation_loss(const torch::Tensor& pred_mask_prob, const torch::Tensor& gt_mask,
                                const LossWeights& weights) {
    if (pred_mask_prob.sizes() != gt_mask.sizes())
        throw std::invalid_argument("segmentation_loss: extent mismatch");
    auto p = pred_mask_prob.to(torch::kFloat32);
    auto g = gt_mask.to(torch::kFloat32);

    const bool batched = p.dim() == 3;
    auto dims = batched ? std::vector<int64_t>{1, 2} : std::vector<int64_t>{0, 1};
    auto inter = (p * g).sum(dims);
    auto denom = p.sum(dims) + g.sum(dims);
    constexpr double eps = 1e-6;
    auto soft_dice = (2.0 * inter + eps) / (denom + eps);
    auto dice_term = (1.0 - soft_dice).mean();

    auto bce = torch::binary_cross_entropy(p.clamp(1e-6, 1.0 - 1e-6), g);
    return weights.mask_dice * dice_term + weights.mask_bce * bce;
}

torch::Tensor joint_classification_loss(const torch::Tensor& keep_probs, const torch::Tensor& labels) {
    TORCH_CHECK(keep_probs.sizes() == labels.sizes(), "joint loss: size mismatch");
    return torch::binary_cross_entropy(keep_probs.clamp(1e-6, 1.0 - 1e-6),
                                       labels.to(torch::kFloat32));
}

int joint_label_for(const Box& candidate, const std::vector<Box>& gt_boxes) {
    for (const auto& g : gt_boxes)
        if (box_iou(candidate, g) >= 0.5f) return 1;
    return 0;
}

// ---- augmentation -----------------------------------------------------------

AugmentParams sample_augment(const AugmentOptions& opts, int64_t h, int64_t w, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    AugmentParams p;
    if (opts.crop) {
        // Crops snap to multiples of 8 so downstream strides keep dividing.
        const auto snap = [](int64_t v) { return std::max<int64_t>(8, (v / 8) * 8); };
        p.crop_h = snap(static_cast<int64_t>(std::llround(static_cast<double>(h) * opts.crop_fraction)));
        p.crop_w = snap(static_cast<int64_t>(std::llround(static_cast<double>(w) * opts.crop_fraction)));
        if (p.crop_h > h || p.crop_w > w)
            throw std::invalid_argument("augment: crop larger than image");
        p.crop_y = static_cast<int>(unit(rng) * static_cast<double>(h - p.crop_h + 1));
        p.crop_x = static_cast<int>(unit(rng) * static_cast<double>(w - p.crop_w + 1));
        p.crop_y = std::min<int>(p.crop_y, static_cast<int>(h - p.crop_h));
        p.crop_x = std::min<int>(p.crop_x, static_cast<int>(w - p.crop_w));
    }
    if (opts.flip) {
        p.flip_h = unit(rng) < 0.5;
        p.flip_v = unit(rng) < 0.5;
    }
    if (opts.contrast) p.gain = static_cast<float>(0.8 + 0.4 * unit(rng));
    return p;
}

namespace {

torch::Tensor apply_geometry(const torch::Tensor& t, const AugmentParams& p) {
    auto x = t;
    const auto ydim = x.dim() - 2;
    const auto xdim = x.dim() - 1;
    if (p.crop_h > 0) {
        x = x.slice(ydim, p.crop_y, p.crop_y + p.crop_h).slice(xdim, p.crop_x, p.crop_x + p.crop_w);
    }
    std::vector<int64_t> flip_dims;
    if (p.flip_v) flip_dims.push_back(ydim);
    if (p.flip_h) flip_dims.push_back(xdim);
    if (!flip_dims.empty()) x = torch::flip(x, flip_dims);
    return x.contiguous();
}

}  // namespace

torch::Tensor apply_augment_image(const torch::Tensor& image, const AugmentParams& p) {
    auto x = apply_geometry(image.to(torch::kFloat32), p);
    if (p.gain != 1.f) {
        auto mean = x.mean();
        x = (mean + p.gain * (x - mean)).clamp(0.0, 1.0);
    }
    return x;
}

torch::Tensor apply_augment_label(const torch::Tensor& label, const AugmentParams& p) {
    return apply_geometry(label, p);
}

std::pair<torch::Tensor, torch::Tensor> augment(const torch::Tensor& image,
                                                const torch::Tensor& label, uint64_t seed,
                                                const AugmentOptions& opts) {
    if (image.size(-1) != label.size(-1) || image.size(-2) != label.size(-2))
        throw std::invalid_argument("augment: image and label extents differ");
    const auto p = sample_augment(opts, image.size(-2), image.size(-1), seed);
    return {apply_augment_image(image, p), apply_augment_label(label, p)};
}

}  // namespace cosam
