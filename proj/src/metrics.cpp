#include "cosam/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <stdexcept>

namespace cosam {

using json = nlohmann::json;

namespace {

struct PixelCounts {
    int64_t inter = 0;
    int64_t pred = 0;
    int64_t gt = 0;
};

PixelCounts count_pixels(const torch::Tensor& pred, const torch::Tensor& gt) {
    if (pred.sizes() != gt.sizes())
        throw std::invalid_argument("dice/iou: mask extents differ");
    auto p = pred.to(torch::kBool);
    auto g = gt.to(torch::kBool);
    return PixelCounts{(p & g).sum().item<int64_t>(), p.sum().item<int64_t>(),
                       g.sum().item<int64_t>()};
}

double dice_from_counts(const PixelCounts& c) {
    const int64_t denom = c.pred + c.gt;
    if (denom == 0) return 1.0;
    return 2.0 * static_cast<double>(c.inter) / static_cast<double>(denom);
}

double iou_from_counts(const PixelCounts& c) {
    const int64_t uni = c.pred + c.gt - c.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(c.inter) / static_cast<double>(uni);
}

}  // namespace

double dice(const torch::Tensor& pred, const torch::Tensor& gt) {
    return dice_from_counts(count_pixels(pred, gt));
}

double iou(const torch::Tensor& pred, const torch::Tensor& gt) {
    return iou_from_counts(count_pixels(pred, gt));
}

PrCurve ap50_curve(std::vector<EvalDetection> predictions, const std::vector<EvalGtBox>& ground_truth,
                   double iou_threshold) {
    PrCurve out;
    if (ground_truth.empty()) {
        out.ap = predictions.empty() ? 1.0 : 0.0;
        return out;
    }

    // Stable order: score descending, ties by (volume, slice) then input order.
    std::stable_sort(predictions.begin(), predictions.end(),
                     [](const EvalDetection& a, const EvalDetection& b) { return a.score > b.score; });

    // Group ground truth per (volume, slice) for the greedy matching.
    std::map<std::pair<std::string, int>, std::vector<const EvalGtBox*>> gt_by_slice;
    for (const auto& g : ground_truth)
        gt_by_slice[{g.volume_id, g.slice_index}].push_back(&g);
    std::map<const EvalGtBox*, bool> used;

    std::vector<double> precisions, recalls;
    int64_t tp = 0, fp = 0;
    const auto n_gt = static_cast<double>(ground_truth.size());
    for (const auto& det : predictions) {
        const EvalGtBox* best = nullptr;
        double best_iou = 0.0;
        auto it = gt_by_slice.find({det.volume_id, det.slice_index});
        if (it != gt_by_slice.end()) {
            for (const auto* g : it->second) {
                if (used[g]) continue;
                const double v = box_iou(det.box, g->box);
                if (v > best_iou) {
                    best_iou = v;
                    best = g;
                }
            }
        }
        if (best != nullptr && best_iou >= iou_threshold) {
            used[best] = true;
            ++tp;
        } else {
            ++fp;
        }
        precisions.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recalls.push_back(static_cast<double>(tp) / n_gt);
        out.points.emplace_back(recalls.back(), precisions.back());
    }

    // All-points interpolation: integrate the precision envelope.
    double ap = 0.0;
    double prev_recall = 0.0;
    for (size_t i = 0; i < precisions.size(); ++i) {
        double envelope = precisions[i];
        for (size_t j = i + 1; j < precisions.size(); ++j)
            envelope = std::max(envelope, precisions[j]);
        ap += (recalls[i] - prev_recall) * envelope;
        prev_recall = recalls[i];
    }
    out.ap = ap;
    return out;
}

double ap50(std::vector<EvalDetection> predictions, const std::vector<EvalGtBox>& ground_truth,
            double iou_threshold) {
    return ap50_curve(std::move(predictions), ground_truth, iou_threshold).ap;
}

std::string EvalReport::to_json() const {
    json j;
    j["dice"] = dice;
    j["iou"] = iou;
    j["ap50"] = ap50;
    j["dice_macro"] = dice_macro;
    j["iou_macro"] = iou_macro;
    j["config_fingerprint"] = config_fingerprint;
    json pv = json::object();
    for (const auto& [id, s] : per_volume)
        pv[id] = {{"dice", s.dice}, {"iou", s.iou}, {"slices", s.slices}};
    j["per_volume"] = pv;
    json pr = json::array();
    for (const auto& [r, p] : pr_curve) pr.push_back({r, p});
    j["pr_curve"] = pr;
    j["dice_per_slice"] = dice_per_slice;
    return j.dump(2);
}

EvalReport evaluate(const WindowPredictor& predict, const DatasetManifest& manifest,
                    const std::string& split, int window_size,
                    const std::string& config_fingerprint) {
    EvalReport report;
    report.config_fingerprint = config_fingerprint;

    PixelCounts total;
    std::vector<EvalDetection> all_dets;
    std::vector<EvalGtBox> all_gts;

    for (const auto& entry : manifest.split(split)) {
        const auto volume = load_volume(manifest.root / entry.dir);
        PixelCounts vol_counts;
        const auto [lo, hi] = volume.meta.roi_slab;
        for (int s = lo; s < hi; ++s) {
            const auto window = extract_window(volume.image, s, window_size);
            const auto pred = predict(window, volume);

            const auto gt_slice = volume.label.data[s];
            const auto counts = count_pixels(pred.mask, gt_slice);
            total.inter += counts.inter;
            total.pred += counts.pred;
            total.gt += counts.gt;
            vol_counts.inter += counts.inter;
            vol_counts.pred += counts.pred;
            vol_counts.gt += counts.gt;
            report.dice_per_slice.push_back(dice_from_counts(counts));

            for (const auto& [box, score] : pred.detections)
                all_dets.push_back(EvalDetection{entry.id, s, box, score});
            for (const auto& g : boxes_from_mask(gt_slice, s))
                all_gts.push_back(EvalGtBox{entry.id, s, g.box});
        }
        VolumeScores vs;
        vs.dice = dice_from_counts(vol_counts);
        vs.iou = iou_from_counts(vol_counts);
        vs.slices = hi - lo;
        report.per_volume[entry.id] = vs;
    }

    report.dice = dice_from_counts(total);
    report.iou = iou_from_counts(total);
    double dsum = 0, isum = 0;
    for (const auto& [id, s] : report.per_volume) {
        dsum += s.dice;
        isum += s.iou;
    }
    const auto nv = static_cast<double>(std::max<size_t>(1, report.per_volume.size()));
    report.dice_macro = dsum / nv;
    report.iou_macro = isum / nv;

    auto curve = ap50_curve(all_dets, all_gts);
    report.ap50 = curve.ap;
    report.pr_curve = std::move(curve.points);
    return report;
}

}  // namespace cosam
