#pragma once

#include <algorithm>
#include <cmath>

namespace cosam {

/// Axis-aligned box in pixel coordinates, half-open: (x1,y1) inclusive,
/// (x2,y2) exclusive. A valid box has x1 < x2 and y1 < y2.
struct Box {
    float x1 = 0.f;
    float y1 = 0.f;
    float x2 = 0.f;
    float y2 = 0.f;

    float width() const { return x2 - x1; }
    float height() const { return y2 - y1; }
    float area() const { return std::max(0.f, width()) * std::max(0.f, height()); }
    float cx() const { return 0.5f * (x1 + x2); }
    float cy() const { return 0.5f * (y1 + y2); }
    bool valid() const { return x1 < x2 && y1 < y2; }

    Box clipped(float w, float h) const {
        return Box{std::clamp(x1, 0.f, w), std::clamp(y1, 0.f, h),
                   std::clamp(x2, 0.f, w), std::clamp(y2, 0.f, h)};
    }
};

inline float box_intersection(const Box& a, const Box& b) {
    const float iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const float ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.f || ih <= 0.f) return 0.f;
    return iw * ih;
}

inline float box_iou(const Box& a, const Box& b) {
    const float inter = box_intersection(a, b);
    const float uni = a.area() + b.area() - inter;
    return uni > 0.f ? inter / uni : 0.f;
}

/// Generalized IoU: IoU - |hull \ union| / |hull|, in [-1, 1].
inline float box_giou(const Box& a, const Box& b) {
    const float inter = box_intersection(a, b);
    const float uni = a.area() + b.area() - inter;
    const float iou = uni > 0.f ? inter / uni : 0.f;
    const float hw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const float hh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const float hull = hw * hh;
    if (hull <= 0.f) return iou;
    return iou - (hull - uni) / hull;
}

/// Ground-truth box on one slice, derived from the pixel label.
struct GtBox {
    Box box;
    int slice_index = 0;
    int component_id = 0;
};

}  // namespace cosam
