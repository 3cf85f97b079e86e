#pragma once

#include <algorithm>
#include <stdexcept>

namespace glotran {

/// Axis-aligned box in source pixels, half-open on the max edges.
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;
  double confidence = 1.0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  long long area() const {
    return static_cast<long long>(std::max(0, width())) * std::max(0, height());
  }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const {
    return x_min < x_max && y_min < y_max && confidence >= 0.0 && confidence <= 1.0;
  }
  bool contains(const BoundingBox& o) const {
    return x_min <= o.x_min && y_min <= o.y_min && o.x_max <= x_max && o.y_max <= y_max;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline BoundingBox box_union(const BoundingBox& a, const BoundingBox& b) {
  return {std::min(a.x_min, b.x_min), std::min(a.y_min, b.y_min), std::max(a.x_max, b.x_max),
          std::max(a.y_max, b.y_max), std::max(a.confidence, b.confidence)};
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const long long iw = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const long long ih = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const long long inter = iw * ih;
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace glotran
