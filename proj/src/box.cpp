#include "r2t/box.hpp"

#include <algorithm>
#include <cmath>

namespace r2t {

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

Box clip(const Box& b, double width, double height) {
  return Box{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
             std::clamp(b.y2, 0.0, height)};
}

BoxDeltas encode_deltas(const Box& target, const Box& anchor, const DeltaWeights& w) {
  return {(target.cx() - anchor.cx()) / anchor.width() / w[0], (target.cy() - anchor.cy()) / anchor.height() / w[1],
          std::log(target.width() / anchor.width()) / w[2], std::log(target.height() / anchor.height()) / w[3]};
}

Box decode_deltas(const BoxDeltas& d, const Box& anchor, const DeltaWeights& w) {
  static const double kClamp = std::log(1000.0 / 16.0);
  const double cx = anchor.cx() + d[0] * w[0] * anchor.width();
  const double cy = anchor.cy() + d[1] * w[1] * anchor.height();
  const double bw = anchor.width() * std::exp(std::min(d[2] * w[2], kClamp));
  const double bh = anchor.height() * std::exp(std::min(d[3] * w[3], kClamp));
  return Box{cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh};
}

}  // namespace r2t
