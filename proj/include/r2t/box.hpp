#pragma once

#include <array>

namespace r2t {

// Axis-aligned box in image pixels, origin top-left, continuous edges.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  friend bool operator==(const Box&, const Box&) = default;
};

double iou(const Box& a, const Box& b);
Box clip(const Box& b, double width, double height);

// (dx/w, dy/h, log sw, log sh), each divided by its weight.
using BoxDeltas = std::array<double, 4>;
using DeltaWeights = std::array<double, 4>;

BoxDeltas encode_deltas(const Box& target, const Box& anchor, const DeltaWeights& weights);
// Log-scale terms are clamped to log(1000/16) as in the common detectors.
Box decode_deltas(const BoxDeltas& deltas, const Box& anchor, const DeltaWeights& weights);

}  // namespace r2t
