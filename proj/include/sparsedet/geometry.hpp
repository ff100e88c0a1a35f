// SPDX-License-Identifier: Apache-2.0
//
// Axis-aligned box algebra. Boxes are stored corner-form (x1, y1, x2, y2) in
// image pixels; refinement deltas are center-size (dx, dy, dw, dh):
//
//   cx' = cx + dx * w     w' = w * exp(clamp(dw, -4, 4))
//   cy' = cy + dy * h     h' = h * exp(clamp(dh, -4, 4))
//
// and the decoded box is clamped to the image.
#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <vector>

#include "sparsedet/tensor.hpp"

namespace sparsedet {

inline constexpr double kDeltaLogClamp = 4.0;

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const;
  bool degenerate() const { return !(x2 > x1 && y2 > y1); }
  // Swaps corners so that x1 <= x2 and y1 <= y2.
  Box normalized() const;

  friend bool operator==(const Box&, const Box&) = default;
};

struct BoxSet {
  std::vector<Box> boxes;
  double image_w = 0;
  double image_h = 0;

  std::size_t size() const { return boxes.size(); }
};

using BoxDeltas = std::array<double, 4>;

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

// N x N constant tensor of iou(b_i, b_j).
Tensor pairwise_iou(const BoxSet& s);

Box clamp_to_image(const Box& b, double image_w, double image_h);
// Grows a box about its center to at least min_size per side (kept inside
// the image); used on the detached boxes handed to the next stage.
Box ensure_min_size(const Box& b, double min_size, double image_w,
                    double image_h);

Box apply_deltas(const Box& b, const BoxDeltas& deltas, double image_w,
                 double image_h);
// Inverse of apply_deltas when no clamping triggers.
BoxDeltas encode_deltas(const Box& base, const Box& target);

// Differentiable counterparts over [K x 4] corner tensors.
Tensor boxes_to_tensor(const BoxSet& s);
BoxSet tensor_to_boxes(const Tensor& t, double image_w, double image_h);
Tensor decode_boxes(const Tensor& base, const Tensor& deltas, double image_w,
                    double image_h);
// Row-wise giou against constant targets; result has shape [K].
Tensor giou_rows(const Tensor& pred, const Tensor& target);

// CSV with a one-line header: x1,y1,x2,y2[,class_id].
struct LabeledBoxes {
  std::vector<Box> boxes;
  std::optional<std::vector<int>> classes;
};
void write_boxes_csv(std::ostream& os, const std::vector<Box>& boxes,
                     const std::vector<int>* classes = nullptr);
LabeledBoxes read_boxes_csv(std::istream& is);

}  // namespace sparsedet
