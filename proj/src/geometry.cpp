// SPDX-License-Identifier: Apache-2.0
#include "sparsedet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "sparsedet/errors.hpp"
#include "sparsedet/ops.hpp"

namespace sparsedet {

double Box::area() const {
  return degenerate() ? 0.0 : width() * height();
}

Box Box::normalized() const {
  return {std::min(x1, x2), std::min(y1, y2), std::max(x1, x2),
          std::max(y1, y2)};
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  if (!(uni > 0.0) || a.degenerate() || b.degenerate()) return 0.0;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  if (a.degenerate() && b.degenerate()) return 0.0;
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enclosing = (cw > 0 && ch > 0) ? cw * ch : 0.0;
  if (!(enclosing > 0.0)) return 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  const double overlap = uni > 0.0 ? inter / uni : 0.0;
  // The enclosing box never has less area than the union; rounding can say
  // otherwise for nested boxes.
  return overlap - std::max(0.0, enclosing - uni) / enclosing;
}

Tensor pairwise_iou(const BoxSet& s) {
  const std::size_t n = s.size();
  std::vector<double> m(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    m[i * n + i] = iou(s.boxes[i], s.boxes[i]);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = iou(s.boxes[i], s.boxes[j]);
      m[i * n + j] = v;
      m[j * n + i] = v;
    }
  }
  return Tensor::from_data({n, n}, std::move(m));
}

Box clamp_to_image(const Box& b, double image_w, double image_h) {
  Box n = b.normalized();
  return {std::clamp(n.x1, 0.0, image_w), std::clamp(n.y1, 0.0, image_h),
          std::clamp(n.x2, 0.0, image_w), std::clamp(n.y2, 0.0, image_h)};
}

Box ensure_min_size(const Box& b, double min_size, double image_w,
                    double image_h) {
  auto fix = [min_size](double lo, double hi, double limit) {
    if (hi - lo >= min_size) return std::pair{lo, hi};
    const double c = std::clamp(0.5 * (lo + hi), 0.5 * min_size,
                                limit - 0.5 * min_size);
    return std::pair{c - 0.5 * min_size, c + 0.5 * min_size};
  };
  auto [x1, x2] = fix(b.x1, b.x2, image_w);
  auto [y1, y2] = fix(b.y1, b.y2, image_h);
  return {x1, y1, x2, y2};
}

Box apply_deltas(const Box& b, const BoxDeltas& d, double image_w,
                 double image_h) {
  const double w = b.x2 - b.x1;
  const double h = b.y2 - b.y1;
  const double cx = b.x1 + 0.5 * w;
  const double cy = b.y1 + 0.5 * h;
  const double ncx = cx + d[0] * w;
  const double ncy = cy + d[1] * h;
  const double nw = w * std::exp(std::clamp(d[2], -kDeltaLogClamp, kDeltaLogClamp));
  const double nh = h * std::exp(std::clamp(d[3], -kDeltaLogClamp, kDeltaLogClamp));
  return clamp_to_image(
      {ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh},
      image_w, image_h);
}

BoxDeltas encode_deltas(const Box& base, const Box& target) {
  const double w = base.width(), h = base.height();
  const double cx = base.x1 + 0.5 * w, cy = base.y1 + 0.5 * h;
  const double tw = target.width(), th = target.height();
  const double tcx = target.x1 + 0.5 * tw, tcy = target.y1 + 0.5 * th;
  return {(tcx - cx) / w, (tcy - cy) / h, std::log(tw / w), std::log(th / h)};
}

Tensor boxes_to_tensor(const BoxSet& s) {
  std::vector<double> v;
  v.reserve(s.size() * 4);
  for (const auto& b : s.boxes) v.insert(v.end(), {b.x1, b.y1, b.x2, b.y2});
  return Tensor::from_data({s.size(), 4}, std::move(v));
}

BoxSet tensor_to_boxes(const Tensor& t, double image_w, double image_h) {
  if (t.ndim() != 2 || t.dim(1) != 4) {
    throw DimensionError("tensor_to_boxes: expected [K x 4], got " +
                         shape_str(t.shape()));
  }
  BoxSet s{{}, image_w, image_h};
  auto d = t.data();
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    s.boxes.push_back({d[4 * i], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]});
  }
  return s;
}

namespace {

Tensor column(const Tensor& t, std::size_t c) { return slice(t, 1, c, 1); }

}  // namespace

Tensor decode_boxes(const Tensor& base, const Tensor& deltas, double image_w,
                    double image_h) {
  if (base.ndim() != 2 || base.dim(1) != 4 || deltas.shape() != base.shape()) {
    throw DimensionError("decode_boxes: base " + shape_str(base.shape()) +
                         " vs deltas " + shape_str(deltas.shape()));
  }
  Tensor w = sub(column(base, 2), column(base, 0));
  Tensor h = sub(column(base, 3), column(base, 1));
  Tensor cx = add(column(base, 0), scale(w, 0.5));
  Tensor cy = add(column(base, 1), scale(h, 0.5));
  Tensor ncx = add(cx, mul(column(deltas, 0), w));
  Tensor ncy = add(cy, mul(column(deltas, 1), h));
  Tensor nw = mul(w, exp(clamp(column(deltas, 2), -kDeltaLogClamp, kDeltaLogClamp)));
  Tensor nh = mul(h, exp(clamp(column(deltas, 3), -kDeltaLogClamp, kDeltaLogClamp)));
  Tensor half_w = scale(nw, 0.5);
  Tensor half_h = scale(nh, 0.5);
  return concat({clamp(sub(ncx, half_w), 0.0, image_w),
                 clamp(sub(ncy, half_h), 0.0, image_h),
                 clamp(add(ncx, half_w), 0.0, image_w),
                 clamp(add(ncy, half_h), 0.0, image_h)},
                1);
}

Tensor giou_rows(const Tensor& pred, const Tensor& target) {
  if (pred.ndim() != 2 || pred.dim(1) != 4 || target.shape() != pred.shape()) {
    throw DimensionError("giou_rows: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  const std::size_t k = pred.dim(0);
  Tensor px1 = column(pred, 0), py1 = column(pred, 1);
  Tensor px2 = column(pred, 2), py2 = column(pred, 3);
  Tensor gx1 = column(target, 0), gy1 = column(target, 1);
  Tensor gx2 = column(target, 2), gy2 = column(target, 3);

  Tensor iw = relu(sub(minimum(px2, gx2), maximum(px1, gx1)));
  Tensor ih = relu(sub(minimum(py2, gy2), maximum(py1, gy1)));
  Tensor inter = mul(iw, ih);
  Tensor area_p = mul(sub(px2, px1), sub(py2, py1));
  Tensor area_g = mul(sub(gx2, gx1), sub(gy2, gy1));
  Tensor uni = sub(add(area_p, area_g), inter);
  Tensor overlap = div(inter, uni);
  Tensor cw = sub(maximum(px2, gx2), minimum(px1, gx1));
  Tensor ch = sub(maximum(py2, gy2), minimum(py1, gy1));
  Tensor enclosing = mul(cw, ch);
  Tensor penalty = div(sub(enclosing, uni), enclosing);
  return reshape(sub(overlap, penalty), {k});
}

void write_boxes_csv(std::ostream& os, const std::vector<Box>& boxes,
                     const std::vector<int>* classes) {
  if (classes && classes->size() != boxes.size()) {
    throw DimensionError("write_boxes_csv: class count differs from boxes");
  }
  os << (classes ? "x1,y1,x2,y2,class_id\n" : "x1,y1,x2,y2\n");
  os << std::setprecision(17);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    os << b.x1 << ',' << b.y1 << ',' << b.x2 << ',' << b.y2;
    if (classes) os << ',' << (*classes)[i];
    os << '\n';
  }
}

LabeledBoxes read_boxes_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InputError("box CSV: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  bool with_class;
  if (line == "x1,y1,x2,y2") {
    with_class = false;
  } else if (line == "x1,y1,x2,y2,class_id") {
    with_class = true;
  } else {
    throw InputError("box CSV: unexpected header '" + line + "'");
  }
  LabeledBoxes out;
  if (with_class) out.classes.emplace();
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != (with_class ? 5u : 4u)) {
      throw InputError("box CSV line " + std::to_string(lineno) +
                       ": wrong field count");
    }
    try {
      out.boxes.push_back({std::stod(fields[0]), std::stod(fields[1]),
                           std::stod(fields[2]), std::stod(fields[3])});
      if (with_class) out.classes->push_back(std::stoi(fields[4]));
    } catch (const std::logic_error&) {
      throw InputError("box CSV line " + std::to_string(lineno) +
                       ": not a number");
    }
  }
  return out;
}

}  // namespace sparsedet
