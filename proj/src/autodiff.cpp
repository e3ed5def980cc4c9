// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode engine. Ops evaluate eagerly into the tape; backward() walks
// nodes in reverse creation order, so the creation order is the topological
// order. Gradients are only materialized for nodes flagged needs_grad, which
// is how selective adaptation skips weight-gradient work for frozen layers.

#include "adepth/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace adepth::ad {

namespace {

// Coordinates this close to an integer pixel index are snapped onto it, so
// exact-identity grids sample losslessly even after a round trip through the
// projective chain. The snap zone lies well inside the documented kink
// exclusion band (1e-3) used by the gradient checks.
constexpr double kSampleSnap = 1e-4;

int reflect_index(int i, int n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

double Tape::scalar(NodeId id) const {
  const Tensor& t = val(id);
  if (t.numel() != 1) throw ShapeError("expected scalar node, got " + shape_str(t.shape()));
  return t[0];
}

bool Tape::has_grad(NodeId id) const { return !at(id).grad.empty(); }

const Tensor& Tape::grad(NodeId id) const {
  const Node& n = at(id);
  if (n.grad.empty()) throw Error("no gradient accumulated for node");
  return n.grad;
}

void Tape::clear() {
  nodes_.clear();
  consumed_ = false;
}

const Tensor& Tape::input_val(const Node& n, int i) const {
  const Node& src = at(n.in[static_cast<size_t>(i)]);
  return src.leaf_ref ? *src.leaf_ref : src.out;
}

NodeId Tape::push(Node n) {
  if (n.op != Op::kLeaf) {
    enforce_precision(n.out);
    if (check_finite) require_finite(n.out, "op output");
    n.needs_grad = false;
    if (n.op != Op::kLtMask) {
      for (int i = 0; i < n.nin; ++i) {
        if (at(n.in[static_cast<size_t>(i)]).needs_grad) n.needs_grad = true;
      }
    }
  } else {
    n.needs_grad = n.requires_grad;
  }
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor value, bool requires_grad) {
  enforce_precision(value);
  Node n;
  n.op = Op::kLeaf;
  n.out = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

NodeId Tape::leaf_ref(const Tensor* value, bool requires_grad) {
  Node n;
  n.op = Op::kLeaf;
  n.leaf_ref = value;
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

// --- elementwise ------------------------------------------------------------

namespace {
void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}
}  // namespace

NodeId Tape::add(NodeId x, NodeId y) {
  Node n;
  n.op = Op::kAdd;
  n.in = {x, y, kNoNode};
  n.nin = 2;
  const Tensor& a = input_val(n, 0);
  const Tensor& b = input_val(n, 1);
  check_same_shape(a, b, "add");
  n.out = a;
  for (int64_t i = 0; i < b.numel(); ++i) n.out[i] += b[i];
  return push(std::move(n));
}

NodeId Tape::sub(NodeId x, NodeId y) {
  Node n;
  n.op = Op::kSub;
  n.in = {x, y, kNoNode};
  n.nin = 2;
  const Tensor& a = input_val(n, 0);
  const Tensor& b = input_val(n, 1);
  check_same_shape(a, b, "sub");
  n.out = a;
  for (int64_t i = 0; i < b.numel(); ++i) n.out[i] -= b[i];
  return push(std::move(n));
}

NodeId Tape::mul(NodeId x, NodeId y) {
  Node n;
  n.op = Op::kMul;
  n.in = {x, y, kNoNode};
  n.nin = 2;
  const Tensor& a = input_val(n, 0);
  const Tensor& b = input_val(n, 1);
  check_same_shape(a, b, "mul");
  n.out = a;
  for (int64_t i = 0; i < b.numel(); ++i) n.out[i] *= b[i];
  return push(std::move(n));
}

NodeId Tape::div(NodeId x, NodeId y) {
  Node n;
  n.op = Op::kDiv;
  n.in = {x, y, kNoNode};
  n.nin = 2;
  const Tensor& a = input_val(n, 0);
  const Tensor& b = input_val(n, 1);
  check_same_shape(a, b, "div");
  n.out = a;
  for (int64_t i = 0; i < b.numel(); ++i) n.out[i] /= b[i];
  return push(std::move(n));
}

NodeId Tape::div_scalar(NodeId x, NodeId s) {
  Node n;
  n.op = Op::kDivScalar;
  n.in = {x, s, kNoNode};
  n.nin = 2;
  const Tensor& a = input_val(n, 0);
  const Tensor& b = input_val(n, 1);
  if (b.numel() != 1) throw ShapeError("div_scalar: divisor must be a scalar node");
  n.out = a;
  const double inv = b[0];
  for (int64_t i = 0; i < a.numel(); ++i) n.out[i] /= inv;
  return push(std::move(n));
}

NodeId Tape::affine(NodeId x, double a, double b) {
  Node n;
  n.op = Op::kAffine;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  n.a = a;
  n.b = b;
  const Tensor& v = input_val(n, 0);
  n.out = v;
  for (int64_t i = 0; i < v.numel(); ++i) n.out[i] = a * v[i] + b;
  return push(std::move(n));
}

NodeId Tape::relu(NodeId x) {
  Node n;
  n.op = Op::kRelu;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  n.out = v;
  for (int64_t i = 0; i < v.numel(); ++i) n.out[i] = v[i] > 0 ? v[i] : 0.0;
  return push(std::move(n));
}

NodeId Tape::elu(NodeId x) {
  Node n;
  n.op = Op::kElu;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  n.out = v;
  for (int64_t i = 0; i < v.numel(); ++i) n.out[i] = v[i] > 0 ? v[i] : std::expm1(v[i]);
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId x) {
  Node n;
  n.op = Op::kSigmoid;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  n.out = v;
  for (int64_t i = 0; i < v.numel(); ++i) n.out[i] = 1.0 / (1.0 + std::exp(-v[i]));
  return push(std::move(n));
}

NodeId Tape::abs(NodeId x) {
  Node n;
  n.op = Op::kAbs;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  n.out = v;
  for (int64_t i = 0; i < v.numel(); ++i) n.out[i] = std::abs(v[i]);
  return push(std::move(n));
}

NodeId Tape::exp(NodeId x) {
  Node n;
  n.op = Op::kExp;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  n.out = v;
  for (int64_t i = 0; i < v.numel(); ++i) n.out[i] = std::exp(v[i]);
  return push(std::move(n));
}

NodeId Tape::reciprocal(NodeId x) {
  Node n;
  n.op = Op::kReciprocal;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  n.out = v;
  for (int64_t i = 0; i < v.numel(); ++i) n.out[i] = 1.0 / v[i];
  return push(std::move(n));
}

// --- convolution and spatial ops ---------------------------------------------

NodeId Tape::conv2d(NodeId x, NodeId w, NodeId bias, int stride, int pad) {
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  if (pad < 0) throw ShapeError("conv2d: negative padding");
  Node n;
  n.op = Op::kConv2d;
  n.in = {x, w, bias};
  n.nin = bias == kNoNode ? 2 : 3;
  n.stride = stride;
  n.pad = pad;
  const Tensor& xv = input_val(n, 0);
  const Tensor& wv = input_val(n, 1);
  if (xv.ndim() != 3 || wv.ndim() != 4) throw ShapeError("conv2d: want x (C,H,W), w (Co,Ci,Kh,Kw)");
  const int ci = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  const int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != ci) {
    throw ShapeError("conv2d: channel mismatch, x has " + std::to_string(ci) + ", w expects " +
                     std::to_string(wv.dim(1)));
  }
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: output would be empty");
  n.out = Tensor({co, ho, wo});

  const double* bptr = nullptr;
  if (bias != kNoNode) {
    const Tensor& bv = input_val(n, 2);
    if (bv.numel() != co) throw ShapeError("conv2d: bias length must equal output channels");
    bptr = bv.data();
  }
  const double* xd = xv.data();
  const double* wdta = wv.data();
  double* od = n.out.data();
  for (int oc = 0; oc < co; ++oc) {
    double* oplane = od + static_cast<size_t>(oc) * ho * wo;
    const double init = bptr ? bptr[oc] : 0.0;
    for (int i = 0; i < ho * wo; ++i) oplane[i] = init;
    for (int icch = 0; icch < ci; ++icch) {
      const double* xplane = xd + static_cast<size_t>(icch) * h * wd;
      const double* wk = wdta + ((static_cast<size_t>(oc) * ci + icch) * kh) * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const double wval = wk[ky * kw + kx];
          if (wval == 0.0) continue;
          const int ax = kx - pad;
          int x0 = 0;
          if (ax < 0) x0 = (-ax + stride - 1) / stride;
          int x1 = wo - 1;
          const int maxix = wd - 1 - ax;
          if (maxix < x1 * stride) x1 = maxix / stride;
          for (int y = 0; y < ho; ++y) {
            const int iy = y * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const double* xrow = xplane + static_cast<size_t>(iy) * wd + ax;
            double* orow = oplane + static_cast<size_t>(y) * wo;
            if (stride == 1) {
              for (int ox = x0; ox <= x1; ++ox) orow[ox] += wval * xrow[ox];
            } else {
              for (int ox = x0; ox <= x1; ++ox) orow[ox] += wval * xrow[2 * ox];
            }
          }
        }
      }
    }
  }
  return push(std::move(n));
}

NodeId Tape::upsample_nearest2(NodeId x) {
  Node n;
  n.op = Op::kUpsample2;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  if (v.ndim() != 3) throw ShapeError("upsample_nearest2: want (C,H,W)");
  const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  n.out = Tensor({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int x2 = 0; x2 < 2 * w; ++x2) n.out.at(ch, y, x2) = v.at(ch, y >> 1, x2 >> 1);
    }
  }
  return push(std::move(n));
}

NodeId Tape::avg_pool3(NodeId x) {
  Node n;
  n.op = Op::kAvgPool3;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  if (v.ndim() != 3 || v.dim(1) < 3 || v.dim(2) < 3) throw ShapeError("avg_pool3: input too small");
  const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  n.out = Tensor({c, h - 2, w - 2});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y + 2 < h; ++y) {
      for (int xx = 0; xx + 2 < w; ++xx) {
        double s = 0.0;
        for (int dy = 0; dy < 3; ++dy) {
          for (int dx = 0; dx < 3; ++dx) s += v.at(ch, y + dy, xx + dx);
        }
        n.out.at(ch, y, xx) = s / 9.0;
      }
    }
  }
  return push(std::move(n));
}

NodeId Tape::reflect_pad(NodeId x, int p) {
  if (p < 1) throw ShapeError("reflect_pad: pad must be >= 1");
  Node n;
  n.op = Op::kReflectPad;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  n.pad = p;
  const Tensor& v = input_val(n, 0);
  if (v.ndim() != 3 || v.dim(1) < 2 || v.dim(2) < 2) throw ShapeError("reflect_pad: input too small");
  const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  n.out = Tensor({c, h + 2 * p, w + 2 * p});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h + 2 * p; ++y) {
      const int sy = reflect_index(y - p, h);
      for (int xx = 0; xx < w + 2 * p; ++xx) {
        n.out.at(ch, y, xx) = v.at(ch, sy, reflect_index(xx - p, w));
      }
    }
  }
  return push(std::move(n));
}

namespace {

struct SampleLoc {
  int u0, v0;
  double fu, fv;
  bool du_live, dv_live;  // false where clamped out of frame
};

SampleLoc locate_sample(double gx, double gy, int w, int h) {
  SampleLoc s{};
  double u = (gx + 1.0) * 0.5 * (w - 1);
  double v = (gy + 1.0) * 0.5 * (h - 1);
  const double ru = std::nearbyint(u), rv = std::nearbyint(v);
  if (std::abs(u - ru) < kSampleSnap) u = ru;
  if (std::abs(v - rv) < kSampleSnap) v = rv;
  s.du_live = u > 0.0 && u < w - 1;
  s.dv_live = v > 0.0 && v < h - 1;
  u = std::clamp(u, 0.0, static_cast<double>(w - 1));
  v = std::clamp(v, 0.0, static_cast<double>(h - 1));
  s.u0 = std::min(static_cast<int>(u), w - 2);
  s.v0 = std::min(static_cast<int>(v), h - 2);
  s.fu = u - s.u0;
  s.fv = v - s.v0;
  return s;
}

}  // namespace

NodeId Tape::grid_sample(NodeId image, NodeId grid) {
  Node n;
  n.op = Op::kGridSample;
  n.in = {image, grid, kNoNode};
  n.nin = 2;
  const Tensor& img = input_val(n, 0);
  const Tensor& g = input_val(n, 1);
  if (img.ndim() != 3 || g.ndim() != 3 || g.dim(0) != 2) {
    throw ShapeError("grid_sample: want image (C,H,W) and grid (2,H,W)");
  }
  if (img.dim(1) != g.dim(1) || img.dim(2) != g.dim(2)) {
    throw ShapeError("grid_sample: grid extent must match image extent");
  }
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  n.out = Tensor({c, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const SampleLoc s = locate_sample(g.at(0, y, x), g.at(1, y, x), w, h);
      for (int ch = 0; ch < c; ++ch) {
        const double v00 = img.at(ch, s.v0, s.u0);
        const double v01 = img.at(ch, s.v0, s.u0 + 1);
        const double v10 = img.at(ch, s.v0 + 1, s.u0);
        const double v11 = img.at(ch, s.v0 + 1, s.u0 + 1);
        n.out.at(ch, y, x) =
            (1.0 - s.fv) * ((1.0 - s.fu) * v00 + s.fu * v01) + s.fv * ((1.0 - s.fu) * v10 + s.fu * v11);
      }
    }
  }
  return push(std::move(n));
}

NodeId Tape::concat_c(std::span<const NodeId> xs) {
  if (xs.empty() || xs.size() > 3) throw ShapeError("concat_c: want 1..3 inputs");
  Node n;
  n.op = Op::kConcatC;
  n.nin = static_cast<int>(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) n.in[i] = xs[i];
  int c = 0;
  const Tensor& first = input_val(n, 0);
  if (first.ndim() != 3) throw ShapeError("concat_c: want (C,H,W)");
  const int h = first.dim(1), w = first.dim(2);
  for (int i = 0; i < n.nin; ++i) {
    const Tensor& t = input_val(n, i);
    if (t.ndim() != 3 || t.dim(1) != h || t.dim(2) != w) {
      throw ShapeError("concat_c: incompatible input shapes");
    }
    n.iaux.push_back(c);
    c += t.dim(0);
  }
  n.out = Tensor({c, h, w});
  for (int i = 0; i < n.nin; ++i) {
    const Tensor& t = input_val(n, i);
    std::copy(t.data(), t.data() + t.numel(),
              n.out.data() + static_cast<size_t>(n.iaux[static_cast<size_t>(i)]) * h * w);
  }
  return push(std::move(n));
}

NodeId Tape::slice(NodeId x, std::array<int, 3> off, std::array<int, 3> ext) {
  Node n;
  n.op = Op::kSlice;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  n.off = off;
  n.ext = ext;
  const Tensor& v = input_val(n, 0);
  if (v.ndim() != 3) throw ShapeError("slice: want (C,H,W)");
  for (int d = 0; d < 3; ++d) {
    if (off[static_cast<size_t>(d)] < 0 || ext[static_cast<size_t>(d)] < 1 ||
        off[static_cast<size_t>(d)] + ext[static_cast<size_t>(d)] > v.dim(d)) {
      throw ShapeError("slice: window out of range");
    }
  }
  n.out = Tensor({ext[0], ext[1], ext[2]});
  for (int ch = 0; ch < ext[0]; ++ch) {
    for (int y = 0; y < ext[1]; ++y) {
      for (int xx = 0; xx < ext[2]; ++xx) {
        n.out.at(ch, y, xx) = v.at(ch + off[0], y + off[1], xx + off[2]);
      }
    }
  }
  return push(std::move(n));
}

// --- reductions ---------------------------------------------------------------

NodeId Tape::mean_all(NodeId x) {
  Node n;
  n.op = Op::kMeanAll;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  double s = 0.0;
  for (int64_t i = 0; i < v.numel(); ++i) s += v[i];
  n.out = Tensor::scalar(s / static_cast<double>(v.numel()));
  return push(std::move(n));
}

NodeId Tape::sum_all(NodeId x) {
  Node n;
  n.op = Op::kSumAll;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  double s = 0.0;
  for (int64_t i = 0; i < v.numel(); ++i) s += v[i];
  n.out = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId Tape::mean_c(NodeId x) {
  Node n;
  n.op = Op::kMeanC;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  if (v.ndim() != 3) throw ShapeError("mean_c: want (C,H,W)");
  const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  n.out = Tensor({1, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) n.out.at(0, y, xx) += v.at(ch, y, xx);
    }
  }
  for (int64_t i = 0; i < n.out.numel(); ++i) n.out[i] /= c;
  return push(std::move(n));
}

NodeId Tape::min_c(NodeId x) {
  Node n;
  n.op = Op::kMinC;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  if (v.ndim() != 3) throw ShapeError("min_c: want (C,H,W)");
  const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  n.out = Tensor({1, h, w});
  n.iaux.assign(static_cast<size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      double best = v.at(0, y, xx);
      int arg = 0;
      for (int ch = 1; ch < c; ++ch) {
        const double cand = v.at(ch, y, xx);
        if (cand < best) {  // strict: ties keep the first channel
          best = cand;
          arg = ch;
        }
      }
      n.out.at(0, y, xx) = best;
      n.iaux[static_cast<size_t>(y) * w + xx] = arg;
    }
  }
  return push(std::move(n));
}

NodeId Tape::mean_hw(NodeId x) {
  Node n;
  n.op = Op::kMeanHW;
  n.in = {x, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  if (v.ndim() != 3) throw ShapeError("mean_hw: want (C,H,W)");
  const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  n.out = Tensor({c, 1, 1});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) s += v.at(ch, y, xx);
    }
    n.out.at(ch, 0, 0) = s / (static_cast<double>(h) * w);
  }
  return push(std::move(n));
}

NodeId Tape::lt_mask(NodeId a, NodeId b) {
  Node n;
  n.op = Op::kLtMask;
  n.in = {a, b, kNoNode};
  n.nin = 2;
  const Tensor& x = input_val(n, 0);
  const Tensor& y = input_val(n, 1);
  check_same_shape(x, y, "lt_mask");
  n.out = x;
  for (int64_t i = 0; i < x.numel(); ++i) n.out[i] = x[i] < y[i] ? 1.0 : 0.0;
  return push(std::move(n));
}

// --- batch norm ---------------------------------------------------------------

NodeId Tape::batch_norm(NodeId x, NodeId gamma, NodeId beta, Tensor* rmean, Tensor* rvar,
                        bool training, double momentum, double eps) {
  Node n;
  n.op = Op::kBatchNorm;
  n.in = {x, gamma, beta};
  n.nin = 3;
  n.bn_rmean = rmean;
  n.bn_rvar = rvar;
  n.bn_train = training;
  n.bn_momentum = momentum;
  n.bn_eps = eps;
  const Tensor& v = input_val(n, 0);
  const Tensor& g = input_val(n, 1);
  const Tensor& b = input_val(n, 2);
  if (v.ndim() != 3) throw ShapeError("batch_norm: want (C,H,W)");
  const int c = v.dim(0), h = v.dim(1), w = v.dim(2);
  if (g.numel() != c || b.numel() != c || rmean->numel() != c || rvar->numel() != c) {
    throw ShapeError("batch_norm: per-channel parameter length mismatch");
  }
  const int64_t hw = static_cast<int64_t>(h) * w;
  n.out = Tensor({c, h, w});
  n.aux.vec().clear();
  n.aux = Tensor({2 * c});  // [mu..., invstd...] per channel (mu = running mean in eval mode)
  for (int ch = 0; ch < c; ++ch) {
    double mu, var;
    if (training) {
      double s = 0.0;
      for (int64_t i = 0; i < hw; ++i) s += v[ch * hw + i];
      mu = s / static_cast<double>(hw);
      double sv = 0.0;
      for (int64_t i = 0; i < hw; ++i) {
        const double d = v[ch * hw + i] - mu;
        sv += d * d;
      }
      var = sv / static_cast<double>(hw);
      (*rmean)[ch] = enforce_precision((1.0 - momentum) * (*rmean)[ch] + momentum * mu);
      (*rvar)[ch] = enforce_precision((1.0 - momentum) * (*rvar)[ch] + momentum * var);
    } else {
      mu = (*rmean)[ch];
      var = (*rvar)[ch];
    }
    const double invstd = 1.0 / std::sqrt(var + eps);
    n.aux[ch] = mu;
    n.aux[c + ch] = invstd;
    const double gc = g[ch], bc = b[ch];
    for (int64_t i = 0; i < hw; ++i) {
      n.out[ch * hw + i] = gc * ((v[ch * hw + i] - mu) * invstd) + bc;
    }
  }
  return push(std::move(n));
}

// --- geometry ops ---------------------------------------------------------------

NodeId Tape::backproject(NodeId depth, const geom::CameraIntrinsics& k) {
  Node n;
  n.op = Op::kBackproject;
  n.in = {depth, kNoNode, kNoNode};
  n.nin = 1;
  n.intr = k;
  const Tensor& d = input_val(n, 0);
  if (d.ndim() != 3 || d.dim(0) != 1) throw ShapeError("backproject: depth must be (1,H,W)");
  for (int64_t i = 0; i < d.numel(); ++i) {
    if (!(d[i] > 0.0)) throw NonFiniteError("backproject: non-positive depth");
  }
  n.out = geom::backproject(d, k);
  return push(std::move(n));
}

NodeId Tape::project(NodeId pts, const geom::CameraIntrinsics& k) {
  Node n;
  n.op = Op::kProject;
  n.in = {pts, kNoNode, kNoNode};
  n.nin = 1;
  n.intr = k;
  n.out = geom::project(input_val(n, 0), k);
  return push(std::move(n));
}

NodeId Tape::rodrigues(NodeId w) {
  Node n;
  n.op = Op::kRodrigues;
  n.in = {w, kNoNode, kNoNode};
  n.nin = 1;
  const Tensor& v = input_val(n, 0);
  if (v.numel() != 3) throw ShapeError("rodrigues: want a 3-vector");
  const auto r = geom::rodrigues({v[0], v[1], v[2]});
  n.out = Tensor::from({3, 3}, std::vector<double>(r.begin(), r.end()));
  return push(std::move(n));
}

NodeId Tape::rigid_transform(NodeId pts, NodeId rot, NodeId t) {
  Node n;
  n.op = Op::kRigidTransform;
  n.in = {pts, rot, t};
  n.nin = 3;
  const Tensor& p = input_val(n, 0);
  const Tensor& r = input_val(n, 1);
  const Tensor& tv = input_val(n, 2);
  if (p.ndim() != 3 || p.dim(0) != 3) throw ShapeError("rigid_transform: points must be (3,H,W)");
  if (r.numel() != 9 || tv.numel() != 3) throw ShapeError("rigid_transform: want R (3,3), t (3)");
  const int h = p.dim(1), w = p.dim(2);
  n.out = Tensor({3, h, w});
  const int64_t hw = static_cast<int64_t>(h) * w;
  for (int j = 0; j < 3; ++j) {
    for (int64_t i = 0; i < hw; ++i) {
      n.out[j * hw + i] =
          r[j * 3 + 0] * p[0 * hw + i] + r[j * 3 + 1] * p[1 * hw + i] + r[j * 3 + 2] * p[2 * hw + i] + tv[j];
    }
  }
  return push(std::move(n));
}

// --- backward ---------------------------------------------------------------

void Tape::accumulate(NodeId id, const Tensor& g) {
  Node& n = at(id);
  if (!n.needs_grad) return;
  if (n.grad.empty()) {
    const Tensor& v = n.leaf_ref ? *n.leaf_ref : n.out;
    n.grad = Tensor(v.shape());
  }
  if (!n.grad.same_shape(g)) throw ShapeError("gradient shape mismatch");
  for (int64_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
  enforce_precision(n.grad);
}

void Tape::backward(NodeId loss) {
  if (consumed_) throw Error("tape already consumed by backward; rebuild the graph");
  consumed_ = true;
  const Tensor& lv = val(loss);
  if (lv.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(lv.shape()));
  if (!at(loss).needs_grad) return;  // nothing trainable anywhere upstream
  at(loss).grad = Tensor::scalar(1.0);
  for (NodeId id = loss; id >= 0; --id) {
    Node& n = at(id);
    if (n.grad.empty() || n.nin == 0) continue;
    dispatch_backward(n);
  }
}

namespace {
// local helper for scatter into input grads
struct GradRef {
  Tensor* g = nullptr;
};
}  // namespace

void Tape::dispatch_backward(Node& n) {
  const Tensor& g = n.grad;
  auto want = [&](int i) { return at(n.in[static_cast<size_t>(i)]).needs_grad; };
  auto push_grad = [&](int i, const Tensor& t) { accumulate(n.in[static_cast<size_t>(i)], t); };

  switch (n.op) {
    case Op::kLeaf:
    case Op::kLtMask:
      return;
    case Op::kAdd: {
      if (want(0)) push_grad(0, g);
      if (want(1)) push_grad(1, g);
      return;
    }
    case Op::kSub: {
      if (want(0)) push_grad(0, g);
      if (want(1)) {
        Tensor t = g;
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = -t[i];
        push_grad(1, t);
      }
      return;
    }
    case Op::kMul: {
      const Tensor& a = input_val(n, 0);
      const Tensor& b = input_val(n, 1);
      if (want(0)) {
        Tensor t = g;
        for (int64_t i = 0; i < t.numel(); ++i) t[i] *= b[i];
        push_grad(0, t);
      }
      if (want(1)) {
        Tensor t = g;
        for (int64_t i = 0; i < t.numel(); ++i) t[i] *= a[i];
        push_grad(1, t);
      }
      return;
    }
    case Op::kDiv: {
      const Tensor& b = input_val(n, 1);
      if (want(0)) {
        Tensor t = g;
        for (int64_t i = 0; i < t.numel(); ++i) t[i] /= b[i];
        push_grad(0, t);
      }
      if (want(1)) {
        Tensor t = g;
        for (int64_t i = 0; i < t.numel(); ++i) t[i] *= -n.out[i] / b[i];
        push_grad(1, t);
      }
      return;
    }
    case Op::kDivScalar: {
      const Tensor& s = input_val(n, 1);
      if (want(0)) {
        Tensor t = g;
        for (int64_t i = 0; i < t.numel(); ++i) t[i] /= s[0];
        push_grad(0, t);
      }
      if (want(1)) {
        double acc = 0.0;
        for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * n.out[i];
        push_grad(1, Tensor::scalar(-acc / s[0]));
      }
      return;
    }
    case Op::kAffine: {
      if (!want(0)) return;
      Tensor t = g;
      for (int64_t i = 0; i < t.numel(); ++i) t[i] *= n.a;
      push_grad(0, t);
      return;
    }
    case Op::kRelu: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      Tensor t = g;
      for (int64_t i = 0; i < t.numel(); ++i) {
        if (!(x[i] > 0.0)) t[i] = 0.0;  // subgradient 0 at the kink
      }
      push_grad(0, t);
      return;
    }
    case Op::kElu: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      Tensor t = g;
      for (int64_t i = 0; i < t.numel(); ++i) {
        if (!(x[i] > 0.0)) t[i] *= n.out[i] + 1.0;
      }
      push_grad(0, t);
      return;
    }
    case Op::kSigmoid: {
      if (!want(0)) return;
      Tensor t = g;
      for (int64_t i = 0; i < t.numel(); ++i) t[i] *= n.out[i] * (1.0 - n.out[i]);
      push_grad(0, t);
      return;
    }
    case Op::kAbs: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      Tensor t = g;
      for (int64_t i = 0; i < t.numel(); ++i) {
        t[i] *= x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
      }
      push_grad(0, t);
      return;
    }
    case Op::kExp: {
      if (!want(0)) return;
      Tensor t = g;
      for (int64_t i = 0; i < t.numel(); ++i) t[i] *= n.out[i];
      push_grad(0, t);
      return;
    }
    case Op::kReciprocal: {
      if (!want(0)) return;
      Tensor t = g;
      for (int64_t i = 0; i < t.numel(); ++i) t[i] *= -n.out[i] * n.out[i];
      push_grad(0, t);
      return;
    }
    case Op::kConv2d: {
      const Tensor& x = input_val(n, 0);
      const Tensor& w = input_val(n, 1);
      const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
      const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
      const int ho = n.out.dim(1), wo = n.out.dim(2);
      const int stride = n.stride, pad = n.pad;
      if (n.nin == 3 && want(2)) {
        Tensor db({co});
        for (int oc = 0; oc < co; ++oc) {
          double s = 0.0;
          const double* gp = g.data() + static_cast<size_t>(oc) * ho * wo;
          for (int i = 0; i < ho * wo; ++i) s += gp[i];
          db[oc] = s;
        }
        push_grad(2, db);
      }
      const bool wx = want(0), ww = want(1);
      if (!wx && !ww) return;
      Tensor dx, dw;
      if (wx) dx = Tensor(x.shape());
      if (ww) dw = Tensor(w.shape());
      for (int oc = 0; oc < co; ++oc) {
        const double* gplane = g.data() + static_cast<size_t>(oc) * ho * wo;
        for (int icch = 0; icch < ci; ++icch) {
          const double* xplane = x.data() + static_cast<size_t>(icch) * h * wd;
          double* dxplane = wx ? dx.data() + static_cast<size_t>(icch) * h * wd : nullptr;
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const double wval = w[((static_cast<size_t>(oc) * ci + icch) * kh + ky) * kw + kx];
              const int ax = kx - pad;
              int x0 = 0;
              if (ax < 0) x0 = (-ax + stride - 1) / stride;
              int x1 = wo - 1;
              const int maxix = wd - 1 - ax;
              if (maxix < x1 * stride) x1 = maxix / stride;
              double wacc = 0.0;
              for (int y = 0; y < ho; ++y) {
                const int iy = y * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                const double* grow = gplane + static_cast<size_t>(y) * wo;
                const double* xrow = xplane + static_cast<size_t>(iy) * wd + ax;
                double* dxrow = wx ? dxplane + static_cast<size_t>(iy) * wd + ax : nullptr;
                if (stride == 1) {
                  if (ww) {
                    for (int ox = x0; ox <= x1; ++ox) wacc += grow[ox] * xrow[ox];
                  }
                  if (wx) {
                    for (int ox = x0; ox <= x1; ++ox) dxrow[ox] += wval * grow[ox];
                  }
                } else {
                  if (ww) {
                    for (int ox = x0; ox <= x1; ++ox) wacc += grow[ox] * xrow[2 * ox];
                  }
                  if (wx) {
                    for (int ox = x0; ox <= x1; ++ox) dxrow[2 * ox] += wval * grow[ox];
                  }
                }
              }
              if (ww) dw[((static_cast<size_t>(oc) * ci + icch) * kh + ky) * kw + kx] = wacc;
            }
          }
        }
      }
      if (wx) push_grad(0, dx);
      if (ww) push_grad(1, dw);
      return;
    }
    case Op::kUpsample2: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
      Tensor dx(x.shape());
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < 2 * h; ++y) {
          for (int xx = 0; xx < 2 * w; ++xx) dx.at(ch, y >> 1, xx >> 1) += g.at(ch, y, xx);
        }
      }
      push_grad(0, dx);
      return;
    }
    case Op::kAvgPool3: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      Tensor dx(x.shape());
      const int c = x.dim(0);
      const int ho = n.out.dim(1), wo = n.out.dim(2);
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < ho; ++y) {
          for (int xx = 0; xx < wo; ++xx) {
            const double v = g.at(ch, y, xx) / 9.0;
            for (int dy = 0; dy < 3; ++dy) {
              for (int dxx = 0; dxx < 3; ++dxx) dx.at(ch, y + dy, xx + dxx) += v;
            }
          }
        }
      }
      push_grad(0, dx);
      return;
    }
    case Op::kReflectPad: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
      const int p = n.pad;
      Tensor dx(x.shape());
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h + 2 * p; ++y) {
          const int sy = reflect_index(y - p, h);
          for (int xx = 0; xx < w + 2 * p; ++xx) {
            dx.at(ch, sy, reflect_index(xx - p, w)) += g.at(ch, y, xx);
          }
        }
      }
      push_grad(0, dx);
      return;
    }
    case Op::kGridSample: {
      const Tensor& img = input_val(n, 0);
      const Tensor& gr = input_val(n, 1);
      const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
      const bool wi = want(0), wg = want(1);
      if (!wi && !wg) return;
      Tensor dimg, dgrid;
      if (wi) dimg = Tensor(img.shape());
      if (wg) dgrid = Tensor(gr.shape());
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const SampleLoc s = locate_sample(gr.at(0, y, x), gr.at(1, y, x), w, h);
          double du_acc = 0.0, dv_acc = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            const double go = g.at(ch, y, x);
            if (go == 0.0) continue;
            const double v00 = img.at(ch, s.v0, s.u0);
            const double v01 = img.at(ch, s.v0, s.u0 + 1);
            const double v10 = img.at(ch, s.v0 + 1, s.u0);
            const double v11 = img.at(ch, s.v0 + 1, s.u0 + 1);
            if (wi) {
              dimg.at(ch, s.v0, s.u0) += go * (1.0 - s.fv) * (1.0 - s.fu);
              dimg.at(ch, s.v0, s.u0 + 1) += go * (1.0 - s.fv) * s.fu;
              dimg.at(ch, s.v0 + 1, s.u0) += go * s.fv * (1.0 - s.fu);
              dimg.at(ch, s.v0 + 1, s.u0 + 1) += go * s.fv * s.fu;
            }
            if (wg) {
              double su, sv;
              if (s.fu == 0.0 && s.u0 >= 1) {
                // left-cell derivative at integer coordinates
                const double l00 = img.at(ch, s.v0, s.u0 - 1);
                const double l10 = img.at(ch, s.v0 + 1, s.u0 - 1);
                su = (1.0 - s.fv) * (v00 - l00) + s.fv * (v10 - l10);
              } else if (s.fu == 0.0) {
                su = 0.0;  // clamped leftmost column
              } else {
                su = (1.0 - s.fv) * (v01 - v00) + s.fv * (v11 - v10);
              }
              if (s.fv == 0.0 && s.v0 >= 1) {
                const double t00 = img.at(ch, s.v0 - 1, s.u0);
                const double t01 = img.at(ch, s.v0 - 1, s.u0 + 1);
                sv = (1.0 - s.fu) * (v00 - t00) + s.fu * (v01 - t01);
              } else if (s.fv == 0.0) {
                sv = 0.0;
              } else {
                sv = (1.0 - s.fu) * (v10 - v00) + s.fu * (v11 - v01);
              }
              if (s.du_live) du_acc += go * su;
              if (s.dv_live) dv_acc += go * sv;
            }
          }
          if (wg) {
            dgrid.at(0, y, x) = du_acc * 0.5 * (w - 1);
            dgrid.at(1, y, x) = dv_acc * 0.5 * (h - 1);
          }
        }
      }
      if (wi) push_grad(0, dimg);
      if (wg) push_grad(1, dgrid);
      return;
    }
    case Op::kConcatC: {
      const int h = n.out.dim(1), w = n.out.dim(2);
      for (int i = 0; i < n.nin; ++i) {
        if (!want(i)) continue;
        const Tensor& t = input_val(n, i);
        Tensor dt(t.shape());
        const size_t base = static_cast<size_t>(n.iaux[static_cast<size_t>(i)]) * h * w;
        std::copy(g.data() + base, g.data() + base + dt.numel(), dt.data());
        push_grad(i, dt);
      }
      return;
    }
    case Op::kSlice: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      Tensor dx(x.shape());
      for (int ch = 0; ch < n.ext[0]; ++ch) {
        for (int y = 0; y < n.ext[1]; ++y) {
          for (int xx = 0; xx < n.ext[2]; ++xx) {
            dx.at(ch + n.off[0], y + n.off[1], xx + n.off[2]) += g.at(ch, y, xx);
          }
        }
      }
      push_grad(0, dx);
      return;
    }
    case Op::kMeanAll: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      Tensor dx(x.shape(), g[0] / static_cast<double>(x.numel()));
      push_grad(0, dx);
      return;
    }
    case Op::kSumAll: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      Tensor dx(x.shape(), g[0]);
      push_grad(0, dx);
      return;
    }
    case Op::kMeanC: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
      Tensor dx(x.shape());
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) dx.at(ch, y, xx) = g.at(0, y, xx) / c;
        }
      }
      push_grad(0, dx);
      return;
    }
    case Op::kMinC: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      const int h = x.dim(1), w = x.dim(2);
      Tensor dx(x.shape());
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          dx.at(n.iaux[static_cast<size_t>(y) * w + xx], y, xx) = g.at(0, y, xx);
        }
      }
      push_grad(0, dx);
      return;
    }
    case Op::kMeanHW: {
      if (!want(0)) return;
      const Tensor& x = input_val(n, 0);
      const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
      Tensor dx(x.shape());
      for (int ch = 0; ch < c; ++ch) {
        const double v = g.at(ch, 0, 0) / (static_cast<double>(h) * w);
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) dx.at(ch, y, xx) = v;
        }
      }
      push_grad(0, dx);
      return;
    }
    case Op::kBatchNorm: {
      const Tensor& x = input_val(n, 0);
      const Tensor& gamma = input_val(n, 1);
      const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
      const int64_t hw = static_cast<int64_t>(h) * w;
      const bool wx = want(0), wg = want(1), wb = want(2);
      if (!wx && !wg && !wb) return;
      Tensor dx, dgamma, dbeta;
      if (wx) dx = Tensor(x.shape());
      if (wg) dgamma = Tensor({c});
      if (wb) dbeta = Tensor({c});
      for (int ch = 0; ch < c; ++ch) {
        const double mu = n.aux[ch];
        const double invstd = n.aux[c + ch];
        const double gc = gamma[ch];
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t i = 0; i < hw; ++i) {
          const double go = g[ch * hw + i];
          const double xhat = (x[ch * hw + i] - mu) * invstd;
          sum_g += go;
          sum_gx += go * xhat;
        }
        if (wg) dgamma[ch] = sum_gx;
        if (wb) dbeta[ch] = sum_g;
        if (wx) {
          if (n.bn_train) {
            const double inv_n = 1.0 / static_cast<double>(hw);
            for (int64_t i = 0; i < hw; ++i) {
              const double go = g[ch * hw + i];
              const double xhat = (x[ch * hw + i] - mu) * invstd;
              dx[ch * hw + i] = gc * invstd * (go - inv_n * (sum_g + xhat * sum_gx));
            }
          } else {
            const double k = gc * invstd;
            for (int64_t i = 0; i < hw; ++i) dx[ch * hw + i] = k * g[ch * hw + i];
          }
        }
      }
      if (wx) push_grad(0, dx);
      if (wg) push_grad(1, dgamma);
      if (wb) push_grad(2, dbeta);
      return;
    }
    case Op::kBackproject: {
      if (!want(0)) return;
      const Tensor& d = input_val(n, 0);
      const int h = d.dim(1), w = d.dim(2);
      Tensor dd(d.shape());
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double rx = (x - n.intr.cx) / n.intr.fx;
          const double ry = (y - n.intr.cy) / n.intr.fy;
          dd.at(0, y, x) = g.at(0, y, x) * rx + g.at(1, y, x) * ry + g.at(2, y, x);
        }
      }
      push_grad(0, dd);
      return;
    }
    case Op::kProject: {
      if (!want(0)) return;
      const Tensor& p = input_val(n, 0);
      const int h = p.dim(1), w = p.dim(2);
      const double sx = 2.0 / (n.intr.width - 1), sy = 2.0 / (n.intr.height - 1);
      Tensor dp(p.shape());
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double z = p.at(2, y, x);
          const double zc = std::max(z, geom::kMinProjectionZ);
          const double gu = g.at(0, y, x) * sx, gv = g.at(1, y, x) * sy;
          dp.at(0, y, x) = gu * n.intr.fx / zc;
          dp.at(1, y, x) = gv * n.intr.fy / zc;
          if (z > geom::kMinProjectionZ) {
            dp.at(2, y, x) =
                -(gu * n.intr.fx * p.at(0, y, x) + gv * n.intr.fy * p.at(1, y, x)) / (zc * zc);
          }
        }
      }
      push_grad(0, dp);
      return;
    }
    case Op::kRodrigues: {
      if (!want(0)) return;
      const Tensor& wv = input_val(n, 0);
      const auto jac = geom::rodrigues_jacobian({wv[0], wv[1], wv[2]});
      Tensor dw({3});
      for (int i = 0; i < 3; ++i) {
        double s = 0.0;
        for (int t = 0; t < 9; ++t) s += g[t] * jac[static_cast<size_t>(i)][static_cast<size_t>(t)];
        dw[i] = s;
      }
      push_grad(0, dw);
      return;
    }
    case Op::kRigidTransform: {
      const Tensor& p = input_val(n, 0);
      const Tensor& r = input_val(n, 1);
      const int h = p.dim(1), w = p.dim(2);
      const int64_t hw = static_cast<int64_t>(h) * w;
      if (want(0)) {
        Tensor dp(p.shape());
        for (int cc = 0; cc < 3; ++cc) {
          for (int64_t i = 0; i < hw; ++i) {
            dp[cc * hw + i] = r[0 * 3 + cc] * g[0 * hw + i] + r[1 * 3 + cc] * g[1 * hw + i] +
                              r[2 * 3 + cc] * g[2 * hw + i];
          }
        }
        push_grad(0, dp);
      }
      if (want(1)) {
        Tensor dr({3, 3});
        for (int j = 0; j < 3; ++j) {
          for (int k = 0; k < 3; ++k) {
            double s = 0.0;
            for (int64_t i = 0; i < hw; ++i) s += g[j * hw + i] * p[k * hw + i];
            dr[j * 3 + k] = s;
          }
        }
        push_grad(1, dr);
      }
      if (want(2)) {
        Tensor dt({3});
        for (int j = 0; j < 3; ++j) {
          double s = 0.0;
          for (int64_t i = 0; i < hw; ++i) s += g[j * hw + i];
          dt[j] = s;
        }
        push_grad(2, dt);
      }
      return;
    }
  }
}

// --- optimizers ---------------------------------------------------------------

void sgd_step(std::map<std::string, Tensor*>& params, const GradMap& grads, double lr) {
  if (lr < 0) throw Error("sgd_step: negative learning rate");
  if (params.size() != grads.size()) throw Error("sgd_step: grads not keyed identically to params");
  for (auto& [name, w] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw Error("sgd_step: missing gradient key " + name);
    const Tensor& g = it->second;
    if (!w->same_shape(g)) throw ShapeError("sgd_step: gradient shape mismatch for " + name);
    for (int64_t i = 0; i < g.numel(); ++i) (*w)[i] -= lr * g[i];
    enforce_precision(*w);
  }
}

void sgd_step(ParameterGroup& params, const GradMap& grads, double lr) {
  if (!params.trainable) return;
  std::map<std::string, Tensor*> view;
  for (auto& [name, t] : params.tensors) view.emplace(name, &t);
  sgd_step(view, grads, lr);
}

void adam_step(std::map<std::string, Tensor*>& params, const GradMap& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
  if (!(lr > 0)) throw Error("adam_step: learning rate must be positive");
  if (state.step >= (int64_t{1} << 62)) throw Error("adam_step: step counter overflow");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, w] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw Error("adam_step: missing gradient key " + name);
    const Tensor& g = it->second;
    if (!w->same_shape(g)) throw ShapeError("adam_step: gradient shape mismatch for " + name);
    auto [mit, inserted] = state.moments.try_emplace(name, Tensor(g.shape()), Tensor(g.shape()));
    Tensor& m = mit->second.first;
    Tensor& v = mit->second.second;
    if (!m.same_shape(g)) throw ShapeError("adam_step: state shape mismatch for " + name);
    for (int64_t i = 0; i < g.numel(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      (*w)[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    enforce_precision(m);
    enforce_precision(v);
    enforce_precision(*w);
  }
}

void adam_step(ParameterGroup& params, const GradMap& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (!params.trainable) return;
  std::map<std::string, Tensor*> view;
  for (auto& [name, t] : params.tensors) view.emplace(name, &t);
  adam_step(view, grads, state, lr, beta1, beta2, eps);
}

// --- finite differences ---------------------------------------------------------

double finite_difference_check(const TapeFn& fn, const Tensor& point, double eps,
                               std::span<const int64_t> coords) {
  Tensor analytic;
  {
    Tape tape;
    const NodeId x = tape.leaf(point, true);
    const NodeId loss = fn(tape, x);
    if (tape.val(loss).numel() != 1) throw ShapeError("finite_difference_check: fn must be scalar");
    tape.backward(loss);
    analytic = tape.has_grad(x) ? tape.grad(x) : Tensor(point.shape());
  }
  auto eval = [&fn](const Tensor& p) {
    Tape tape;
    const NodeId x = tape.leaf(p, false);
    return tape.scalar(fn(tape, x));
  };
  std::vector<int64_t> all;
  if (coords.empty()) {
    all.resize(static_cast<size_t>(point.numel()));
    for (int64_t i = 0; i < point.numel(); ++i) all[static_cast<size_t>(i)] = i;
    coords = all;
  }
  double worst = 0.0;
  Tensor p = point;
  for (int64_t i : coords) {
    const double saved = p[i];
    p[i] = saved + eps;
    const double fp = eval(p);
    p[i] = saved - eps;
    const double fm = eval(p);
    p[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NonFiniteError("finite_difference_check: fn returned non-finite value");
    }
    const double cd = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(cd), 1e-12});
    worst = std::max(worst, std::abs(a - cd) / denom);
  }
  return worst;
}

}  // namespace adepth::ad
