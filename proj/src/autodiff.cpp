#include "nca/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <Eigen/Core>

namespace nca::ad {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_str(t.dims()));
}

}  // namespace

// ---- Tape ---------------------------------------------------------------

Tape::Node& Tape::node(Var v) {
  if (v.id_ < 0 || static_cast<size_t>(v.id_) >= nodes_.size()) throw std::out_of_range("invalid Var");
  return nodes_[static_cast<size_t>(v.id_)];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id_ < 0 || static_cast<size_t>(v.id_) >= nodes_.size()) throw std::out_of_range("invalid Var");
  return nodes_[static_cast<size_t>(v.id_)];
}

Var Tape::constant(Tensor v) {
  if (in_backward_) throw std::logic_error("cannot record during backward");
  nodes_.push_back(Node{"constant", std::move(v), {}, {}, nullptr, false});
  return Var(static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor v) {
  if (in_backward_) throw std::logic_error("cannot record during backward");
  nodes_.push_back(Node{"leaf", std::move(v), {}, {}, nullptr, true});
  return Var(static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
  if (p.grad.dims() != p.value.dims()) p.grad = Tensor(p.value.dims());
  nodes_.push_back(Node{"param:" + p.name, p.value, {}, {}, &p, true});
  return Var(static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  if (in_backward_) throw std::logic_error("cannot record during backward");
  if (!value.all_finite()) throw std::runtime_error(std::string("non-finite value produced by ") + op);
  bool needs = false;
  for (Var v : inputs) {
    if (node(v).requires_grad) needs = true;
  }
  nodes_.push_back(Node{op, std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
  return Var(static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_mut(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor(n.value.dims());
  return n.grad;
}

void Tape::accumulate(Var v, std::span<const float> g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  Tensor& dst = grad_mut(v);
  if (g.size() != dst.size()) throw std::logic_error("gradient size mismatch on " + n.op);
  float* d = dst.ptr();
  for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
}

void backward(Tape& tape, Var loss) {
  if (tape.value(loss).size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(tape.value(loss).dims()));
  if (!tape.requires_grad(loss)) return;
  tape.in_backward_ = true;
  struct Reset {
    Tape& t;
    ~Reset() { t.in_backward_ = false; }
  } reset{tape};

  tape.grad_mut(loss).fill(1.0f);
  for (int i = loss.id(); i >= 0; --i) {
    auto& n = tape.nodes_[static_cast<size_t>(i)];
    if (n.grad.empty()) continue;
    if (!n.grad.all_finite()) throw std::runtime_error("backward: non-finite gradient at " + n.op);
    if (n.backward) n.backward(tape, n.grad);
    if (n.param) {
      float* d = n.param->grad.ptr();
      const float* g = n.grad.ptr();
      for (size_t k = 0; k < n.grad.size(); ++k) d[k] += g[k];
    }
  }
}

// ---- elementwise --------------------------------------------------------

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dims() != b.dims())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.dims()) + " vs " +
                                shape_str(b.dims()));
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same(av, bv, "add");
  Tensor out = av;
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record("add", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g.data());
    tp.accumulate(b, g.data());
  });
}

Var sub(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same(av, bv, "sub");
  Tensor out = av;
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record("sub", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g.data());
    if (tp.requires_grad(b)) {
      Tensor& d = tp.grad_mut(b);
      for (size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same(av, bv, "mul");
  Tensor out = av;
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record("mul", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& d = tp.grad_mut(a);
      const Tensor& o = tp.value(b);
      for (size_t i = 0; i < d.size(); ++i) d[i] += g[i] * o[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& d = tp.grad_mut(b);
      const Tensor& o = tp.value(a);
      for (size_t i = 0; i < d.size(); ++i) d[i] += g[i] * o[i];
    }
  });
}

Var scale(Tape& t, Var a, float s) {
  Tensor out = t.value(a);
  for (float& v : out.data()) v *= s;
  return t.record("scale", std::move(out), {a}, [a, s](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(a);
    for (size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
  });
}

Var square(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (float& v : out.data()) v *= v;
  return t.record("square", std::move(out), {a}, [a](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(a);
    const Tensor& x = tp.value(a);
    for (size_t i = 0; i < d.size(); ++i) d[i] += 2.0f * x[i] * g[i];
  });
}

Var sum(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  double s = 0.0;
  for (float v : x.data()) s += v;
  return t.record("sum", Tensor::scalar(static_cast<float>(s)), {a}, [a](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(a);
    const float gv = g[0];
    for (float& v : d.data()) v += gv;
  });
}

Var mean(Tape& t, Var a) {
  const Tensor& x = t.value(a);
  double s = 0.0;
  for (float v : x.data()) s += v;
  const float n = static_cast<float>(x.size());
  return t.record("mean", Tensor::scalar(static_cast<float>(s / n)), {a}, [a, n](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(a);
    const float gv = g[0] / n;
    for (float& v : d.data()) v += gv;
  });
}

Var reshape(Tape& t, Var a, Shape dims) {
  Tensor out = t.value(a).reshaped(std::move(dims));
  return t.record("reshape", std::move(out), {a},
                  [a](Tape& tp, const Tensor& g) { tp.accumulate(a, g.data()); });
}

// ---- convolutions -------------------------------------------------------

Var conv2d_depthwise3x3(Tape& t, Var x, const Kernel3& k, Padding pad) {
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "conv2d_depthwise3x3");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (h < 3 || w < 3) throw std::invalid_argument("conv2d_depthwise3x3: spatial dims must be >= 3");
  Tensor out(xv.dims());
  kernels::depthwise3x3(xv.ptr(), out.ptr(), c, h, w, k, pad);
  return t.record("conv2d_depthwise3x3", std::move(out), {x}, [x, k, pad, c, h, w](Tape& tp, const Tensor& g) {
    kernels::depthwise3x3_adjoint(g.ptr(), tp.grad_mut(x).ptr(), c, h, w, k, pad);
  });
}

Var conv2d_1x1(Tape& t, Var x, Var w, Var b) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  require_rank(xv, 3, "conv2d_1x1");
  require_rank(wv, 2, "conv2d_1x1 weight");
  const int cin = xv.dim(0), cout = wv.dim(0), hw = xv.dim(1) * xv.dim(2);
  if (wv.dim(1) != cin)
    throw std::invalid_argument("conv2d_1x1: weight " + shape_str(wv.dims()) + " does not match input " +
                                shape_str(xv.dims()));
  require_shape(bv, {cout}, "conv2d_1x1 bias");
  Tensor out({cout, xv.dim(1), xv.dim(2)});
  kernels::conv1x1(xv.ptr(), wv.ptr(), bv.ptr(), out.ptr(), cin, cout, hw);
  return t.record("conv2d_1x1", std::move(out), {x, w, b}, [x, w, b, cin, cout, hw](Tape& tp, const Tensor& g) {
    float* dx = tp.requires_grad(x) ? tp.grad_mut(x).ptr() : nullptr;
    float* dw = tp.requires_grad(w) ? tp.grad_mut(w).ptr() : nullptr;
    float* db = tp.requires_grad(b) ? tp.grad_mut(b).ptr() : nullptr;
    kernels::conv1x1_backward(tp.value(x).ptr(), tp.value(w).ptr(), g.ptr(), dx, dw, db, cin, cout, hw);
  });
}

Var conv2d_dense3x3(Tape& t, Var x, Var w, Var b, Padding pad) {
  const Tensor& xv = t.value(x);
  const Tensor& wv = t.value(w);
  const Tensor& bv = t.value(b);
  require_rank(xv, 3, "conv2d_dense3x3");
  const int cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  if (wv.rank() != 4 || wv.dim(1) != cin || wv.dim(2) != 3 || wv.dim(3) != 3)
    throw std::invalid_argument("conv2d_dense3x3: weight " + shape_str(wv.dims()) + " does not match input " +
                                shape_str(xv.dims()));
  const int cout = wv.dim(0);
  require_shape(bv, {cout}, "conv2d_dense3x3 bias");
  // Zero and circular padding are defined for any size; reflection needs a neighbour to mirror.
  const int min_size = pad == Padding::reflect ? 2 : 1;
  if (h < min_size || wd < min_size)
    throw std::invalid_argument("conv2d_dense3x3: spatial dims must be >= " + std::to_string(min_size) +
                                " for this padding, got " + shape_str(xv.dims()));
  if (t.requires_grad(w) || t.requires_grad(b))
    throw std::invalid_argument("conv2d_dense3x3: weights are frozen and must be constants");
  Tensor out({cout, h, wd});
  kernels::dense3x3(xv.ptr(), wv.ptr(), bv.ptr(), out.ptr(), cin, cout, h, wd, pad);
  return t.record("conv2d_dense3x3", std::move(out), {x},
                  [x, w, pad, cin, cout, h, wd](Tape& tp, const Tensor& g) {
                    kernels::dense3x3_backward_input(g.ptr(), tp.value(w).ptr(), tp.grad_mut(x).ptr(), cin, cout, h,
                                                     wd, pad);
                  });
}

// ---- nonlinearities and pooling ------------------------------------------

Var relu(Tape& t, Var x) {
  Tensor out = t.value(x);
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return t.record("relu", std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(x);
    const Tensor& xv = tp.value(x);
    for (size_t i = 0; i < d.size(); ++i)
      if (xv[i] > 0.0f) d[i] += g[i];
  });
}

Var pool2(Tape& t, Var x, PoolMode mode) {
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "pool2");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  if (h % 2 || w % 2) throw std::invalid_argument("pool2: spatial dims must be even, got " + shape_str(xv.dims()));
  const int oh = h / 2, ow = w / 2;
  Tensor out({c, oh, ow});
  std::vector<int> argmax;
  if (mode == PoolMode::max) argmax.resize(out.size());
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const size_t o = (static_cast<size_t>(ch) * oh + y) * ow + xx;
        const size_t base = (static_cast<size_t>(ch) * h + 2 * y) * w + 2 * xx;
        const size_t idx[4] = {base, base + 1, base + w, base + w + 1};
        if (mode == PoolMode::mean) {
          out[o] = 0.25f * (xv[idx[0]] + xv[idx[1]] + xv[idx[2]] + xv[idx[3]]);
        } else {
          int best = 0;
          for (int k = 1; k < 4; ++k)
            if (xv[idx[k]] > xv[idx[best]]) best = k;
          out[o] = xv[idx[best]];
          argmax[o] = static_cast<int>(idx[best]);
        }
      }
  return t.record("pool2", std::move(out), {x},
                  [x, mode, c, h, w, argmax = std::move(argmax)](Tape& tp, const Tensor& g) {
                    Tensor& d = tp.grad_mut(x);
                    if (mode == PoolMode::max) {
                      for (size_t o = 0; o < g.size(); ++o) d[static_cast<size_t>(argmax[o])] += g[o];
                      return;
                    }
                    const int oh = h / 2, ow = w / 2;
                    for (int ch = 0; ch < c; ++ch)
                      for (int y = 0; y < oh; ++y)
                        for (int xx = 0; xx < ow; ++xx) {
                          const float gv = 0.25f * g[(static_cast<size_t>(ch) * oh + y) * ow + xx];
                          const size_t base = (static_cast<size_t>(ch) * h + 2 * y) * w + 2 * xx;
                          d[base] += gv;
                          d[base + 1] += gv;
                          d[base + w] += gv;
                          d[base + w + 1] += gv;
                        }
                  });
}

// ---- sorting ------------------------------------------------------------

std::vector<int> stable_argsort(std::span<const float> v) {
  std::vector<int> perm(v.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) { return v[a] < v[b]; });
  return perm;
}

Sorted sort_ascending(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  require_rank(xv, 1, "sort_ascending");
  std::vector<int> perm = stable_argsort(xv.data());
  Tensor out(xv.dims());
  for (size_t i = 0; i < perm.size(); ++i) out[i] = xv[static_cast<size_t>(perm[i])];
  Var v = t.record("sort_ascending", std::move(out), {x}, [x, perm](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(x);
    for (size_t i = 0; i < perm.size(); ++i) d[static_cast<size_t>(perm[i])] += g[i];
  });
  return {v, std::move(perm)};
}

Var sort_rows(Tape& t, Var x) {
  const Tensor& xv = t.value(x);
  require_rank(xv, 2, "sort_rows");
  const int rows = xv.dim(0), k = xv.dim(1);
  std::vector<int> perm(static_cast<size_t>(rows) * k);
  Tensor out(xv.dims());
  for (int r = 0; r < rows; ++r) {
    auto row = xv.data().subspan(static_cast<size_t>(r) * k, static_cast<size_t>(k));
    std::vector<int> p = stable_argsort(row);
    for (int i = 0; i < k; ++i) {
      perm[static_cast<size_t>(r) * k + i] = p[static_cast<size_t>(i)];
      out[static_cast<size_t>(r) * k + i] = row[static_cast<size_t>(p[static_cast<size_t>(i)])];
    }
  }
  return t.record("sort_rows", std::move(out), {x}, [x, perm = std::move(perm), k](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(x);
    for (size_t i = 0; i < perm.size(); ++i) {
      const size_t row = i / static_cast<size_t>(k);
      d[row * k + static_cast<size_t>(perm[i])] += g[i];
    }
  });
}

// ---- linear algebra and layout -------------------------------------------

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k)
    throw std::invalid_argument("matmul: inner dims differ " + shape_str(av.dims()) + " x " + shape_str(bv.dims()));
  Tensor out({m, n});
  Map(out.ptr(), m, n).noalias() = MapC(av.ptr(), m, k) * MapC(bv.ptr(), k, n);
  return t.record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& g) {
    MapC G(g.ptr(), m, n);
    if (tp.requires_grad(a)) Map(tp.grad_mut(a).ptr(), m, k).noalias() += G * MapC(tp.value(b).ptr(), k, n).transpose();
    if (tp.requires_grad(b)) Map(tp.grad_mut(b).ptr(), k, n).noalias() += MapC(tp.value(a).ptr(), m, k).transpose() * G;
  });
}

Var slice_channels(Tape& t, Var x, int first, int count) {
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "slice_channels");
  if (first < 0 || count < 1 || first + count > xv.dim(0))
    throw std::invalid_argument("slice_channels: range out of bounds for " + shape_str(xv.dims()));
  const size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out({count, xv.dim(1), xv.dim(2)});
  std::copy_n(xv.ptr() + first * plane, count * plane, out.ptr());
  return t.record("slice_channels", std::move(out), {x}, [x, first, plane](Tape& tp, const Tensor& g) {
    float* d = tp.grad_mut(x).ptr() + first * plane;
    for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var concat_channels(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Tensor& first = t.value(parts[0]);
  require_rank(first, 3, "concat_channels");
  int channels = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    if (v.rank() != 3 || v.dim(1) != first.dim(1) || v.dim(2) != first.dim(2))
      throw std::invalid_argument("concat_channels: spatial mismatch");
    channels += v.dim(0);
  }
  Tensor out({channels, first.dim(1), first.dim(2)});
  std::vector<size_t> offsets;
  size_t off = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    offsets.push_back(off);
    std::copy(v.data().begin(), v.data().end(), out.ptr() + off);
    off += v.size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record("concat_channels", std::move(out), parts,
                  [inputs, offsets](Tape& tp, const Tensor& g) {
                    for (size_t i = 0; i < inputs.size(); ++i) {
                      const size_t n = tp.value(inputs[i]).size();
                      tp.accumulate(inputs[i], g.data().subspan(offsets[i], n));
                    }
                  });
}

Var channel_affine(Tape& t, Var x, std::vector<float> scale_v, std::vector<float> shift) {
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "channel_affine");
  const int c = xv.dim(0);
  if (static_cast<int>(scale_v.size()) != c || static_cast<int>(shift.size()) != c)
    throw std::invalid_argument("channel_affine: per-channel constants do not match " + shape_str(xv.dims()));
  const size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  Tensor out = xv;
  for (int ch = 0; ch < c; ++ch)
    for (size_t i = 0; i < plane; ++i) out[ch * plane + i] = out[ch * plane + i] * scale_v[ch] + shift[ch];
  return t.record("channel_affine", std::move(out), {x}, [x, scale_v, plane](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(x);
    for (size_t ch = 0; ch < scale_v.size(); ++ch)
      for (size_t i = 0; i < plane; ++i) d[ch * plane + i] += g[ch * plane + i] * scale_v[ch];
  });
}

Var cell_mask(Tape& t, Var x, std::vector<float> mask) {
  const Tensor& xv = t.value(x);
  require_rank(xv, 3, "cell_mask");
  const size_t plane = static_cast<size_t>(xv.dim(1)) * xv.dim(2);
  if (mask.size() != plane) throw std::invalid_argument("cell_mask: mask size does not match grid");
  Tensor out = xv;
  for (int ch = 0; ch < xv.dim(0); ++ch)
    for (size_t i = 0; i < plane; ++i) out[ch * plane + i] *= mask[i];
  return t.record("cell_mask", std::move(out), {x}, [x, mask, plane](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(x);
    for (size_t i = 0; i < d.size(); ++i) d[i] += g[i] * mask[i % plane];
  });
}

namespace {

struct InterpTap {
  int lo;
  int hi;
  float w_hi;
};

std::vector<InterpTap> interp_taps(int n, int m) {
  std::vector<InterpTap> taps(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    double pos = m == 1 ? 0.5 * (n - 1) : static_cast<double>(i) * (n - 1) / (m - 1);
    int lo = static_cast<int>(std::floor(pos));
    if (lo >= n - 1) lo = std::max(0, n - 1);
    int hi = std::min(lo + 1, n - 1);
    taps[static_cast<size_t>(i)] = {lo, hi, static_cast<float>(pos - lo)};
  }
  return taps;
}

}  // namespace

void resample_sorted(std::span<const float> in, std::span<float> out) {
  const int n = static_cast<int>(in.size()), m = static_cast<int>(out.size());
  if (n == m) {
    std::copy(in.begin(), in.end(), out.begin());
    return;
  }
  auto taps = interp_taps(n, m);
  for (int i = 0; i < m; ++i) {
    const auto& tp = taps[static_cast<size_t>(i)];
    out[static_cast<size_t>(i)] = (1.0f - tp.w_hi) * in[static_cast<size_t>(tp.lo)] + tp.w_hi * in[static_cast<size_t>(tp.hi)];
  }
}

Var resample_rows(Tape& t, Var x, int m) {
  const Tensor& xv = t.value(x);
  require_rank(xv, 2, "resample_rows");
  const int rows = xv.dim(0), n = xv.dim(1);
  if (m < 1) throw std::invalid_argument("resample_rows: target count must be >= 1");
  Tensor out({rows, m});
  for (int r = 0; r < rows; ++r)
    resample_sorted(xv.data().subspan(static_cast<size_t>(r) * n, static_cast<size_t>(n)),
                    out.data().subspan(static_cast<size_t>(r) * m, static_cast<size_t>(m)));
  return t.record("resample_rows", std::move(out), {x}, [x, rows, n, m](Tape& tp, const Tensor& g) {
    Tensor& d = tp.grad_mut(x);
    if (n == m) {
      for (size_t i = 0; i < d.size(); ++i) d[i] += g[i];
      return;
    }
    auto taps = interp_taps(n, m);
    for (int r = 0; r < rows; ++r)
      for (int i = 0; i < m; ++i) {
        const auto& tp2 = taps[static_cast<size_t>(i)];
        const float gv = g[static_cast<size_t>(r) * m + i];
        d[static_cast<size_t>(r) * n + tp2.lo] += (1.0f - tp2.w_hi) * gv;
        d[static_cast<size_t>(r) * n + tp2.hi] += tp2.w_hi * gv;
      }
  });
}

}  // namespace nca::ad
