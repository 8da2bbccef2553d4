#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nca/kernels.hpp"
#include "nca/tensor.hpp"

// Reverse-mode automatic differentiation over a recording tape.
//
// A Tape owns every intermediate value produced while it records. Ops take
// and return Var handles; a node's backward rule is kept only when at least
// one operand requires a gradient. backward() replays the rules in exact
// reverse recording order and finally accumulates into the Parameters that
// were bound to the tape. A Tape is single-writer.
namespace nca::ad {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.dims()) {}
  void zero_grad() { grad.fill(0.0f); }
};

class Var {
 public:
  Var() = default;
  int id() const { return id_; }
  bool valid() const { return id_ >= 0; }

 private:
  friend class Tape;
  explicit Var(int id) : id_(id) {}
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Var constant(Tensor v);
  // A differentiable input that is not a Parameter (its gradient stays on the tape).
  Var leaf(Tensor v);
  Var param(Parameter& p);

  // Records an op output. `inputs` decides whether the node requires a gradient;
  // `fn` is dropped when none of them does.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  // Gradient reached so far; empty tensor if the node has received none.
  const Tensor& grad(Var v) const { return node(v).grad; }
  // Zero-initialized on first access. Only meaningful during or after backward().
  Tensor& grad_mut(Var v);
  void accumulate(Var v, std::span<const float> g);

  size_t size() const { return nodes_.size(); }
  const std::string& op_name(Var v) const { return node(v).op; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::deque<Node> nodes_;  // stable addresses: value() references survive later records
  bool in_backward_ = false;

  friend void backward(Tape& tape, Var loss);
};

// Accumulates d(loss)/d(param) into every Parameter bound to the tape.
// Throws on a non-scalar loss or a non-finite gradient.
void backward(Tape& tape, Var loss);

// ---- op set -------------------------------------------------------------

using kernels::Kernel3;
using kernels::Padding;

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, float s);
Var square(Tape& t, Var a);
Var sum(Tape& t, Var a);
Var mean(Tape& t, Var a);
Var reshape(Tape& t, Var a, Shape dims);

// [C,H,W], same kernel for every channel; differentiable w.r.t. x only.
Var conv2d_depthwise3x3(Tape& t, Var x, const Kernel3& k, Padding pad = Padding::circular);
// x [Cin,H,W], w [Cout,Cin], b [Cout] -> [Cout,H,W].
Var conv2d_1x1(Tape& t, Var x, Var w, Var b);
// x [Cin,H,W], w [Cout,Cin,3,3], b [Cout]. Weights must not require gradients.
Var conv2d_dense3x3(Tape& t, Var x, Var w, Var b, Padding pad);

// Subgradient at 0 is 0.
Var relu(Tape& t, Var x);

enum class PoolMode { max, mean };
// 2x2 non-overlapping pooling; H and W must be even. Max ties go to the first cell in row-major order.
Var pool2(Tape& t, Var x, PoolMode mode);

struct Sorted {
  Var values;
  std::vector<int> permutation;  // values[i] == x[permutation[i]]
};
// Stable ascending sort of a rank-1 tensor.
Sorted sort_ascending(Tape& t, Var x);
// Stable ascending sort of every row of a [R,K] tensor.
Var sort_rows(Tape& t, Var x);

// a [M,K] x b [K,N] -> [M,N].
Var matmul(Tape& t, Var a, Var b);

Var slice_channels(Tape& t, Var x, int first, int count);
Var concat_channels(Tape& t, std::span<const Var> parts);
// y[c] = x[c] * scale[c] + shift[c].
Var channel_affine(Tape& t, Var x, std::vector<float> scale, std::vector<float> shift);
// Multiplies every channel of cell (y,x) by mask[y*W+x].
Var cell_mask(Tape& t, Var x, std::vector<float> mask);
// Linear resampling of each row of [R,N] onto m evenly spaced sorted positions.
Var resample_rows(Tape& t, Var x, int m);

// Forward helpers shared with non-recording code paths.
std::vector<int> stable_argsort(std::span<const float> v);
void resample_sorted(std::span<const float> in, std::span<float> out);

}  // namespace nca::ad
