#pragma once

#include <array>

// Raw forward/adjoint kernels over contiguous [C,H,W] buffers. All "conv"
// kernels are cross-correlations, matching deep-learning convention.
namespace nca::kernels {

using Kernel3 = std::array<float, 9>;  // row-major 3x3

enum class Padding { zero, reflect, circular };

// Maps a possibly out-of-range index into [0, n) or returns -1 (zero padding).
inline int pad_index(int i, int n, Padding pad) {
  if (i >= 0 && i < n) return i;
  switch (pad) {
    case Padding::zero:
      return -1;
    case Padding::circular:
      return ((i % n) + n) % n;
    case Padding::reflect:
      return i < 0 ? -i : 2 * n - 2 - i;
  }
  return -1;
}

// y[c] (=|+=) correlate(x[c], k) for every channel.
void depthwise3x3(const float* x, float* y, int channels, int h, int w, const Kernel3& k, Padding pad,
                  bool accumulate = false);
// dx[c] += adjoint(dy[c]); the transpose of depthwise3x3 under the same padding.
void depthwise3x3_adjoint(const float* dy, float* dx, int channels, int h, int w, const Kernel3& k,
                          Padding pad);

// y[cout,hw] = w[cout,cin] * x[cin,hw] + b.
void conv1x1(const float* x, const float* w, const float* b, float* y, int cin, int cout, int hw);
// Accumulating backward. Any of dx, dw, db may be null.
void conv1x1_backward(const float* x, const float* w, const float* dy, float* dx, float* dw, float* db,
                      int cin, int cout, int hw);

// y[cout,h,w] = sum over cin and 3x3 taps of w[cout,cin,ky,kx] * x[cin, y+ky-1, x+kx-1] + b.
void dense3x3(const float* x, const float* w, const float* b, float* y, int cin, int cout, int h, int w_,
              Padding pad);
// dx += d(out)/dx^T dy. Weights are frozen, so no weight gradient is produced.
void dense3x3_backward_input(const float* dy, const float* w, float* dx, int cin, int cout, int h, int w_,
                             Padding pad);

}  // namespace nca::kernels
