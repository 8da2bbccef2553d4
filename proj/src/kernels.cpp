#include "nca/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <vector>

namespace nca::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

// Summation order depends only on n, never on the address of `p`.
float row_sum(const float* p, int n) {
  constexpr int kLanes = 16;
  float acc[kLanes] = {};
  int i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (int j = 0; j < kLanes; ++j) acc[j] += p[i + j];
  for (; i < n; ++i) acc[i % kLanes] += p[i];
  float total = 0.0f;
  for (float a : acc) total += a;
  return total;
}

// One output row of a 3x3 correlation given the three (possibly absent) source rows.
// Every source row is first copied with its two padding neighbours into `scratch`
// (3 x (w + 2) floats), so border and interior pixels share one expression and
// the result commutes exactly with cyclic shifts.
inline void correlate_row(const float* r0, const float* r1, const float* r2, float* out, int w, const Kernel3& k,
                          Padding pad, bool accumulate, float* scratch) {
  const float* rows[3] = {r0, r1, r2};
  const float* padded[3] = {nullptr, nullptr, nullptr};
  const int left = pad_index(-1, w, pad), right = pad_index(w, w, pad);
  for (int ky = 0; ky < 3; ++ky) {
    if (!rows[ky]) continue;
    float* p = scratch + static_cast<size_t>(ky) * (w + 2);
    p[0] = left >= 0 ? rows[ky][left] : 0.0f;
    std::copy(rows[ky], rows[ky] + w, p + 1);
    p[w + 1] = right >= 0 ? rows[ky][right] : 0.0f;
    padded[ky] = p;
  }
  for (int x = 0; x < w; ++x) {
    float s = 0.0f;
    for (int ky = 0; ky < 3; ++ky) {
      const float* p = padded[ky];
      if (!p) continue;
      s += k[ky * 3] * p[x] + k[ky * 3 + 1] * p[x + 1] + k[ky * 3 + 2] * p[x + 2];
    }
    out[x] = accumulate ? out[x] + s : s;
  }
}

Kernel3 flipped(const Kernel3& k) {
  Kernel3 f{};
  for (int i = 0; i < 9; ++i) f[i] = k[8 - i];
  return f;
}

}  // namespace

void depthwise3x3(const float* x, float* y, int channels, int h, int w, const Kernel3& k, Padding pad,
                  bool accumulate) {
  const size_t plane = static_cast<size_t>(h) * w;
  std::vector<float> scratch(3 * (static_cast<size_t>(w) + 2));
  for (int c = 0; c < channels; ++c) {
    const float* xc = x + c * plane;
    float* yc = y + c * plane;
    for (int row = 0; row < h; ++row) {
      int rm = pad_index(row - 1, h, pad);
      int rp = pad_index(row + 1, h, pad);
      correlate_row(rm >= 0 ? xc + static_cast<size_t>(rm) * w : nullptr, xc + static_cast<size_t>(row) * w,
                    rp >= 0 ? xc + static_cast<size_t>(rp) * w : nullptr, yc + static_cast<size_t>(row) * w, w, k,
                    pad, accumulate, scratch.data());
    }
  }
}

void depthwise3x3_adjoint(const float* dy, float* dx, int channels, int h, int w, const Kernel3& k,
                          Padding pad) {
  if (pad != Padding::reflect) {
    // For zero and circular padding the adjoint is correlation with the flipped kernel.
    depthwise3x3(dy, dx, channels, h, w, flipped(k), pad, true);
    return;
  }
  const size_t plane = static_cast<size_t>(h) * w;
  for (int c = 0; c < channels; ++c) {
    const float* g = dy + c * plane;
    float* d = dx + c * plane;
    for (int row = 0; row < h; ++row)
      for (int col = 0; col < w; ++col) {
        float gv = g[static_cast<size_t>(row) * w + col];
        for (int ky = 0; ky < 3; ++ky) {
          int yi = pad_index(row + ky - 1, h, pad);
          if (yi < 0) continue;
          for (int kx = 0; kx < 3; ++kx) {
            int xi = pad_index(col + kx - 1, w, pad);
            if (xi >= 0) d[static_cast<size_t>(yi) * w + xi] += k[ky * 3 + kx] * gv;
          }
        }
      }
  }
}

// Every pixel sees the same sequence of multiply-adds, so results do not depend
// on where a pixel sits in the grid.
void conv1x1(const float* x, const float* w, const float* b, float* y, int cin, int cout, int hw) {
  constexpr int kChunk = 512;
  for (int p0 = 0; p0 < hw; p0 += kChunk) {
    const int len = std::min(kChunk, hw - p0);
    for (int o = 0; o < cout; ++o) {
      float* yo = y + static_cast<size_t>(o) * hw + p0;
      const float bias = b ? b[o] : 0.0f;
      for (int p = 0; p < len; ++p) yo[p] = bias;
      const float* wo = w + static_cast<size_t>(o) * cin;
      for (int i = 0; i < cin; ++i) {
        const float wi = wo[i];
        const float* xi = x + static_cast<size_t>(i) * hw + p0;
        for (int p = 0; p < len; ++p) yo[p] += wi * xi[p];
      }
    }
  }
}

void conv1x1_backward(const float* x, const float* w, const float* dy, float* dx, float* dw, float* db,
                      int cin, int cout, int hw) {
  MapC X(x, cin, hw);
  MapC Wm(w, cout, cin);
  MapC dY(dy, cout, hw);
  if (dx) {
    Map dX(dx, cin, hw);
    dX.noalias() += Wm.transpose() * dY;
  }
  if (dw) {
    Map dW(dw, cout, cin);
    dW.noalias() += dY * X.transpose();
  }
  if (db)
    for (int o = 0; o < cout; ++o) db[o] += row_sum(dy + static_cast<size_t>(o) * hw, hw);
}

namespace {

// col[(ci*9 + ky*3 + kx), p] = x[ci, y+ky-1, x+kx-1] under padding.
void im2col(const float* x, float* col, int cin, int h, int w, Padding pad) {
  const size_t hw = static_cast<size_t>(h) * w;
  for (int ci = 0; ci < cin; ++ci) {
    const float* xc = x + ci * hw;
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        float* dst = col + (static_cast<size_t>(ci) * 9 + ky * 3 + kx) * hw;
        for (int row = 0; row < h; ++row) {
          int yi = pad_index(row + ky - 1, h, pad);
          float* drow = dst + static_cast<size_t>(row) * w;
          if (yi < 0) {
            for (int c = 0; c < w; ++c) drow[c] = 0.0f;
            continue;
          }
          const float* srow = xc + static_cast<size_t>(yi) * w;
          for (int c = 0; c < w; ++c) {
            int xi = pad_index(c + kx - 1, w, pad);
            drow[c] = xi >= 0 ? srow[xi] : 0.0f;
          }
        }
      }
  }
}

void col2im_add(const float* col, float* dx, int cin, int h, int w, Padding pad) {
  const size_t hw = static_cast<size_t>(h) * w;
  for (int ci = 0; ci < cin; ++ci) {
    float* dc = dx + ci * hw;
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const float* src = col + (static_cast<size_t>(ci) * 9 + ky * 3 + kx) * hw;
        for (int row = 0; row < h; ++row) {
          int yi = pad_index(row + ky - 1, h, pad);
          if (yi < 0) continue;
          const float* srow = src + static_cast<size_t>(row) * w;
          float* drow = dc + static_cast<size_t>(yi) * w;
          for (int c = 0; c < w; ++c) {
            int xi = pad_index(c + kx - 1, w, pad);
            if (xi >= 0) drow[xi] += srow[c];
          }
        }
      }
  }
}

}  // namespace

void dense3x3(const float* x, const float* w, const float* b, float* y, int cin, int cout, int h, int w_,
              Padding pad) {
  const int hw = h * w_;
  std::vector<float> col(static_cast<size_t>(cin) * 9 * hw);
  im2col(x, col.data(), cin, h, w_, pad);
  MapC C(col.data(), cin * 9, hw);
  MapC Wm(w, cout, cin * 9);
  Map Y(y, cout, hw);
  Y.noalias() = Wm * C;
  if (b)
    for (int o = 0; o < cout; ++o) Y.row(o).array() += b[o];
}

void dense3x3_backward_input(const float* dy, const float* w, float* dx, int cin, int cout, int h, int w_,
                             Padding pad) {
  const int hw = h * w_;
  std::vector<float> dcol(static_cast<size_t>(cin) * 9 * hw);
  MapC Wm(w, cout, cin * 9);
  MapC dY(dy, cout, hw);
  Map dC(dcol.data(), cin * 9, hw);
  dC.noalias() = Wm.transpose() * dY;
  col2im_add(dcol.data(), dx, cin, h, w_, pad);
}

}  // namespace nca::kernels
