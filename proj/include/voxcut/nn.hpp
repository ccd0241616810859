#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxcut/errors.hpp"
#include "voxcut/rng.hpp"

// Dense building blocks for the volumetric denoiser. Activations live in
// column-major (B*P x C) matrices: column c is channel c over all batch items,
// rows are batch blocks of P = S^3 voxels in grid linear order. Convolutions
// lower to GEMM through im2col.

namespace voxcut::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

inline int conv_out_size(int in_size, int stride) {
  return stride == 1 ? in_size : (in_size - 1) / 2 + 1;
}

// kernel 3 / pad 1 / stride 1-2, or pointwise kernel 1
template <typename T>
struct ConvParam {
  Matrix<T> w;  // (Cin * k^3, Cout)
  Vector<T> b;  // (Cout)
  int cin = 0, cout = 0, ksize = 3, stride = 1;

  void resize(int cin_, int cout_, int ksize_, int stride_) {
    cin = cin_;
    cout = cout_;
    ksize = ksize_;
    stride = stride_;
    const int kk = ksize == 3 ? 27 : 1;
    w.setZero(cin * kk, cout);
    b.setZero(cout);
  }
};

template <typename T>
struct LinearParam {
  Matrix<T> w;  // (In, Out)
  Vector<T> b;  // (Out)

  void resize(int in, int out) {
    w.setZero(in, out);
    b.setZero(out);
  }
};

// ---------------------------------------------------------------------------
// im2col / col2im for 3x3x3 kernels with zero padding 1
// ---------------------------------------------------------------------------

namespace detail {

// Walks the out-of-bounds positions of a 3-kernel offset (dz,dy,dx): the
// border plane/rows/elements whose shifted source falls outside the volume.
template <typename T, typename Fn>
void for_each_border(int s, int dz, int dy, int dx, T* block, Fn&& fn) {
  const std::int64_t ss = static_cast<std::int64_t>(s) * s;
  if (dz != 1) {
    T* plane = block + (dz == 0 ? 0 : (s - 1) * ss);
    fn(plane, ss);
  }
  if (dy != 1) {
    const std::int64_t row0 = dy == 0 ? 0 : (s - 1) * static_cast<std::int64_t>(s);
    for (int z = 0; z < s; ++z) fn(block + z * ss + row0, s);
  }
  if (dx != 1) {
    const int x0 = dx == 0 ? 0 : s - 1;
    for (int z = 0; z < s; ++z)
      for (int y = 0; y < s; ++y) fn(block + z * ss + y * s + x0, 1);
  }
}

}  // namespace detail

// x: (B*P_in x Cin), col: (B*P_out x Cin*27), column layout ci*27 + o with
// o = (dz*3 + dy)*3 + dx.
//
// For stride 1 each column is the channel plane shifted by a constant flat
// offset: one bulk copy per (channel, offset, item), then the border
// positions are zeroed.
template <typename T>
void im2col3(const Matrix<T>& x, int b_items, int s_in, int stride, Matrix<T>& col) {
  const int s_out = conv_out_size(s_in, stride);
  const std::int64_t p_in = static_cast<std::int64_t>(s_in) * s_in * s_in;
  const std::int64_t p_out = static_cast<std::int64_t>(s_out) * s_out * s_out;
  const int cin = static_cast<int>(x.cols());

  if (stride == 1) {
    col.resize(b_items * p_out, cin * 27);
    for (int ci = 0; ci < cin; ++ci) {
      const T* src_base = x.col(ci).data();
      for (int o = 0; o < 27; ++o) {
        const int dz = o / 9, dy = (o / 3) % 3, dx = o % 3;
        const std::int64_t off = static_cast<std::int64_t>(dz - 1) * s_in * s_in +
                                 (dy - 1) * s_in + (dx - 1);
        T* dst_base = col.col(ci * 27 + o).data();
        for (int b = 0; b < b_items; ++b) {
          const T* src = src_base + b * p_in;
          T* dst = dst_base + b * p_out;
          const std::int64_t begin = std::max<std::int64_t>(0, -off);
          const std::int64_t end = std::min<std::int64_t>(p_in, p_in - off);
          if (begin > 0) std::fill(dst, dst + begin, T(0));
          if (end < p_in) std::fill(dst + end, dst + p_in, T(0));
          std::copy(src + begin + off, src + end + off, dst + begin);
          detail::for_each_border(s_in, dz, dy, dx, dst, [](T* p, std::int64_t n) {
            std::fill(p, p + n, T(0));
          });
        }
      }
    }
    return;
  }

  col.setZero(b_items * p_out, cin * 27);
  for (int ci = 0; ci < cin; ++ci) {
    const T* src_base = x.col(ci).data();
    for (int o = 0; o < 27; ++o) {
      const int dz = o / 9, dy = (o / 3) % 3, dx = o % 3;
      T* dst_base = col.col(ci * 27 + o).data();
      for (int b = 0; b < b_items; ++b) {
        const T* src = src_base + b * p_in;
        T* dst = dst_base + b * p_out;
        for (int zo = 0; zo < s_out; ++zo) {
          const int zi = zo * stride + dz - 1;
          if (zi < 0 || zi >= s_in) continue;
          for (int yo = 0; yo < s_out; ++yo) {
            const int yi = yo * stride + dy - 1;
            if (yi < 0 || yi >= s_in) continue;
            const T* src_row = src + (static_cast<std::int64_t>(zi) * s_in + yi) * s_in;
            T* dst_row = dst + (static_cast<std::int64_t>(zo) * s_out + yo) * s_out;
            for (int xo = 0; xo < s_out; ++xo) {
              const int xi = xo * stride + dx - 1;
              if (xi >= 0 && xi < s_in) dst_row[xo] = src_row[xi];
            }
          }
        }
      }
    }
  }
}

// scatter-add transpose of im2col3; dx must be pre-sized (B*P_in x Cin).
// The stride-1 path zeroes each column's border entries (their forward values
// were padding) and then adds the shifted span in one vectorizable pass; the
// border entries of dcol are clobbered in the process, which is fine for a
// gradient scratch buffer.
template <typename T>
void col2im3(Matrix<T>& dcol, int b_items, int s_in, int stride, Matrix<T>& dx) {
  const int s_out = conv_out_size(s_in, stride);
  const std::int64_t p_in = static_cast<std::int64_t>(s_in) * s_in * s_in;
  const std::int64_t p_out = static_cast<std::int64_t>(s_out) * s_out * s_out;
  const int cin = static_cast<int>(dx.cols());
  dx.setZero();

  if (stride == 1) {
    for (int ci = 0; ci < cin; ++ci) {
      T* dst_base = dx.col(ci).data();
      for (int o = 0; o < 27; ++o) {
        const int dz = o / 9, dy = (o / 3) % 3, dx_off = o % 3;
        const std::int64_t off = static_cast<std::int64_t>(dz - 1) * s_in * s_in +
                                 (dy - 1) * s_in + (dx_off - 1);
        T* src_base = dcol.col(ci * 27 + o).data();
        for (int b = 0; b < b_items; ++b) {
          T* src = src_base + b * p_out;
          T* dst = dst_base + b * p_in;
          detail::for_each_border(s_in, dz, dy, dx_off, src, [](T* p, std::int64_t n) {
            std::fill(p, p + n, T(0));
          });
          const std::int64_t begin = std::max<std::int64_t>(0, -off);
          const std::int64_t end = std::min<std::int64_t>(p_in, p_in - off);
          T* d = dst + begin + off;
          const T* s = src + begin;
          const std::int64_t n = end - begin;
          for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
        }
      }
    }
    return;
  }

  for (int ci = 0; ci < cin; ++ci) {
    T* dst_base = dx.col(ci).data();
    for (int o = 0; o < 27; ++o) {
      const int dz = o / 9, dy = (o / 3) % 3, dx_off = o % 3;
      const T* src_base = dcol.col(ci * 27 + o).data();
      for (int b = 0; b < b_items; ++b) {
        T* dst = dst_base + b * p_in;
        const T* src = src_base + b * p_out;
        for (int zo = 0; zo < s_out; ++zo) {
          const int zi = zo * stride + dz - 1;
          if (zi < 0 || zi >= s_in) continue;
          for (int yo = 0; yo < s_out; ++yo) {
            const int yi = yo * stride + dy - 1;
            if (yi < 0 || yi >= s_in) continue;
            T* dst_row = dst + (static_cast<std::int64_t>(zi) * s_in + yi) * s_in;
            const T* src_row = src + (static_cast<std::int64_t>(zo) * s_out + yo) * s_out;
            for (int xo = 0; xo < s_out; ++xo) {
              const int xi = xo * stride + dx_off - 1;
              if (xi >= 0 && xi < s_in) dst_row[xi] += src_row[xo];
            }
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// layer forward/backward
// ---------------------------------------------------------------------------

template <typename T>
void conv_forward(const ConvParam<T>& p, const Matrix<T>& x, int b_items, int s_in,
                  Matrix<T>& col_scratch, Matrix<T>& y) {
  if (p.ksize == 1) {
    y.noalias() = x * p.w;
  } else {
    im2col3(x, b_items, s_in, p.stride, col_scratch);
    y.noalias() = col_scratch * p.w;
  }
  y.rowwise() += p.b.transpose();
}

// Accumulates dw/db and writes dx (pre-sized to x's shape). col_scratch is
// rebuilt here, so forward does not have to keep it alive.
template <typename T>
void conv_backward(const ConvParam<T>& p, const Matrix<T>& x, const Matrix<T>& dy, int b_items,
                   int s_in, Matrix<T>& col_scratch, ConvParam<T>& grad, Matrix<T>& dx) {
  grad.b.noalias() += dy.colwise().sum().transpose();
  if (p.ksize == 1) {
    grad.w.noalias() += x.transpose() * dy;
    dx.noalias() = dy * p.w.transpose();
    return;
  }
  im2col3(x, b_items, s_in, p.stride, col_scratch);
  grad.w.noalias() += col_scratch.transpose() * dy;
  col_scratch.noalias() = dy * p.w.transpose();  // reuse as dcol
  dx.resize(x.rows(), x.cols());
  col2im3(col_scratch, b_items, s_in, p.stride, dx);
}

template <typename T>
T sigmoid(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

// silu(x) = x * sigmoid(x); array expressions keep Eigen's vectorized exp
template <typename T>
void silu_forward(const Matrix<T>& pre, Matrix<T>& y) {
  y = pre.array() * (T(1) / ((-pre.array()).exp() + T(1)));
}

template <typename T>
void silu_backward(const Matrix<T>& pre, const Matrix<T>& dy, Matrix<T>& dpre) {
  dpre = (T(1) / ((-pre.array()).exp() + T(1))).matrix();  // sigmoid(pre)
  dpre.array() = dy.array() * dpre.array() * (T(1) + pre.array() * (T(1) - dpre.array()));
}

// Adds a per-(item, channel) bias to spatial blocks: y.block(b) += bias(b, c).
template <typename T>
void add_item_bias(Matrix<T>& y, const Matrix<T>& bias, std::int64_t p) {
  const int b_items = static_cast<int>(bias.rows());
  for (int c = 0; c < bias.cols(); ++c) {
    T* dst = y.col(c).data();
    for (int b = 0; b < b_items; ++b) {
      const T v = bias(b, c);
      T* seg = dst + b * p;
      for (std::int64_t i = 0; i < p; ++i) seg[i] += v;
    }
  }
}

template <typename T>
void item_bias_grad(const Matrix<T>& dy, std::int64_t p, Matrix<T>& dbias) {
  const int b_items = static_cast<int>(dy.rows() / p);
  dbias.setZero(b_items, dy.cols());
  for (int c = 0; c < dy.cols(); ++c) {
    const T* src = dy.col(c).data();
    for (int b = 0; b < b_items; ++b) {
      T acc = T(0);
      const T* seg = src + b * p;
      for (std::int64_t i = 0; i < p; ++i) acc += seg[i];
      dbias(b, c) = acc;
    }
  }
}

// Nearest-neighbour upsample from s_in^3 to s_out^3 (s_out >= s_in); source
// index is floor(o * s_in / s_out) per axis, which halves indices exactly for
// the usual 2x case and also handles odd sizes like 23 -> 12 -> 23.
template <typename T>
void upsample_forward(const Matrix<T>& x, int b_items, int s_in, int s_out, Matrix<T>& y) {
  const std::int64_t p_in = static_cast<std::int64_t>(s_in) * s_in * s_in;
  const std::int64_t p_out = static_cast<std::int64_t>(s_out) * s_out * s_out;
  y.resize(b_items * p_out, x.cols());
  std::vector<int> src_of(s_out);
  for (int o = 0; o < s_out; ++o) src_of[o] = o * s_in / s_out;
  for (int c = 0; c < x.cols(); ++c) {
    const T* src_base = x.col(c).data();
    T* dst_base = y.col(c).data();
    for (int b = 0; b < b_items; ++b) {
      const T* src = src_base + b * p_in;
      T* dst = dst_base + b * p_out;
      for (int zo = 0; zo < s_out; ++zo)
        for (int yo = 0; yo < s_out; ++yo) {
          const T* src_row = src + (static_cast<std::int64_t>(src_of[zo]) * s_in + src_of[yo]) * s_in;
          T* dst_row = dst + (static_cast<std::int64_t>(zo) * s_out + yo) * s_out;
          for (int xo = 0; xo < s_out; ++xo) dst_row[xo] = src_row[src_of[xo]];
        }
    }
  }
}

template <typename T>
void upsample_backward(const Matrix<T>& dy, int b_items, int s_in, int s_out, Matrix<T>& dx) {
  const std::int64_t p_in = static_cast<std::int64_t>(s_in) * s_in * s_in;
  const std::int64_t p_out = static_cast<std::int64_t>(s_out) * s_out * s_out;
  dx.setZero(b_items * p_in, dy.cols());
  std::vector<int> src_of(s_out);
  for (int o = 0; o < s_out; ++o) src_of[o] = o * s_in / s_out;
  for (int c = 0; c < dy.cols(); ++c) {
    T* dst_base = dx.col(c).data();
    const T* src_base = dy.col(c).data();
    for (int b = 0; b < b_items; ++b) {
      T* dst = dst_base + b * p_in;
      const T* src = src_base + b * p_out;
      for (int zo = 0; zo < s_out; ++zo)
        for (int yo = 0; yo < s_out; ++yo) {
          T* dst_row = dst + (static_cast<std::int64_t>(src_of[zo]) * s_in + src_of[yo]) * s_in;
          const T* src_row = src + (static_cast<std::int64_t>(zo) * s_out + yo) * s_out;
          for (int xo = 0; xo < s_out; ++xo) dst_row[src_of[xo]] += src_row[xo];
        }
    }
  }
}

// Sinusoidal embedding of an integer timestep, sin half then cos half.
template <typename T>
void timestep_embedding(int n, int dim, T* out) {
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / (half - 1));
    out[i] = static_cast<T>(std::sin(n * freq));
    out[half + i] = static_cast<T>(std::cos(n * freq));
  }
}

// ---------------------------------------------------------------------------
// initialization and Adam
// ---------------------------------------------------------------------------

template <typename T>
void init_uniform_fan_in(Matrix<T>& w, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.rows()));
  for (std::int64_t i = 0; i < w.size(); ++i)
    w.data()[i] = static_cast<T>((rng.uniform() * 2.0 - 1.0) * bound);
}

template <typename T>
struct AdamTensorState {
  Vector<T> m, v;
};

// One Adam update over a flat tensor; step must already be incremented.
template <typename T>
void adam_update(T* param, const T* grad, std::int64_t size, AdamTensorState<T>& st,
                 std::int64_t step, double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8) {
  if (st.m.size() != size) {
    st.m.setZero(size);
    st.v.setZero(size);
  }
  const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
  const T corr1 = static_cast<T>(1.0 - std::pow(beta1, static_cast<double>(step)));
  const T corr2 = static_cast<T>(1.0 - std::pow(beta2, static_cast<double>(step)));
  const T a = static_cast<T>(lr), e = static_cast<T>(eps);
  for (std::int64_t i = 0; i < size; ++i) {
    const T g = grad[i];
    st.m[i] = b1 * st.m[i] + (T(1) - b1) * g;
    st.v[i] = b2 * st.v[i] + (T(1) - b2) * g * g;
    const T mhat = st.m[i] / corr1;
    const T vhat = st.v[i] / corr2;
    param[i] -= a * mhat / (std::sqrt(vhat) + e);
  }
}

template <typename T>
void check_finite(const Matrix<T>& m, const char* layer) {
  if (!m.allFinite())
    throw numeric_error(std::string("non-finite activations in layer ") + layer);
}

}  // namespace voxcut::nn
