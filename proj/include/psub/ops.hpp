#pragma once

// Tensor primitives for sequential CNNs whose strided layers are written as a
// stride-1 op followed by an explicit phase-indexed subsample.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "psub/tensor.hpp"

namespace psub {

/// Phase of one subsampling layer: which of the rate_h x rate_w sub-grids is kept.
struct PhaseIndex {
  int s_h = 0;
  int s_w = 0;
  int rate_h = 1;
  int rate_w = 1;

  void validate() const {
    if (rate_h < 1 || rate_w < 1) {
      throw RangeError("subsampling rate must be >= 1, got " + std::to_string(rate_h) + "x" + std::to_string(rate_w));
    }
    if (s_h < 0 || s_h >= rate_h || s_w < 0 || s_w >= rate_w) {
      throw RangeError("phase (" + std::to_string(s_h) + "," + std::to_string(s_w) + ") outside rate " +
                       std::to_string(rate_h) + "x" + std::to_string(rate_w));
    }
  }

  bool is_default() const { return s_h == 0 && s_w == 0; }

  friend bool operator==(const PhaseIndex&, const PhaseIndex&) = default;
  friend auto operator<=>(const PhaseIndex&, const PhaseIndex&) = default;
};

namespace detail {

template <typename Scalar>
void require_rank3(const Tensor<Scalar>& x, const char* op) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": expected CxHxW input, got " + to_string(x.shape()));
}

inline Index clamp_index(Index i, Index extent) { return std::clamp<Index>(i, 0, extent - 1); }

}  // namespace detail

/// Stride-1 cross-correlation with zero padding. weight is Cout x Cin x k x k.
template <typename Scalar>
Tensor<Scalar> conv2d_s1(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias, int pad) {
  detail::require_rank3(x, "conv2d_s1");
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d_s1: weight must be Cout x Cin x k x k, got " + to_string(weight.shape()));
  }
  if (pad < 0) throw ShapeError("conv2d_s1: negative padding");
  const Index cin = x.channels(), h = x.height(), w = x.width();
  const Index cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d_s1: weight expects " + std::to_string(weight.dim(1)) + " input channels, input " +
                     to_string(x.shape()) + " has " + std::to_string(cin));
  }
  if (bias.size() != cout) {
    throw ShapeError("conv2d_s1: bias length " + std::to_string(bias.size()) + " != Cout " + std::to_string(cout));
  }
  const Index oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d_s1: kernel " + std::to_string(k) + " larger than padded input " + to_string(x.shape()));
  }

  // im2col: one row per (cin, ky, kx) tap, one column per output pixel.
  RowMatrix<Scalar> cols(cin * k * k, oh * ow);
  for (Index c = 0; c < cin; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = cols.row((c * k + ky) * k + kx).data();
        for (Index i = 0; i < oh; ++i) {
          const Index si = i + ky - pad;
          for (Index j = 0; j < ow; ++j) {
            const Index sj = j + kx - pad;
            row[i * ow + j] = (si >= 0 && si < h && sj >= 0 && sj < w) ? x(c, si, sj) : Scalar(0);
          }
        }
      }
    }
  }

  Tensor<Scalar> out(Shape{cout, oh, ow});
  auto out_m = out.matrix(cout, oh * ow);
  out_m.noalias() = weight.matrix(cout, cin * k * k) * cols;
  out_m.colwise() += bias.data();
  return out;
}

/// Max over a k x k window starting (k-1)/2 above/left of each pixel; borders
/// are edge-replicated so the spatial size is preserved.
template <typename Scalar>
Tensor<Scalar> sliding_max(const Tensor<Scalar>& x, int k) {
  detail::require_rank3(x, "sliding_max");
  if (k < 1) throw ShapeError("sliding_max: window must be >= 1");
  const Index c = x.channels(), h = x.height(), w = x.width();
  if (k > h || k > w) {
    throw ShapeError("sliding_max: window " + std::to_string(k) + " exceeds input " + to_string(x.shape()));
  }
  const Index before = (k - 1) / 2;
  // Separable: max along rows, then along columns.
  Tensor<Scalar> rows(x.shape());
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        Scalar m = x(ch, i, detail::clamp_index(j - before, w));
        for (Index t = 1; t < k; ++t) m = std::max(m, x(ch, i, detail::clamp_index(j - before + t, w)));
        rows(ch, i, j) = m;
      }
  Tensor<Scalar> out(x.shape());
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        Scalar m = rows(ch, detail::clamp_index(i - before, h), j);
        for (Index t = 1; t < k; ++t) m = std::max(m, rows(ch, detail::clamp_index(i - before + t, h), j));
        out(ch, i, j) = m;
      }
  return out;
}

/// Keeps x[c, rate_h*n + s_h, rate_w*m + s_w]. Output extent is floor(N/R)
/// for every phase; reads past the last row/column clamp to it.
template <typename Scalar>
Tensor<Scalar> subsample_phase(const Tensor<Scalar>& x, const PhaseIndex& p) {
  detail::require_rank3(x, "subsample_phase");
  p.validate();
  const Index c = x.channels(), h = x.height(), w = x.width();
  const Index oh = h / p.rate_h, ow = w / p.rate_w;
  if (oh == 0 || ow == 0) {
    throw ShapeError("subsample_phase: rate " + std::to_string(p.rate_h) + "x" + std::to_string(p.rate_w) +
                     " leaves no output for input " + to_string(x.shape()));
  }
  Tensor<Scalar> out(Shape{c, oh, ow});
  for (Index ch = 0; ch < c; ++ch)
    for (Index n = 0; n < oh; ++n) {
      const Index si = detail::clamp_index(p.rate_h * n + p.s_h, h);
      for (Index m = 0; m < ow; ++m) out(ch, n, m) = x(ch, si, detail::clamp_index(p.rate_w * m + p.s_w, w));
    }
  return out;
}

/// Every phase of a rate_h x rate_w subsampling in row-major phase order
/// (pixel unshuffle). Entry s_h*rate_w + s_w equals subsample_phase(x, {s_h, s_w}).
template <typename Scalar>
std::vector<Tensor<Scalar>> phase_decompose(const Tensor<Scalar>& x, int rate_h, int rate_w) {
  std::vector<Tensor<Scalar>> out;
  out.reserve(static_cast<std::size_t>(rate_h * rate_w));
  for (int sh = 0; sh < rate_h; ++sh)
    for (int sw = 0; sw < rate_w; ++sw) out.push_back(subsample_phase(x, PhaseIndex{sh, sw, rate_h, rate_w}));
  return out;
}

/// Nearest-neighbour resampling; source index = floor(dst * src / dst_extent).
template <typename Scalar>
Tensor<Scalar> nearest_resize(const Tensor<Scalar>& x, Index out_h, Index out_w) {
  detail::require_rank3(x, "nearest_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("nearest_resize: output extents must be >= 1");
  const Index c = x.channels(), h = x.height(), w = x.width();
  if (h == 0 || w == 0) throw ShapeError("nearest_resize: empty input " + to_string(x.shape()));
  Tensor<Scalar> out(Shape{c, out_h, out_w});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < out_h; ++i) {
      const Index si = i * h / out_h;
      for (Index j = 0; j < out_w; ++j) out(ch, i, j) = x(ch, si, j * w / out_w);
    }
  return out;
}

/// out[c,i,j] = x[c, clamp(i+dy), clamp(j+dx)].
template <typename Scalar>
Tensor<Scalar> translate_clamp(const Tensor<Scalar>& x, Index dy, Index dx) {
  detail::require_rank3(x, "translate_clamp");
  const Index c = x.channels(), h = x.height(), w = x.width();
  if (std::abs(dy) >= h || std::abs(dx) >= w) {
    throw ShapeError("translate_clamp: shift (" + std::to_string(dy) + "," + std::to_string(dx) +
                     ") not smaller than extent " + to_string(x.shape()));
  }
  Tensor<Scalar> out(x.shape());
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < h; ++i) {
      const Index si = detail::clamp_index(i + dy, h);
      for (Index j = 0; j < w; ++j) out(ch, i, j) = x(ch, si, detail::clamp_index(j + dx, w));
    }
  return out;
}

/// Mirror along the width axis.
template <typename Scalar>
Tensor<Scalar> hflip(const Tensor<Scalar>& x) {
  detail::require_rank3(x, "hflip");
  Tensor<Scalar> out(x.shape());
  const Index w = x.width();
  for (Index ch = 0; ch < x.channels(); ++ch)
    for (Index i = 0; i < x.height(); ++i)
      for (Index j = 0; j < w; ++j) out(ch, i, j) = x(ch, i, w - 1 - j);
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return Tensor<Scalar>(x.shape(), x.data().cwiseMax(Scalar(0)));
}

/// Fully connected layer over the flattened input: weight is K x d.
template <typename Scalar>
Tensor<Scalar> dense_head(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (weight.rank() != 2) throw ShapeError("dense_head: weight must be K x d, got " + to_string(weight.shape()));
  const Index k = weight.dim(0), d = weight.dim(1);
  if (x.size() != d) {
    throw ShapeError("dense_head: input has " + std::to_string(x.size()) + " values, weight expects " +
                     std::to_string(d));
  }
  if (bias.size() != k) throw ShapeError("dense_head: bias length " + std::to_string(bias.size()) + " != K");
  typename Tensor<Scalar>::Vector z = weight.matrix(k, d) * x.data() + bias.data();
  return Tensor<Scalar>(Shape{k}, std::move(z));
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& z) {
  if (z.size() == 0) throw ShapeError("softmax: empty input");
  typename Tensor<Scalar>::Vector e = (z.data().array() - z.data().maxCoeff()).exp().matrix();
  e /= e.sum();
  return Tensor<Scalar>(z.shape(), std::move(e));
}

/// Spatial mean per channel: CxHxW -> [C].
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  detail::require_rank3(x, "global_avg_pool");
  const Index c = x.channels(), hw = x.height() * x.width();
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent " + to_string(x.shape()));
  typename Tensor<Scalar>::Vector v = x.matrix(c, hw).rowwise().mean();
  return Tensor<Scalar>(Shape{c}, std::move(v));
}

/// Shannon entropy (nats) of softmax(logits).
template <typename Scalar>
Scalar entropy_of_logits(const Tensor<Scalar>& logits) {
  const auto& z = logits.data();
  const Scalar m = z.maxCoeff();
  const auto shifted = (z.array() - m).eval();
  const Scalar log_sum = std::log(shifted.exp().sum());
  // -sum p log p with log p = shifted - log_sum
  const auto log_p = (shifted - log_sum).eval();
  const Scalar h = -(log_p.exp() * log_p).sum();
  return std::max(h, Scalar(0));
}

}  // namespace psub
