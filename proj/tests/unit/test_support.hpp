#pragma once

// Shared helpers for the unit and acceptance tests: a small corpus of
// sequential models and a conventional strided forward pass written without
// any phase machinery.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "psub/model_io.hpp"
#include "psub/phase_forward.hpp"
#include "psub/trainer.hpp"

namespace psub::testing {

inline std::filesystem::path fixture_dir() { return PSUB_FIXTURE_DIR; }

inline TensorF random_tensor(const Shape& shape, std::uint64_t seed, float lo = -1.f, float hi = 1.f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  TensorF t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

struct Stage {
  int out_channels = 1;
  int k = 3;
  int pad = 1;
  bool relu = true;
  int pool_k = 0;  // 0: no sliding max
  int rate_h = 2;
  int rate_w = 2;
};

enum class HeadKind { gap_dense, flatten_dense };

inline ModelGraph build_model(const std::string& name, const Shape& input, const std::vector<Stage>& stages,
                              int classes, std::uint64_t seed, HeadKind head = HeadKind::gap_dense) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.f, 1.f);
  auto fill = [&](const Shape& s, float scale) {
    TensorF t(s);
    for (Index i = 0; i < t.size(); ++i) t[i] = scale * normal(rng);
    return t;
  };
  ModelGraph g;
  g.name = name;
  g.input_shape = input;
  g.num_classes = classes;
  Index cin = input[0];
  int n = 0;
  for (const Stage& st : stages) {
    ++n;
    LayerSpec conv;
    conv.name = "conv" + std::to_string(n);
    conv.kind = LayerKind::conv2d;
    conv.pad = st.pad;
    conv.weight = fill({st.out_channels, cin, st.k, st.k}, 1.f / std::sqrt(static_cast<float>(cin * st.k * st.k)));
    conv.bias = fill({st.out_channels}, 0.1f);
    g.layers.push_back(conv);
    if (st.relu) g.layers.push_back({"relu" + std::to_string(n), LayerKind::relu});
    if (st.pool_k > 0) {
      LayerSpec pool{"pool" + std::to_string(n), LayerKind::sliding_max};
      pool.k = st.pool_k;
      g.layers.push_back(pool);
    }
    LayerSpec sub{"sub" + std::to_string(n), LayerKind::subsample};
    sub.rate_h = st.rate_h;
    sub.rate_w = st.rate_w;
    g.layers.push_back(sub);
    cin = st.out_channels;
  }
  g.head_index = static_cast<int>(g.layers.size());
  LayerSpec dense{"fc", LayerKind::dense};
  if (head == HeadKind::gap_dense) {
    g.layers.push_back({"gap", LayerKind::global_avg_pool});
    dense.weight = fill({classes, cin}, 1.f);
  } else {
    // Size the dense layer from the backbone output.
    ModelGraph probe = g;
    probe.layers.push_back({"gap", LayerKind::global_avg_pool});
    LayerSpec tmp{"fc", LayerKind::dense};
    tmp.weight = TensorF({classes, cin});
    tmp.bias = TensorF({classes});
    probe.layers.push_back(tmp);
    const Shape out = probe.backbone_output_shape();
    g.layers.push_back({"flatten", LayerKind::flatten});
    dense.weight = fill({classes, shape_product(out)}, 0.3f);
  }
  dense.bias = fill({classes}, 0.1f);
  g.layers.push_back(dense);
  g.validate();
  return g;
}

/// Models with divisible and non-divisible extents, rates 1 to 3, rectangular
/// rates, zero and same padding, with and without sliding max.
inline std::vector<ModelGraph> model_corpus() {
  std::vector<ModelGraph> c;
  c.push_back(build_model("tiny", {1, 8, 8}, {{4, 3, 1, true, 0, 2, 2}, {4, 3, 1, true, 3, 2, 2}}, 3, 11));
  c.push_back(build_model("odd", {2, 11, 9}, {{3, 3, 1, true, 2, 2, 2}, {5, 3, 0, true, 0, 3, 2}}, 4, 12));
  c.push_back(build_model("rate3", {1, 12, 12}, {{3, 3, 1, true, 0, 3, 3}, {3, 1, 0, true, 0, 2, 2}}, 3, 13));
  c.push_back(build_model("rect", {1, 8, 12},
                          {{2, 3, 1, true, 3, 1, 2}, {3, 3, 1, true, 0, 2, 2}, {3, 3, 1, false, 0, 2, 1}}, 5, 14));
  c.push_back(build_model("three", {1, 16, 16},
                          {{3, 3, 1, true, 3, 2, 2}, {4, 3, 1, true, 0, 2, 2}, {4, 3, 1, true, 2, 2, 2}}, 3, 15));
  c.push_back(build_model("flat", {1, 8, 8}, {{2, 3, 1, true, 0, 2, 2}}, 3, 16, HeadKind::flatten_dense));
  return c;
}

// ---------------------------------------------------------------------------
// Conventional forward: strided convolution and strided max pooling computed
// directly, as a framework would run them, in either precision.

template <typename Scalar>
Tensor<Scalar> strided_conv(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b, int pad,
                            int rh, int rw) {
  const Index cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index cout = w.dim(0), k = w.dim(2);
  const Index oh = (h + 2 * pad - k + 1) / rh, ow = (wd + 2 * pad - k + 1) / rw;
  Tensor<Scalar> out({cout, oh, ow});
  for (Index o = 0; o < cout; ++o)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j) {
        Scalar acc = b[o];
        for (Index c = 0; c < cin; ++c)
          for (Index u = 0; u < k; ++u)
            for (Index v = 0; v < k; ++v) {
              const Index yi = i * rh + u - pad, xj = j * rw + v - pad;
              if (yi < 0 || yi >= h || xj < 0 || xj >= wd) continue;
              acc += w[((o * cin + c) * k + u) * k + v] * x(c, yi, xj);
            }
        out(o, i, j) = acc;
      }
  return out;
}

template <typename Scalar>
Tensor<Scalar> strided_max(const Tensor<Scalar>& x, int k, int rh, int rw) {
  const Index c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index oh = h / rh, ow = wd / rw;
  const Index lead = (k - 1) / 2;
  Tensor<Scalar> out({c, oh, ow});
  for (Index ch = 0; ch < c; ++ch)
    for (Index i = 0; i < oh; ++i)
      for (Index j = 0; j < ow; ++j) {
        Scalar m = -std::numeric_limits<Scalar>::infinity();
        for (Index u = 0; u < k; ++u)
          for (Index v = 0; v < k; ++v) {
            const Index yi = std::clamp<Index>(i * rh + u - lead, 0, h - 1);
            const Index xj = std::clamp<Index>(j * rw + v - lead, 0, wd - 1);
            m = std::max(m, x(ch, yi, xj));
          }
        out(ch, i, j) = m;
      }
  return out;
}

/// Runs the graph with each subsample fused into the producer before it
/// (conv, or sliding max; relus in between commute with the subsample).
template <typename Scalar>
Tensor<Scalar> conventional_forward(const ModelGraph& g, const Tensor<Scalar>& input, bool head = true) {
  Tensor<Scalar> x = input;
  const std::size_t end = head ? g.layers.size() : static_cast<std::size_t>(g.head_index);
  for (std::size_t i = 0; i < end; ++i) {
    const LayerSpec& l = g.layers[i];
    // Find a subsample this layer feeds, skipping relus.
    std::size_t s = i + 1;
    while (s < g.layers.size() && g.layers[s].kind == LayerKind::relu) ++s;
    const bool fused = s < g.layers.size() && g.layers[s].kind == LayerKind::subsample &&
                       (l.kind == LayerKind::conv2d || l.kind == LayerKind::sliding_max);
    const int rh = fused ? g.layers[s].rate_h : 1, rw = fused ? g.layers[s].rate_w : 1;
    switch (l.kind) {
      case LayerKind::conv2d: x = strided_conv(x, l.weight.cast<Scalar>(), l.bias.cast<Scalar>(), l.pad, rh, rw); break;
      case LayerKind::sliding_max: x = strided_max(x, l.k, rh, rw); break;
      case LayerKind::relu: x = relu(x); break;
      case LayerKind::subsample: break;  // consumed by its producer
      case LayerKind::global_avg_pool: x = global_avg_pool(x); break;
      case LayerKind::flatten: x = x.reshaped({x.size()}); break;
      case LayerKind::dense: x = dense_head(x, l.weight.cast<Scalar>(), l.bias.cast<Scalar>()); break;
    }
    if (fused) {
      for (std::size_t r = i + 1; r < s; ++r) x = relu(x);
      i = s;
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Impulse oracle on identity-kernel stacks.

/// 1x1 identity convs, each followed by a subsample with the given rates. The
/// input is three output cells wide per axis.
inline ModelGraph identity_stack(const std::vector<std::pair<int, int>>& rates) {
  Index th = 1, tw = 1;
  for (auto [rh, rw] : rates) {
    th *= rh;
    tw *= rw;
  }
  ModelGraph g;
  g.name = "identity_stack";
  g.input_shape = {1, 3 * th, 3 * tw};
  g.num_classes = 2;
  int n = 0;
  for (auto [rh, rw] : rates) {
    ++n;
    LayerSpec conv{"conv" + std::to_string(n), LayerKind::conv2d};
    conv.weight = TensorF::constant({1, 1, 1, 1}, 1);
    conv.bias = TensorF({1});
    LayerSpec sub{"sub" + std::to_string(n), LayerKind::subsample};
    sub.rate_h = rh;
    sub.rate_w = rw;
    g.layers.push_back(conv);
    g.layers.push_back(sub);
  }
  g.head_index = static_cast<int>(g.layers.size());
  g.layers.push_back({"gap", LayerKind::global_avg_pool});
  LayerSpec dense{"fc", LayerKind::dense};
  dense.weight = TensorF::from_values({2, 1}, {1, -1});
  dense.bias = TensorF({2});
  g.layers.push_back(dense);
  g.validate();
  return g;
}

/// Puts an impulse on an input pixel that state s samples (the middle output
/// cell), aligns the state's feature and returns where the impulse lands
/// minus where it was placed. Registered maps give (0, 0).
inline std::pair<Index, Index> impulse_displacement(const ModelGraph& g, const Selection& s, bool align = true) {
  Index th = 1, tw = 1;
  Index dy = 0, dx = 0;
  for (const PhaseIndex& p : s.phases) {
    dy += p.s_h * th;
    dx += p.s_w * tw;
    th *= p.rate_h;
    tw *= p.rate_w;
  }
  const Index py = th + dy, px = tw + dx;
  TensorF x(g.input_shape);
  x(0, py, px) = 1;
  const ForwardResult r = forward_with_selection(g, x, s);
  const TensorF aligned = align ? align_feature(g, r.feature, s) : resize_feature(g, r.feature);
  Index at = 0;
  aligned.data().maxCoeff(&at);  // first maximum in row-major order
  const Index w = aligned.width();
  return {at / w - py, at % w - px};
}

// ---------------------------------------------------------------------------
// Finite-difference check of the aggregator loss.

struct GradCase {
  RowMatrix<double> pooled;
  int label = 0;
  AggregatorParams<double> params;
  LinearHead<double> head;
};

/// Random set of b pooled vectors with c channels over k classes. Parameters
/// are scaled so that every branch of the loss carries gradient.
inline GradCase random_grad_case(std::uint64_t seed, Index b, Index c, Index k) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  auto fill = [&](auto& m, double scale) {
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * n(rng);
  };
  GradCase g;
  g.pooled.resize(b, c);
  fill(g.pooled, 1.0);
  g.label = static_cast<int>(rng() % static_cast<std::uint64_t>(k));
  g.params = AggregatorParams<double>::zeros(c);
  fill(g.params.w_q, 0.7);
  fill(g.params.w_k, 0.7);
  fill(g.params.w_o, 0.8);
  g.head.weight.resize(k, c);
  fill(g.head.weight, 1.0);
  g.head.bias.resize(k);
  fill(g.head.bias, 0.3);
  return g;
}

/// Largest relative error between analytic and central-difference gradients,
/// |a - n| / max(|a|, |n|, floor) over every parameter.
inline double gradient_check_error(const GradCase& g, double h = 1e-5, double floor = 1e-6) {
  AggregatorParams<double> analytic;
  aggregator_loss(g.pooled, g.label, g.params, g.head, &analytic);
  double worst = 0;
  auto probe = [&](VectorX<double> AggregatorParams<double>::*member) {
    for (Index i = 0; i < (g.params.*member).size(); ++i) {
      AggregatorParams<double> up = g.params, down = g.params;
      (up.*member)[i] += h;
      (down.*member)[i] -= h;
      const double numeric =
          (aggregator_loss(g.pooled, g.label, up, g.head) - aggregator_loss(g.pooled, g.label, down, g.head)) / (2 * h);
      const double a = (analytic.*member)[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor}));
    }
  };
  probe(&AggregatorParams<double>::w_q);
  probe(&AggregatorParams<double>::w_k);
  probe(&AggregatorParams<double>::w_o);
  return worst;
}

}  // namespace psub::testing
