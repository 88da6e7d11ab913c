#pragma once

// Set aggregators over aligned feature maps: plain average, entropy
// weighting, and the single-head attention module with an elementwise
// output gain.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "psub/feature_record.hpp"

namespace psub {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Trainable tensors of the attention aggregator, one entry per backbone channel.
template <typename Scalar>
struct AggregatorParams {
  VectorX<Scalar> w_q;  // channels -> scalar query
  VectorX<Scalar> w_k;  // channels -> scalar key
  VectorX<Scalar> w_o;  // per-channel output gain

  Index channels() const { return w_q.size(); }

  /// w_o = 0 and w_q, w_k ~ N(0, sigma^2) from a seeded generator.
  static AggregatorParams initial(Index channels, std::uint64_t seed, double sigma = 0.01) {
    std::mt19937_64 rng(seed);
    auto normal = [&rng, sigma] {
      // Box-Muller on 53-bit uniforms keeps the stream identical across standard libraries.
      const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
      const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      return sigma * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    };
    AggregatorParams p;
    p.w_q.resize(channels);
    p.w_k.resize(channels);
    for (Index c = 0; c < channels; ++c) p.w_q[c] = static_cast<Scalar>(normal());
    for (Index c = 0; c < channels; ++c) p.w_k[c] = static_cast<Scalar>(normal());
    p.w_o = VectorX<Scalar>::Zero(channels);
    return p;
  }

  static AggregatorParams zeros(Index channels) {
    return {VectorX<Scalar>::Zero(channels), VectorX<Scalar>::Zero(channels), VectorX<Scalar>::Zero(channels)};
  }

  template <typename To>
  AggregatorParams<To> cast() const {
    return {w_q.template cast<To>(), w_k.template cast<To>(), w_o.template cast<To>()};
  }

  void validate(Index expected_channels) const {
    if (w_q.size() != expected_channels || w_k.size() != expected_channels || w_o.size() != expected_channels) {
      throw ShapeError("aggregator has " + std::to_string(w_q.size()) + "/" + std::to_string(w_k.size()) + "/" +
                       std::to_string(w_o.size()) + " channels, features have " + std::to_string(expected_channels));
    }
    if (!w_q.allFinite() || !w_k.allFinite() || !w_o.allFinite()) throw ValidationError("aggregator has non-finite values");
  }
};

/// Normalized per-state weights.
struct WeightAssignment {
  std::vector<double> weights;
  double normalizer = 0;       // Z: sum of pre-weights
  bool uniform_fallback = false;
};

namespace detail {

template <typename Scalar>
void require_same_shapes(std::span<const Tensor<Scalar>> features, const char* op) {
  if (features.empty()) throw ShapeError(std::string(op) + ": empty feature set");
  for (const auto& f : features) {
    if (f.shape() != features.front().shape()) {
      throw ShapeError(std::string(op) + ": feature " + to_string(f.shape()) + " differs from " +
                       to_string(features.front().shape()));
    }
  }
}

/// Channel-wise view: rows are channels, columns spatial positions.
template <typename Scalar>
Index channel_count(const Tensor<Scalar>& f) {
  return f.rank() == 3 ? f.channels() : f.size();
}

}  // namespace detail

template <typename Scalar>
Tensor<Scalar> aggregate_weighted(std::span<const Tensor<Scalar>> features, std::span<const double> weights) {
  detail::require_same_shapes(features, "aggregate_weighted");
  if (weights.size() != features.size()) throw ShapeError("aggregate_weighted: one weight per feature required");
  Tensor<Scalar> out(features.front().shape());
  for (std::size_t s = 0; s < features.size(); ++s) out.data() += static_cast<Scalar>(weights[s]) * features[s].data();
  return out;
}

template <typename Scalar>
Tensor<Scalar> aggregate_avg(std::span<const Tensor<Scalar>> features) {
  detail::require_same_shapes(features, "aggregate_avg");
  Tensor<Scalar> out(features.front().shape());
  for (const auto& f : features) out.data() += f.data();
  out.data() /= static_cast<Scalar>(features.size());
  return out;
}

/// w_s proportional to 1 - H_s / ln K; uniform when every pre-weight vanishes.
WeightAssignment entropy_weights(std::span<const double> entropies, int num_classes);
WeightAssignment entropy_weights(std::span<const FeatureRecord> records, int num_classes);

TensorF aggregate_avg(std::span<const FeatureRecord> records);
TensorF aggregate_entropy(std::span<const FeatureRecord> records, int num_classes);

/// B x c matrix of per-feature channel means (rank-1 features are used as is).
template <typename Scalar>
RowMatrix<Scalar> pooled_features(std::span<const Tensor<Scalar>> features) {
  detail::require_same_shapes(features, "pooled_features");
  const Index c = detail::channel_count(features.front());
  RowMatrix<Scalar> out(static_cast<Index>(features.size()), c);
  for (std::size_t s = 0; s < features.size(); ++s) {
    const auto& f = features[s];
    out.row(static_cast<Index>(s)) = f.matrix(c, f.size() / c).rowwise().mean().transpose();
  }
  return out;
}

/// W[s, s'] = softmax over s' of q_s * k_s' with scalar q_s = w_q . pool(f_s),
/// k_s = w_k . pool(f_s). Row-stochastic.
template <typename Scalar>
RowMatrix<Scalar> attention_matrix(const RowMatrix<Scalar>& pooled, const AggregatorParams<Scalar>& p) {
  p.validate(pooled.cols());
  const VectorX<Scalar> q = pooled * p.w_q;
  const VectorX<Scalar> k = pooled * p.w_k;
  RowMatrix<Scalar> w = q * k.transpose();
  for (Index s = 0; s < w.rows(); ++s) {
    w.row(s) = (w.row(s).array() - w.row(s).maxCoeff()).exp();
    w.row(s) /= w.row(s).sum();
  }
  return w;
}

template <typename Scalar>
RowMatrix<Scalar> attention_matrix(std::span<const Tensor<Scalar>> features, const AggregatorParams<Scalar>& p) {
  return attention_matrix(pooled_features(features), p);
}

/// (1/B) sum_s ( f_s + w_o (.) sum_s' W[s,s'] f_s' ), the gain broadcast over space.
template <typename Scalar>
Tensor<Scalar> aggregate_attention(std::span<const Tensor<Scalar>> features, const AggregatorParams<Scalar>& p) {
  detail::require_same_shapes(features, "aggregate_attention");
  const Index c = detail::channel_count(features.front());
  p.validate(c);
  const RowMatrix<Scalar> w = attention_matrix(features, p);
  const auto b = static_cast<Index>(features.size());
  // sum_s sum_s' W[s,s'] f_s' = sum_s' colsum_s' f_s'
  const VectorX<Scalar> received = w.colwise().sum().transpose();

  Tensor<Scalar> mean(features.front().shape());
  Tensor<Scalar> mixed(features.front().shape());
  for (Index s = 0; s < b; ++s) {
    mean.data() += features[static_cast<std::size_t>(s)].data();
    mixed.data() += received[s] * features[static_cast<std::size_t>(s)].data();
  }
  Tensor<Scalar> out(features.front().shape());
  const Index spatial = out.size() / c;
  auto out_m = out.matrix(c, spatial);
  out_m = (mean.matrix(c, spatial) + p.w_o.asDiagonal() * mixed.matrix(c, spatial)) / static_cast<Scalar>(b);
  return out;
}

TensorF aggregate_attention(std::span<const FeatureRecord> records, const AggregatorParams<float>& p);
RowMatrix<double> attention_matrix(std::span<const FeatureRecord> records, const AggregatorParams<double>& p);

/// Reciprocal of the attention mass state `index` receives (column sum of W);
/// +inf when it receives none.
double criterion_learned(const RowMatrix<double>& w, std::size_t index);

/// Per-pixel entropy weighting of class-logit maps (K x H x W each).
struct PerPixelResult {
  TensorF probabilities;           // K x H x W, weighted mix of per-record softmax maps
  std::vector<int> labels;         // H*W argmax labels, row-major
  std::vector<TensorF> weights;    // per record, 1 x H x W, summing to 1 at every pixel
};
PerPixelResult aggregate_perpixel(std::span<const TensorF> logit_maps, int num_classes);

void save_aggregator(const AggregatorParams<float>& p, const std::filesystem::path& path);
std::string serialize_aggregator(const AggregatorParams<float>& p);
AggregatorParams<float> load_aggregator(const std::filesystem::path& path);
AggregatorParams<float> parse_aggregator(std::string_view bytes);

}  // namespace psub
