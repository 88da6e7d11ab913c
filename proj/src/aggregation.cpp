#include "psub/aggregation.hpp"

#include <algorithm>
#include <limits>

namespace psub {

namespace {

std::vector<TensorF> features_of(std::span<const FeatureRecord> records) {
  std::vector<TensorF> out;
  out.reserve(records.size());
  for (const FeatureRecord& r : records) out.push_back(r.aligned_feature);
  return out;
}

std::vector<double> entropies_of(std::span<const FeatureRecord> records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const FeatureRecord& r : records) out.push_back(r.entropy);
  return out;
}

constexpr double kVanishingWeight = 1e-9;

}  // namespace

WeightAssignment entropy_weights(std::span<const double> entropies, int num_classes) {
  if (num_classes < 2) throw RangeError("entropy weighting needs at least two classes");
  if (entropies.empty()) throw ShapeError("entropy_weights: empty record set");
  const double log_k = std::log(static_cast<double>(num_classes));
  WeightAssignment a;
  a.weights.reserve(entropies.size());
  bool any_alive = false;
  for (double h : entropies) {
    const double pre = std::max(0.0, 1.0 - h / log_k);
    a.weights.push_back(pre);
    a.normalizer += pre;
    any_alive = any_alive || pre > kVanishingWeight;
  }
  if (!any_alive) {
    a.uniform_fallback = true;
    std::fill(a.weights.begin(), a.weights.end(), 1.0 / static_cast<double>(entropies.size()));
    return a;
  }
  for (double& w : a.weights) w /= a.normalizer;
  return a;
}

WeightAssignment entropy_weights(std::span<const FeatureRecord> records, int num_classes) {
  const auto h = entropies_of(records);
  return entropy_weights(std::span<const double>(h), num_classes);
}

TensorF aggregate_avg(std::span<const FeatureRecord> records) {
  if (records.empty()) throw ShapeError("aggregate_avg: empty record set");
  const auto f = features_of(records);
  return aggregate_avg(std::span<const TensorF>(f));
}

TensorF aggregate_entropy(std::span<const FeatureRecord> records, int num_classes) {
  if (records.empty()) throw ShapeError("aggregate_entropy: empty record set");
  const auto f = features_of(records);
  const WeightAssignment a = entropy_weights(records, num_classes);
  return aggregate_weighted(std::span<const TensorF>(f), std::span<const double>(a.weights));
}

TensorF aggregate_attention(std::span<const FeatureRecord> records, const AggregatorParams<float>& p) {
  if (records.empty()) throw ShapeError("aggregate_attention: empty record set");
  const auto f = features_of(records);
  return aggregate_attention(std::span<const TensorF>(f), p);
}

RowMatrix<double> attention_matrix(std::span<const FeatureRecord> records, const AggregatorParams<double>& p) {
  if (records.empty()) throw ShapeError("attention_matrix: empty record set");
  std::vector<TensorD> f;
  f.reserve(records.size());
  for (const FeatureRecord& r : records) f.push_back(r.aligned_feature.cast<double>());
  return attention_matrix(std::span<const TensorD>(f), p);
}

double criterion_learned(const RowMatrix<double>& w, std::size_t index) {
  if (static_cast<Index>(index) >= w.cols()) throw RangeError("criterion_learned: state index outside attention matrix");
  const double received = w.col(static_cast<Index>(index)).sum();
  if (received <= 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / received;
}

PerPixelResult aggregate_perpixel(std::span<const TensorF> logit_maps, int num_classes) {
  detail::require_same_shapes(logit_maps, "aggregate_perpixel");
  const TensorF& first = logit_maps.front();
  if (first.rank() != 3 || first.channels() != num_classes) {
    throw ShapeError("aggregate_perpixel: expected K x H x W logit maps with K=" + std::to_string(num_classes) +
                     ", got " + to_string(first.shape()));
  }
  const Index k = first.channels(), h = first.height(), w = first.width(), hw = h * w;
  const std::size_t b = logit_maps.size();

  // Per record: per-pixel softmax (K x HW) and entropy (HW).
  std::vector<RowMatrix<float>> probs(b);
  std::vector<TensorF> weights(b, TensorF(Shape{1, h, w}));
  for (std::size_t s = 0; s < b; ++s) {
    const auto z = logit_maps[s].matrix(k, hw);
    RowMatrix<float> p = (z.rowwise() - z.colwise().maxCoeff()).array().exp().matrix();
    p.array().rowwise() /= p.colwise().sum().array();
    probs[s] = std::move(p);
  }
  std::vector<double> pixel_entropies(b);
  for (Index px = 0; px < hw; ++px) {
    for (std::size_t s = 0; s < b; ++s) {
      TensorF column(Shape{k}, logit_maps[s].matrix(k, hw).col(px));
      pixel_entropies[s] = entropy_of_logits(column);
    }
    const WeightAssignment a = entropy_weights(std::span<const double>(pixel_entropies), num_classes);
    for (std::size_t s = 0; s < b; ++s) weights[s][px] = static_cast<float>(a.weights[s]);
  }

  PerPixelResult r;
  r.probabilities = TensorF(Shape{k, h, w});
  auto mix = r.probabilities.matrix(k, hw);
  for (std::size_t s = 0; s < b; ++s) {
    mix += (probs[s].array().rowwise() * weights[s].matrix(1, hw).row(0).array()).matrix();
  }
  r.labels.resize(static_cast<std::size_t>(hw));
  for (Index px = 0; px < hw; ++px) {
    Index best = 0;
    mix.col(px).maxCoeff(&best);
    r.labels[static_cast<std::size_t>(px)] = static_cast<int>(best);
  }
  r.weights = std::move(weights);
  return r;
}

// ---------------------------------------------------------------------------
// PSB1 persistence: a single "aggregator" layer carrying w_k, w_o, w_q.

std::string serialize_aggregator(const AggregatorParams<float>& p) {
  p.validate(p.channels());
  const Index c = p.channels();
  std::string blob;
  nlohmann::json tensors;
  tensors["w_k"] = psb1::append_tensor(TensorF(Shape{c}, p.w_k), blob);
  tensors["w_o"] = psb1::append_tensor(TensorF(Shape{c}, p.w_o), blob);
  tensors["w_q"] = psb1::append_tensor(TensorF(Shape{c}, p.w_q), blob);
  nlohmann::json header = {
      {"kind", "aggregator"},
      {"layers",
       nlohmann::json::array({{{"kind", "aggregator"},
                               {"name", "aggregator"},
                               {"params", {{"channels", c}}},
                               {"tensors", std::move(tensors)}}})},
      {"meta", {{"channels", c}}}};
  return psb1::encode(header, blob);
}

void save_aggregator(const AggregatorParams<float>& p, const std::filesystem::path& path) {
  psb1::write_file(path, serialize_aggregator(p));
}

AggregatorParams<float> parse_aggregator(std::string_view bytes) {
  auto [header, blob] = psb1::decode(bytes);
  AggregatorParams<float> p;
  try {
    if (header.value("kind", "") != "aggregator") throw FormatError("PSB1 file is not an aggregator (kind tag)");
    const auto& layer = header.at("layers").at(0);
    const auto& tensors = layer.at("tensors");
    const Index c = layer.at("params").at("channels").get<Index>();
    p.w_q = psb1::read_tensor(tensors.at("w_q"), blob).data();
    p.w_k = psb1::read_tensor(tensors.at("w_k"), blob).data();
    p.w_o = psb1::read_tensor(tensors.at("w_o"), blob).data();
    p.validate(c);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed aggregator header: ") + e.what());
  }
  return p;
}

AggregatorParams<float> load_aggregator(const std::filesystem::path& path) {
  return parse_aggregator(psb1::read_file(path));
}

}  // namespace psub
