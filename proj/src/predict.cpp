#include "psub/predict.hpp"

namespace psub {

std::string_view aggregate_name(AggregateMode mode) {
  switch (mode) {
    case AggregateMode::avg: return "avg";
    case AggregateMode::entropy: return "entropy";
    case AggregateMode::attention: return "attention";
  }
  return "?";
}

AggregateMode parse_aggregate(std::string_view name) {
  for (AggregateMode m : {AggregateMode::avg, AggregateMode::entropy, AggregateMode::attention}) {
    if (aggregate_name(m) == name) return m;
  }
  throw RangeError("unknown aggregation '" + std::string(name) + "'");
}

void require_poolable_head(const ModelGraph& graph) {
  if (graph.backbone_output_shape().size() != 3) return;
  const auto head = static_cast<std::size_t>(graph.head_index);
  if (head >= graph.layers.size() || graph.layers[head].kind != LayerKind::global_avg_pool) {
    throw ValidationError("model '" + graph.name +
                          "': aggregation over spatial features needs global_avg_pool as the first head layer");
  }
}

TensorF predict_from_records(const ModelGraph& graph, std::span<const FeatureRecord> records, AggregateMode mode,
                             const AggregatorParams<float>* params) {
  if (records.empty()) throw ShapeError("predict: empty record set");
  if (mode == AggregateMode::attention && !params) throw ValidationError("attention aggregation requires parameters");
  if (records.size() == 1) return records.front().logits;

  require_poolable_head(graph);
  TensorF aggregated;
  switch (mode) {
    case AggregateMode::avg: aggregated = aggregate_avg(records); break;
    case AggregateMode::entropy: aggregated = aggregate_entropy(records, graph.num_classes); break;
    case AggregateMode::attention: aggregated = aggregate_attention(records, *params); break;
  }
  return forward_head(graph, aggregated);
}

TensorF predict(const ModelGraph& graph, const TensorF& x, const BudgetConfig& cfg, AggregateMode mode,
                const AggregatorParams<float>* params) {
  if (mode == AggregateMode::attention && !params) throw ValidationError("attention aggregation requires parameters");
  const SearchResult r = search(graph, x, cfg, params);
  const auto records = r.selected_records();
  return predict_from_records(graph, records, mode, params);
}

}  // namespace psub
