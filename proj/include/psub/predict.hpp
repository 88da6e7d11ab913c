#pragma once

#include <optional>

#include "psub/search.hpp"

namespace psub {

enum class AggregateMode { avg, entropy, attention };

std::string_view aggregate_name(AggregateMode mode);
AggregateMode parse_aggregate(std::string_view name);

/// Checks that the head can take an aggregated map at input resolution:
/// spatial backbone outputs need a global_avg_pool as the first head layer.
void require_poolable_head(const ModelGraph& graph);

/// Aggregates searched records and runs the head. A single record yields its
/// own logits, so budget one is the plain forward pass in every mode.
TensorF predict_from_records(const ModelGraph& graph, std::span<const FeatureRecord> records, AggregateMode mode,
                             const AggregatorParams<float>* params = nullptr);

/// search, align, aggregate, then the head.
TensorF predict(const ModelGraph& graph, const TensorF& x, const BudgetConfig& cfg, AggregateMode mode,
                const AggregatorParams<float>* params = nullptr);

}  // namespace psub
