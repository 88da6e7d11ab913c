#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "psub/aggregation.hpp"

namespace psub {

enum class CriterionKind { entropy, learned, random, offset };

std::string_view criterion_name(CriterionKind kind);
CriterionKind parse_criterion(std::string_view name);

/// Inclusive range of 1-based searchable layer positions.
struct LayerWindow {
  int first = 1;
  int last = 1;
  friend bool operator==(const LayerWindow&, const LayerWindow&) = default;
};

/// Parses "a..b".
LayerWindow parse_layer_window(std::string_view text);

struct BudgetConfig {
  int b_ours = 1;
  std::optional<LayerWindow> layer_window;  // unset: 2..L-1, or 1..L when L < 3
  CriterionKind criterion = CriterionKind::entropy;
  std::uint64_t seed = 0;  // random criterion only
  bool align = true;       // false: resize without shifting (ablation)
};

LayerWindow resolve_window(const BudgetConfig& cfg, int num_searchable);

/// Entropy of softmax(logits) in nats; lower is popped first.
double criterion_entropy(const TensorF& logits);

struct SearchResult {
  std::vector<FeatureRecord> visited;   // visit order; the default state is first
  std::vector<std::size_t> selected;    // indices into visited, ascending criterion
  std::size_t expansions = 0;

  std::vector<FeatureRecord> selected_records() const;
};

/// Greedy best-first search over selections under a budget of b_ours states.
/// The default state enters the queue at priority 0. Each pop expands the
/// lowest unexpanded window layer deeper than the layer that produced the
/// state; states with layers left are re-queued at their own criterion. The
/// b_ours lowest-criterion visited states are returned, default included.
/// `params` is required for the learned criterion.
SearchResult search(const ModelGraph& graph, const TensorF& x, const BudgetConfig& cfg,
                    const AggregatorParams<float>* params = nullptr);

inline constexpr std::size_t kExhaustiveLimit = 4096;

/// Visits every state with shared prefixes (each producer runs once per
/// distinct upstream selection). States arrive in lexicographic order.
void for_each_state(const ModelGraph& graph, const TensorF& x,
                    const std::function<void(const Selection&, const ForwardResult&)>& visit);

/// Every state, scored by entropy, sorted by (criterion, selection).
std::vector<FeatureRecord> exhaustive_search(const ModelGraph& graph, const TensorF& x, bool align = true);

}  // namespace psub
