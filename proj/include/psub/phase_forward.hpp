#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "psub/model_io.hpp"
#include "psub/ops.hpp"

namespace psub {

/// One point of the state space: a phase per searchable subsample layer, in
/// network order. Each PhaseIndex also carries that layer's rates.
struct Selection {
  std::vector<PhaseIndex> phases;

  /// The all-zero state used by conventional inference.
  static Selection zeros(const ModelGraph& graph);
  static Selection from_pairs(const ModelGraph& graph, const std::vector<std::pair<int, int>>& pairs);

  std::size_t size() const { return phases.size(); }
  bool is_default() const;
  void validate_for(const ModelGraph& graph) const;
  std::string to_string() const;

  friend bool operator==(const Selection&, const Selection&) = default;
  friend auto operator<=>(const Selection&, const Selection&) = default;
};

struct SelectionHash {
  std::size_t operator()(const Selection& s) const noexcept;
};

/// |S|: product of rate_h * rate_w over the searchable layers.
std::size_t state_space_size(const ModelGraph& graph);

/// Every state in lexicographic order (layer 1 most significant).
std::vector<Selection> enumerate_states(const ModelGraph& graph);

struct ForwardResult {
  TensorF feature;  // raw backbone output
  TensorF logits;
};

/// Applies one layer. Subsample layers use `phase` (phase 0 when null).
TensorF apply_layer(const LayerSpec& layer, const TensorF& x, const PhaseIndex* phase = nullptr);

/// Backbone with the given selection, then the head on the raw feature.
ForwardResult forward_with_selection(const ModelGraph& graph, const TensorF& x, const Selection& s);

/// Runs layers [head_index, end) on a backbone-shaped (or aggregated) feature.
TensorF forward_head(const ModelGraph& graph, const TensorF& feature);

/// Layers [begin, end) with searchable phases taken from s. `ordinal` is the
/// 0-based searchable index of the first subsample layer at or after begin.
TensorF run_layers(const ModelGraph& graph, TensorF x, std::size_t begin, std::size_t end, const Selection& s,
                   std::size_t ordinal);

struct Neighbor {
  Selection selection;
  TensorF feature;
  TensorF logits;
};

/// The rate_h*rate_w - 1 states that differ from s only by a nonzero phase at
/// searchable layer `layer` (1-based). The stride-1 producer feeding that
/// layer runs once and all phases are cut from its output. s must hold the
/// default phase at `layer`.
std::vector<Neighbor> neighbor_batch(const ModelGraph& graph, const TensorF& x, const Selection& s, int layer);

struct Offset {
  Index dy = 0;
  Index dx = 0;
  friend bool operator==(const Offset&, const Offset&) = default;
};

/// Input-resolution displacement of a state: per axis
/// s_1 + s_2 R_1 + s_3 R_1 R_2 + ...
Offset offset(const Selection& s);

/// Nearest-resizes a spatial backbone output to the input resolution and
/// moves its content by +offset(s) (edge clamped) so it registers with the
/// default state's map. Non-spatial (pooled) features pass through unchanged.
TensorF align_feature(const ModelGraph& graph, const TensorF& raw, const Selection& s);

/// Nearest-resize only, no shift. Used by the alignment ablation.
TensorF resize_feature(const ModelGraph& graph, const TensorF& raw);

}  // namespace psub
