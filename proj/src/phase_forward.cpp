#include "psub/phase_forward.hpp"

#include <sstream>

namespace psub {

Selection Selection::zeros(const ModelGraph& graph) {
  Selection s;
  for (std::size_t li : graph.searchable_layers()) {
    const LayerSpec& layer = graph.layers[li];
    s.phases.push_back(PhaseIndex{0, 0, layer.rate_h, layer.rate_w});
  }
  return s;
}

Selection Selection::from_pairs(const ModelGraph& graph, const std::vector<std::pair<int, int>>& pairs) {
  Selection s = zeros(graph);
  if (pairs.size() != s.size()) {
    throw ValidationError("selection has " + std::to_string(pairs.size()) + " entries, model has " +
                          std::to_string(s.size()) + " searchable layers");
  }
  for (std::size_t l = 0; l < pairs.size(); ++l) {
    s.phases[l].s_h = pairs[l].first;
    s.phases[l].s_w = pairs[l].second;
    s.phases[l].validate();
  }
  return s;
}

bool Selection::is_default() const {
  for (const PhaseIndex& p : phases) {
    if (!p.is_default()) return false;
  }
  return true;
}

void Selection::validate_for(const ModelGraph& graph) const {
  const auto searchable = graph.searchable_layers();
  if (phases.size() != searchable.size()) {
    throw ValidationError("selection has " + std::to_string(phases.size()) + " entries, model has " +
                          std::to_string(searchable.size()) + " searchable layers");
  }
  for (std::size_t l = 0; l < phases.size(); ++l) {
    const LayerSpec& layer = graph.layers[searchable[l]];
    if (phases[l].rate_h != layer.rate_h || phases[l].rate_w != layer.rate_w) {
      throw ValidationError("selection rates at searchable layer " + std::to_string(l + 1) +
                            " do not match layer '" + layer.name + "'");
    }
    phases[l].validate();
  }
}

std::string Selection::to_string() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t l = 0; l < phases.size(); ++l) {
    os << (l ? " " : "") << phases[l].s_h << ',' << phases[l].s_w;
  }
  os << ')';
  return os.str();
}

std::size_t SelectionHash::operator()(const Selection& s) const noexcept {
  std::size_t h = 1469598103934665603ull;
  for (const PhaseIndex& p : s.phases) {
    for (int v : {p.s_h, p.s_w, p.rate_h, p.rate_w}) {
      h ^= static_cast<std::size_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
  }
  return h;
}

std::size_t state_space_size(const ModelGraph& graph) {
  std::size_t n = 1;
  for (std::size_t li : graph.searchable_layers()) {
    n *= static_cast<std::size_t>(graph.layers[li].rate_h * graph.layers[li].rate_w);
  }
  return n;
}

std::vector<Selection> enumerate_states(const ModelGraph& graph) {
  std::vector<Selection> out;
  Selection cur = Selection::zeros(graph);
  const std::size_t total = state_space_size(graph);
  out.reserve(total);
  for (std::size_t n = 0; n < total; ++n) {
    out.push_back(cur);
    // Odometer increment, last layer fastest.
    for (std::size_t l = cur.size(); l-- > 0;) {
      PhaseIndex& p = cur.phases[l];
      if (++p.s_w < p.rate_w) break;
      p.s_w = 0;
      if (++p.s_h < p.rate_h) break;
      p.s_h = 0;
    }
  }
  return out;
}

TensorF apply_layer(const LayerSpec& layer, const TensorF& x, const PhaseIndex* phase) {
  switch (layer.kind) {
    case LayerKind::conv2d: return conv2d_s1(x, layer.weight, layer.bias, layer.pad);
    case LayerKind::sliding_max: return sliding_max(x, layer.k);
    case LayerKind::relu: return relu(x);
    case LayerKind::subsample:
      return subsample_phase(x, phase ? *phase : PhaseIndex{0, 0, layer.rate_h, layer.rate_w});
    case LayerKind::global_avg_pool: return global_avg_pool(x);
    case LayerKind::flatten: return x.reshaped(Shape{x.size()});
    case LayerKind::dense: return dense_head(x, layer.weight, layer.bias);
  }
  throw ValidationError("unhandled layer kind");
}

TensorF run_layers(const ModelGraph& graph, TensorF x, std::size_t begin, std::size_t end, const Selection& s,
                   std::size_t ordinal) {
  const auto head = static_cast<std::size_t>(graph.head_index);
  for (std::size_t i = begin; i < end; ++i) {
    const LayerSpec& layer = graph.layers[i];
    if (layer.kind == LayerKind::subsample && i < head) {
      x = apply_layer(layer, x, &s.phases.at(ordinal++));
    } else {
      x = apply_layer(layer, x);
    }
  }
  return x;
}

TensorF forward_head(const ModelGraph& graph, const TensorF& feature) {
  TensorF x = feature;
  for (std::size_t i = static_cast<std::size_t>(graph.head_index); i < graph.layers.size(); ++i) {
    x = apply_layer(graph.layers[i], x);
  }
  return x;
}

ForwardResult forward_with_selection(const ModelGraph& graph, const TensorF& x, const Selection& s) {
  s.validate_for(graph);
  if (x.shape() != graph.input_shape) {
    throw ShapeError("input " + to_string(x.shape()) + " does not match model input " + to_string(graph.input_shape));
  }
  ForwardResult r;
  r.feature = run_layers(graph, x, 0, static_cast<std::size_t>(graph.head_index), s, 0);
  r.logits = forward_head(graph, r.feature);
  return r;
}

std::vector<Neighbor> neighbor_batch(const ModelGraph& graph, const TensorF& x, const Selection& s, int layer) {
  s.validate_for(graph);
  const auto searchable = graph.searchable_layers();
  if (layer < 1 || layer > static_cast<int>(searchable.size())) {
    throw RangeError("neighbor layer " + std::to_string(layer) + " outside [1, " + std::to_string(searchable.size()) + "]");
  }
  const auto ord = static_cast<std::size_t>(layer - 1);
  if (!s.phases[ord].is_default()) {
    throw RangeError("neighbor expansion at layer " + std::to_string(layer) + " requires a default phase there, got " +
                     s.to_string());
  }
  if (x.shape() != graph.input_shape) {
    throw ShapeError("input " + to_string(x.shape()) + " does not match model input " + to_string(graph.input_shape));
  }
  const std::size_t sub_layer = searchable[ord];
  const LayerSpec& sub = graph.layers[sub_layer];

  const TensorF dense = run_layers(graph, x, 0, sub_layer, s, 0);
  std::vector<TensorF> phases = phase_decompose(dense, sub.rate_h, sub.rate_w);

  std::vector<Neighbor> out;
  out.reserve(phases.size() - 1);
  for (int sh = 0; sh < sub.rate_h; ++sh) {
    for (int sw = 0; sw < sub.rate_w; ++sw) {
      if (sh == 0 && sw == 0) continue;
      Neighbor n;
      n.selection = s;
      n.selection.phases[ord].s_h = sh;
      n.selection.phases[ord].s_w = sw;
      n.feature = run_layers(graph, std::move(phases[static_cast<std::size_t>(sh * sub.rate_w + sw)]), sub_layer + 1,
                             static_cast<std::size_t>(graph.head_index), n.selection, ord + 1);
      n.logits = forward_head(graph, n.feature);
      out.push_back(std::move(n));
    }
  }
  return out;
}

Offset offset(const Selection& s) {
  Offset o;
  Index stride_h = 1, stride_w = 1;
  for (const PhaseIndex& p : s.phases) {
    o.dy += p.s_h * stride_h;
    o.dx += p.s_w * stride_w;
    stride_h *= p.rate_h;
    stride_w *= p.rate_w;
  }
  return o;
}

TensorF resize_feature(const ModelGraph& graph, const TensorF& raw) {
  if (raw.rank() != 3) return raw;
  return nearest_resize(raw, graph.input_shape[1], graph.input_shape[2]);
}

TensorF align_feature(const ModelGraph& graph, const TensorF& raw, const Selection& s) {
  if (raw.rank() != 3) return raw;
  const Offset o = offset(s);
  TensorF up = resize_feature(graph, raw);
  if (o.dy == 0 && o.dx == 0) return up;
  // translate_clamp reads x[i + dy]; reading at i - offset moves content by +offset.
  return translate_clamp(up, -o.dy, -o.dx);
}

}  // namespace psub
