#include "psub/search.hpp"

#include <algorithm>
#include <queue>
#include <random>
#include <set>
#include <unordered_map>

namespace psub {

std::string_view criterion_name(CriterionKind kind) {
  switch (kind) {
    case CriterionKind::entropy: return "entropy";
    case CriterionKind::learned: return "learned";
    case CriterionKind::random: return "random";
    case CriterionKind::offset: return "offset";
  }
  return "?";
}

CriterionKind parse_criterion(std::string_view name) {
  for (CriterionKind k : {CriterionKind::entropy, CriterionKind::learned, CriterionKind::random, CriterionKind::offset}) {
    if (criterion_name(k) == name) return k;
  }
  throw RangeError("unknown criterion '" + std::string(name) + "'");
}

LayerWindow parse_layer_window(std::string_view text) {
  const auto dots = text.find("..");
  if (dots == std::string_view::npos) throw RangeError("layer window must look like a..b, got '" + std::string(text) + "'");
  try {
    LayerWindow w{std::stoi(std::string(text.substr(0, dots))), std::stoi(std::string(text.substr(dots + 2)))};
    if (w.first < 1 || w.last < w.first) throw RangeError("empty or non-positive layer window");
    return w;
  } catch (const std::logic_error&) {
    throw RangeError("layer window must look like a..b, got '" + std::string(text) + "'");
  }
}

LayerWindow resolve_window(const BudgetConfig& cfg, int num_searchable) {
  if (cfg.b_ours < 1) throw RangeError("b_ours must be >= 1");
  LayerWindow w;
  if (cfg.layer_window) {
    w = *cfg.layer_window;
  } else if (num_searchable >= 3) {
    w = {2, num_searchable - 1};
  } else {
    w = {1, num_searchable};
  }
  if (w.first < 1 || w.last > num_searchable || w.first > w.last) {
    throw RangeError("layer window " + std::to_string(w.first) + ".." + std::to_string(w.last) + " not within 1.." +
                     std::to_string(num_searchable));
  }
  return w;
}

double criterion_entropy(const TensorF& logits) { return entropy_of_logits(logits.cast<double>()); }

std::vector<FeatureRecord> SearchResult::selected_records() const {
  std::vector<FeatureRecord> out;
  out.reserve(selected.size());
  for (std::size_t i : selected) out.push_back(visited[i]);
  return out;
}

namespace {

struct QueueEntry {
  double priority;
  std::uint64_t seq;
  std::size_t index;
  bool operator>(const QueueEntry& o) const {
    return priority != o.priority ? priority > o.priority : seq > o.seq;
  }
};

class Searcher {
 public:
  Searcher(const ModelGraph& graph, const TensorF& x, const BudgetConfig& cfg, const AggregatorParams<float>* params)
      : graph_(graph), x_(x), cfg_(cfg), rng_(cfg.seed) {
    if (cfg.criterion == CriterionKind::learned) {
      if (!params) throw ValidationError("learned criterion requires aggregator parameters");
      params_ = params->cast<double>();
    }
    window_ = resolve_window(cfg, static_cast<int>(graph.searchable_layers().size()));
  }

  SearchResult run() {
    const Selection root = Selection::zeros(graph_);
    add_record(root, forward_with_selection(graph_, x_, root).feature, -1, 0);
    rescore_learned(0);
    queue_.push({0.0, seq_++, 0});

    const auto budget = static_cast<std::size_t>(cfg_.b_ours);
    while (result_.visited.size() < budget && !queue_.empty()) {
      const std::size_t idx = queue_.top().index;
      queue_.pop();
      const auto layer = next_layer(idx);
      if (!layer) continue;
      expanded_[idx].insert(*layer);
      ++result_.expansions;

      const std::size_t first_new = result_.visited.size();
      const Selection parent = result_.visited[idx].selection;
      for (Neighbor& n : neighbor_batch(graph_, x_, parent, *layer)) {
        if (index_.contains(n.selection)) continue;
        add_record(n.selection, n.feature, static_cast<int>(idx), *layer, &n.logits);
      }
      rescore_learned(first_new);
      for (std::size_t i = first_new; i < result_.visited.size(); ++i) {
        queue_.push({result_.visited[i].criterion, seq_++, i});
      }
      if (next_layer(idx)) queue_.push({result_.visited[idx].criterion, seq_++, idx});
    }

    if (cfg_.criterion == CriterionKind::learned) rescore_learned(0, /*all=*/true);
    select(budget);
    return std::move(result_);
  }

 private:
  std::optional<int> next_layer(std::size_t idx) const {
    const int floor = result_.visited[idx].generated_at;
    for (int l = std::max(window_.first, floor + 1); l <= window_.last; ++l) {
      if (!expanded_[idx].contains(l)) return l;
    }
    return std::nullopt;
  }

  void add_record(const Selection& s, const TensorF& raw, int parent, int generated_at,
                  const TensorF* logits = nullptr) {
    FeatureRecord r;
    r.selection = s;
    r.logits = logits ? *logits : forward_head(graph_, raw);
    r.aligned_feature = cfg_.align ? align_feature(graph_, raw, s) : resize_feature(graph_, raw);
    r.entropy = criterion_entropy(r.logits);
    r.parent = parent;
    r.generated_at = generated_at;
    switch (cfg_.criterion) {
      case CriterionKind::entropy: r.criterion = r.entropy; break;
      case CriterionKind::random: r.criterion = static_cast<double>(rng_() >> 11) * 0x1.0p-53; break;
      case CriterionKind::offset: {
        const Offset o = offset(s);
        r.criterion = static_cast<double>(o.dy + o.dx);
        break;
      }
      case CriterionKind::learned: break;  // filled by rescore_learned
    }
    index_.emplace(s, result_.visited.size());
    expanded_.emplace_back();
    result_.visited.push_back(std::move(r));
  }

  // Learned criterion: attention mass received within the current visited set.
  void rescore_learned(std::size_t first, bool all = false) {
    if (cfg_.criterion != CriterionKind::learned) return;
    pooled_.conservativeResize(static_cast<Index>(result_.visited.size()), params_.channels());
    for (std::size_t i = pooled_rows_; i < result_.visited.size(); ++i) {
      const TensorD f = result_.visited[i].aligned_feature.cast<double>();
      pooled_.row(static_cast<Index>(i)) = pooled_features(std::span<const TensorD>(&f, 1)).row(0);
    }
    pooled_rows_ = result_.visited.size();
    const RowMatrix<double> w = attention_matrix(pooled_, params_);
    for (std::size_t i = all ? 0 : first; i < result_.visited.size(); ++i) {
      result_.visited[i].criterion = criterion_learned(w, i);
    }
  }

  void select(std::size_t budget) {
    std::vector<std::size_t> order(result_.visited.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return result_.visited[a].criterion < result_.visited[b].criterion;
    });
    std::vector<std::size_t> keep(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(budget, order.size())));
    if (std::find(keep.begin(), keep.end(), std::size_t{0}) == keep.end()) {
      // Force the default state in place of the highest-criterion survivor.
      keep.back() = 0;
      std::stable_sort(keep.begin(), keep.end(), [&](std::size_t a, std::size_t b) {
        return result_.visited[a].criterion < result_.visited[b].criterion;
      });
    }
    result_.selected = std::move(keep);
  }

  const ModelGraph& graph_;
  const TensorF& x_;
  const BudgetConfig& cfg_;
  LayerWindow window_;
  AggregatorParams<double> params_;
  std::mt19937_64 rng_;

  SearchResult result_;
  std::unordered_map<Selection, std::size_t, SelectionHash> index_;
  std::vector<std::set<int>> expanded_;
  std::priority_queue<QueueEntry, std::vector<QueueEntry>, std::greater<>> queue_;
  std::uint64_t seq_ = 0;
  RowMatrix<double> pooled_;
  std::size_t pooled_rows_ = 0;
};

}  // namespace

SearchResult search(const ModelGraph& graph, const TensorF& x, const BudgetConfig& cfg,
                    const AggregatorParams<float>* params) {
  return Searcher(graph, x, cfg, params).run();
}

void for_each_state(const ModelGraph& graph, const TensorF& x,
                    const std::function<void(const Selection&, const ForwardResult&)>& visit) {
  const auto searchable = graph.searchable_layers();
  const auto head = static_cast<std::size_t>(graph.head_index);
  Selection s = Selection::zeros(graph);

  std::function<void(std::size_t, const TensorF&, std::size_t)> descend = [&](std::size_t ord, const TensorF& act,
                                                                              std::size_t begin) {
    if (ord == searchable.size()) {
      ForwardResult r;
      r.feature = run_layers(graph, act, begin, head, s, ord);
      r.logits = forward_head(graph, r.feature);
      visit(s, r);
      return;
    }
    const std::size_t li = searchable[ord];
    const LayerSpec& sub = graph.layers[li];
    const TensorF dense = run_layers(graph, act, begin, li, s, ord);
    const auto phases = phase_decompose(dense, sub.rate_h, sub.rate_w);
    for (int sh = 0; sh < sub.rate_h; ++sh) {
      for (int sw = 0; sw < sub.rate_w; ++sw) {
        s.phases[ord].s_h = sh;
        s.phases[ord].s_w = sw;
        descend(ord + 1, phases[static_cast<std::size_t>(sh * sub.rate_w + sw)], li + 1);
      }
    }
    s.phases[ord].s_h = 0;
    s.phases[ord].s_w = 0;
  };

  if (x.shape() != graph.input_shape) {
    throw ShapeError("input " + to_string(x.shape()) + " does not match model input " + to_string(graph.input_shape));
  }
  descend(0, x, 0);
}

std::vector<FeatureRecord> exhaustive_search(const ModelGraph& graph, const TensorF& x, bool align) {
  const std::size_t total = state_space_size(graph);
  if (total > kExhaustiveLimit) {
    throw RangeError("state space has " + std::to_string(total) + " states, exhaustive limit is " +
                     std::to_string(kExhaustiveLimit));
  }
  std::vector<FeatureRecord> out;
  out.reserve(total);
  for_each_state(graph, x, [&](const Selection& s, const ForwardResult& r) {
    FeatureRecord rec;
    rec.selection = s;
    rec.logits = r.logits;
    rec.aligned_feature = align ? align_feature(graph, r.feature, s) : resize_feature(graph, r.feature);
    rec.entropy = criterion_entropy(r.logits);
    rec.criterion = rec.entropy;
    out.push_back(std::move(rec));
  });
  std::stable_sort(out.begin(), out.end(), [](const FeatureRecord& a, const FeatureRecord& b) {
    return a.criterion != b.criterion ? a.criterion < b.criterion : a.selection < b.selection;
  });
  return out;
}

}  // namespace psub
