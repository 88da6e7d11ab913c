#include "psub/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "psub/parallel.hpp"

namespace psub {

namespace {

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Fisher-Yates with an explicit draw so the order does not depend on the
// standard library's shuffle.
template <typename T>
void shuffle_in_place(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(v[i - 1], v[std::min(j, i - 1)]);
  }
}

std::vector<Index> sample_rows(const TrainItem& item, int b, double temperature, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(item.pooled.rows());
  std::vector<Index> rows;
  if (n <= static_cast<std::size_t>(b)) {
    for (std::size_t i = 0; i < n; ++i) rows.push_back(static_cast<Index>(i));
    return rows;
  }
  const double best = *std::min_element(item.criterion.begin(), item.criterion.end());
  std::vector<double> weight(n);
  for (std::size_t i = 0; i < n; ++i) weight[i] = std::exp(-(item.criterion[i] - best) / temperature);
  for (int draw = 0; draw < b; ++draw) {
    double total = 0;
    for (double w : weight) total += w;
    double target = uniform01(rng) * total;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (weight[i] <= 0) continue;
      pick = i;
      target -= weight[i];
      if (target < 0) break;
    }
    rows.push_back(static_cast<Index>(pick));
    weight[pick] = 0;
  }
  return rows;
}

RowMatrix<double> gather(const RowMatrix<double>& pooled, const std::vector<Index>& rows) {
  RowMatrix<double> out(static_cast<Index>(rows.size()), pooled.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = pooled.row(rows[i]);
  return out;
}

struct Adam {
  explicit Adam(Index c)
      : m(AggregatorParams<double>::zeros(c)), v(AggregatorParams<double>::zeros(c)) {}

  void step(AggregatorParams<double>& p, const AggregatorParams<double>& g, double lr, double wd) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    auto update = [&](VectorX<double>& w, const VectorX<double>& grad, VectorX<double>& mm, VectorX<double>& vv) {
      mm = beta1 * mm + (1 - beta1) * grad;
      vv = beta2 * vv + (1 - beta2) * grad.cwiseAbs2();
      w *= 1.0 - lr * wd;
      w.array() -= lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
    };
    update(p.w_q, g.w_q, m.w_q, v.w_q);
    update(p.w_k, g.w_k, m.w_k, v.w_k);
    update(p.w_o, g.w_o, m.w_o, v.w_o);
  }

  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double eps = 1e-8;
  AggregatorParams<double> m, v;
  long t = 0;
};

}  // namespace

LinearHead<double> extract_linear_head(const ModelGraph& graph) {
  require_poolable_head(graph);
  std::size_t i = static_cast<std::size_t>(graph.head_index);
  if (i < graph.layers.size() && graph.layers[i].kind == LayerKind::global_avg_pool) ++i;
  if (i < graph.layers.size() && graph.layers[i].kind == LayerKind::flatten) ++i;
  if (i + 1 != graph.layers.size() || graph.layers[i].kind != LayerKind::dense) {
    throw ValidationError("model '" + graph.name + "': aggregator training needs a head of [global_avg_pool] [flatten] dense");
  }
  const LayerSpec& dense = graph.layers[i];
  const Index k = dense.weight.dim(0);
  const Index c = dense.weight.dim(1);
  LinearHead<double> head;
  head.weight = dense.weight.matrix(k, c).cast<double>();
  head.bias = Eigen::Map<const VectorX<float>>(dense.bias.data().data(), k).cast<double>();
  return head;
}

TrainItem make_train_item(const ModelGraph& graph, const TensorF& image, int label, const BudgetConfig& cfg,
                          int candidates) {
  BudgetConfig gather_cfg = cfg;
  gather_cfg.criterion = CriterionKind::entropy;
  gather_cfg.b_ours = candidates;
  const SearchResult r = search(graph, image, gather_cfg);

  TrainItem item;
  item.label = label;
  std::vector<TensorD> features;
  features.reserve(r.selected.size());
  for (std::size_t i : r.selected) {
    features.push_back(r.visited[i].aligned_feature.cast<double>());
    item.criterion.push_back(r.visited[i].criterion);
  }
  item.pooled = pooled_features(std::span<const TensorD>(features));

  // selected is sorted by criterion, so its prefix is the lowest-b set.
  const auto b = std::min<std::size_t>(static_cast<std::size_t>(cfg.b_ours), r.selected.size());
  bool has_default = false;
  for (std::size_t i = 0; i < b; ++i) {
    item.eval_rows.push_back(static_cast<Index>(i));
    has_default = has_default || r.selected[i] == 0;
  }
  if (!has_default) {
    const auto at = std::find(r.selected.begin(), r.selected.end(), std::size_t{0}) - r.selected.begin();
    item.eval_rows.back() = static_cast<Index>(at);
  }
  return item;
}

double mean_nll(const std::vector<TrainItem>& items, std::span<const std::size_t> which,
                const AggregatorParams<double>& p, const LinearHead<double>& head) {
  if (which.empty()) return 0;
  double total = 0;
  for (std::size_t i : which) {
    total += aggregator_loss(gather(items[i].pooled, items[i].eval_rows), items[i].label, p, head);
  }
  return total / static_cast<double>(which.size());
}

TrainOutcome train_on_items(const std::vector<TrainItem>& items, const LinearHead<double>& head, int b_ours,
                            const TrainHyper& hyper) {
  if (items.empty()) throw ValidationError("aggregator training: empty dataset");
  if (b_ours < 1) throw RangeError("aggregator training: b_ours must be >= 1");
  if (hyper.epochs < 0 || hyper.batch < 1) throw RangeError("aggregator training: epochs >= 0 and batch >= 1 required");
  if (!(hyper.temperature > 0)) throw RangeError("aggregator training: temperature must be positive");
  if (!(hyper.val_fraction >= 0 && hyper.val_fraction < 1)) throw RangeError("aggregator training: val_fraction in [0, 1)");

  const Index c = items.front().pooled.cols();
  if (c != head.weight.cols()) throw ShapeError("aggregator training: features and head disagree on channel count");

  std::mt19937_64 rng(hyper.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_in_place(order, rng);
  auto n_val = static_cast<std::size_t>(std::floor(hyper.val_fraction * static_cast<double>(items.size())));
  n_val = std::min(n_val, items.size() - 1);
  const std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  AggregatorParams<double> p = AggregatorParams<double>::initial(c, hyper.seed);
  TrainReport report;
  report.train_images = train.size();
  report.val_images = val.size();
  report.initial_train_nll = mean_nll(items, train, p, head);
  report.initial_val_nll = val.empty() ? report.initial_train_nll : mean_nll(items, val, p, head);

  const std::size_t per_epoch = (train.size() + static_cast<std::size_t>(hyper.batch) - 1) / static_cast<std::size_t>(hyper.batch);
  const std::size_t total_steps = per_epoch * static_cast<std::size_t>(hyper.epochs);
  Adam adam(c);
  AggregatorParams<double> grad = AggregatorParams<double>::zeros(c);
  AggregatorParams<double> g = AggregatorParams<double>::zeros(c);

  // Keep the checkpoint with the lowest validation NLL, initialization
  // included; without a validation split the last epoch wins.
  AggregatorParams<double> best = p;
  double best_val = report.initial_val_nll;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    shuffle_in_place(train, rng);
    for (std::size_t start = 0; start < train.size(); start += static_cast<std::size_t>(hyper.batch)) {
      const std::size_t stop = std::min(train.size(), start + static_cast<std::size_t>(hyper.batch));
      grad = AggregatorParams<double>::zeros(c);
      double loss = 0;
      for (std::size_t i = start; i < stop; ++i) {
        const TrainItem& item = items[train[i]];
        const RowMatrix<double> pooled = gather(item.pooled, sample_rows(item, b_ours, hyper.temperature, rng));
        loss += aggregator_loss(pooled, item.label, p, head, &g);
        grad.w_q += g.w_q;
        grad.w_k += g.w_k;
        grad.w_o += g.w_o;
      }
      const double scale = 1.0 / static_cast<double>(stop - start);
      loss *= scale;
      grad.w_q *= scale;
      grad.w_k *= scale;
      grad.w_o *= scale;
      if (!std::isfinite(loss) || !grad.w_q.allFinite() || !grad.w_k.allFinite() || !grad.w_o.allFinite()) {
        std::ostringstream msg;
        msg << "aggregator training diverged at epoch " << epoch << " step " << report.steps << ": loss " << loss
            << ", |w_q| " << p.w_q.norm() << ", |w_k| " << p.w_k.norm() << ", |w_o| " << p.w_o.norm();
        throw TrainingDiverged(msg.str());
      }
      const double lr = hyper.lr * 0.5 *
                        (1.0 + std::cos(std::numbers::pi * static_cast<double>(report.steps) / static_cast<double>(total_steps)));
      adam.step(p, grad, lr, hyper.weight_decay);
      ++report.steps;
    }
    const double v = val.empty() ? 0.0 : mean_nll(items, val, p, head);
    if (val.empty() || v < best_val) {
      best = p;
      best_val = v;
      report.best_epoch = epoch + 1;
    }
  }
  p = best;

  report.final_train_nll = mean_nll(items, train, p, head);
  report.final_val_nll = val.empty() ? report.final_train_nll : mean_nll(items, val, p, head);
  if (!std::isfinite(report.final_train_nll) || !std::isfinite(report.final_val_nll)) {
    throw TrainingDiverged("aggregator training produced a non-finite final loss");
  }
  return {p.cast<float>(), report};
}

TrainOutcome train_aggregator(const ModelGraph& graph, const Dataset& train_set, const BudgetConfig& cfg,
                              const TrainHyper& hyper) {
  if (train_set.empty()) throw ValidationError("aggregator training: empty dataset");
  const LinearHead<double> head = extract_linear_head(graph);
  const int candidates = hyper.candidates > 0 ? hyper.candidates : 2 * cfg.b_ours;
  if (candidates < cfg.b_ours) throw RangeError("aggregator training: candidates must be >= b_ours");
  resolve_window(cfg, static_cast<int>(graph.searchable_layers().size()));

  std::vector<TrainItem> items(train_set.size());
  parallel_for(items.size(), [&](std::size_t i) {
    items[i] = make_train_item(graph, train_set[i].image, train_set[i].label, cfg, candidates);
  });
  return train_on_items(items, head, cfg.b_ours, hyper);
}

}  // namespace psub
