#include "psub/harness.hpp"

#include <chrono>
#include <cstdio>
#include <map>
#include <sstream>

#include "psub/parallel.hpp"

namespace psub {

std::string_view tta_name(TtaMode mode) { return mode == TtaMode::hflip ? "hflip" : "none"; }

TtaMode parse_tta(std::string_view name) {
  if (name == "none") return TtaMode::none;
  if (name == "hflip") return TtaMode::hflip;
  throw RangeError("unknown tta mode '" + std::string(name) + "'");
}

int tta_views(TtaMode mode) { return mode == TtaMode::hflip ? 2 : 1; }

std::vector<int> parse_budgets(std::string_view text) {
  std::vector<int> out;
  std::stringstream in{std::string(text)};
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    int b = 0;
    try {
      b = std::stoi(item, &used);
    } catch (const std::logic_error&) {
      throw RangeError("budget '" + item + "' is not an integer");
    }
    if (used != item.size()) throw RangeError("budget '" + item + "' is not an integer");
    out.push_back(b);
  }
  if (out.empty() || text.back() == ',') throw RangeError("empty budget list entry");
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] < 1) throw RangeError("budgets must be positive");
    if (i > 0 && out[i] <= out[i - 1]) throw RangeError("budgets must be strictly ascending");
  }
  return out;
}

void RunConfig::validate() const {
  if (budgets.empty()) throw RangeError("at least one budget is required");
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    if (budgets[i] < 1) throw RangeError("budgets must be positive");
    if (i > 0 && budgets[i] <= budgets[i - 1]) throw RangeError("budgets must be strictly ascending");
  }
  if (aggregate == AggregateMode::attention && !agg_params) throw RangeError("--aggregate attention needs --agg-params");
  if (criterion == CriterionKind::learned && !agg_params) throw RangeError("--criterion learned needs --agg-params");
}

BudgetConfig RunConfig::budget_config(int b_ours, std::size_t image_index) const {
  BudgetConfig b;
  b.b_ours = b_ours;
  b.layer_window = layer_window;
  b.criterion = criterion;
  // Per-image stream so results do not depend on scheduling.
  b.seed = seed * 0x100000001b3ULL + image_index;
  b.align = align;
  return b;
}

TensorF tta_combine(std::span<const TensorF> logit_sets) {
  if (logit_sets.empty()) throw ShapeError("tta_combine: no views");
  TensorF out(logit_sets.front().shape());
  for (const TensorF& l : logit_sets) {
    if (l.shape() != out.shape()) throw ShapeError("tta_combine: views disagree on class count");
    out.data() += l.data();
  }
  out.data() /= static_cast<float>(logit_sets.size());
  return out;
}

TensorF infer_image(const ModelGraph& graph, const TensorF& x, const BudgetConfig& cfg, AggregateMode mode,
                    TtaMode tta, const AggregatorParams<float>* params) {
  std::vector<TensorF> views;
  views.push_back(predict(graph, x, cfg, mode, params));
  if (tta == TtaMode::hflip) views.push_back(predict(graph, hflip(x), cfg, mode, params));
  return tta_combine(views);
}

namespace {

int argmax(const TensorF& logits) {
  Index best = 0;
  logits.data().maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace

std::vector<SweepRow> eval_sweep(const ModelGraph& graph, const Dataset& data, const RunConfig& cfg,
                                 const AggregatorParams<float>* params) {
  cfg.validate();
  if (data.empty()) throw ValidationError("evaluation dataset is empty");
  const std::size_t n = cfg.limit > 0 ? std::min(cfg.limit, data.size()) : data.size();
  std::vector<SweepRow> rows;
  for (int b : cfg.budgets) {
    std::vector<char> correct(n, 0);
    const auto start = std::chrono::steady_clock::now();
    parallel_for(n, [&](std::size_t i) {
      const TensorF logits =
          infer_image(graph, data[i].image, cfg.budget_config(b, i), cfg.aggregate, cfg.tta, params);
      correct[i] = argmax(logits) == data[i].label;
    });
    const auto stop = std::chrono::steady_clock::now();
    std::size_t hits = 0;
    for (char c : correct) hits += c ? 1 : 0;
    SweepRow row;
    row.budget = b;
    row.criterion = criterion_name(cfg.criterion);
    row.aggregate = aggregate_name(cfg.aggregate);
    row.tta = tta_name(cfg.tta);
    row.top1 = 100.0 * static_cast<double>(hits) / static_cast<double>(n);
    row.images = n;
    row.wall_ms = std::chrono::duration<double, std::milli>(stop - start).count();
    row.b_total = tta_views(cfg.tta) * b;
    rows.push_back(row);
  }
  return rows;
}

std::string format_sweep_csv(const std::vector<SweepRow>& rows, bool wall_clock) {
  std::string out = "budget,criterion,aggregate,tta,top1,images,wall_ms,b_total\n";
  char buf[256];
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%s,%s,%.2f,%zu,%.1f,%d\n", r.budget, r.criterion.c_str(),
                  r.aggregate.c_str(), r.tta.c_str(), r.top1, r.images, wall_clock ? r.wall_ms : 0.0, r.b_total);
    out += buf;
  }
  return out;
}

std::vector<VerifyEntry> verify_golden(const ModelGraph& graph, const std::vector<GoldenFixture>& fixtures) {
  std::map<std::filesystem::path, std::vector<TensorF>> images;
  std::vector<VerifyEntry> out;
  for (const GoldenFixture& f : fixtures) {
    auto it = images.find(f.images_path);
    if (it == images.end()) it = images.emplace(f.images_path, load_idx_images(f.images_path)).first;
    if (f.image_index >= it->second.size()) {
      throw FormatError("fixture '" + f.input + "' points past the end of " + f.images_path.string());
    }
    const Selection s = Selection::from_pairs(graph, f.selection);
    const ForwardResult r = forward_with_selection(graph, it->second[f.image_index], s);
    VerifyEntry e;
    e.name = f.input + " " + s.to_string();
    e.tol = f.tol;
    for (std::size_t k = 0; k < f.logits.size(); ++k) {
      e.max_abs_dev = std::max(e.max_abs_dev, std::abs(static_cast<double>(r.logits[static_cast<Index>(k)]) - f.logits[k]));
    }
    e.pass = e.max_abs_dev <= e.tol;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace psub
