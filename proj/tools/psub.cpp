// Command-line harness: infer, eval, verify, train-agg.
//
// Exit status: 0 success, 1 verification failure, 2 usage error,
// 3 I/O or format error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

#include "psub/harness.hpp"
#include "psub/parallel.hpp"
#include "psub/trainer.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kVerifyFailed = 1;
constexpr int kUsage = 2;
constexpr int kIo = 3;

struct UsageError : psub::Error {
  using psub::Error::Error;
};

struct Options {
  std::string model, images, labels, golden, out, agg_params;
  std::string budgets;  // empty: 1 for infer/eval, 8 for train-agg
  std::string criterion = "entropy";
  std::string aggregate = "entropy";
  std::string layer_window;
  std::string tta = "none";
  std::uint64_t seed = 0;
  std::size_t limit = 0;
  std::size_t index = 0;
  bool index_set = false;
  bool no_align = false;
  bool no_wall_clock = false;
  psub::TrainHyper hyper;
};

// Flag parsing errors are usage errors; everything after that is I/O or data.
psub::RunConfig make_run_config(const Options& o, const char* default_budgets = "1") {
  psub::RunConfig cfg;
  try {
    cfg.model = o.model;
    cfg.images = o.images;
    cfg.labels = o.labels;
    cfg.budgets = psub::parse_budgets(o.budgets.empty() ? default_budgets : o.budgets);
    cfg.criterion = psub::parse_criterion(o.criterion);
    cfg.aggregate = psub::parse_aggregate(o.aggregate);
    if (!o.layer_window.empty()) cfg.layer_window = psub::parse_layer_window(o.layer_window);
    cfg.tta = psub::parse_tta(o.tta);
    cfg.seed = o.seed;
    if (!o.agg_params.empty()) cfg.agg_params = o.agg_params;
    cfg.out = o.out;
    cfg.limit = o.limit;
    cfg.align = !o.no_align;
    cfg.wall_clock = !o.no_wall_clock;
    cfg.validate();
  } catch (const psub::RangeError& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

void check_window(const psub::RunConfig& cfg, const psub::ModelGraph& graph) {
  try {
    psub::BudgetConfig b = cfg.budget_config(1, 0);
    psub::resolve_window(b, static_cast<int>(graph.searchable_layers().size()));
  } catch (const psub::RangeError& e) {
    throw UsageError(e.what());
  }
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
  } else {
    psub::psb1::write_file(out, text);
  }
}

std::optional<psub::AggregatorParams<float>> load_params(const psub::RunConfig& cfg, const psub::ModelGraph& graph) {
  if (!cfg.agg_params) return std::nullopt;
  auto p = psub::load_aggregator(*cfg.agg_params);
  p.validate(graph.backbone_output_shape().front());
  return p;
}

int run_eval(const Options& o) {
  const psub::RunConfig cfg = make_run_config(o);
  const psub::ModelGraph graph = psub::load_model(cfg.model);
  check_window(cfg, graph);
  const psub::Dataset data = psub::load_idx(cfg.images, cfg.labels);
  const auto params = load_params(cfg, graph);
  const auto rows = psub::eval_sweep(graph, data, cfg, params ? &*params : nullptr);
  emit(psub::format_sweep_csv(rows, cfg.wall_clock), o.out);
  return kOk;
}

int run_infer(const Options& o) {
  const psub::RunConfig cfg = make_run_config(o);
  const psub::ModelGraph graph = psub::load_model(cfg.model);
  check_window(cfg, graph);
  const auto images = psub::load_idx_images(cfg.images);
  const auto params = load_params(cfg, graph);

  std::size_t first = 0;
  std::size_t last = cfg.limit > 0 ? std::min(cfg.limit, images.size()) : images.size();
  if (o.index_set) {
    if (o.index >= images.size()) throw UsageError("--index past the end of " + cfg.images.string());
    first = o.index;
    last = o.index + 1;
  }
  std::ostringstream out;
  out << "image,budget,label";
  for (int k = 0; k < graph.num_classes; ++k) out << ",logit" << k;
  out << "\n";
  char buf[32];
  for (std::size_t i = first; i < last; ++i) {
    for (int b : cfg.budgets) {
      const psub::TensorF logits =
          psub::infer_image(graph, images[i], cfg.budget_config(b, i), cfg.aggregate, cfg.tta, params ? &*params : nullptr);
      psub::Index label = 0;
      logits.data().maxCoeff(&label);
      out << i << "," << b << "," << label;
      for (float v : logits.values()) {
        std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v));
        out << buf;
      }
      out << "\n";
    }
  }
  emit(out.str(), o.out);
  return kOk;
}

int run_verify(const Options& o) {
  const psub::ModelGraph graph = psub::load_model(o.model);
  const auto fixtures = psub::load_golden(o.golden, graph);
  const auto entries = psub::verify_golden(graph, fixtures);
  std::ostringstream out;
  std::size_t failed = 0;
  char buf[64];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof buf, " max_abs_dev=%.3e tol=%.0e", e.max_abs_dev, e.tol);
    out << (e.pass ? "PASS " : "FAIL ") << e.name << buf << "\n";
    failed += e.pass ? 0 : 1;
  }
  out << entries.size() - failed << "/" << entries.size() << " fixtures within tolerance\n";
  emit(out.str(), o.out);
  return failed == 0 ? kOk : kVerifyFailed;
}

int run_train(const Options& o) {
  const psub::RunConfig cfg = make_run_config(o, "8");
  if (o.out.empty()) throw UsageError("train-agg needs --out for the parameter file");
  const psub::ModelGraph graph = psub::load_model(cfg.model);
  check_window(cfg, graph);
  psub::Dataset data = psub::load_idx(cfg.images, cfg.labels);
  if (cfg.limit > 0 && cfg.limit < data.size()) data.resize(cfg.limit);

  psub::BudgetConfig budget = cfg.budget_config(cfg.budgets.back(), 0);
  psub::TrainHyper hyper = o.hyper;
  hyper.seed = cfg.seed;
  const auto outcome = psub::train_aggregator(graph, data, budget, hyper);
  psub::save_aggregator(outcome.params, o.out);
  const auto& r = outcome.report;
  std::printf("train_images %zu val_images %zu steps %zu best_epoch %d\n", r.train_images, r.val_images, r.steps,
              r.best_epoch);
  std::printf("initial_nll train %.6f val %.6f\n", r.initial_train_nll, r.initial_val_nll);
  std::printf("final_nll train %.6f val %.6f\n", r.final_train_nll, r.final_val_nll);
  return kOk;
}

void add_search_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--model", o.model, "model file (PSB1)")->required();
  cmd->add_option("--budgets", o.budgets, "comma-separated ascending budgets, e.g. 1,4,8");
  cmd->add_option("--criterion", o.criterion, "entropy|learned|random|offset");
  cmd->add_option("--aggregate", o.aggregate, "avg|entropy|attention");
  cmd->add_option("--agg-params", o.agg_params, "trained aggregator (PSB1)");
  cmd->add_option("--layer-window", o.layer_window, "searchable layers a..b (1-based)");
  cmd->add_option("--tta", o.tta, "none|hflip");
  cmd->add_option("--seed", o.seed, "seed for the random criterion and training");
  cmd->add_option("--limit", o.limit, "use only the first N images");
  cmd->add_flag("--no-align", o.no_align, "resize features without the phase shift");
  cmd->add_option("--out", o.out, "output file (default stdout)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Phase-subsampling search and aggregation for toy CNNs"};
  app.require_subcommand(1);
  Options o;

  auto* infer = app.add_subcommand("infer", "logits for one or more images");
  add_search_flags(infer, o);
  infer->add_option("--images", o.images, "IDX image file")->required();
  infer->add_option("--index", o.index, "single image index")->each([&](const std::string&) { o.index_set = true; });

  auto* eval = app.add_subcommand("eval", "top-1 sweep over budgets, CSV output");
  add_search_flags(eval, o);
  eval->add_option("--images", o.images, "IDX image file")->required();
  eval->add_option("--labels", o.labels, "IDX label file")->required();
  eval->add_flag("--no-wall-clock", o.no_wall_clock, "write wall_ms as 0 for byte-stable output");

  auto* verify = app.add_subcommand("verify", "check golden logits");
  verify->add_option("--model", o.model, "model file (PSB1)")->required();
  verify->add_option("--golden", o.golden, "golden fixture JSON")->required();
  verify->add_option("--out", o.out, "report file (default stdout)");

  auto* train = app.add_subcommand("train-agg", "train the attention aggregator");
  add_search_flags(train, o);
  train->add_option("--images", o.images, "IDX image file")->required();
  train->add_option("--labels", o.labels, "IDX label file")->required();
  train->add_option("--epochs", o.hyper.epochs, "training epochs");
  train->add_option("--lr", o.hyper.lr, "peak learning rate");
  train->add_option("--batch", o.hyper.batch, "images per step");
  train->add_option("--temperature", o.hyper.temperature, "candidate sampling temperature");
  train->add_option("--weight-decay", o.hyper.weight_decay, "decoupled weight decay");
  train->add_option("--candidates", o.hyper.candidates, "states gathered per image (0: twice the budget)");
  train->add_option("--val-fraction", o.hyper.val_fraction, "held-out fraction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    psub::thread_count();
  } catch (const psub::RangeError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (*infer) return run_infer(o);
    if (*eval) return run_eval(o);
    if (*verify) return run_verify(o);
    if (*train) return run_train(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
