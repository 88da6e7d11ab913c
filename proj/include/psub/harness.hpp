#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "psub/predict.hpp"

namespace psub {

enum class TtaMode { none, hflip };

std::string_view tta_name(TtaMode mode);
TtaMode parse_tta(std::string_view name);
int tta_views(TtaMode mode);

/// Parses "1,4,8" into positive ascending budgets.
std::vector<int> parse_budgets(std::string_view text);

struct RunConfig {
  std::filesystem::path model;
  std::filesystem::path images;
  std::filesystem::path labels;
  std::vector<int> budgets{1};
  CriterionKind criterion = CriterionKind::entropy;
  AggregateMode aggregate = AggregateMode::entropy;
  std::optional<LayerWindow> layer_window;
  TtaMode tta = TtaMode::none;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> agg_params;
  std::filesystem::path out;
  std::size_t limit = 0;  // 0: whole dataset
  bool align = true;
  bool wall_clock = true;

  void validate() const;
  BudgetConfig budget_config(int b_ours, std::size_t image_index) const;
};

/// Mean of per-view logits.
TensorF tta_combine(std::span<const TensorF> logit_sets);

/// predict on every TTA view of x, then tta_combine.
TensorF infer_image(const ModelGraph& graph, const TensorF& x, const BudgetConfig& cfg, AggregateMode mode,
                    TtaMode tta, const AggregatorParams<float>* params);

struct SweepRow {
  int budget = 0;
  std::string criterion;
  std::string aggregate;
  std::string tta;
  double top1 = 0;  // percent
  std::size_t images = 0;
  double wall_ms = 0;
  int b_total = 0;  // forward passes per image: TTA views x budget
};

/// One row per budget. Images run in parallel; results merge in dataset order.
std::vector<SweepRow> eval_sweep(const ModelGraph& graph, const Dataset& data, const RunConfig& cfg,
                                 const AggregatorParams<float>* params);

/// CSV with header budget,criterion,aggregate,tta,top1,images,wall_ms,b_total.
/// wall_ms is written as 0 when wall_clock is false.
std::string format_sweep_csv(const std::vector<SweepRow>& rows, bool wall_clock = true);

struct VerifyEntry {
  std::string name;
  double max_abs_dev = 0;
  double tol = 0;
  bool pass = false;
};

std::vector<VerifyEntry> verify_golden(const ModelGraph& graph, const std::vector<GoldenFixture>& fixtures);

}  // namespace psub
