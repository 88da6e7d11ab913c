#pragma once

// Training of the attention aggregator with the backbone and head frozen.
// Global average pooling is linear, so the loss only needs the pooled
// (length-c) vector of every aligned feature:
//   pool(A) = mean_s p_s + w_o (.) P^T colsum(W) / B,  logits = D pool(A) + d.

#include <optional>

#include "psub/predict.hpp"

namespace psub {

/// Dense classifier read off a head of the form [global_avg_pool] [flatten] dense.
template <typename Scalar>
struct LinearHead {
  RowMatrix<Scalar> weight;  // K x c
  VectorX<Scalar> bias;      // K

  template <typename To>
  LinearHead<To> cast() const {
    return {weight.template cast<To>(), bias.template cast<To>()};
  }
};

LinearHead<double> extract_linear_head(const ModelGraph& graph);

/// Cross-entropy of one record set (rows of `pooled`) and, when `grad` is
/// non-null, its gradient with respect to (w_q, w_k, w_o).
template <typename Scalar>
Scalar aggregator_loss(const RowMatrix<Scalar>& pooled, int label, const AggregatorParams<Scalar>& p,
                       const LinearHead<Scalar>& head, AggregatorParams<Scalar>* grad = nullptr) {
  const Index b = pooled.rows();
  const RowMatrix<Scalar> w = attention_matrix(pooled, p);
  const VectorX<Scalar> received = w.colwise().sum().transpose();
  const VectorX<Scalar> u = pooled.transpose() * received / static_cast<Scalar>(b);
  const VectorX<Scalar> a = pooled.colwise().mean().transpose() + p.w_o.cwiseProduct(u);
  const VectorX<Scalar> z = head.weight * a + head.bias;
  const Scalar zmax = z.maxCoeff();
  const Scalar lse = zmax + std::log((z.array() - zmax).exp().sum());
  const Scalar loss = lse - z[label];
  if (!grad) return loss;

  VectorX<Scalar> dz = (z.array() - lse).exp().matrix();
  dz[label] -= Scalar(1);
  const VectorX<Scalar> g_a = head.weight.transpose() * dz;
  grad->w_o = g_a.cwiseProduct(u);
  const VectorX<Scalar> gc = pooled * g_a.cwiseProduct(p.w_o) / static_cast<Scalar>(b);
  // Row-wise softmax backward: dS = W (.) (gc^T - (W gc) 1^T).
  const VectorX<Scalar> wgc = w * gc;
  RowMatrix<Scalar> ds = w.array() * (gc.transpose().replicate(b, 1) - wgc.replicate(1, b)).array();
  const VectorX<Scalar> q = pooled * p.w_q;
  const VectorX<Scalar> k = pooled * p.w_k;
  grad->w_q = pooled.transpose() * (ds * k);
  grad->w_k = pooled.transpose() * (ds.transpose() * q);
  return loss;
}

struct TrainHyper {
  double lr = 1e-3;
  int epochs = 5;
  int batch = 32;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  double weight_decay = 0.01;
  int candidates = 0;          // states gathered per image; 0 means 2 * b_ours
  double val_fraction = 0.2;
};

/// Candidate states of one training image, reduced to pooled vectors.
struct TrainItem {
  RowMatrix<double> pooled;        // candidates x c, search order
  std::vector<double> criterion;   // entropy per candidate
  std::vector<Index> eval_rows;    // the b_ours lowest-criterion rows, default included
  int label = 0;
};

/// Runs the entropy search for one image with the candidate budget.
TrainItem make_train_item(const ModelGraph& graph, const TensorF& image, int label, const BudgetConfig& cfg,
                          int candidates);

struct TrainReport {
  double initial_train_nll = 0;
  double initial_val_nll = 0;
  double final_train_nll = 0;
  double final_val_nll = 0;
  std::size_t train_images = 0;
  std::size_t val_images = 0;
  std::size_t steps = 0;
  int best_epoch = 0;  // epoch whose params were kept; 0 is the initialization
};

struct TrainOutcome {
  AggregatorParams<float> params;
  TrainReport report;
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// Trains on prepared items. Each step samples b_ours candidates per image
/// without replacement, with probability proportional to
/// softmax(-criterion / temperature). The params of the epoch with the lowest
/// validation NLL are returned. NLL in the report is measured on each image's
/// eval_rows. Single-threaded and deterministic for a seed.
TrainOutcome train_on_items(const std::vector<TrainItem>& items, const LinearHead<double>& head, int b_ours,
                            const TrainHyper& hyper);

/// Gathers items (in parallel, merged in dataset order) and trains.
TrainOutcome train_aggregator(const ModelGraph& graph, const Dataset& train_set, const BudgetConfig& cfg,
                              const TrainHyper& hyper);

/// Mean cross-entropy of params over the items' eval_rows.
double mean_nll(const std::vector<TrainItem>& items, std::span<const std::size_t> which,
                const AggregatorParams<double>& p, const LinearHead<double>& head);

}  // namespace psub
