#pragma once

#include "flowcast/dataflow.hpp"
#include "flowcast/models.hpp"
#include "flowcast/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace flowcast {

struct TrainConfig {
    std::size_t epochs = 50;
    std::size_t batch = 4;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 42;
    bool shuffle = true;
    std::size_t patience = 20; // consecutive non-improving epochs; 0 disables early stopping

    /// lr may be zero (useful for no-op training runs); negative is rejected.
    void validate() const;
};

struct EpochRecord {
    std::size_t epoch; // 1-based
    double train_loss;
    double val_loss;
    double seconds;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0; // 1-based; 0 when no epoch ran
    double best_val_loss = 0.0;
    bool early_stopped = false;

    /// CSV with header epoch,train_loss,val_loss,seconds.
    std::string to_csv() const;
};

/// Sum over the three modes of the per-mode mean squared error on B×3
/// predictions/targets; equals sum((pred-target)^2)/B.
Tensor multitask_loss(const Tensor& pred, const Tensor& target);

struct MetricsRow {
    std::string mode; // subway, taxi, bus, or ALL
    double rmse = 0.0;
    double mae = 0.0;
    double wmape = 0.0; // dimensionless fraction, not a percentage
};

struct MetricsReport {
    std::vector<MetricsRow> rows; // per mode, then pooled ALL
    const MetricsRow& row(const std::string& mode) const;
    std::string to_csv() const;  // mode,rmse,mae,wmape
    std::string to_json() const; // array of row objects
};

/// Metrics over parallel denormalized series: RMSE, MAE, and
/// WMAPE = sum|y-p| / sum y (requires sum y > 0).
MetricsRow compute_metrics(const std::string& label, const std::vector<double>& truth,
                           const std::vector<double>& pred);

/// Adaptive moment estimation over a model's named parameters.
class Adam {
  public:
    Adam(std::vector<NamedParam>& params, const TrainConfig& cfg);
    void zero_grad();
    void step();

  private:
    std::vector<NamedParam>* params_;
    double lr_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Builds the (count,3,L) input batch and (count,3) target batch from
/// samples[start, start+count).
std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples, std::size_t start,
                                     std::size_t count);

/// Mini-batch training on the multitask loss with per-epoch validation.
/// Shuffling draws from one seeded generator across all epochs; the model is
/// left holding the parameters of the best validation epoch. Non-finite loss
/// raises TrainingError naming the epoch.
TrainHistory train(Model& model, const DatasetSplit& split, const TrainConfig& cfg);

/// Batched inference (gradients off), denormalizes predictions and targets,
/// and reports per-mode rows plus a pooled ALL row.
MetricsReport evaluate(Model& model, const std::vector<Sample>& samples,
                       const NormalizationParams& norm, std::size_t batch = 32);

struct SweepSpec {
    std::vector<std::size_t> batch_grid{2, 4, 8, 16, 32, 64, 128};
    std::vector<std::size_t> d_grid{4, 8, 12, 16, 20, 24, 28, 32};
    std::vector<std::size_t> heads_grid{2, 3, 4, 5, 6, 7, 8, 9, 10};
    std::vector<std::size_t> window_grid{5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
    ModelConfig base;  // starting point; arch and fixed widths
    TrainConfig train; // per-trial training budget
    SplitRatios ratios;

    void validate() const;
};

struct SweepTrial {
    std::size_t index = 0; // 0-based trial number
    std::size_t d_model = 0, heads = 0, window = 0, batch = 0;
    double val_rmse = 0.0;
    double val_mae = 0.0;
    std::string status; // "ok" or "diverged"
};

struct SweepResult {
    std::vector<SweepTrial> trials;
    ModelConfig best_config;
    std::size_t best_batch = 0;
    double best_rmse = 0.0;
    double best_mae = 0.0;

    /// CSV with header trial,d,heads,L,batch,val_rmse,val_mae,status.
    std::string log_csv() const;
};

/// Trains one configuration and reports (validation RMSE, validation MAE);
/// non-finite values mark the trial as diverged.
using TrialObjective =
    std::function<std::pair<double, double>(const ModelConfig&, const TrainConfig&)>;

/// Coordinate descent in the fixed order batch -> d -> heads -> L: each pass
/// scores every grid value of one parameter while the others stay at the
/// incumbent, then fixes the winner (lowest RMSE, MAE tie-break, earliest
/// grid position last resort). Trial seeds derive as train.seed + trial index.
SweepResult sweep_with_objective(const SweepSpec& spec, const TrialObjective& objective);

/// Full data-driven sweep over an imputed series: re-windows when L changes,
/// trains a fresh model per trial, scores on the validation split.
SweepResult sweep(const FlowSeries& series, const SweepSpec& spec);

} // namespace flowcast
