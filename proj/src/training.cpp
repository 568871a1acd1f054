#include "flowcast/training.hpp"

#include "flowcast/errors.hpp"
#include "flowcast/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace flowcast {

using util::format_double;

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch < 1) throw ConfigError("batch size must be >= 1");
    if (lr < 0.0 || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("optimizer decay constants must lie in [0, 1)");
    if (eps <= 0.0) throw ConfigError("optimizer epsilon must be positive");
}

std::string TrainHistory::to_csv() const {
    std::string out = "epoch,train_loss,val_loss,seconds\n";
    for (const EpochRecord& r : epochs) {
        out += std::to_string(r.epoch);
        out += ',';
        out += format_double(r.train_loss);
        out += ',';
        out += format_double(r.val_loss);
        out += ',';
        out += format_double(r.seconds);
        out += '\n';
    }
    return out;
}

Tensor multitask_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape().size() != 2 || pred.shape() != target.shape())
        throw ShapeError("multitask_loss: prediction and target must share a (B,3) shape");
    if (pred.dim(1) != static_cast<std::size_t>(kModes))
        throw ShapeError("multitask_loss: expected 3 output modes, got " + std::to_string(pred.dim(1)));
    Tensor diff = sub(pred, target);
    return mul_scalar(sum(mul(diff, diff)), 1.0 / static_cast<double>(pred.dim(0)));
}

MetricsRow compute_metrics(const std::string& label, const std::vector<double>& truth,
                           const std::vector<double>& pred) {
    if (truth.size() != pred.size() || truth.empty())
        throw ShapeError("metrics: truth and prediction series must be equal-length and non-empty");
    double sq = 0.0, abs_err = 0.0, total = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        double e = truth[i] - pred[i];
        sq += e * e;
        abs_err += std::abs(e);
        total += truth[i];
    }
    double n = static_cast<double>(truth.size());
    MetricsRow row;
    row.mode = label;
    row.rmse = std::sqrt(sq / n);
    row.mae = abs_err / n;
    if (total <= 0.0)
        throw DataError("WMAPE undefined for " + label + ": ground-truth total is not positive");
    row.wmape = abs_err / total;
    return row;
}

const MetricsRow& MetricsReport::row(const std::string& mode) const {
    for (const MetricsRow& r : rows)
        if (r.mode == mode) return r;
    throw ConfigError("metrics report has no row for mode " + mode);
}

std::string MetricsReport::to_csv() const {
    std::string out = "mode,rmse,mae,wmape\n";
    for (const MetricsRow& r : rows) {
        out += r.mode;
        out += ',';
        out += format_double(r.rmse);
        out += ',';
        out += format_double(r.mae);
        out += ',';
        out += format_double(r.wmape);
        out += '\n';
    }
    return out;
}

std::string MetricsReport::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const MetricsRow& r : rows) {
        nlohmann::json j;
        j["mode"] = r.mode;
        j["rmse"] = r.rmse;
        j["mae"] = r.mae;
        j["wmape"] = r.wmape; // fraction, not percentage
        arr.push_back(std::move(j));
    }
    return arr.dump(2) + "\n";
}

Adam::Adam(std::vector<NamedParam>& params, const TrainConfig& cfg)
    : params_(&params), lr_(cfg.lr), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].second.numel(), 0.0);
        v_[i].assign(params[i].second.numel(), 0.0);
    }
}

void Adam::zero_grad() {
    for (NamedParam& p : *params_) p.second.zero_grad();
}

void Adam::step() {
    ++t_;
    double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_->size(); ++i) {
        Tensor& p = (*params_)[i].second;
        const std::vector<double>& g = p.grad();
        std::vector<double>& x = p.values();
        for (std::size_t k = 0; k < x.size(); ++k) {
            m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * g[k];
            v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * g[k] * g[k];
            x[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
        }
    }
}

namespace {

std::pair<Tensor, Tensor> gather_batch(const std::vector<Sample>& samples,
                                       const std::size_t* order, std::size_t count) {
    std::size_t width = samples[order[0]].x.size();
    std::vector<double> xs, ys;
    xs.reserve(count * width);
    ys.reserve(count * static_cast<std::size_t>(kModes));
    for (std::size_t i = 0; i < count; ++i) {
        const Sample& s = samples[order[i]];
        if (s.x.size() != width) throw ShapeError("batch mixes samples of different window lengths");
        xs.insert(xs.end(), s.x.begin(), s.x.end());
        ys.insert(ys.end(), s.y.begin(), s.y.end());
    }
    std::size_t window = width / static_cast<std::size_t>(kModes);
    Tensor x = Tensor::from_vector({count, static_cast<std::size_t>(kModes), window}, std::move(xs));
    Tensor y = Tensor::from_vector({count, static_cast<std::size_t>(kModes)}, std::move(ys));
    return {x, y};
}

double mean_loss(Model& model, const std::vector<Sample>& samples, std::size_t batch) {
    grad_mode::NoGradGuard guard;
    double weighted = 0.0;
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t start = 0; start < samples.size(); start += batch) {
        std::size_t count = std::min(batch, samples.size() - start);
        auto [x, y] = gather_batch(samples, order.data() + start, count);
        double l = multitask_loss(model.forward(x), y).item();
        weighted += l * static_cast<double>(count);
    }
    return weighted / static_cast<double>(samples.size());
}

} // namespace

std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples, std::size_t start,
                                     std::size_t count) {
    if (count == 0 || start + count > samples.size())
        throw ShapeError("make_batch: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceeds " +
                         std::to_string(samples.size()) + " samples");
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), start);
    return gather_batch(samples, order.data(), count);
}

TrainHistory train(Model& model, const DatasetSplit& split, const TrainConfig& cfg) {
    cfg.validate();
    if (split.train.empty()) throw ConfigError("training split is empty");
    if (split.validation.empty()) throw ConfigError("validation split is empty");
    const std::size_t width = static_cast<std::size_t>(kModes) * model.config().window;
    if (split.train.front().x.size() != width)
        throw ShapeError("model window " + std::to_string(model.config().window) +
                         " does not match dataset window " + std::to_string(split.window));

    std::vector<NamedParam>& params = model.parameters();
    Adam opt(params, cfg);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), 0);

    TrainHistory history;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params;
    std::size_t strikes = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
        double weighted = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            std::size_t count = std::min(cfg.batch, order.size() - start);
            auto [x, y] = gather_batch(split.train, order.data() + start, count);
            opt.zero_grad();
            Tensor loss = multitask_loss(model.forward(x), y);
            double lval = loss.item();
            if (!std::isfinite(lval))
                throw TrainingError("training diverged: non-finite loss at epoch " +
                                    std::to_string(epoch));
            loss.backward();
            opt.step();
            weighted += lval * static_cast<double>(count);
        }
        double train_loss = weighted / static_cast<double>(order.size());
        double val_loss = mean_loss(model, split.validation, cfg.batch);
        if (!std::isfinite(val_loss))
            throw TrainingError("training diverged: non-finite validation loss at epoch " +
                                std::to_string(epoch));
        double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        history.epochs.push_back({epoch, train_loss, val_loss, seconds});

        if (val_loss < best_val) {
            best_val = val_loss;
            history.best_epoch = epoch;
            best_params.clear();
            for (const NamedParam& p : params) best_params.push_back(p.second.values());
            strikes = 0;
        } else {
            ++strikes;
            if (cfg.patience > 0 && strikes >= cfg.patience) {
                history.early_stopped = true;
                break;
            }
        }
    }

    history.best_val_loss = best_val;
    if (!best_params.empty())
        for (std::size_t i = 0; i < params.size(); ++i)
            params[i].second.values() = best_params[i];
    return history;
}

MetricsReport evaluate(Model& model, const std::vector<Sample>& samples,
                       const NormalizationParams& norm, std::size_t batch) {
    if (samples.empty()) throw ConfigError("evaluate: no samples");
    if (batch < 1) throw ConfigError("evaluate: batch size must be >= 1");
    const std::size_t width = static_cast<std::size_t>(kModes) * model.config().window;
    if (samples.front().x.size() != width)
        throw ShapeError("evaluate: sample window does not match model window " +
                         std::to_string(model.config().window));

    grad_mode::NoGradGuard guard;
    std::array<std::vector<double>, 3> truth, pred;
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t start = 0; start < samples.size(); start += batch) {
        std::size_t count = std::min(batch, samples.size() - start);
        auto [x, y] = gather_batch(samples, order.data() + start, count);
        Tensor out = model.forward(x);
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t m = 0; m < 3; ++m) {
                int mode = static_cast<int>(m);
                truth[m].push_back(denormalize_value(y.values()[i * 3 + m], norm, mode));
                pred[m].push_back(denormalize_value(out.values()[i * 3 + m], norm, mode));
            }
    }

    MetricsReport report;
    std::vector<double> all_truth, all_pred;
    for (std::size_t m = 0; m < 3; ++m) {
        report.rows.push_back(compute_metrics(kModeNames[m], truth[m], pred[m]));
        all_truth.insert(all_truth.end(), truth[m].begin(), truth[m].end());
        all_pred.insert(all_pred.end(), pred[m].begin(), pred[m].end());
    }
    report.rows.push_back(compute_metrics("ALL", all_truth, all_pred));
    return report;
}

void SweepSpec::validate() const {
    if (batch_grid.empty() || d_grid.empty() || heads_grid.empty() || window_grid.empty())
        throw ConfigError("sweep grids must be non-empty");
    for (std::size_t b : batch_grid)
        if (b < 1) throw ConfigError("sweep batch grid values must be >= 1");
    for (std::size_t d : d_grid)
        if (d < 1) throw ConfigError("sweep d grid values must be >= 1");
    for (std::size_t h : heads_grid)
        if (h < 1) throw ConfigError("sweep heads grid values must be >= 1");
    for (std::size_t w : window_grid)
        if (w < 1 || w >= static_cast<std::size_t>(kSlotsPerDay))
            throw ConfigError("sweep window grid values must be in [1, 35]");
    train.validate();
}

std::string SweepResult::log_csv() const {
    std::string out = "trial,d,heads,L,batch,val_rmse,val_mae,status\n";
    for (const SweepTrial& t : trials) {
        out += std::to_string(t.index);
        out += ',';
        out += std::to_string(t.d_model);
        out += ',';
        out += std::to_string(t.heads);
        out += ',';
        out += std::to_string(t.window);
        out += ',';
        out += std::to_string(t.batch);
        out += ',';
        out += format_double(t.val_rmse);
        out += ',';
        out += format_double(t.val_mae);
        out += ',';
        out += t.status;
        out += '\n';
    }
    return out;
}

SweepResult sweep_with_objective(const SweepSpec& spec, const TrialObjective& objective) {
    spec.validate();
    SweepResult result;
    std::size_t cur_d = spec.base.d_model;
    std::size_t cur_heads = spec.base.heads;
    std::size_t cur_window = spec.base.window;
    std::size_t cur_batch = spec.train.batch;

    constexpr double kInf = std::numeric_limits<double>::infinity();
    auto run_trial = [&](std::size_t d, std::size_t heads, std::size_t window,
                         std::size_t batch) -> const SweepTrial& {
        SweepTrial trial;
        trial.index = result.trials.size();
        trial.d_model = d;
        trial.heads = heads;
        trial.window = window;
        trial.batch = batch;
        ModelConfig mc = spec.base;
        mc.d_model = d;
        mc.heads = heads;
        mc.window = window;
        mc.seed = spec.base.seed + trial.index;
        TrainConfig tc = spec.train;
        tc.batch = batch;
        tc.seed = spec.train.seed + trial.index;
        try {
            auto [rmse, mae] = objective(mc, tc);
            if (std::isfinite(rmse) && std::isfinite(mae)) {
                trial.val_rmse = rmse;
                trial.val_mae = mae;
                trial.status = "ok";
            } else {
                trial.val_rmse = kInf;
                trial.val_mae = kInf;
                trial.status = "diverged";
            }
        } catch (const TrainingError&) {
            trial.val_rmse = kInf;
            trial.val_mae = kInf;
            trial.status = "diverged";
        }
        result.trials.push_back(trial);
        return result.trials.back();
    };

    // Lowest RMSE wins; ties fall to MAE, then to the earlier grid position.
    auto better = [](const SweepTrial& a, const SweepTrial& b) {
        if (a.val_rmse != b.val_rmse) return a.val_rmse < b.val_rmse;
        return a.val_mae < b.val_mae;
    };

    auto pass = [&](const std::vector<std::size_t>& grid, auto apply) {
        std::size_t best_i = 0;
        SweepTrial best_trial;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const SweepTrial& t = apply(grid[i]);
            if (i == 0 || better(t, best_trial)) {
                best_i = i;
                best_trial = t;
            }
        }
        return std::pair<std::size_t, SweepTrial>(grid[best_i], best_trial);
    };

    SweepTrial last_best;
    auto b = pass(spec.batch_grid,
                  [&](std::size_t v) -> const SweepTrial& { return run_trial(cur_d, cur_heads, cur_window, v); });
    cur_batch = b.first;
    last_best = b.second;
    auto d = pass(spec.d_grid,
                  [&](std::size_t v) -> const SweepTrial& { return run_trial(v, cur_heads, cur_window, cur_batch); });
    cur_d = d.first;
    last_best = d.second;
    auto h = pass(spec.heads_grid,
                  [&](std::size_t v) -> const SweepTrial& { return run_trial(cur_d, v, cur_window, cur_batch); });
    cur_heads = h.first;
    last_best = h.second;
    auto w = pass(spec.window_grid,
                  [&](std::size_t v) -> const SweepTrial& { return run_trial(cur_d, cur_heads, v, cur_batch); });
    cur_window = w.first;
    last_best = w.second;

    result.best_config = spec.base;
    result.best_config.d_model = cur_d;
    result.best_config.heads = cur_heads;
    result.best_config.window = cur_window;
    result.best_batch = cur_batch;
    result.best_rmse = last_best.val_rmse;
    result.best_mae = last_best.val_mae;
    return result;
}

SweepResult sweep(const FlowSeries& series, const SweepSpec& spec) {
    std::map<std::size_t, DatasetSplit> splits; // re-window only when L changes
    auto objective = [&](const ModelConfig& mc, const TrainConfig& tc) {
        auto it = splits.find(mc.window);
        if (it == splits.end())
            it = splits.emplace(mc.window, make_dataset(series, mc.window, spec.ratios)).first;
        Model model(mc);
        train(model, it->second, tc);
        MetricsReport report = evaluate(model, it->second.validation, it->second.norm);
        const MetricsRow& all = report.row("ALL");
        return std::pair<double, double>(all.rmse, all.mae);
    };
    return sweep_with_objective(spec, objective);
}

} // namespace flowcast
