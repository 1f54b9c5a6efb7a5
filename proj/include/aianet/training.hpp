#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "aianet/arch.hpp"
#include "aianet/csi.hpp"
#include "aianet/metrics.hpp"
#include "aianet/model.hpp"
#include "aianet/threadpool.hpp"

namespace aianet {

struct TrainConfig {
    std::size_t epochs = 1000;
    std::size_t batch_size = 200;
    double lr0 = 1e-4;
    double lr_min = 1e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t seed = 1;
    Protocol protocol = Protocol::kMixed;
    std::size_t checkpoint_every = 0;  // 0: only best + final
    unsigned threads = 0;              // 0: hardware concurrency (AIANET_THREADS caps)

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(lr_min > 0.0) || !(lr_min <= lr0))
            throw ConfigError("learning rates must satisfy 0 < lr_min <= lr0");
    }
};

// eta_t = eta_min + 1/2 (eta_0 - eta_min) (1 + cos(pi t / T_max)), stepped per epoch.
inline double cosine_lr(std::size_t t, const TrainConfig& cfg) {
    if (t >= cfg.epochs)
        throw UsageError("cosine_lr: epoch " + std::to_string(t) + " outside [0, " +
                         std::to_string(cfg.epochs) + ")");
    constexpr double kPi = 3.14159265358979323846;
    const double phase = std::cos(kPi * static_cast<double>(t) / static_cast<double>(cfg.epochs));
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + phase);
}

// Mean over the batch of per-sample squared Frobenius reconstruction error.
template <typename T>
double mse_loss(const std::vector<TensorT<T>>& h, const std::vector<TensorT<T>>& h_hat) {
    if (h.size() != h_hat.size() || h.empty()) throw DimensionError("mse_loss: batch size mismatch");
    double total = 0.0;
    for (std::size_t s = 0; s < h.size(); ++s) {
        if (!h[s].same_shape(h_hat[s])) throw DimensionError("mse_loss: sample shape mismatch");
        for (std::size_t i = 0; i < h[s].numel(); ++i) {
            const double d = static_cast<double>(h[s].data[i]) - static_cast<double>(h_hat[s].data[i]);
            total += d * d;
        }
    }
    return total / static_cast<double>(h.size());
}

template <typename T>
struct AdamWStateT {
    std::uint64_t step = 0;
    std::vector<AVec<T>> m, v;
};
using AdamWState = AdamWStateT<real_t>;

// Decoupled weight decay (p -= lr*lambda*p) followed by the bias-corrected
// Adam update. Frozen entries are skipped.
template <typename T>
void adamw_step(ParamStoreT<T>& params, const std::vector<AVec<T>>& grads, AdamWStateT<T>& state,
                double lr, const TrainConfig& cfg) {
    if (grads.size() != params.size()) throw DimensionError("adamw_step: gradient count mismatch");
    if (state.m.size() != params.size()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params.entry(i).tensor.numel(), T(0));
            state.v[i].assign(params.entry(i).tensor.numel(), T(0));
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& e = params.entry(i);
        if (e.frozen || !e.tensor.requires_grad) continue;
        const auto& g = grads[i];
        if (g.size() != e.tensor.numel())
            throw DimensionError("adamw_step: gradient shape mismatch for '" + e.name + "'");
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < g.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            if (!std::isfinite(gj))
                throw NumericError("adamw_step: non-finite gradient in '" + e.name + "'[" +
                                   std::to_string(j) + "]");
            double p = static_cast<double>(e.tensor.data[j]);
            if (cfg.weight_decay != 0.0) p -= lr * cfg.weight_decay * p;
            const double mj = cfg.adam_beta1 * static_cast<double>(m[j]) + (1.0 - cfg.adam_beta1) * gj;
            const double vj =
                cfg.adam_beta2 * static_cast<double>(v[j]) + (1.0 - cfg.adam_beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double mhat = mj / c1;
            const double vhat = vj / c2;
            p -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
            e.tensor.data[j] = static_cast<T>(p);
        }
    }
}

// HAGF's beta gates stay in [0, 2] after every optimizer step.
template <typename T>
void clamp_hagf_betas(ParamStoreT<T>& params) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& e = params.entry(i);
        if (e.name.find(".hagf.") == std::string::npos && e.name.find("dec.hagf") != 0) continue;
        if (e.name.size() < 6) continue;
        const auto tail = e.name.substr(e.name.size() - 6);
        if (tail != ".beta1" && tail != ".beta2") continue;
        for (auto& val : e.tensor.data) val = std::clamp(val, T(0), T(2));
    }
}

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_mse = 0.0;
    double val_nmse_db = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    double best_val_nmse_db = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
};

// src/checkpoint.cpp
void save_checkpoint(const std::string& path, const AiaNet& model, const AdamWState* opt,
                     std::uint64_t next_epoch, double best_val_nmse_db);
void load_checkpoint(const std::string& path, AiaNet& model, AdamWState* opt,
                     std::uint64_t* next_epoch = nullptr, double* best_val_nmse_db = nullptr);

namespace detail {

struct BnAccum {
    std::size_t mean_index = 0, var_index = 0;
    std::vector<double> mean_sum, var_sum;
    std::size_t samples = 0;
};

inline void fold_bn_stats(std::vector<BnAccum>& acc, const std::vector<BnBatchStats<real_t>>& stats) {
    if (acc.empty()) {
        acc.resize(stats.size());
        for (std::size_t i = 0; i < stats.size(); ++i) {
            acc[i].mean_index = stats[i].mean_index;
            acc[i].var_index = stats[i].var_index;
            acc[i].mean_sum.assign(stats[i].mean.size(), 0.0);
            acc[i].var_sum.assign(stats[i].var.size(), 0.0);
        }
    }
    for (std::size_t i = 0; i < stats.size(); ++i) {
        for (std::size_t j = 0; j < stats[i].mean.size(); ++j) {
            acc[i].mean_sum[j] += static_cast<double>(stats[i].mean[j]);
            acc[i].var_sum[j] += static_cast<double>(stats[i].var[j]);
        }
        ++acc[i].samples;
    }
}

}  // namespace detail

// Mean per-sample NMSE/rho of an eval-mode forward over a sample set.
inline MetricsReport evaluate(AiaNet& model, const std::vector<CsiSample>& samples,
                              const std::string& protocol_tag, const std::string& scenario_tag,
                              unsigned threads = 0) {
    if (samples.empty()) throw ConfigError("evaluate: empty sample set");
    const unsigned workers = worker_count(threads);
    struct Part {
        double ratio = 0.0, rho = 0.0;
        std::size_t n = 0;
    };
    std::vector<Part> parts(workers);
    parallel_chunks(samples.size(), workers, [&](unsigned w, std::size_t lo, std::size_t hi) {
        SampleMetrics metrics;
        for (std::size_t s = lo; s < hi; ++s) {
            Graph g;
            g.recording = false;
            ParamBinderT<real_t> bind(g, model.params());
            ForwardCtxT<real_t> ctx{bind, &model.buffers(), false};
            auto [recon, code] = model.forward(ctx, g.leaf(samples[s].planes, nullptr));
            (void)code;
            metrics.add(samples[s].planes, g.value(recon));
        }
        parts[w].n = metrics.counted();
        parts[w].ratio = metrics.ratio_sum();
        parts[w].rho = metrics.rho_partial_sum();
    });
    double ratio = 0.0, rho = 0.0;
    std::size_t n = 0;
    for (const auto& p : parts) {
        ratio += p.ratio;
        rho += p.rho;
        n += p.n;
    }
    MetricsReport rep;
    const double mean_ratio = ratio / static_cast<double>(n);
    rep.nmse_db = mean_ratio < 1e-30 ? -300.0 : 10.0 * std::log10(mean_ratio);
    rep.rho = rho / static_cast<double>(n);
    rep.params = count_parameters(model.params());
    rep.flops = count_flops(model.config());
    rep.protocol = protocol_tag;
    rep.test_scenario = scenario_tag;
    rep.eta = model.config().eta.str();
    return rep;
}

// Epoch loop: shuffle, batch, per-sample forward/backward fanned out across
// workers with a fixed reduction order, AdamW with the per-epoch cosine rate,
// per-epoch validation NMSE, checkpoints at the best validation score (and
// every checkpoint_every epochs when set). A non-finite batch loss aborts
// with a diagnostic checkpoint.
inline TrainResult train(AiaNet& model, const Splits& data, const TrainConfig& cfg,
                         const std::string& run_dir = "", std::size_t start_epoch = 0,
                         AdamWState* opt_state = nullptr) {
    cfg.validate();
    if (data.train.empty() || data.val.empty()) throw ConfigError("train: empty train or val split");
    const unsigned workers = worker_count(cfg.threads);
    AdamWState local_state;
    AdamWState& opt = opt_state ? *opt_state : local_state;

    std::ofstream csv;
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir);
        csv.open(run_dir + "/metrics.csv", start_epoch == 0 ? std::ios::trunc : std::ios::app);
        if (start_epoch == 0) csv << "epoch,lr,train_mse,val_nmse_db\n";
    }

    TrainResult result;
    std::vector<std::vector<AVec<real_t>>> sinks(workers);
    std::vector<std::vector<detail::BnAccum>> bn_parts(workers);
    std::vector<double> loss_parts(workers);

    for (std::size_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg);
        std::vector<std::size_t> order(data.train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(cfg.seed ^ (0x9e3779b97f4a7c15ull * (epoch + 1)));
        shuffle_rng.shuffle(order.begin(), order.end());

        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            const std::size_t batch_n = b1 - b0;
            for (auto& p : bn_parts) p.clear();
            std::fill(loss_parts.begin(), loss_parts.end(), 0.0);
            for (auto& ws : sinks)
                for (auto& s : ws) std::fill(s.begin(), s.end(), real_t(0));

            parallel_chunks(batch_n, workers, [&](unsigned w, std::size_t lo, std::size_t hi) {
                for (std::size_t i = lo; i < hi; ++i) {
                    const CsiSample& sample = data.train[order[b0 + i]];
                    Graph g;
                    ParamBinderT<real_t> bind(g, model.params(), &sinks[w]);
                    std::vector<BnBatchStats<real_t>> stats;
                    ForwardCtxT<real_t> ctx{bind, &model.buffers(), true, &stats};
                    auto x = g.leaf(sample.planes, nullptr);
                    auto [recon, code] = model.forward(ctx, x);
                    (void)code;
                    auto loss = g.sum_sq_diff(recon, x);
                    loss_parts[w] += static_cast<double>(g.value(loss).data[0]);
                    g.backward(loss, static_cast<real_t>(1.0 / static_cast<double>(batch_n)));
                    detail::fold_bn_stats(bn_parts[w], stats);
                }
            });

            // reduce gradients and statistics in worker order
            std::vector<AVec<real_t>> grads(model.params().size());
            for (std::size_t i = 0; i < grads.size(); ++i)
                grads[i].assign(model.params().entry(i).tensor.numel(), real_t(0));
            for (unsigned w = 0; w < workers; ++w) {
                if (sinks[w].empty()) continue;
                for (std::size_t i = 0; i < grads.size(); ++i) {
                    const auto& src = sinks[w][i];
                    for (std::size_t j = 0; j < src.size(); ++j) grads[i][j] += src[j];
                }
            }
            double batch_loss = 0.0;
            for (double lp : loss_parts) batch_loss += lp;
            batch_loss /= static_cast<double>(batch_n);
            if (!std::isfinite(batch_loss)) {
                if (!run_dir.empty())
                    save_checkpoint(run_dir + "/diagnostic.aia1", model, &opt, epoch, result.best_val_nmse_db);
                throw NumericError("train: loss diverged (non-finite) at epoch " +
                                   std::to_string(epoch));
            }
            epoch_loss += batch_loss * static_cast<double>(batch_n);
            seen += batch_n;

            // fold per-sample BN statistics into the running buffers
            constexpr double kMomentum = 0.1;
            std::vector<detail::BnAccum> merged;
            for (unsigned w = 0; w < workers; ++w) {
                if (bn_parts[w].empty()) continue;
                if (merged.empty()) {
                    merged = bn_parts[w];
                } else {
                    for (std::size_t i = 0; i < merged.size(); ++i) {
                        for (std::size_t j = 0; j < merged[i].mean_sum.size(); ++j) {
                            merged[i].mean_sum[j] += bn_parts[w][i].mean_sum[j];
                            merged[i].var_sum[j] += bn_parts[w][i].var_sum[j];
                        }
                        merged[i].samples += bn_parts[w][i].samples;
                    }
                }
            }
            for (const auto& acc : merged) {
                auto& rm = model.buffers().entry(acc.mean_index).tensor.data;
                auto& rv = model.buffers().entry(acc.var_index).tensor.data;
                for (std::size_t j = 0; j < rm.size(); ++j) {
                    const double bm = acc.mean_sum[j] / static_cast<double>(acc.samples);
                    const double bv = acc.var_sum[j] / static_cast<double>(acc.samples);
                    rm[j] = static_cast<real_t>((1.0 - kMomentum) * rm[j] + kMomentum * bm);
                    rv[j] = static_cast<real_t>((1.0 - kMomentum) * rv[j] + kMomentum * bv);
                }
            }

            adamw_step(model.params(), grads, opt, lr, cfg);
            clamp_hagf_betas(model.params());
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_mse = epoch_loss / static_cast<double>(seen);
        rec.val_nmse_db = evaluate(model, data.val, to_string(cfg.protocol), "val", cfg.threads).nmse_db;
        if (!std::isfinite(rec.val_nmse_db) && rec.val_nmse_db > 0)
            throw NumericError("train: validation NMSE diverged at epoch " + std::to_string(epoch));
        result.history.push_back(rec);
        if (csv.is_open()) {
            csv.precision(10);
            csv << rec.epoch << ',' << rec.lr << ',' << rec.train_mse << ',' << rec.val_nmse_db << '\n';
            csv.flush();
        }
        if (rec.val_nmse_db < result.best_val_nmse_db) {
            result.best_val_nmse_db = rec.val_nmse_db;
            result.best_epoch = epoch;
            if (!run_dir.empty())
                save_checkpoint(run_dir + "/best.aia1", model, &opt, epoch + 1, result.best_val_nmse_db);
        }
        if (!run_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(run_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".aia1", model, &opt,
                            epoch + 1, result.best_val_nmse_db);
    }
    if (!run_dir.empty())
        save_checkpoint(run_dir + "/final.aia1", model, &opt, cfg.epochs, result.best_val_nmse_db);
    return result;
}

struct ProtocolOutcome {
    TrainResult result;
    std::vector<MetricsReport> reports;  // one per test scenario
};

// Separate protocols train on one scenario and evaluate on both test sets
// (intra + cross). Mixed trains on the 1:1 interleaved blend and evaluates
// per scenario.
inline ProtocolOutcome run_protocol(AiaNet& model, const Dataset& indoor, const Dataset& outdoor,
                                    const TrainConfig& cfg, const std::string& run_dir = "",
                                    SplitRatios ratios = {}) {
    if (indoor.samples.empty() || outdoor.samples.empty())
        throw ConfigError("run_protocol: both scenario datasets are required");
    const Splits train_splits = split_mix({indoor, outdoor}, cfg.protocol, ratios);
    ProtocolOutcome out;
    out.result = train(model, train_splits, cfg, run_dir);

    const std::string tag = to_string(cfg.protocol);
    auto scenario_test = [&](Scenario s) {
        const Protocol p =
            s == Scenario::kIndoor ? Protocol::kSeparateIndoor : Protocol::kSeparateOutdoor;
        return split_mix({indoor, outdoor}, p, ratios).test;
    };
    out.reports.push_back(
        evaluate(model, scenario_test(Scenario::kIndoor), tag, "indoor", cfg.threads));
    out.reports.push_back(
        evaluate(model, scenario_test(Scenario::kOutdoor), tag, "outdoor", cfg.threads));
    return out;
}

}  // namespace aianet
