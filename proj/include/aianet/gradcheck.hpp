#pragma once

#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "aianet/graph.hpp"
#include "aianet/layers.hpp"
#include "aianet/threadpool.hpp"

namespace aianet {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    double tol = 0.0;
    bool pass = false;
};

// Builder contract: construct a forward pass bound to the *given* store and
// return the scalar loss node. The builder must be deterministic.
using GradCheckBuilder =
    std::function<GraphT<double>::Id(GraphT<double>&, ParamStoreT<double>&)>;

// Central-difference verification of every unfrozen parameter element.
// Relative error uses |a - n| / max(|a|, |n|, 1e-5); the absolute floor keeps
// near-zero gradients from failing on central-difference rounding noise
// (|loss| * eps_machine / eps), same atol/rtol split torch.autograd.gradcheck uses.
// Probes run in parallel over per-thread copies of the store, so the result
// is independent of the worker count.
inline GradCheckReport grad_check(const GradCheckBuilder& build, ParamStoreT<double>& params,
                                  double eps, double tol, unsigned workers = 0) {
    GradCheckReport report;
    report.tol = tol;

    // Analytic pass (finiteness checks forced on: diagnostics name the node).
    params.zero_grads();
    std::vector<AVec<double>> analytic(params.size());
    {
        GraphT<double> g;
        g.check_finite = true;
        auto loss_id = build(g, params);
        if (g.value(loss_id).numel() != 1) throw UsageError("grad_check: builder must return a scalar loss");
        g.backward(loss_id);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& e = params.entry(i);
            if (e.frozen || !e.tensor.requires_grad) continue;
            e.tensor.ensure_grad();
            analytic[i] = e.tensor.grad;
        }
    }

    struct Probe {
        std::size_t entry;
        std::size_t index;
    };
    std::vector<Probe> probes;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (analytic[i].empty()) continue;
        for (std::size_t j = 0; j < analytic[i].size(); ++j) probes.push_back({i, j});
    }
    report.checked = probes.size();

    const unsigned n_workers = worker_count(workers);
    std::vector<GradCheckReport> partial(n_workers);
    for (auto& p : partial) p.tol = tol;

    parallel_chunks(probes.size(), n_workers, [&](unsigned w, std::size_t lo, std::size_t hi) {
        ParamStoreT<double> local = params;  // deep copy; probes perturb it
        GradCheckReport& rep = partial[w];
        auto eval = [&]() {
            GraphT<double> g;
            g.recording = false;
            g.check_finite = true;
            auto id = build(g, local);
            return g.value(id).data[0];
        };
        for (std::size_t pi = lo; pi < hi; ++pi) {
            const auto [ei, j] = probes[pi];
            double& slot = local.entry(ei).tensor.data[j];
            const double keep = slot;
            slot = keep + eps;
            const double up = eval();
            slot = keep - eps;
            const double down = eval();
            slot = keep;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[ei][j];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-5});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_param = params.entry(ei).name;
                rep.worst_index = j;
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
    });

    for (const auto& p : partial) {
        if (p.max_rel_error >= report.max_rel_error) {
            report.max_rel_error = p.max_rel_error;
            report.worst_param = p.worst_param;
            report.worst_index = p.worst_index;
            report.worst_analytic = p.worst_analytic;
            report.worst_numeric = p.worst_numeric;
        }
    }
    report.pass = report.max_rel_error < tol;
    return report;
}

}  // namespace aianet
