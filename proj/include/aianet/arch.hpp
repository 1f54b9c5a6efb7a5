#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "aianet/graph.hpp"
#include "aianet/model_config.hpp"

namespace aianet {

// Analytic complexity accounting, a pure function of the configuration.
// Convention (documented in every report): multiplies and adds count
// separately (factor 2) for convolutions, matrix products and FC layers;
// batchnorm costs 2 per element (scale + shift); every other elementwise op
// costs 1 per element; reshapes, transposes and concatenations are free.
std::size_t count_parameters(const ModelConfig& cfg);
std::size_t count_flops(const ModelConfig& cfg);

struct ComplexityReport {
    std::size_t params = 0;
    std::size_t flops = 0;
};

ComplexityReport complexity_report(const ModelConfig& cfg);

inline const char* flop_convention_note() {
    return "FLOP convention: multiply and add counted separately (factor 2) for conv/matmul/FC; "
           "batchnorm 2 per element; other elementwise ops 1 per element; data movement free";
}

// Independent audit: walk an actual recorded forward graph and apply the same
// per-op convention. Built from node metadata only, so it cross-checks the
// analytic walker against what the model really executes.
template <typename T>
std::size_t audit_flops(GraphT<T>& g) {
    std::size_t total = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        auto& n = g.node(static_cast<typename GraphT<T>::Id>(i));
        const std::string_view op = n.op;
        const auto& out = g.value(static_cast<typename GraphT<T>::Id>(i));
        auto parent_value = [&](std::size_t j) -> const TensorT<T>& {
            return g.value(n.parents[j]);
        };
        if (op == "conv2d") {
            const auto& w = parent_value(1);
            total += 2 * w.shape[0] * w.shape[1] * w.shape[2] * w.shape[3] * out.shape[1] * out.shape[2];
        } else if (op == "depthwise_conv2d") {
            const auto& w = parent_value(1);
            total += 2 * w.shape[0] * w.shape[1] * w.shape[2] * out.shape[1] * out.shape[2];
        } else if (op == "fully_connected") {
            const auto& w = parent_value(1);
            total += 2 * w.shape[0] * w.shape[1];
        } else if (op == "matmul") {
            const auto& a = parent_value(0);
            total += 2 * a.shape[0] * a.shape[1] * out.shape[1];
        } else if (op == "batchnorm_train" || op == "batchnorm_eval") {
            total += 2 * out.numel();
        } else if (op == "global_avg_pool" || op == "sum") {
            total += parent_value(0).numel();
        } else if (op == "sum_sq_diff") {
            total += 3 * parent_value(0).numel();
        } else if (op == "leaf" || op == "input" || op == "reshape" || op == "transpose2d" ||
                   op == "concat_channels") {
            // free
        } else {
            total += out.numel();  // elementwise
        }
    }
    return total;
}

}  // namespace aianet
