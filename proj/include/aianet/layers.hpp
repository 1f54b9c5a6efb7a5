#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "aianet/graph.hpp"
#include "aianet/rng.hpp"
#include "aianet/tensor.hpp"

namespace aianet {

// Samples ~ Normal(0, 2/(fan_in+fan_out)). Draw order is row-major over the
// tensor, so a fixed seed reproduces the tensor bit for bit.
template <typename T>
TensorT<T> xavier_init(std::vector<std::size_t> shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    if (fan_in == 0 || fan_out == 0) throw ConfigError("xavier_init: fans must be positive");
    TensorT<T> t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

// Ordered registry of named tensors. Insertion order is the canonical order
// used by optimizers, checkpoints, and gradient sinks.
template <typename T>
class ParamStoreT {
  public:
    struct Entry {
        std::string name;
        TensorT<T> tensor;
        std::string init;
        bool frozen = false;
    };

    TensorT<T>& create(const std::string& name, TensorT<T> tensor, std::string init_desc,
                       bool requires_grad = true) {
        if (index_.count(name)) throw ConfigError("ParamStore: duplicate name '" + name + "'");
        index_[name] = entries_.size();
        entries_.push_back(Entry{name, std::move(tensor), std::move(init_desc), !requires_grad});
        entries_.back().tensor.requires_grad = requires_grad;
        return entries_.back().tensor;
    }

    TensorT<T>& create_xavier(const std::string& name, std::vector<std::size_t> shape, std::size_t fan_in,
                              std::size_t fan_out, Rng& rng) {
        return create(name, xavier_init<T>(std::move(shape), fan_in, fan_out, rng),
                      "xavier(" + std::to_string(fan_in) + "," + std::to_string(fan_out) + ")");
    }

    TensorT<T>& create_const(const std::string& name, std::vector<std::size_t> shape, T value,
                             bool requires_grad = true) {
        return create(name, TensorT<T>(std::move(shape), value), "const(" + std::to_string(value) + ")",
                      requires_grad);
    }

    TensorT<T>& create_scalar(const std::string& name, T value) {
        return create_const(name, {1}, value);
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("ParamStore: unknown name '" + name + "'");
        return it->second;
    }

    TensorT<T>& at(const std::string& name) { return entries_[index_of(name)].tensor; }
    const TensorT<T>& at(const std::string& name) const { return entries_[index_of(name)].tensor; }
    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    std::size_t size() const { return entries_.size(); }

    std::size_t total_parameters() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
std::size_t count_parameters(const ParamStoreT<T>& store) {
    return store.total_parameters();
}

using ParamStore = ParamStoreT<real_t>;

// Binds store entries into a graph as leaves, memoizing the node id per entry.
// Gradient destination: an external per-worker sink set when provided, else the
// tensor's own grad buffer, else none (inference).
template <typename T>
class ParamBinderT {
  public:
    ParamBinderT(GraphT<T>& g, ParamStoreT<T>& store, std::vector<AVec<T>>* sinks = nullptr)
        : g_(g), store_(store), sinks_(sinks), ids_(store.size(), GraphT<T>::kNone) {}

    typename GraphT<T>::Id operator()(const std::string& name) {
        const std::size_t i = store_.index_of(name);
        if (ids_[i] != GraphT<T>::kNone) return ids_[i];
        auto& e = store_.entry(i);
        AVec<T>* sink = nullptr;
        if (!e.frozen && e.tensor.requires_grad && g_.recording) {
            if (sinks_) {
                if (sinks_->size() != store_.size()) sinks_->resize(store_.size());
                auto& s = (*sinks_)[i];
                if (s.size() != e.tensor.numel()) s.assign(e.tensor.numel(), T(0));
                sink = &s;
            } else {
                e.tensor.ensure_grad();
                sink = &e.tensor.grad;
            }
        }
        ids_[i] = g_.leaf(e.tensor, sink);
        return ids_[i];
    }

    GraphT<T>& graph() { return g_; }
    ParamStoreT<T>& store() { return store_; }

  private:
    GraphT<T>& g_;
    ParamStoreT<T>& store_;
    std::vector<AVec<T>>* sinks_;
    std::vector<typename GraphT<T>::Id> ids_;
};

// Per-sample batchnorm statistics recorded during a training forward, keyed by
// the running-buffer indices they should later update.
template <typename T>
struct BnBatchStats {
    std::size_t mean_index;  // buffer-store index of running_mean
    std::size_t var_index;   // buffer-store index of running_var
    std::vector<T> mean;
    std::vector<T> var;
};

template <typename T>
struct ForwardCtxT {
    ParamBinderT<T>& bind;
    ParamStoreT<T>* buffers = nullptr;          // running statistics live here
    bool training = false;                      // BN mode
    std::vector<BnBatchStats<T>>* bn_stats = nullptr;  // appended per BN layer when training
    T bn_eps = T(1e-5);

    GraphT<T>& g() const { return bind.graph(); }
};

enum class Act : std::uint8_t { kLinear, kPRelu, kSigmoid };

struct ConvBnActSpec {
    std::size_t cin = 0, cout = 0, k1 = 3, k2 = 3;
    Act act = Act::kPRelu;
    bool bn = true;   // bias is omitted whenever BN follows the conv
};

// Parameter creation for conv(+BN)(+PReLU) under `prefix`. Names:
//   prefix.w / prefix.b / prefix.bn_gamma / prefix.bn_beta / prefix.slope
// and running buffers prefix.bn_mean / prefix.bn_var in the buffer store.
template <typename T>
void conv_bn_act_init(ParamStoreT<T>& params, ParamStoreT<T>& buffers, const std::string& prefix,
                      const ConvBnActSpec& s, Rng& rng) {
    params.create_xavier(prefix + ".w", {s.cout, s.cin, s.k1, s.k2}, s.cin * s.k1 * s.k2,
                         s.cout * s.k1 * s.k2, rng);
    if (!s.bn) params.create_const(prefix + ".b", {s.cout}, T(0));
    if (s.bn) {
        params.create_const(prefix + ".bn_gamma", {s.cout}, T(1));
        params.create_const(prefix + ".bn_beta", {s.cout}, T(0));
        buffers.create_const(prefix + ".bn_mean", {s.cout}, T(0), false);
        buffers.create_const(prefix + ".bn_var", {s.cout}, T(1), false);
    }
    if (s.act == Act::kPRelu) params.create_const(prefix + ".slope", {s.cout}, T(0.25));
}

// conv -> batchnorm -> activation, same spatial size.
template <typename T>
typename GraphT<T>::Id conv_bn_act(ForwardCtxT<T>& ctx, const std::string& prefix, const ConvBnActSpec& s,
                                   typename GraphT<T>::Id x) {
    auto& g = ctx.g();
    if (g.value(x).shape[0] != s.cin)
        throw DimensionError("conv_bn_act '" + prefix + "': input has " +
                             std::to_string(g.value(x).shape[0]) + " channels, spec wants " +
                             std::to_string(s.cin));
    auto y = g.conv2d_same(x, ctx.bind(prefix + ".w"),
                           s.bn ? GraphT<T>::kNone : ctx.bind(prefix + ".b"));
    if (s.bn) {
        const std::size_t mi = ctx.buffers->index_of(prefix + ".bn_mean");
        const std::size_t vi = ctx.buffers->index_of(prefix + ".bn_var");
        if (ctx.training) {
            std::vector<T> mean, var;
            y = g.batchnorm_train(y, ctx.bind(prefix + ".bn_gamma"), ctx.bind(prefix + ".bn_beta"),
                                  ctx.bn_eps, &mean, &var);
            if (ctx.bn_stats) ctx.bn_stats->push_back({mi, vi, std::move(mean), std::move(var)});
        } else {
            y = g.batchnorm_eval(y, ctx.bind(prefix + ".bn_gamma"), ctx.bind(prefix + ".bn_beta"),
                                 ctx.buffers->entry(mi).tensor.data, ctx.buffers->entry(vi).tensor.data,
                                 ctx.bn_eps);
        }
    }
    switch (s.act) {
        case Act::kLinear: break;
        case Act::kPRelu: y = g.prelu(y, ctx.bind(prefix + ".slope")); break;
        case Act::kSigmoid: y = g.sigmoid(y); break;
    }
    return y;
}

template <typename T>
void fully_connected_init(ParamStoreT<T>& params, const std::string& prefix, std::size_t in,
                          std::size_t out, Rng& rng) {
    params.create_xavier(prefix + ".w", {out, in}, in, out, rng);
    params.create_const(prefix + ".b", {out}, T(0));
}

template <typename T>
typename GraphT<T>::Id fully_connected(ForwardCtxT<T>& ctx, const std::string& prefix,
                                       typename GraphT<T>::Id x) {
    return ctx.g().fully_connected(x, ctx.bind(prefix + ".w"), ctx.bind(prefix + ".b"));
}

}  // namespace aianet
