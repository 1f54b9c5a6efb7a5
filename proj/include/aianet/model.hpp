#pragma once

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "aianet/layers.hpp"
#include "aianet/model_config.hpp"

namespace aianet {

// --- HAGF: hybrid attention-gated fusion -------------------------------------

template <typename T>
void hagf_init(ParamStoreT<T>& params, const std::string& p, std::size_t c, Rng& rng) {
    const std::size_t ch = hagf_channel_hidden(c);
    const std::size_t cs = hagf_spatial_hidden(c);
    params.create_xavier(p + ".compress.w", {c, 2 * c, 1, 1}, 2 * c, c, rng);
    params.create_const(p + ".compress.b", {c}, T(0));
    params.create_const(p + ".compress.slope", {c}, T(0.25));
    params.create_xavier(p + ".ch1.w", {ch, c, 1, 1}, c, ch, rng);
    params.create_const(p + ".ch1.b", {ch}, T(0));
    params.create_const(p + ".ch1.slope", {ch}, T(0.25));
    params.create_xavier(p + ".ch2.w", {c, ch, 1, 1}, ch, c, rng);
    params.create_const(p + ".ch2.b", {c}, T(0));
    params.create_xavier(p + ".sp1.w", {cs, c, 3, 3}, c * 9, cs * 9, rng);
    params.create_const(p + ".sp1.b", {cs}, T(0));
    params.create_const(p + ".sp1.slope", {cs}, T(0.25));
    params.create_xavier(p + ".sp2.w", {1, cs, 3, 3}, cs * 9, 9, rng);
    params.create_const(p + ".sp2.b", {1}, T(0));
    params.create_scalar(p + ".beta1", T(1));
    params.create_scalar(p + ".beta2", T(0.1));
}

// Internal node handles surfaced for tests and diagnostics.
template <typename T>
struct HagfTrace {
    typename GraphT<T>::Id m_c = GraphT<T>::kNone;      // channel mask, Cx1x1
    typename GraphT<T>::Id m_s = GraphT<T>::kNone;      // spatial mask, 1xHxW
    typename GraphT<T>::Id f_comp = GraphT<T>::kNone;   // compressed fusion features
    typename GraphT<T>::Id fm_sel = GraphT<T>::kNone;   // F_m .* M_c .* M_s
    typename GraphT<T>::Id fr_sel = GraphT<T>::kNone;   // F_r .* (1-M_c) .* (1-M_s)
};

// Fused output = beta1 * (F_m .* M_c .* M_s + F_r .* (1-M_c) .* (1-M_s)) + beta2 * F_comp.
template <typename T>
typename GraphT<T>::Id hagf_forward(ForwardCtxT<T>& ctx, const std::string& p,
                                    typename GraphT<T>::Id f_r, typename GraphT<T>::Id f_m,
                                    HagfTrace<T>* trace = nullptr) {
    auto& g = ctx.g();
    if (!g.value(f_r).same_shape(g.value(f_m)))
        throw DimensionError("hagf_forward: residual and main features must match: " +
                             g.value(f_r).shape_str() + " vs " + g.value(f_m).shape_str());
    auto z = g.concat_channels(f_r, f_m);
    auto comp = g.prelu(g.conv2d_same(z, ctx.bind(p + ".compress.w"), ctx.bind(p + ".compress.b")),
                        ctx.bind(p + ".compress.slope"));
    // channel mask: GAP -> 1x1 down -> PReLU -> 1x1 up -> sigmoid
    auto mc = g.global_avg_pool(comp);
    mc = g.prelu(g.conv2d_same(mc, ctx.bind(p + ".ch1.w"), ctx.bind(p + ".ch1.b")),
                 ctx.bind(p + ".ch1.slope"));
    mc = g.sigmoid(g.conv2d_same(mc, ctx.bind(p + ".ch2.w"), ctx.bind(p + ".ch2.b")));
    // spatial mask: 3x3 -> PReLU -> 3x3 -> sigmoid, down to one channel
    auto ms = g.prelu(g.conv2d_same(comp, ctx.bind(p + ".sp1.w"), ctx.bind(p + ".sp1.b")),
                      ctx.bind(p + ".sp1.slope"));
    ms = g.sigmoid(g.conv2d_same(ms, ctx.bind(p + ".sp2.w"), ctx.bind(p + ".sp2.b")));

    auto fm_sel = g.scale_spatial(g.scale_channels(f_m, mc), ms);
    auto fr_sel = g.scale_spatial(g.scale_channels(f_r, g.one_minus(mc)), g.one_minus(ms));
    if (trace) *trace = HagfTrace<T>{mc, ms, comp, fm_sel, fr_sel};
    auto gated = g.scalar_scale(g.add(fm_sel, fr_sel), ctx.bind(p + ".beta1"));
    return g.add(gated, g.scalar_scale(comp, ctx.bind(p + ".beta2")));
}

// --- LASA: locally-aware self-attention ---------------------------------------

template <typename T>
void lasa_init(ParamStoreT<T>& params, const std::string& p, std::size_t c, LasaMode mode, Rng& rng) {
    const std::size_t cr = lasa_reduced_channels(c);
    params.create_xavier(p + ".q.w", {cr, c, 1, 1}, c, cr, rng);
    params.create_const(p + ".q.b", {cr}, T(0));
    params.create_xavier(p + ".k.w", {cr, c, 1, 1}, c, cr, rng);
    params.create_const(p + ".k.b", {cr}, T(0));
    params.create_xavier(p + ".v.w", {c, c, 1, 1}, c, c, rng);
    params.create_const(p + ".v.b", {c}, T(0));
    if (mode == LasaMode::kLasa) {
        params.create_xavier(p + ".dw.w", {c, 3, 3}, 9, 9, rng);
        params.create_const(p + ".dw.b", {c}, T(0));
        params.create_xavier(p + ".pw.w", {c, c, 1, 1}, c, c, rng);
        params.create_const(p + ".pw.b", {c}, T(0));
        params.create_const(p + ".omega", {c}, T(0));
    }
    params.create_scalar(p + ".gamma", T(0.1));
}

template <typename T>
struct LasaTrace {
    typename GraphT<T>::Id attn = GraphT<T>::kNone;     // SxS row-stochastic matrix
    typename GraphT<T>::Id f_att = GraphT<T>::kNone;    // global branch, CxHxW
    typename GraphT<T>::Id f_local = GraphT<T>::kNone;  // local branch, CxHxW
    typename GraphT<T>::Id gate = GraphT<T>::kNone;     // sigmoid(omega), C
};

// Global branch: F_att = reshape(softmax(Q^T K / sqrt(C_r)) V^T); softmax is
// over the key axis, so attention rows are stochastic in the query index.
// Local branch: conv1x1(GELU(depthwise3x3(x))). Fused by a per-channel
// sigmoid gate, plus the gamma-scaled input residual.
template <typename T>
typename GraphT<T>::Id lasa_forward(ForwardCtxT<T>& ctx, const std::string& p,
                                    typename GraphT<T>::Id x, LasaMode mode,
                                    LasaTrace<T>* trace = nullptr) {
    if (mode == LasaMode::kOff) return x;
    auto& g = ctx.g();
    const auto& xv = g.value(x);
    if (xv.rank() != 3) throw DimensionError("lasa_forward: expected CxHxW input");
    const std::size_t c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    const std::size_t cr = lasa_reduced_channels(c);
    const std::size_t s = h * w;

    auto q = g.conv2d_same(x, ctx.bind(p + ".q.w"), ctx.bind(p + ".q.b"));
    auto k = g.conv2d_same(x, ctx.bind(p + ".k.w"), ctx.bind(p + ".k.b"));
    auto v = g.conv2d_same(x, ctx.bind(p + ".v.w"), ctx.bind(p + ".v.b"));
    auto qm = g.reshape(q, {cr, s});
    auto km = g.reshape(k, {cr, s});
    auto vm = g.reshape(v, {c, s});
    auto scores = g.scale(g.matmul(g.transpose2d(qm), km),
                          static_cast<T>(1.0 / std::sqrt(static_cast<double>(cr))));
    auto attn = g.softmax_rows(scores);                 // S x S
    auto att = g.matmul(attn, g.transpose2d(vm));       // S x C
    auto f_att = g.reshape(g.transpose2d(att), {c, h, w});

    auto gamma = ctx.bind(p + ".gamma");
    if (mode == LasaMode::kPlainSA) {
        if (trace) *trace = LasaTrace<T>{attn, f_att, GraphT<T>::kNone, GraphT<T>::kNone};
        return g.add(f_att, g.scalar_scale(x, gamma));
    }

    auto dw = g.depthwise_conv2d_same(x, ctx.bind(p + ".dw.w"), ctx.bind(p + ".dw.b"));
    auto f_local = g.conv2d_same(g.gelu(dw), ctx.bind(p + ".pw.w"), ctx.bind(p + ".pw.b"));
    auto gate = g.sigmoid(ctx.bind(p + ".omega"));      // per-channel in (0,1)
    if (trace) *trace = LasaTrace<T>{attn, f_att, f_local, gate};
    auto fused = g.add(g.scale_channels(f_att, gate), g.scale_channels(f_local, g.one_minus(gate)));
    return g.add(fused, g.scalar_scale(x, gamma));
}

// --- the full network -----------------------------------------------------------

template <typename T>
class AiaNetT {
  public:
    using Id = typename GraphT<T>::Id;

    explicit AiaNetT(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        build_encoder(rng);
        build_decoder(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStoreT<T>& params() { return params_; }
    const ParamStoreT<T>& params() const { return params_; }
    ParamStoreT<T>& buffers() { return buffers_; }
    const ParamStoreT<T>& buffers() const { return buffers_; }

    // Gated dense aggregation feeding block k (1-based): all prior outputs and
    // the network input, each 1x1-projected to the block's input width and
    // scaled by sigmoid(alpha). dense=off degrades to the plain chain,
    // dense=static pins every gate at 1.
    Id gdc_aggregate(ForwardCtxT<T>& ctx, std::size_t k, const std::vector<Id>& prior_outputs,
                     Id x_input) const {
        auto& g = ctx.g();
        if (prior_outputs.size() + 1 != k)
            throw UsageError("gdc_aggregate: block " + std::to_string(k) + " expects " +
                             std::to_string(k - 1) + " prior outputs");
        const Id predecessor = prior_outputs.empty() ? x_input : prior_outputs.back();
        if (cfg_.dense == DenseMode::kOff) return predecessor;

        const std::string base = "enc.gdc.b" + std::to_string(k);
        Id acc = GraphT<T>::kNone;
        auto add_term = [&](Id term) { acc = acc == GraphT<T>::kNone ? term : g.add(acc, term); };

        auto project = [&](Id src, const std::string& tag) {
            return g.conv2d_same(src, ctx.bind(base + ".t_" + tag + ".w"),
                                 ctx.bind(base + ".t_" + tag + ".b"));
        };
        auto gated = [&](Id src, const std::string& tag) -> Id {
            Id t = project(src, tag);
            if (cfg_.dense == DenseMode::kStatic) return t;  // gates pinned at 1
            return g.scalar_scale(t, g.sigmoid(ctx.bind(base + ".a_" + tag)));
        };

        add_term(gated(x_input, "x"));
        for (std::size_t i = 1; i < k; ++i) {
            const Id src = prior_outputs[i - 1];
            if (i + 1 == k && cfg_.gdc_ungated_backbone) {
                add_term(src);  // direct hierarchical transmission
            } else {
                add_term(gated(src, "o" + std::to_string(i)));
            }
        }
        const std::size_t want = cfg_.channel_plan[k - 1];
        if (g.value(acc).shape[0] != want)
            throw NumericError("gdc_aggregate: projected width " +
                               std::to_string(g.value(acc).shape[0]) + " != block input width " +
                               std::to_string(want));
        return acc;
    }

    // EncoderBlock k: residual 1x1 projection vs. main conv pair + LASA,
    // fused by HAGF, with the block's learnable alpha on the residual path.
    Id encoder_block_forward(ForwardCtxT<T>& ctx, std::size_t k, Id x) const {
        auto& g = ctx.g();
        const std::string p = "enc.b" + std::to_string(k);
        const std::size_t cin = cfg_.channel_plan[k - 1], cout = cfg_.channel_plan[k];
        const KernelPair kp = cfg_.kernel_plan[k - 1];
        if (g.value(x).shape[0] != cin)
            throw DimensionError("encoder block " + std::to_string(k) + ": input has " +
                                 std::to_string(g.value(x).shape[0]) + " channels, expected " +
                                 std::to_string(cin));
        auto f_r = g.conv2d_same(x, ctx.bind(p + ".res.w"), ctx.bind(p + ".res.b"));
        auto m = conv_bn_act(ctx, p + ".main_a",
                             ConvBnActSpec{cin, cin, kp.k1, kp.k2, Act::kPRelu, cfg_.encoder_bn}, x);
        m = conv_bn_act(ctx, p + ".main_b",
                        ConvBnActSpec{cin, cout, kp.k2, kp.k1, Act::kPRelu, cfg_.encoder_bn}, m);
        m = lasa_forward(ctx, p + ".lasa", m, cfg_.lasa);
        auto scaled_res = g.scalar_scale(f_r, ctx.bind(p + ".alpha"));
        if (!cfg_.hagf) return g.add(scaled_res, m);
        return g.add(scaled_res, hagf_forward(ctx, p + ".hagf", f_r, m));
    }

    Id encode(ForwardCtxT<T>& ctx, Id x) const {
        auto& g = ctx.g();
        const auto& xv = g.value(x);
        if (xv.rank() != 3 || xv.shape[0] != 2 || xv.shape[1] != cfg_.n_c || xv.shape[2] != cfg_.n_t)
            throw DimensionError("encode: expected 2x" + std::to_string(cfg_.n_c) + "x" +
                                 std::to_string(cfg_.n_t) + " input, got " + xv.shape_str());
        std::vector<Id> outputs;
        for (std::size_t k = 1; k <= cfg_.blocks(); ++k) {
            auto agg = gdc_aggregate(ctx, k, outputs, x);
            outputs.push_back(encoder_block_forward(ctx, k, agg));
        }
        auto y = g.conv2d_same(outputs.back(), ctx.bind("enc.final.w"), ctx.bind("enc.final.b"));
        auto flat = g.reshape(y, {cfg_.input_values()});
        return fully_connected(ctx, "enc.fc", flat);
    }

    Id decode(ForwardCtxT<T>& ctx, Id s) const {
        auto& g = ctx.g();
        if (g.value(s).numel() != cfg_.codeword_length())
            throw DimensionError("decode: codeword length " + std::to_string(g.value(s).numel()) +
                                 " != " + std::to_string(cfg_.codeword_length()));
        auto flat = fully_connected(ctx, "dec.fc", s);
        auto base = g.reshape(flat, {2, cfg_.n_c, cfg_.n_t});
        auto x = base;
        const auto& plan = ModelConfig::decoder_channel_plan();
        const auto& ks = ModelConfig::decoder_kernels();
        for (std::size_t blk = 1; blk <= 2; ++blk) {
            auto t = x;
            for (std::size_t i = 0; i + 1 < plan.size(); ++i) {
                t = conv_bn_act(ctx, "dec.db" + std::to_string(blk) + ".l" + std::to_string(i),
                                ConvBnActSpec{plan[i], plan[i + 1], ks[i], ks[i], Act::kPRelu, true}, t);
            }
            x = g.add(x, t);  // additive skip around the block
        }
        if (cfg_.hagf) x = hagf_forward(ctx, "dec.hagf", base, x);
        x = lasa_forward(ctx, "dec.lasa", x, cfg_.lasa);
        return g.sigmoid(x);
    }

    std::pair<Id, Id> forward(ForwardCtxT<T>& ctx, Id x) const {
        Id code = encode(ctx, x);
        Id recon = decode(ctx, code);
        return {recon, code};
    }

    // Audit table: name, shape, #params, architectural group.
    std::string architecture_table() const {
        std::ostringstream os;
        os << std::left << std::setw(28) << "name" << std::setw(16) << "shape" << std::right
           << std::setw(10) << "params"
           << "  module\n";
        std::size_t total = 0;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto& e = params_.entry(i);
            total += e.tensor.numel();
            os << std::left << std::setw(28) << e.name << std::setw(16) << e.tensor.shape_str()
               << std::right << std::setw(10) << e.tensor.numel() << "  " << module_tag(e.name)
               << "\n";
        }
        os << "total parameters: " << total << "\n";
        return os.str();
    }

    static std::string module_tag(const std::string& name) {
        if (name.find(".hagf.") != std::string::npos || name.find("dec.hagf") == 0) return "HAGF";
        if (name.find(".lasa.") != std::string::npos || name.find("dec.lasa") == 0) return "LASA";
        if (name.find(".gdc.") != std::string::npos) return "GDC";
        if (name.find(".fc.") != std::string::npos) return "FC";
        if (name.find("dec.") == 0) return "DecoderBlock";
        return "EncoderBlock";
    }

  private:
    ModelConfig cfg_;
    ParamStoreT<T> params_;
    ParamStoreT<T> buffers_;

    void build_encoder(Rng& rng) {
        for (std::size_t k = 1; k <= cfg_.blocks(); ++k) {
            const std::size_t cin = cfg_.channel_plan[k - 1], cout = cfg_.channel_plan[k];
            const KernelPair kp = cfg_.kernel_plan[k - 1];
            const std::string p = "enc.b" + std::to_string(k);
            // gated dense inputs for this block
            if (cfg_.dense != DenseMode::kOff) {
                const std::string base = "enc.gdc.b" + std::to_string(k);
                auto add_source = [&](const std::string& tag, std::size_t src_c, bool gate) {
                    params_.create_xavier(base + ".t_" + tag + ".w", {cin, src_c, 1, 1}, src_c, cin, rng);
                    params_.create_const(base + ".t_" + tag + ".b", {cin}, T(0));
                    if (gate) params_.create_scalar(base + ".a_" + tag, T(0));
                };
                const bool gates = cfg_.dense == DenseMode::kGdc;
                add_source("x", cfg_.channel_plan[0], gates);
                for (std::size_t i = 1; i < k; ++i) {
                    if (i + 1 == k && cfg_.gdc_ungated_backbone) continue;
                    add_source("o" + std::to_string(i), cfg_.channel_plan[i], gates);
                }
            }
            params_.create_xavier(p + ".res.w", {cout, cin, 1, 1}, cin, cout, rng);
            params_.create_const(p + ".res.b", {cout}, T(0));
            conv_bn_act_init(params_, buffers_, p + ".main_a",
                             ConvBnActSpec{cin, cin, kp.k1, kp.k2, Act::kPRelu, cfg_.encoder_bn}, rng);
            conv_bn_act_init(params_, buffers_, p + ".main_b",
                             ConvBnActSpec{cin, cout, kp.k2, kp.k1, Act::kPRelu, cfg_.encoder_bn}, rng);
            if (cfg_.lasa != LasaMode::kOff) lasa_init(params_, p + ".lasa", cout, cfg_.lasa, rng);
            if (cfg_.hagf) hagf_init(params_, p + ".hagf", cout, rng);
            params_.create_scalar(p + ".alpha", T(1));
        }
        params_.create_xavier("enc.final.w", {2, cfg_.channel_plan.back(), 1, 1},
                              cfg_.channel_plan.back(), 2, rng);
        params_.create_const("enc.final.b", {2}, T(0));
        fully_connected_init(params_, "enc.fc", cfg_.input_values(), cfg_.codeword_length(), rng);
    }

    void build_decoder(Rng& rng) {
        fully_connected_init(params_, "dec.fc", cfg_.codeword_length(), cfg_.input_values(), rng);
        const auto& plan = ModelConfig::decoder_channel_plan();
        const auto& ks = ModelConfig::decoder_kernels();
        for (std::size_t blk = 1; blk <= 2; ++blk) {
            for (std::size_t i = 0; i + 1 < plan.size(); ++i) {
                conv_bn_act_init(params_, buffers_, "dec.db" + std::to_string(blk) + ".l" + std::to_string(i),
                                 ConvBnActSpec{plan[i], plan[i + 1], ks[i], ks[i], Act::kPRelu, true}, rng);
            }
        }
        if (cfg_.hagf) hagf_init(params_, "dec.hagf", 2, rng);
        if (cfg_.lasa != LasaMode::kOff) lasa_init(params_, "dec.lasa", 2, cfg_.lasa, rng);
    }
};

using AiaNet = AiaNetT<real_t>;

template <typename T = real_t>
AiaNetT<T> build_variant(const ModelConfig& cfg) {
    return AiaNetT<T>(cfg);
}

}  // namespace aianet
