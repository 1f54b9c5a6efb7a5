#include "aianet/arch.hpp"

namespace aianet {

namespace {

// Parameter/FLOP contributions per component, mirroring the graph the model
// records. The unit tests pin this walker against an instantiated model's
// ParamStore and against audit_flops of a real forward graph.

struct Tally {
    std::size_t params = 0;
    std::size_t flops = 0;

    void conv(std::size_t cin, std::size_t cout, std::size_t k1, std::size_t k2, std::size_t s,
              bool bias) {
        params += cout * cin * k1 * k2 + (bias ? cout : 0);
        flops += 2 * k1 * k2 * cin * cout * s;
    }
    void conv_bn_act(std::size_t cin, std::size_t cout, std::size_t k1, std::size_t k2, std::size_t s,
                     bool bn) {
        conv(cin, cout, k1, k2, s, !bn);
        if (bn) {
            params += 2 * cout;      // gamma, beta
            flops += 2 * cout * s;   // scale + shift
        }
        params += cout;              // prelu slopes
        flops += cout * s;           // prelu
    }
    void fc(std::size_t in, std::size_t out) {
        params += out * in + out;
        flops += 2 * in * out;
    }
    void elementwise(std::size_t n) { flops += n; }
    void scalar_param(std::size_t n = 1) { params += n; }
};

void hagf(Tally& t, std::size_t c, std::size_t s) {
    const std::size_t ch = hagf_channel_hidden(c);
    const std::size_t cs = hagf_spatial_hidden(c);
    t.conv(2 * c, c, 1, 1, s, true);  // compress
    t.params += c;                    // compress prelu slopes
    t.elementwise(c * s);             // compress prelu
    t.elementwise(c * s);             // gap reads F_comp
    t.conv(c, ch, 1, 1, 1, true);     // channel squeeze (on Cx1x1)
    t.params += ch;
    t.elementwise(ch);                // prelu
    t.conv(ch, c, 1, 1, 1, true);     // channel expand
    t.elementwise(c);                 // sigmoid -> M_c
    t.conv(c, cs, 3, 3, s, true);     // spatial hidden
    t.params += cs;
    t.elementwise(cs * s);            // prelu
    t.conv(cs, 1, 3, 3, s, true);     // spatial collapse
    t.elementwise(s);                 // sigmoid -> M_s
    t.elementwise(c * s);             // f_m .* M_c
    t.elementwise(c * s);             // .. .* M_s
    t.elementwise(c);                 // 1 - M_c
    t.elementwise(c * s);             // f_r .* (1-M_c)
    t.elementwise(s);                 // 1 - M_s
    t.elementwise(c * s);             // .. .* (1-M_s)
    t.elementwise(c * s);             // selected sum
    t.elementwise(c * s);             // beta1 scale
    t.elementwise(c * s);             // beta2 comp
    t.elementwise(c * s);             // final add
    t.scalar_param(2);                // beta1, beta2
}

void lasa(Tally& t, std::size_t c, std::size_t s, LasaMode mode) {
    if (mode == LasaMode::kOff) return;
    const std::size_t cr = lasa_reduced_channels(c);
    t.conv(c, cr, 1, 1, s, true);  // q
    t.conv(c, cr, 1, 1, s, true);  // k
    t.conv(c, c, 1, 1, s, true);   // v
    t.flops += 2 * s * cr * s;     // scores
    t.elementwise(s * s);          // 1/sqrt(Cr)
    t.elementwise(s * s);          // softmax
    t.flops += 2 * s * s * c;      // aggregation
    t.scalar_param(1);             // gamma
    if (mode == LasaMode::kPlainSA) {
        t.elementwise(c * s);  // gamma residual
        t.elementwise(c * s);  // add
        return;
    }
    t.params += c * 9 + c;   // depthwise 3x3 + bias
    t.flops += 2 * 9 * c * s;
    t.elementwise(c * s);    // gelu
    t.conv(c, c, 1, 1, s, true);  // pointwise
    t.params += c;           // omega
    t.elementwise(c);        // sigmoid(omega)
    t.elementwise(c * s);    // gate .* f_att
    t.elementwise(c);        // 1 - gate
    t.elementwise(c * s);    // (1-gate) .* f_local
    t.elementwise(c * s);    // fused add
    t.elementwise(c * s);    // gamma residual
    t.elementwise(c * s);    // final add
}

void gdc_block(Tally& t, const ModelConfig& cfg, std::size_t k, std::size_t s) {
    if (cfg.dense == DenseMode::kOff) return;
    const std::size_t cin = cfg.channel_plan[k - 1];
    const bool gates = cfg.dense == DenseMode::kGdc;
    std::size_t terms = 0;
    auto source = [&](std::size_t src_c, bool gated) {
        t.conv(src_c, cin, 1, 1, s, true);
        if (gated && gates) {
            t.scalar_param(1);       // alpha
            t.elementwise(1);        // sigmoid(alpha)
            t.elementwise(cin * s);  // scalar gate
        }
        ++terms;
    };
    source(cfg.channel_plan[0], true);  // network input
    for (std::size_t i = 1; i < k; ++i) {
        if (i + 1 == k && cfg.gdc_ungated_backbone) {
            ++terms;  // direct pass-through, no projection or gate
            continue;
        }
        source(cfg.channel_plan[i], true);
    }
    if (terms > 1) t.elementwise((terms - 1) * cin * s);  // accumulation adds
}

void encoder_block(Tally& t, const ModelConfig& cfg, std::size_t k, std::size_t s) {
    const std::size_t cin = cfg.channel_plan[k - 1], cout = cfg.channel_plan[k];
    const KernelPair kp = cfg.kernel_plan[k - 1];
    t.conv(cin, cout, 1, 1, s, true);  // residual projection
    t.conv_bn_act(cin, cin, kp.k1, kp.k2, s, cfg.encoder_bn);
    t.conv_bn_act(cin, cout, kp.k2, kp.k1, s, cfg.encoder_bn);
    lasa(t, cout, s, cfg.lasa);
    t.scalar_param(1);        // block alpha
    t.elementwise(cout * s);  // alpha scale
    if (cfg.hagf) hagf(t, cout, s);
    t.elementwise(cout * s);  // residual + fused
}

Tally tally_model(const ModelConfig& cfg) {
    cfg.validate();
    Tally t;
    const std::size_t s = cfg.n_c * cfg.n_t;
    for (std::size_t k = 1; k <= cfg.blocks(); ++k) {
        gdc_block(t, cfg, k, s);
        encoder_block(t, cfg, k, s);
    }
    t.conv(cfg.channel_plan.back(), 2, 1, 1, s, true);  // codeword head
    t.fc(cfg.input_values(), cfg.codeword_length());

    t.fc(cfg.codeword_length(), cfg.input_values());
    const auto& plan = ModelConfig::decoder_channel_plan();
    const auto& ks = ModelConfig::decoder_kernels();
    for (std::size_t blk = 0; blk < 2; ++blk) {
        for (std::size_t i = 0; i + 1 < plan.size(); ++i)
            t.conv_bn_act(plan[i], plan[i + 1], ks[i], ks[i], s, true);
        t.elementwise(2 * s);  // residual skip
    }
    if (cfg.hagf) hagf(t, 2, s);
    lasa(t, 2, s, cfg.lasa);
    t.elementwise(2 * s);  // output sigmoid
    return t;
}

}  // namespace

std::size_t count_parameters(const ModelConfig& cfg) { return tally_model(cfg).params; }
std::size_t count_flops(const ModelConfig& cfg) { return tally_model(cfg).flops; }

ComplexityReport complexity_report(const ModelConfig& cfg) {
    const Tally t = tally_model(cfg);
    return ComplexityReport{t.params, t.flops};
}

}  // namespace aianet
