#pragma once

// Straight-line transcriptions of the HAGF and LASA forward procedures using
// explicit loops only. These share no compute code with the library (the 1x1 /
// 3x3 convolutions come from the loop oracle, attention materializes the SxS
// matrix directly) and exist purely to cross-check the graph implementations.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "aianet/layers.hpp"
#include "oracles.hpp"

namespace alg_oracle {

using Store = aianet::ParamStoreT<double>;

inline std::vector<double> prelu_vec(std::span<const double> x, std::span<const double> slope,
                                     std::size_t channels) {
    const std::size_t per = x.size() / channels;
    std::vector<double> y(x.size());
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < per; ++i) {
            const double v = x[c * per + i];
            y[c * per + i] = v >= 0 ? v : slope[c] * v;
        }
    return y;
}

inline std::vector<double> sigmoid_vec(std::span<const double> x) {
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = oracle::sigmoid(x[i]);
    return y;
}

// Forward pass of the hybrid attention-gated fusion, line by line.
inline std::vector<double> hagf(const Store& P, const std::string& p, std::span<const double> fr,
                                std::span<const double> fm, std::size_t c, std::size_t h,
                                std::size_t w, std::vector<double>* mc_out = nullptr,
                                std::vector<double>* ms_out = nullptr) {
    const std::size_t hw = h * w;
    const std::size_t ch = aianet::hagf_channel_hidden(c);
    const std::size_t cs = aianet::hagf_spatial_hidden(c);

    // Z <- Concat(F_r, F_m)
    std::vector<double> z(2 * c * hw);
    std::copy(fr.begin(), fr.end(), z.begin());
    std::copy(fm.begin(), fm.end(), z.begin() + static_cast<std::ptrdiff_t>(c * hw));
    // F_comp <- PReLU(Conv1x1(Z))
    auto comp = oracle::conv2d(z, 2 * c, h, w, P.at(p + ".compress.w").data, c, 1, 1,
                               P.at(p + ".compress.b").data, 0, 0);
    comp = prelu_vec(comp, P.at(p + ".compress.slope").data, c);
    // M_c <- sigmoid(Conv1x1(PReLU(Conv1x1(GAP(F_comp)))))
    std::vector<double> gap(c, 0.0);
    for (std::size_t cc = 0; cc < c; ++cc) {
        for (std::size_t i = 0; i < hw; ++i) gap[cc] += comp[cc * hw + i];
        gap[cc] /= static_cast<double>(hw);
    }
    auto mc = oracle::conv2d(gap, c, 1, 1, P.at(p + ".ch1.w").data, ch, 1, 1, P.at(p + ".ch1.b").data, 0, 0);
    mc = prelu_vec(mc, P.at(p + ".ch1.slope").data, ch);
    mc = oracle::conv2d(mc, ch, 1, 1, P.at(p + ".ch2.w").data, c, 1, 1, P.at(p + ".ch2.b").data, 0, 0);
    mc = sigmoid_vec(mc);
    // M_s <- sigmoid(Conv3x3(PReLU(Conv3x3(F_comp))))
    auto ms = oracle::conv2d(comp, c, h, w, P.at(p + ".sp1.w").data, cs, 3, 3, P.at(p + ".sp1.b").data, 1, 1);
    ms = prelu_vec(ms, P.at(p + ".sp1.slope").data, cs);
    ms = oracle::conv2d(ms, cs, h, w, P.at(p + ".sp2.w").data, 1, 3, 3, P.at(p + ".sp2.b").data, 1, 1);
    ms = sigmoid_vec(ms);
    if (mc_out) *mc_out = mc;
    if (ms_out) *ms_out = ms;
    // F_fused <- beta1 (F_m.*Mc.*Ms + F_r.*(1-Mc).*(1-Ms)) + beta2 F_comp
    const double b1 = P.at(p + ".beta1").data[0];
    const double b2 = P.at(p + ".beta2").data[0];
    std::vector<double> out(c * hw);
    for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = cc * hw + i;
            const double sel_m = fm[idx] * mc[cc] * ms[i];
            const double sel_r = fr[idx] * (1.0 - mc[cc]) * (1.0 - ms[i]);
            out[idx] = b1 * (sel_m + sel_r) + b2 * comp[idx];
        }
    return out;
}

// Forward pass of the locally-aware self-attention, line by line. The SxS
// attention matrix is materialized explicitly.
inline std::vector<double> lasa(const Store& P, const std::string& p, std::span<const double> x,
                                std::size_t c, std::size_t h, std::size_t w, bool plain_sa = false,
                                std::vector<double>* attn_out = nullptr) {
    const std::size_t hw = h * w;
    const std::size_t cr = aianet::lasa_reduced_channels(c);
    auto q = oracle::conv2d(x, c, h, w, P.at(p + ".q.w").data, cr, 1, 1, P.at(p + ".q.b").data, 0, 0);
    auto k = oracle::conv2d(x, c, h, w, P.at(p + ".k.w").data, cr, 1, 1, P.at(p + ".k.b").data, 0, 0);
    auto v = oracle::conv2d(x, c, h, w, P.at(p + ".v.w").data, c, 1, 1, P.at(p + ".v.b").data, 0, 0);

    // A <- softmax_rows(Q^T K / sqrt(C_r)); A[i][j] pairs query i with key j
    const double scale = 1.0 / std::sqrt(static_cast<double>(cr));
    std::vector<double> attn(hw * hw);
    for (std::size_t i = 0; i < hw; ++i) {
        std::vector<double> row(hw, 0.0);
        for (std::size_t j = 0; j < hw; ++j) {
            double dot = 0.0;
            for (std::size_t r = 0; r < cr; ++r) dot += q[r * hw + i] * k[r * hw + j];
            row[j] = dot * scale;
        }
        auto soft = oracle::softmax(row);
        std::copy(soft.begin(), soft.end(), attn.begin() + static_cast<std::ptrdiff_t>(i * hw));
    }
    if (attn_out) *attn_out = attn;
    // F_att <- A V^T, reshaped back to CxHxW
    std::vector<double> f_att(c * hw, 0.0);
    for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t i = 0; i < hw; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < hw; ++j) acc += attn[i * hw + j] * v[cc * hw + j];
            f_att[cc * hw + i] = acc;
        }

    const double gamma = P.at(p + ".gamma").data[0];
    std::vector<double> out(c * hw);
    if (plain_sa) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f_att[i] + gamma * x[i];
        return out;
    }

    // F_local <- Conv1x1(GELU(DWConv3x3(X)))
    const auto& dww = P.at(p + ".dw.w").data;
    const auto& dwb = P.at(p + ".dw.b").data;
    std::vector<double> dw(c * hw, 0.0);
    for (std::size_t cc = 0; cc < c; ++cc)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                double acc = dwb[cc];
                for (std::size_t ki = 0; ki < 3; ++ki)
                    for (std::size_t kj = 0; kj < 3; ++kj) {
                        const long ii = static_cast<long>(i + ki) - 1, jj = static_cast<long>(j + kj) - 1;
                        if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w))
                            continue;
                        acc += dww[(cc * 3 + ki) * 3 + kj] * x[(cc * h + ii) * w + jj];
                    }
                dw[(cc * h + i) * w + j] = acc;
            }
    for (auto& vv : dw) vv = oracle::gelu_tanh(vv);
    auto f_local = oracle::conv2d(dw, c, h, w, P.at(p + ".pw.w").data, c, 1, 1, P.at(p + ".pw.b").data, 0, 0);

    // F_fused <- sigma(omega).*F_att + (1-sigma(omega)).*F_local; out <- F_fused + gamma X
    const auto& omega = P.at(p + ".omega").data;
    for (std::size_t cc = 0; cc < c; ++cc) {
        const double gate = oracle::sigmoid(omega[cc]);
        for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t idx = cc * hw + i;
            out[idx] = gate * f_att[idx] + (1.0 - gate) * f_local[idx] + gamma * x[idx];
        }
    }
    return out;
}

}  // namespace alg_oracle
