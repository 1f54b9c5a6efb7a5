#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "aianet/errors.hpp"

namespace aianet {

// Compression ratio as an exact rational so "1/64" round-trips through config
// files without float fuzz.
struct Rational {
    std::int64_t num = 1;
    std::int64_t den = 4;

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }

    static Rational parse(const std::string& s) {
        const auto slash = s.find('/');
        try {
            if (slash == std::string::npos) {
                const double v = std::stod(s);
                if (v <= 0.0) throw ConfigError("eta must be positive: " + s);
                // accept plain decimals by snapping to a denominator of 1e6
                return Rational{static_cast<std::int64_t>(std::llround(v * 1000000.0)), 1000000};
            }
            const std::int64_t n = std::stoll(s.substr(0, slash));
            const std::int64_t d = std::stoll(s.substr(slash + 1));
            if (n <= 0 || d <= 0) throw ConfigError("eta must be positive: " + s);
            return Rational{n, d};
        } catch (const std::invalid_argument&) {
            throw ConfigError("cannot parse eta: '" + s + "'");
        } catch (const std::out_of_range&) {
            throw ConfigError("cannot parse eta: '" + s + "'");
        }
    }

    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
};

enum class LasaMode : std::uint8_t { kOff, kPlainSA, kLasa };
enum class DenseMode : std::uint8_t { kOff, kStatic, kGdc };

inline std::string to_string(LasaMode m) {
    switch (m) {
        case LasaMode::kOff: return "off";
        case LasaMode::kPlainSA: return "plain_sa";
        default: return "lasa";
    }
}
inline std::string to_string(DenseMode m) {
    switch (m) {
        case DenseMode::kOff: return "off";
        case DenseMode::kStatic: return "static";
        default: return "gdc";
    }
}

inline LasaMode lasa_mode_from(const std::string& s) {
    if (s == "off") return LasaMode::kOff;
    if (s == "plain_sa") return LasaMode::kPlainSA;
    if (s == "lasa" || s == "on") return LasaMode::kLasa;
    throw ConfigError("unknown lasa mode '" + s + "' (off|plain_sa|lasa)");
}
inline DenseMode dense_mode_from(const std::string& s) {
    if (s == "off") return DenseMode::kOff;
    if (s == "static") return DenseMode::kStatic;
    if (s == "gdc" || s == "on") return DenseMode::kGdc;
    throw ConfigError("unknown dense mode '" + s + "' (off|static|gdc)");
}

// Hidden-width rules shared by the model builder and the analytic
// complexity walker. Reductions clamp at one channel for narrow maps.
inline std::size_t hagf_channel_hidden(std::size_t c) { return c / 8 > 0 ? c / 8 : 1; }
inline std::size_t hagf_spatial_hidden(std::size_t c) { return c / 2 > 0 ? c / 2 : 1; }
inline std::size_t lasa_reduced_channels(std::size_t c) { return c / 4 > 0 ? c / 4 : 1; }

struct KernelPair {
    std::size_t k1 = 3;
    std::size_t k2 = 3;
};

// Full architectural description of one AiANet instance.
struct ModelConfig {
    Rational eta{1, 4};
    std::size_t n_c = 32;
    std::size_t n_t = 32;
    std::vector<std::size_t> channel_plan{2, 16, 32, 64, 128};
    std::vector<KernelPair> kernel_plan{{3, 3}, {1, 9}, {7, 7}, {3, 3}};
    bool hagf = true;
    LasaMode lasa = LasaMode::kLasa;
    DenseMode dense = DenseMode::kGdc;
    bool gdc_ungated_backbone = false;  // pass Block_{k-1} -> Block_k unprojected and ungated
    bool encoder_bn = true;             // BN after every encoder main-path conv
    bool strict_lasa_channels = false;  // reject C < 4 instead of clamping C_r
    std::uint64_t seed = 1;

    std::size_t blocks() const { return channel_plan.empty() ? 0 : channel_plan.size() - 1; }
    std::size_t input_values() const { return 2 * n_c * n_t; }

    std::size_t codeword_length() const {
        const auto m = static_cast<std::size_t>(
            std::llround(static_cast<double>(input_values()) * eta.value()));
        return m < 1 ? 1 : m;
    }

    // Decoder internals are fixed: two DecoderBlocks of four ConvBN layers.
    static const std::vector<std::size_t>& decoder_channel_plan() {
        static const std::vector<std::size_t> plan{2, 8, 16, 8, 2};
        return plan;
    }
    static const std::vector<std::size_t>& decoder_kernels() {
        static const std::vector<std::size_t> ks{1, 3, 5, 7};
        return ks;
    }

    void validate() const {
        if (n_c == 0 || n_t == 0) throw ConfigError("n_c and n_t must be positive");
        if (eta.value() <= 0.0 || eta.value() > 1.0)
            throw ConfigError("eta must lie in (0, 1], got " + eta.str());
        if (channel_plan.size() < 2) throw ConfigError("channel_plan needs at least two entries");
        if (channel_plan.front() != 2)
            throw ConfigError("channel_plan must start at 2 (real/imag planes)");
        for (std::size_t c : channel_plan)
            if (c == 0) throw ConfigError("channel_plan entries must be positive");
        if (kernel_plan.size() != blocks())
            throw ConfigError("kernel_plan must define one kernel pair per block (" +
                              std::to_string(blocks()) + ")");
        for (const auto& k : kernel_plan) {
            if (k.k1 % 2 == 0 || k.k2 % 2 == 0 || k.k1 == 0 || k.k2 == 0)
                throw ConfigError("encoder kernels must be odd to preserve resolution");
        }
        if (strict_lasa_channels && lasa != LasaMode::kOff) {
            for (std::size_t k = 1; k < channel_plan.size(); ++k)
                if (channel_plan[k] < 4)
                    throw ConfigError("strict LASA mode requires at least 4 channels per block");
        }
        if (codeword_length() < 1) throw ConfigError("codeword length must be >= 1");
    }
};

}  // namespace aianet
