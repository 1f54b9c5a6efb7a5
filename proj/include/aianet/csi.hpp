#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "aianet/errors.hpp"
#include "aianet/rng.hpp"
#include "aianet/tensor.hpp"

namespace aianet {

// Complex matrix as separate real/imaginary row-major buffers.
struct ComplexMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    AVec<double> re;
    AVec<double> im;

    ComplexMatrix() = default;
    ComplexMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), re(r * c, 0.0), im(r * c, 0.0) {}

    std::size_t numel() const { return rows * cols; }
    double energy() const {
        double e = 0;
        for (std::size_t i = 0; i < re.size(); ++i) e += re[i] * re[i] + im[i] * im[i];
        return e;
    }
};

// Unitary 2D-DFT into the angular-delay domain: H = F_d * H~ * F_a^H.
ComplexMatrix to_angular_delay(const ComplexMatrix& h_tilde);
// Exact inverse: H~ = F_d^H * H * F_a.
ComplexMatrix from_angular_delay(const ComplexMatrix& h);

// Keep the first n_c delay rows; zero_pad_delay is the reconstruction inverse.
ComplexMatrix truncate_delay(const ComplexMatrix& h, std::size_t n_c);
ComplexMatrix zero_pad_delay(const ComplexMatrix& h, std::size_t full_rows);

enum class Scenario : std::uint8_t { kIndoor = 0, kOutdoor = 1 };

inline std::string to_string(Scenario s) { return s == Scenario::kIndoor ? "indoor" : "outdoor"; }
inline Scenario scenario_from(const std::string& s) {
    if (s == "indoor") return Scenario::kIndoor;
    if (s == "outdoor") return Scenario::kOutdoor;
    throw ConfigError("unknown scenario '" + s + "' (indoor|outdoor)");
}

// Affine map into [0,1]: normalized = (raw - offset) * scale.
struct NormMeta {
    double offset = 0.0;
    double scale = 1.0;
};

// Truncated angular-delay sample before normalization: real plane then
// imaginary plane, row-major, 2 * n_c * n_t values.
struct RawSample {
    std::vector<double> planes;
    Scenario scenario = Scenario::kIndoor;
};

struct CsiSample {
    Tensor planes;  // 2 x n_c x n_t in [0,1]
    Scenario scenario = Scenario::kIndoor;
    NormMeta norm_meta;
};

struct Dataset {
    std::uint32_t n_c = 0;
    std::uint32_t n_t = 0;
    NormMeta meta;
    std::vector<CsiSample> samples;
};

// Min-max statistics over the first `stat_prefix` samples (the canonical
// training share); throws on a degenerate or non-finite range.
NormMeta compute_norm_meta(const std::vector<RawSample>& raw, std::size_t stat_prefix);
// Values outside the statistics range (possible for val/test extremes) clamp
// into [0,1]; denormalize is exact for unclamped values.
CsiSample normalize_sample(const RawSample& raw, std::size_t n_c, std::size_t n_t, NormMeta meta);
std::vector<double> denormalize(const CsiSample& sample);

// Energy-weighted RMS delay-row index of a sample (scenario separation stat).
double delay_spread(const CsiSample& sample);

// --- synthetic channel generator ------------------------------------------------

struct ScenarioProfile {
    std::size_t min_paths = 3;
    std::size_t max_paths = 6;
    double delay_fraction = 0.125;  // delays land in the first fraction of the subcarrier count
    double decay_share = 1.0 / 3.0;  // power e-folding point as a share of the max delay
};

struct SynthConfig {
    std::size_t n_subcarriers = 256;  // pre-truncation delay resolution
    std::size_t n_tx = 32;
    std::size_t n_delay = 32;  // rows kept after truncation
    ScenarioProfile indoor{3, 6, 0.125, 0.15};   // fast decay: tight early-delay energy
    ScenarioProfile outdoor{6, 12, 0.40, 1.0};   // slow decay: energy spread across rows
    double stat_fraction = 100.0 / 150.0;  // share of samples feeding the norm statistics
};

// Multipath draw -> frequency-spatial matrix -> 2D-DFT -> truncation ->
// normalization. Same seed gives a byte-identical dataset.
Dataset synth_generate(Scenario scenario, std::size_t count, std::uint64_t seed,
                       const SynthConfig& cfg = {});

// Untruncated frequency-spatial channel of one multipath draw (test hook for
// energy/round-trip measurements).
ComplexMatrix synth_channel_matrix(Scenario scenario, Rng& rng, const SynthConfig& cfg = {});

// --- dataset file I/O (CSID) -------------------------------------------------------

// Little-endian layout: "CSID", u32 version, u32 sample_count, u32 n_c,
// u32 n_t, sample_count scenario bytes, f64 offset, f64 scale, then per
// sample 2*n_c*n_t float32 plane values. Byte-exact round trip.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

// --- splits ------------------------------------------------------------------------

struct SplitRatios {
    double train = 100.0 / 150.0;
    double val = 30.0 / 150.0;
    double test = 20.0 / 150.0;
};

enum class Protocol : std::uint8_t { kSeparateIndoor, kSeparateOutdoor, kMixed };

inline std::string to_string(Protocol p) {
    switch (p) {
        case Protocol::kSeparateIndoor: return "separate_indoor";
        case Protocol::kSeparateOutdoor: return "separate_outdoor";
        default: return "mixed";
    }
}
inline Protocol protocol_from(const std::string& s) {
    if (s == "separate_indoor" || s == "separate(indoor)") return Protocol::kSeparateIndoor;
    if (s == "separate_outdoor" || s == "separate(outdoor)") return Protocol::kSeparateOutdoor;
    if (s == "mixed") return Protocol::kMixed;
    throw ConfigError("unknown protocol '" + s + "' (separate_indoor|separate_outdoor|mixed)");
}

struct Splits {
    std::vector<CsiSample> train, val, test;
};

// Separate policy filters one scenario; mixed interleaves the two scenarios
// 1:1 inside every split. Ratios apply per scenario before interleaving, so
// the 1:1 composition is exact in each split.
Splits split_mix(const std::vector<Dataset>& sources, Protocol protocol, SplitRatios ratios = {});

}  // namespace aianet
