#include "aianet/csi.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace aianet {

namespace {

constexpr double kTau = 6.283185307179586476925286766559;
constexpr double kPi = 3.14159265358979323846;

using CMat = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unitary transform with the e^{+j 2pi jk/N} kernel: physical delay phases
// e^{-j 2pi n tau/N} then concentrate in the leading delay rows, which is what
// the truncation step relies on.
CMat unitary_dft(std::size_t n) {
    CMat f(n, n);
    const double norm = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k)
            f(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) =
                std::polar(norm, kTau * static_cast<double>(j) * static_cast<double>(k) /
                                     static_cast<double>(n));
    return f;
}

CMat to_eigen(const ComplexMatrix& m) {
    CMat e(m.rows, m.cols);
    for (std::size_t i = 0; i < m.numel(); ++i)
        e.data()[i] = std::complex<double>(m.re[i], m.im[i]);
    return e;
}

ComplexMatrix from_eigen(const CMat& e) {
    ComplexMatrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
    for (std::size_t i = 0; i < m.numel(); ++i) {
        m.re[i] = e.data()[i].real();
        m.im[i] = e.data()[i].imag();
    }
    return m;
}

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}
void put_f64(std::string& out, double v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.append(b, 8);
}

}  // namespace

ComplexMatrix to_angular_delay(const ComplexMatrix& h_tilde) {
    const CMat fd = unitary_dft(h_tilde.rows);
    const CMat fa = unitary_dft(h_tilde.cols);
    return from_eigen(fd * to_eigen(h_tilde) * fa.adjoint());
}

ComplexMatrix from_angular_delay(const ComplexMatrix& h) {
    const CMat fd = unitary_dft(h.rows);
    const CMat fa = unitary_dft(h.cols);
    return from_eigen(fd.adjoint() * to_eigen(h) * fa);
}

ComplexMatrix truncate_delay(const ComplexMatrix& h, std::size_t n_c) {
    if (n_c > h.rows)
        throw ConfigError("truncate_delay: n_c " + std::to_string(n_c) + " exceeds " +
                          std::to_string(h.rows) + " rows");
    ComplexMatrix out(n_c, h.cols);
    std::copy(h.re.begin(), h.re.begin() + static_cast<std::ptrdiff_t>(n_c * h.cols), out.re.begin());
    std::copy(h.im.begin(), h.im.begin() + static_cast<std::ptrdiff_t>(n_c * h.cols), out.im.begin());
    return out;
}

ComplexMatrix zero_pad_delay(const ComplexMatrix& h, std::size_t full_rows) {
    if (full_rows < h.rows) throw ConfigError("zero_pad_delay: target smaller than input");
    ComplexMatrix out(full_rows, h.cols);
    std::copy(h.re.begin(), h.re.end(), out.re.begin());
    std::copy(h.im.begin(), h.im.end(), out.im.begin());
    return out;
}

NormMeta compute_norm_meta(const std::vector<RawSample>& raw, std::size_t stat_prefix) {
    if (raw.empty() || stat_prefix == 0) throw ConfigError("compute_norm_meta: no samples");
    stat_prefix = std::min(stat_prefix, raw.size());
    double lo = raw[0].planes.at(0), hi = lo;
    for (std::size_t s = 0; s < stat_prefix; ++s) {
        for (double v : raw[s].planes) {
            if (!std::isfinite(v)) throw ConfigError("compute_norm_meta: non-finite value");
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (hi <= lo) throw ConfigError("compute_norm_meta: degenerate value range");
    return NormMeta{lo, 1.0 / (hi - lo)};
}

CsiSample normalize_sample(const RawSample& raw, std::size_t n_c, std::size_t n_t, NormMeta meta) {
    if (raw.planes.size() != 2 * n_c * n_t)
        throw DimensionError("normalize_sample: expected " + std::to_string(2 * n_c * n_t) +
                             " values, got " + std::to_string(raw.planes.size()));
    CsiSample s;
    s.scenario = raw.scenario;
    s.norm_meta = meta;
    s.planes = Tensor({2, n_c, n_t});
    for (std::size_t i = 0; i < raw.planes.size(); ++i) {
        const double v = (raw.planes[i] - meta.offset) * meta.scale;
        s.planes.data[i] = static_cast<real_t>(std::clamp(v, 0.0, 1.0));
    }
    return s;
}

std::vector<double> denormalize(const CsiSample& sample) {
    std::vector<double> out(sample.planes.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<double>(sample.planes.data[i]) / sample.norm_meta.scale +
                 sample.norm_meta.offset;
    return out;
}

double delay_spread(const CsiSample& sample) {
    const std::size_t n_c = sample.planes.shape[1], n_t = sample.planes.shape[2];
    const auto raw = denormalize(sample);
    double total = 0.0, mean = 0.0;
    std::vector<double> row_energy(n_c, 0.0);
    for (std::size_t r = 0; r < n_c; ++r) {
        double e = 0.0;
        for (std::size_t t = 0; t < n_t; ++t) {
            const double re = raw[r * n_t + t];
            const double im = raw[n_c * n_t + r * n_t + t];
            e += re * re + im * im;
        }
        row_energy[r] = e;
        total += e;
        mean += e * static_cast<double>(r);
    }
    if (total <= 0.0) return 0.0;
    mean /= total;
    double var = 0.0;
    for (std::size_t r = 0; r < n_c; ++r) {
        const double d = static_cast<double>(r) - mean;
        var += row_energy[r] * d * d;
    }
    return std::sqrt(var / total);
}

ComplexMatrix synth_channel_matrix(Scenario scenario, Rng& rng, const SynthConfig& cfg) {
    const ScenarioProfile& prof = scenario == Scenario::kIndoor ? cfg.indoor : cfg.outdoor;
    const std::size_t paths =
        prof.min_paths + static_cast<std::size_t>(rng.uniform_index(prof.max_paths - prof.min_paths + 1));
    const double tau_max = prof.delay_fraction * static_cast<double>(cfg.n_subcarriers);
    const double tau0 = std::max(1e-9, prof.decay_share * tau_max);

    std::vector<double> tau(paths), sin_theta(paths), gain_re(paths), gain_im(paths);
    double power_total = 0.0;
    std::vector<double> power(paths);
    for (std::size_t l = 0; l < paths; ++l) {
        // integer delay bins: path energy stays exactly inside its delay row,
        // mirroring the zero-beyond-N_c structure of the truncated CSI data
        tau[l] = std::floor(rng.uniform(0.0, tau_max));
        sin_theta[l] = std::sin(rng.uniform(-kPi / 2, kPi / 2));
        power[l] = std::exp(-tau[l] / tau0);
        power_total += power[l];
    }
    for (std::size_t l = 0; l < paths; ++l) {
        // complex gain ~ CN(0, p_l) with the profile normalized to unit power
        const double sigma = std::sqrt(power[l] / power_total / 2.0);
        gain_re[l] = sigma * rng.normal();
        gain_im[l] = sigma * rng.normal();
    }

    ComplexMatrix h(cfg.n_subcarriers, cfg.n_tx);
    for (std::size_t l = 0; l < paths; ++l) {
        const std::complex<double> a(gain_re[l], gain_im[l]);
        for (std::size_t n = 0; n < cfg.n_subcarriers; ++n) {
            const std::complex<double> delay_ph =
                std::polar(1.0, -kTau * static_cast<double>(n) * tau[l] /
                                    static_cast<double>(cfg.n_subcarriers));
            const std::complex<double> base = a * delay_ph;
            for (std::size_t t = 0; t < cfg.n_tx; ++t) {
                const std::complex<double> v =
                    base * std::polar(1.0, -kPi * static_cast<double>(t) * sin_theta[l]);
                h.re[n * cfg.n_tx + t] += v.real();
                h.im[n * cfg.n_tx + t] += v.imag();
            }
        }
    }
    return h;
}

Dataset synth_generate(Scenario scenario, std::size_t count, std::uint64_t seed,
                       const SynthConfig& cfg) {
    if (count < 1) throw ConfigError("synth_generate: count must be >= 1");
    if (cfg.n_delay > cfg.n_subcarriers)
        throw ConfigError("synth_generate: n_delay exceeds n_subcarriers");
    Rng rng(seed);
    const CMat fd = unitary_dft(cfg.n_subcarriers);
    const CMat fa = unitary_dft(cfg.n_tx);

    std::vector<RawSample> raw(count);
    for (std::size_t s = 0; s < count; ++s) {
        ComplexMatrix h_tilde = synth_channel_matrix(scenario, rng, cfg);
        const CMat h = fd * to_eigen(h_tilde) * fa.adjoint();
        RawSample& r = raw[s];
        r.scenario = scenario;
        r.planes.resize(2 * cfg.n_delay * cfg.n_tx);
        for (std::size_t i = 0; i < cfg.n_delay; ++i)
            for (std::size_t t = 0; t < cfg.n_tx; ++t) {
                const auto v = h(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t));
                r.planes[i * cfg.n_tx + t] = v.real();
                r.planes[cfg.n_delay * cfg.n_tx + i * cfg.n_tx + t] = v.imag();
            }
    }

    const auto prefix = static_cast<std::size_t>(
        std::max(1.0, std::ceil(cfg.stat_fraction * static_cast<double>(count))));
    const NormMeta meta = compute_norm_meta(raw, prefix);

    Dataset ds;
    ds.n_c = static_cast<std::uint32_t>(cfg.n_delay);
    ds.n_t = static_cast<std::uint32_t>(cfg.n_tx);
    ds.meta = meta;
    ds.samples.reserve(count);
    for (const auto& r : raw) ds.samples.push_back(normalize_sample(r, cfg.n_delay, cfg.n_tx, meta));
    return ds;
}

void write_dataset(const Dataset& ds, const std::string& path) {
    std::string out;
    out.reserve(32 + ds.samples.size() * (1 + 4 * 2 * ds.n_c * ds.n_t));
    out.append("CSID", 4);
    put_u32(out, 1);
    put_u32(out, static_cast<std::uint32_t>(ds.samples.size()));
    put_u32(out, ds.n_c);
    put_u32(out, ds.n_t);
    for (const auto& s : ds.samples) out.push_back(static_cast<char>(s.scenario));
    put_f64(out, ds.meta.offset);
    put_f64(out, ds.meta.scale);
    for (const auto& s : ds.samples) {
        for (real_t v : s.planes.data) {
            const float f = static_cast<float>(v);
            char b[4];
            std::memcpy(b, &f, 4);
            out.append(b, 4);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write: " + path);
}

Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (in.size() < 20 || std::memcmp(in.data(), "CSID", 4) != 0)
        throw IoError("not a CSID file: " + path);
    std::size_t pos = 4;
    auto get_u32 = [&] {
        std::uint32_t v;
        if (pos + 4 > in.size()) throw IoError("truncated CSID header: " + path);
        std::memcpy(&v, in.data() + pos, 4);
        pos += 4;
        return v;
    };
    const std::uint32_t version = get_u32();
    if (version != 1) throw IoError("unsupported CSID version " + std::to_string(version));
    const std::uint32_t count = get_u32();
    Dataset ds;
    ds.n_c = get_u32();
    ds.n_t = get_u32();
    if (pos + count + 16 > in.size()) throw IoError("truncated CSID scenario table: " + path);
    std::vector<Scenario> scen(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto b = static_cast<std::uint8_t>(in[pos++]);
        if (b > 1) throw IoError("corrupt scenario byte in " + path);
        scen[i] = static_cast<Scenario>(b);
    }
    std::memcpy(&ds.meta.offset, in.data() + pos, 8);
    pos += 8;
    std::memcpy(&ds.meta.scale, in.data() + pos, 8);
    pos += 8;
    const std::size_t plane = 2ull * ds.n_c * ds.n_t;
    if (pos + 4ull * plane * count != in.size()) throw IoError("CSID payload size mismatch: " + path);
    ds.samples.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        auto& s = ds.samples[i];
        s.scenario = scen[i];
        s.norm_meta = ds.meta;
        s.planes = Tensor({2, ds.n_c, ds.n_t});
        for (std::size_t j = 0; j < plane; ++j) {
            float v;
            std::memcpy(&v, in.data() + pos, 4);
            pos += 4;
            s.planes.data[j] = static_cast<real_t>(v);
        }
    }
    return ds;
}

namespace {

std::vector<CsiSample> filter_scenario(const std::vector<Dataset>& sources, Scenario s) {
    std::vector<CsiSample> out;
    for (const auto& ds : sources)
        for (const auto& smp : ds.samples)
            if (smp.scenario == s) out.push_back(smp);
    return out;
}

struct Portion {
    std::size_t train, val, test;
};

Portion portion_of(std::size_t n, const SplitRatios& r) {
    Portion p;
    p.train = static_cast<std::size_t>(std::floor(r.train * static_cast<double>(n)));
    p.val = static_cast<std::size_t>(std::floor(r.val * static_cast<double>(n)));
    p.test = std::min(n - p.train - p.val,
                      static_cast<std::size_t>(std::ceil(r.test * static_cast<double>(n))));
    if (p.train == 0 || p.val == 0 || p.test == 0)
        throw ConfigError("split_mix: insufficient samples (" + std::to_string(n) + ")");
    return p;
}

}  // namespace

Splits split_mix(const std::vector<Dataset>& sources, Protocol protocol, SplitRatios ratios) {
    Splits out;
    if (protocol != Protocol::kMixed) {
        const Scenario want =
            protocol == Protocol::kSeparateIndoor ? Scenario::kIndoor : Scenario::kOutdoor;
        auto pool = filter_scenario(sources, want);
        const Portion p = portion_of(pool.size(), ratios);
        out.train.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(p.train));
        out.val.assign(pool.begin() + static_cast<std::ptrdiff_t>(p.train),
                       pool.begin() + static_cast<std::ptrdiff_t>(p.train + p.val));
        out.test.assign(pool.begin() + static_cast<std::ptrdiff_t>(p.train + p.val),
                        pool.begin() + static_cast<std::ptrdiff_t>(p.train + p.val + p.test));
        return out;
    }
    auto indoor = filter_scenario(sources, Scenario::kIndoor);
    auto outdoor = filter_scenario(sources, Scenario::kOutdoor);
    const std::size_t n = std::min(indoor.size(), outdoor.size());
    if (n == 0) throw ConfigError("split_mix: mixed protocol needs both scenarios");
    const Portion p = portion_of(n, ratios);
    auto interleave = [&](std::size_t lo, std::size_t hi, std::vector<CsiSample>& dst) {
        for (std::size_t i = lo; i < hi; ++i) {
            dst.push_back(indoor[i]);
            dst.push_back(outdoor[i]);
        }
    };
    interleave(0, p.train, out.train);
    interleave(p.train, p.train + p.val, out.val);
    interleave(p.train + p.val, p.train + p.val + p.test, out.test);
    return out;
}

}  // namespace aianet
