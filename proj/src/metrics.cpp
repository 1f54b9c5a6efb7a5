#include "aianet/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "aianet/errors.hpp"

namespace aianet {

std::string MetricsReport::csv_header() {
    return "protocol,test_scenario,eta,nmse_db,rho,params,flops";
}

std::string MetricsReport::csv_row() const {
    std::ostringstream os;
    os.precision(10);
    os << protocol << ',' << test_scenario << ',' << eta << ',' << nmse_db << ',' << rho << ','
       << params << ',' << flops;
    return os.str();
}

void SampleMetrics::add(const Tensor& h, const Tensor& h_hat) {
    if (!h.same_shape(h_hat)) throw DimensionError("SampleMetrics: shape mismatch");
    if (h.rank() != 3 || h.shape[0] != 2)
        throw DimensionError("SampleMetrics: expected 2xN_cxN_t planes");
    const std::size_t n = h.numel() / 2;
    const real_t* hre = h.data.data();
    const real_t* him = h.data.data() + n;
    const real_t* rre = h_hat.data.data();
    const real_t* rim = h_hat.data.data() + n;
    double err = 0.0, ref = 0.0, rec = 0.0, dot_re = 0.0, dot_im = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ar = hre[i], ai = him[i];
        const double br = rre[i], bi = rim[i];
        err += (ar - br) * (ar - br) + (ai - bi) * (ai - bi);
        ref += ar * ar + ai * ai;
        rec += br * br + bi * bi;
        // conj(a) * b
        dot_re += ar * br + ai * bi;
        dot_im += ar * bi - ai * br;
    }
    if (ref <= 0.0) {
        ++skipped_;
        std::fprintf(stderr, "warning: zero-norm reference sample excluded from metrics\n");
        return;
    }
    ratio_sum_ += err / ref;
    if (rec <= 0.0) {
        ++skipped_;
        std::fprintf(stderr, "warning: zero-norm reconstruction excluded from cosine similarity\n");
        rho_sum_ += 0.0;
    } else {
        rho_sum_ += std::sqrt(dot_re * dot_re + dot_im * dot_im) / std::sqrt(ref * rec);
    }
    ++count_;
}

double SampleMetrics::nmse_db() const {
    if (count_ == 0) throw UsageError("SampleMetrics: no samples accumulated");
    const double ratio = ratio_sum_ / static_cast<double>(count_);
    if (ratio < 1e-30) return -300.0;
    return 10.0 * std::log10(ratio);
}

double SampleMetrics::rho() const {
    if (count_ == 0) throw UsageError("SampleMetrics: no samples accumulated");
    return rho_sum_ / static_cast<double>(count_);
}

double nmse_db(const std::vector<Tensor>& h_set, const std::vector<Tensor>& h_hat_set) {
    if (h_set.size() != h_hat_set.size()) throw DimensionError("nmse_db: set sizes differ");
    SampleMetrics m;
    for (std::size_t i = 0; i < h_set.size(); ++i) m.add(h_set[i], h_hat_set[i]);
    return m.nmse_db();
}

double cosine_similarity(const std::vector<Tensor>& h_set, const std::vector<Tensor>& h_hat_set) {
    if (h_set.size() != h_hat_set.size()) throw DimensionError("cosine_similarity: set sizes differ");
    SampleMetrics m;
    for (std::size_t i = 0; i < h_set.size(); ++i) m.add(h_set[i], h_hat_set[i]);
    return m.rho();
}

namespace {

std::vector<double> magnitude_map(const Tensor& planes) {
    if (planes.rank() != 3 || planes.shape[0] != 2)
        throw DimensionError("export_heatmap: expected 2xN_cxN_t planes");
    const std::size_t n = planes.numel() / 2;
    std::vector<double> mag(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double re = planes.data[i], im = planes.data[n + i];
        mag[i] = std::sqrt(re * re + im * im);
    }
    return mag;
}

void write_pgm(const std::vector<double>& pixels, std::size_t w, std::size_t h, double peak,
               const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    const double scale = peak > 0.0 ? 255.0 / peak : 0.0;
    for (double v : pixels) {
        const int byte = static_cast<int>(std::lround(std::min(255.0, std::max(0.0, v * scale))));
        f.put(static_cast<char>(byte));
    }
    if (!f) throw IoError("short write: " + path);
}

}  // namespace

void export_heatmap(const Tensor& planes, const std::string& path) {
    const auto mag = magnitude_map(planes);
    double peak = 0.0;
    for (double v : mag) peak = std::max(peak, v);
    write_pgm(mag, planes.shape[2], planes.shape[1], peak, path);
}

void export_heatmap_triptych(const Tensor& original, const Tensor& reconstruction,
                             const std::string& path) {
    if (!original.same_shape(reconstruction))
        throw DimensionError("export_heatmap_triptych: shape mismatch");
    const auto a = magnitude_map(original);
    const auto b = magnitude_map(reconstruction);
    const std::size_t h = original.shape[1], w = original.shape[2], n = h * w;
    Tensor err(original.shape);
    for (std::size_t i = 0; i < original.numel(); ++i)
        err.data[i] = original.data[i] - reconstruction.data[i];
    const auto e = magnitude_map(err);
    double peak = 0.0;
    for (const auto* m : {&a, &b, &e})
        for (double v : *m) peak = std::max(peak, v);
    std::vector<double> panel(3 * n);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            panel[r * 3 * w + c] = a[r * w + c];
            panel[r * 3 * w + w + c] = b[r * w + c];
            panel[r * 3 * w + 2 * w + c] = e[r * w + c];
        }
    }
    write_pgm(panel, 3 * w, h, peak, path);
}

}  // namespace aianet
