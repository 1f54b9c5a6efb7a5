#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aianet/tensor.hpp"

namespace aianet {

// One evaluation outcome: reconstruction quality plus model complexity.
struct MetricsReport {
    double nmse_db = 0.0;
    double rho = 0.0;
    std::size_t params = 0;
    std::size_t flops = 0;
    std::string protocol;
    std::string test_scenario;
    std::string eta;

    std::string csv_row() const;
    static std::string csv_header();
};

// Streaming accumulator over (reference, reconstruction) pairs. Planes are
// interpreted as a complex matrix (plane 0 real, plane 1 imaginary); all sums
// run in double. Zero-norm operands are excluded with a warning on stderr.
class SampleMetrics {
  public:
    void add(const Tensor& h, const Tensor& h_hat);
    std::size_t counted() const { return count_; }
    double ratio_sum() const { return ratio_sum_; }
    double rho_partial_sum() const { return rho_sum_; }

    // 10*log10(E[ |H - Hhat|^2 / |H|^2 ]); perfect reconstruction reports the
    // -300 dB sentinel instead of -inf.
    double nmse_db() const;
    // E[ |<H, Hhat>| / (|H| |Hhat|) ] with the complex inner product.
    double rho() const;

  private:
    double ratio_sum_ = 0.0;
    double rho_sum_ = 0.0;
    std::size_t count_ = 0;
    std::size_t skipped_ = 0;
};

double nmse_db(const std::vector<Tensor>& h_set, const std::vector<Tensor>& h_hat_set);
double cosine_similarity(const std::vector<Tensor>& h_set, const std::vector<Tensor>& h_hat_set);

// Magnitude map sqrt(re^2+im^2) scaled linearly so the peak maps to 255,
// written as binary PGM (P5).
void export_heatmap(const Tensor& planes, const std::string& path);
// Side-by-side panels: original | reconstruction | absolute error, sharing
// one scale so panels are comparable.
void export_heatmap_triptych(const Tensor& original, const Tensor& reconstruction,
                             const std::string& path);

}  // namespace aianet
