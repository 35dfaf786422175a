#pragma once

#include <cmath>
#include <vector>

#include "incnerf/errors.hpp"
#include "incnerf/image.hpp"

namespace incnerf::metrics {

inline double mse(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw UsageError("mse: image shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); i++) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

// -10 log10(MSE / peak^2), capped at 99 dB for exact matches.
inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
  if (peak <= 0) throw UsageError("psnr: peak must be positive");
  const double m = mse(a, b);
  if (m <= 0.0) return 99.0;
  const double v = -10.0 * std::log10(m / (peak * peak));
  return std::min(v, 99.0);
}

// Mean local SSIM over valid 11x11 windows, Gaussian weighted (sigma 1.5),
// C1=(0.01 L)^2, C2=(0.03 L)^2 with L=1, per channel then averaged.
inline double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height) throw UsageError("ssim: image shape mismatch");
  constexpr int kWin = 11;
  constexpr int kHalf = kWin / 2;
  if (a.width < kWin || a.height < kWin) throw UsageError("ssim: image smaller than the window");

  static const auto weights = [] {
    std::array<double, kWin * kWin> w{};
    const double sigma = 1.5;
    double total = 0.0;
    for (int dy = -kHalf; dy <= kHalf; dy++) {
      for (int dx = -kHalf; dx <= kHalf; dx++) {
        const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        w[static_cast<std::size_t>((dy + kHalf) * kWin + (dx + kHalf))] = g;
        total += g;
      }
    }
    for (auto& v : w) v /= total;
    return w;
  }();

  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  double acc = 0.0;
  std::size_t count = 0;
  for (int ch = 0; ch < 3; ch++) {
    for (int row = kHalf; row < a.height - kHalf; row++) {
      for (int col = kHalf; col < a.width - kHalf; col++) {
        double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
        for (int dy = -kHalf; dy <= kHalf; dy++) {
          for (int dx = -kHalf; dx <= kHalf; dx++) {
            const double w =
                weights[static_cast<std::size_t>((dy + kHalf) * kWin + (dx + kHalf))];
            const double va = a.at(row + dy, col + dx, ch);
            const double vb = b.at(row + dy, col + dx, ch);
            mu_a += w * va;
            mu_b += w * vb;
            aa += w * va * va;
            bb += w * vb * vb;
            ab += w * va * vb;
          }
        }
        const double var_a = aa - mu_a * mu_a;
        const double var_b = bb - mu_b * mu_b;
        const double cov = ab - mu_a * mu_b;
        acc += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
               ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        count++;
      }
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace incnerf::metrics
