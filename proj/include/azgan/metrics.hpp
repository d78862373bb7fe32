#pragma once

#include "azgan/image.hpp"

#include <string>
#include <vector>

namespace azgan {

struct Normalized {
  Image pixels;
  bool degenerate = false;  // constant input, mapped to zeros
};

/// Affine map sending min to 0 and max to 255.
template <typename Derived>
Normalized normalize_255(const Eigen::MatrixBase<Derived>& image) {
  Normalized out;
  const double mn = image.minCoeff(), mx = image.maxCoeff();
  out.degenerate = !(mx > mn);
  out.pixels = out.degenerate ? Image::Zero(image.rows(), image.cols()) : rescale_minmax(image.template cast<double>(), 0.0, 255.0);
  return out;
}

struct SsimConfig {
  double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  Index window = 8;
  Index window_stride = 4;
  /// window x window weights summing to 1; empty means uniform.
  Image weights;

  void validate() const;
  Image effective_weights() const;
};

/// Mean squared difference of two equally shaped images (no normalization).
double mse_raw(const Image& x, const Image& y);

/// Both images through normalize_255, scaled by 1/255, then mse_raw.
double mse(const Image& x, const Image& y);

/// Global-statistics SSIM of two images given on a common scale.
double ssim(const Image& x, const Image& y, const SsimConfig& config = {});

/// Mean of weighted per-window SSIM values over a strided sliding window.
double mssim(const Image& x, const Image& y, const SsimConfig& config = {});

/// Mean circular distance in degrees between paired azimuths.
double azimuth_error_deg(const std::vector<double>& predicted, const std::vector<double>& truth);

struct MetricsRecord {
  std::string real_id;
  std::string generated_id;
  double mse = 0.0;
  double ssim = 0.0;
  double mssim = 0.0;
  double azimuth_error_deg = 0.0;
};

/// mse on normalized pixels, ssim/mssim on normalize_255 pixels.
MetricsRecord compare_images(const Image& real, const Image& generated, const SsimConfig& config = {});

}  // namespace azgan
