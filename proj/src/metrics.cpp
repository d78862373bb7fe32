#include "azgan/metrics.hpp"

#include "azgan/errors.hpp"

#include <cmath>

namespace azgan {

namespace {

void same_shape(const Image& x, const Image& y, const char* op) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw ShapeError(std::string(op) + ": shapes " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                     " and " + std::to_string(y.rows()) + "x" + std::to_string(y.cols()) + " differ");
  }
}

template <typename A, typename B, typename W>
double weighted_ssim(const A& x, const B& y, const W& w, double c1, double c2) {
  const double mx = (w.array() * x.array()).sum();
  const double my = (w.array() * y.array()).sum();
  const double vx = (w.array() * (x.array() - mx).square()).sum();
  const double vy = (w.array() * (y.array() - my).square()).sum();
  const double cxy = (w.array() * (x.array() - mx) * (y.array() - my)).sum();
  return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
}

}  // namespace

void SsimConfig::validate() const {
  std::string problems;
  if (!(c1 > 0.0) || !(c2 > 0.0)) problems += "ssim constants must be positive; ";
  if (window < 1 || window_stride < 1) problems += "ssim window and stride must be positive; ";
  if (weights.size() > 0) {
    if (weights.rows() != window || weights.cols() != window) problems += "ssim weights must be window x window; ";
    if ((weights.array() < 0.0).any()) problems += "ssim weights must be nonnegative; ";
    if (std::abs(weights.sum() - 1.0) > 1e-12) problems += "ssim weights must sum to 1; ";
  }
  if (!problems.empty()) throw ValidationError(problems);
}

Image SsimConfig::effective_weights() const {
  if (weights.size() > 0) return weights;
  return Image::Constant(window, window, 1.0 / static_cast<double>(window * window));
}

double mse_raw(const Image& x, const Image& y) {
  same_shape(x, y, "mse");
  return (x - y).squaredNorm() / static_cast<double>(x.size());
}

double mse(const Image& x, const Image& y) {
  same_shape(x, y, "mse");
  return mse_raw(normalize_255(x).pixels / 255.0, normalize_255(y).pixels / 255.0);
}

double ssim(const Image& x, const Image& y, const SsimConfig& config) {
  same_shape(x, y, "ssim");
  const Image w = Image::Constant(x.rows(), x.cols(), 1.0 / static_cast<double>(x.size()));
  return weighted_ssim(x, y, w, config.c1, config.c2);
}

double mssim(const Image& x, const Image& y, const SsimConfig& config) {
  same_shape(x, y, "mssim");
  config.validate();
  if (config.window > x.rows() || config.window > x.cols()) {
    throw ShapeError("mssim: window " + std::to_string(config.window) + " exceeds image " + std::to_string(x.rows()) +
                     "x" + std::to_string(x.cols()));
  }
  const Image w = config.effective_weights();
  const Index k = config.window;
  double total = 0.0;
  Index blocks = 0;
  for (Index r = 0; r + k <= x.rows(); r += config.window_stride)
    for (Index c = 0; c + k <= x.cols(); c += config.window_stride) {
      total += weighted_ssim(x.block(r, c, k, k), y.block(r, c, k, k), w, config.c1, config.c2);
      ++blocks;
    }
  return total / static_cast<double>(blocks);
}

double azimuth_error_deg(const std::vector<double>& predicted, const std::vector<double>& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("azimuth_error_deg: length mismatch");
  if (predicted.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) total += circular_distance_deg(predicted[i], truth[i]);
  return total / static_cast<double>(predicted.size());
}

MetricsRecord compare_images(const Image& real, const Image& generated, const SsimConfig& config) {
  MetricsRecord m;
  const Image a = normalize_255(real).pixels;
  const Image b = normalize_255(generated).pixels;
  m.mse = mse_raw(a / 255.0, b / 255.0);
  m.ssim = ssim(a, b, config);
  m.mssim = mssim(a, b, config);
  return m;
}

}  // namespace azgan
