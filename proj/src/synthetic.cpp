#include "azgan/synthetic.hpp"

#include "azgan/errors.hpp"
#include "azgan/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace azgan {

std::string_view to_string(ImageSource source) {
  switch (source) {
    case ImageSource::kRendered:
      return "rendered";
    case ImageSource::kGenerated:
      return "generated";
    case ImageSource::kChipped:
      return "chipped";
  }
  return "rendered";
}

ImageSource parse_image_source(std::string_view text) {
  if (text == "rendered") return ImageSource::kRendered;
  if (text == "generated") return ImageSource::kGenerated;
  if (text == "chipped") return ImageSource::kChipped;
  throw FormatError("unknown image source '" + std::string(text) + "'");
}

double wrap_degrees(double deg) {
  double w = std::fmod(deg, 360.0);
  if (w < 0.0) w += 360.0;
  if (w >= 360.0) w = 0.0;
  return w;
}

double circular_distance_deg(double a, double b) {
  const double d = std::abs(wrap_degrees(a) - wrap_degrees(b));
  return std::min(d, 360.0 - d);
}

int required_extent(const TargetClassSpec& spec) {
  double r = 0.0;
  for (const auto& s : spec.scatterers) r = std::max(r, std::hypot(s.offset_x, s.offset_y));
  return 2 * static_cast<int>(std::ceil(r + 2.0 * spec.lobe_sigma));
}

void validate(const TargetClassSpec& spec) {
  std::string problems;
  if (spec.scatterers.size() < 3) problems += "class " + std::to_string(spec.class_id) + ": fewer than 3 scatterers; ";
  for (const auto& s : spec.scatterers) {
    if (!(s.amplitude > 0.0)) problems += "non-positive amplitude; ";
    if (!(s.anisotropy >= 1.0)) problems += "anisotropy below 1; ";
  }
  if (!(spec.lobe_sigma > 0.0)) problems += "non-positive lobe sigma; ";
  if (spec.base_extent < required_extent(spec)) problems += "base_extent smaller than the layout; ";
  if (!problems.empty()) throw ValidationError(problems);
}

std::vector<TargetClassSpec> default_class_specs(int count) {
  std::vector<TargetClassSpec> specs;
  for (int c = 0; c < count; ++c) {
    Rng rng(derive_seed(0x5A12, static_cast<std::uint64_t>(c)));
    std::uniform_real_distribution<double> along(-6.0, 6.0);
    std::uniform_real_distribution<double> across(-2.5, 2.5);
    std::uniform_real_distribution<double> amp(0.4, 1.0);
    std::uniform_real_distribution<double> aniso(1.0, 2.2);
    std::uniform_real_distribution<double> orient(0.0, 180.0);
    TargetClassSpec spec;
    spec.class_id = c;
    spec.lobe_sigma = 1.0;
    const int n = 4 + c % 3;
    for (int i = 0; i < n; ++i) {
      spec.scatterers.push_back({along(rng), across(rng), amp(rng), aniso(rng), orient(rng)});
    }
    // one dominant off-centre return breaks any 180 degree symmetry
    spec.scatterers.push_back({4.5 - 1.5 * (c % 4), 1.5, 1.6, 1.0, 0.0});
    spec.base_extent = required_extent(spec);
    specs.push_back(std::move(spec));
  }
  return specs;
}

std::vector<double> rotation_signature(const TargetClassSpec& spec) {
  std::vector<double> sig;
  const auto& s = spec.scatterers;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = i + 1; j < s.size(); ++j) {
      sig.push_back(std::hypot(s[i].offset_x - s[j].offset_x, s[i].offset_y - s[j].offset_y));
    }
  }
  std::sort(sig.begin(), sig.end());
  return sig;
}

Image render_noise_free(const TargetClassSpec& spec, double azimuth_deg, int size) {
  if (size < spec.base_extent + 4) {
    throw ExtentError("render size " + std::to_string(size) + " cannot hold target extent " +
                      std::to_string(spec.base_extent) + " plus margin 4");
  }
  constexpr double kDeg = std::numbers::pi / 180.0;
  const double theta = azimuth_deg * kDeg;
  const double ct = std::cos(theta);
  const double st = std::sin(theta);
  const double centre = (size - 1) / 2.0;
  Image img = Image::Zero(size, size);
  for (const auto& s : spec.scatterers) {
    const double px = centre + s.offset_x * ct - s.offset_y * st;
    const double py = centre + s.offset_x * st + s.offset_y * ct;
    const double phi = s.orientation_deg * kDeg + theta;
    const double cp = std::cos(phi);
    const double sp = std::sin(phi);
    const double major = spec.lobe_sigma * s.anisotropy;
    const double minor = spec.lobe_sigma;
    for (int r = 0; r < size; ++r) {
      const double dy = r - py;
      for (int q = 0; q < size; ++q) {
        const double dx = q - px;
        const double u = dx * cp + dy * sp;
        const double v = -dx * sp + dy * cp;
        img(r, q) += s.amplitude * std::exp(-0.5 * (u * u / (major * major) + v * v / (minor * minor)));
      }
    }
  }
  return img;
}

Rendering render_target(const TargetClassSpec& spec, double azimuth_deg, int size,
                        std::uint64_t speckle_seed, int speckle_looks) {
  if (speckle_looks < 1) throw ValidationError("speckle_looks must be positive");
  Rendering out;
  out.noise_free = render_noise_free(spec, azimuth_deg, size);
  Rng rng(speckle_seed);
  std::gamma_distribution<double> speckle(speckle_looks, 1.0 / speckle_looks);
  out.image.pixels = out.noise_free;
  for (Eigen::Index i = 0; i < out.image.pixels.size(); ++i) out.image.pixels.data()[i] *= speckle(rng);
  out.image.azimuth_deg = wrap_degrees(azimuth_deg);
  out.image.class_id = spec.class_id;
  out.image.source = ImageSource::kRendered;
  return out;
}

std::vector<LabeledImage> build_dataset(const std::vector<TargetClassSpec>& specs,
                                        const DatasetOptions& options) {
  if (!(options.azimuth_step_deg > 0.0)) throw ValidationError("azimuth_step_deg must be positive");
  const int per_class = static_cast<int>(std::floor(360.0 / options.azimuth_step_deg + 1e-9));
  std::vector<LabeledImage> images;
  images.reserve(specs.size() * static_cast<std::size_t>(per_class));
  for (const auto& spec : specs) {
    Rng jitter_rng(derive_seed(options.seed, 1000003ULL + static_cast<std::uint64_t>(spec.class_id)));
    std::uniform_real_distribution<double> jitter(-options.jitter_deg, options.jitter_deg);
    for (int k = 0; k < per_class; ++k) {
      const double j = options.jitter_deg > 0.0 ? jitter(jitter_rng) : 0.0;
      const double az = wrap_degrees(k * options.azimuth_step_deg + j);
      const std::uint64_t stream = static_cast<std::uint64_t>(spec.class_id) * 100000ULL + static_cast<std::uint64_t>(k);
      Rendering r = render_target(spec, az, options.size, derive_seed(options.seed, stream), options.speckle_looks);
      char id[32];
      std::snprintf(id, sizeof id, "c%d-%04d", spec.class_id, k);
      r.image.id = id;
      images.push_back(std::move(r.image));
    }
  }
  return images;
}

}  // namespace azgan
