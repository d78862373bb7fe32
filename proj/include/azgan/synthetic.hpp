#pragma once

#include "azgan/image.hpp"

#include <cstdint>
#include <vector>

namespace azgan {

/// One point-like reflector, splatted as an anisotropic Gaussian lobe.
struct Scatterer {
  double offset_x = 0.0;  // pixels from the image centre, at azimuth 0
  double offset_y = 0.0;
  double amplitude = 1.0;
  double anisotropy = 1.0;  // major/minor lobe width ratio, >= 1
  double orientation_deg = 0.0;
};

struct TargetClassSpec {
  int class_id = 0;
  std::vector<Scatterer> scatterers;
  double lobe_sigma = 1.0;
  /// Side of the centred square that holds the target at every azimuth.
  int base_extent = 0;
};

/// Side of the centred square covering every scatterer centre at any azimuth
/// plus a lobe margin.
int required_extent(const TargetClassSpec& spec);

/// Validates a spec (at least three scatterers, positive amplitudes,
/// anisotropy >= 1); throws ValidationError.
void validate(const TargetClassSpec& spec);

/// Deterministic catalogue of `count` elongated asymmetric layouts.
std::vector<TargetClassSpec> default_class_specs(int count);

/// Pairwise distance signature of a layout; equal for layouts related by a
/// pure rotation.
std::vector<double> rotation_signature(const TargetClassSpec& spec);

struct Rendering {
  LabeledImage image;  // speckled
  Image noise_free;
};

/// Renders `spec` rotated by `azimuth_deg` into a size x size image and
/// applies mean-one gamma speckle with shape `speckle_looks`.
Rendering render_target(const TargetClassSpec& spec, double azimuth_deg, int size,
                        std::uint64_t speckle_seed, int speckle_looks);

/// Noise-free layer only.
Image render_noise_free(const TargetClassSpec& spec, double azimuth_deg, int size);

struct DatasetOptions {
  double azimuth_step_deg = 1.2;
  double jitter_deg = 0.5;
  int size = 40;
  int speckle_looks = 4;
  std::uint64_t seed = 7;
};

/// Images at azimuths k*step + jitter (mod 360) for each class, sorted by
/// class then k.
std::vector<LabeledImage> build_dataset(const std::vector<TargetClassSpec>& specs,
                                        const DatasetOptions& options);

}  // namespace azgan
