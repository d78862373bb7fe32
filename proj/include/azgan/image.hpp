#pragma once

#include <Eigen/Core>

#include <string>
#include <string_view>

namespace azgan {

using Index = Eigen::Index;

template <typename Scalar>
using ImageT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Image = ImageT<double>;

enum class ImageSource { kRendered, kGenerated, kChipped };

std::string_view to_string(ImageSource source);
ImageSource parse_image_source(std::string_view text);

/// Single-channel intensity image of a target with its label and azimuth.
struct LabeledImage {
  std::string id;
  Image pixels;
  double azimuth_deg = 0.0;
  int class_id = 0;
  double depression_deg = 17.0;
  ImageSource source = ImageSource::kRendered;
};

/// Wraps any angle into [0, 360).
double wrap_degrees(double deg);

/// Shortest angular distance in degrees, in [0, 180].
double circular_distance_deg(double a, double b);

/// Square crop of side `size` centred in `image`.
template <typename Derived>
auto center_crop(const Eigen::MatrixBase<Derived>& image, Eigen::Index size) {
  const Eigen::Index r0 = (image.rows() - size) / 2;
  const Eigen::Index c0 = (image.cols() - size) / 2;
  return image.block(r0, c0, size, size);
}

/// Affine map of an image onto [lo, hi] by its own min and max; constant
/// images map to `lo`.
template <typename Derived>
ImageT<typename Derived::Scalar> rescale_minmax(const Eigen::MatrixBase<Derived>& image,
                                                typename Derived::Scalar lo,
                                                typename Derived::Scalar hi) {
  using S = typename Derived::Scalar;
  const S mn = image.minCoeff();
  const S mx = image.maxCoeff();
  if (!(mx > mn)) return ImageT<S>::Constant(image.rows(), image.cols(), lo);
  return ((image.array() - mn) * ((hi - lo) / (mx - mn)) + lo).matrix();
}

}  // namespace azgan
