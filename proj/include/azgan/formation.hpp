#pragma once

#include "azgan/image.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace azgan {

struct FormationConfig {
  double interval_deg = 5.0;
  /// Non-positive means interval_deg / 5.
  double tolerance_deg = 0.0;
  int chip_count = 10;
  int chip_size = 32;

  double effective_tolerance() const { return tolerance_deg > 0.0 ? tolerance_deg : interval_deg / 5.0; }
  void validate(int source_size) const;
};

/// Indices refer to the image list handed to form_combinations.
struct Combination {
  std::size_t input_a = 0;
  std::size_t input_b = 0;
  double target_azimuth_deg = 0.0;
  std::vector<std::size_t> reals;
};

/// Sweep over azimuths only; indices refer to `azimuths`.
///
/// Images are visited in azimuth order (stable for equal azimuths). Each
/// anchor x_k pairs with the later unconsumed image of strictly greater
/// azimuth closest to theta_k + delta (ties to the smaller azimuth). The
/// discriminator reals are the later unconsumed images within +-epsilon of
/// the midpoint. A formed combination consumes its images and the sweep
/// resumes after x_kf; an anchor without any midpoint real is dropped and the
/// sweep resumes at the next image.
std::vector<Combination> form_combinations(const std::vector<double>& azimuths, double interval_deg,
                                           double tolerance_deg);

/// Same as above for one class of images; throws InsufficientDataError for
/// fewer than 3 images and ContractError for mixed classes.
std::vector<Combination> form_combinations(const std::vector<LabeledImage>& images,
                                           const FormationConfig& config);

struct Split {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;
};

/// Per class, after sorting by azimuth: even positions train, odd test.
Split split_train_test(const std::vector<LabeledImage>& images);

/// Half-open pixel rectangle [row0,row1) x [col0,col1).
struct Box {
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;
};

/// Centred square of side `extent` inside a size x size image.
Box centered_box(int size, int extent);

struct OffsetRange {
  int row_min = 0, row_max = 0, col_min = 0, col_max = 0;  // inclusive
  int count() const { return (row_max - row_min + 1) * (col_max - col_min + 1); }
};

/// Top-left offsets keeping `box` inside a chip_size chip of a rows x cols
/// image; throws ExtentError if none exist.
OffsetRange admissible_offsets(int rows, int cols, int chip_size, const Box& box);

/// `count` random chips with uniformly drawn admissible offsets.
std::vector<LabeledImage> chip_augment(const LabeledImage& image, int count, int chip_size, const Box& box,
                                       std::uint64_t seed);

/// Writes the combinations CSV; `paths[i]` names image i.
void write_combinations(const std::filesystem::path& path, int class_id, const std::vector<Combination>& combos,
                        const std::vector<std::string>& paths, bool append);

}  // namespace azgan
