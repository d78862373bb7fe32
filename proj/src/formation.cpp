#include "azgan/formation.hpp"

#include "azgan/errors.hpp"
#include "azgan/io.hpp"
#include "azgan/random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

namespace azgan {

void FormationConfig::validate(int source_size) const {
  if (!(interval_deg > 0.0)) throw ValidationError("interval_deg must be positive");
  if (!(effective_tolerance() < interval_deg / 2.0)) throw ValidationError("tolerance_deg must be below interval_deg/2");
  if (chip_count < 1) throw ValidationError("chip_count must be positive");
  if (chip_size < 1 || chip_size > source_size) throw ValidationError("chip_size must not exceed the source size");
}

std::vector<Combination> form_combinations(const std::vector<double>& azimuths, double interval_deg,
                                           double tolerance_deg) {
  const std::size_t n = azimuths.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return azimuths[a] < azimuths[b]; });

  std::vector<char> consumed(n, 0);
  std::vector<Combination> out;
  std::size_t pos = 0;
  while (pos < n) {
    if (consumed[pos]) {
      ++pos;
      continue;
    }
    const double theta_k = azimuths[order[pos]];
    const double goal = theta_k + interval_deg;
    std::size_t best = n;
    for (std::size_t j = pos + 1; j < n; ++j) {
      const double a = azimuths[order[j]];
      if (consumed[j] || !(a > theta_k)) continue;
      if (best == n) {
        best = j;
        continue;
      }
      const double d = std::abs(a - goal);
      const double bd = std::abs(azimuths[order[best]] - goal);
      if (d < bd || (d == bd && a < azimuths[order[best]])) best = j;
    }
    if (best == n) break;

    const double mid = 0.5 * (theta_k + azimuths[order[best]]);
    std::vector<std::size_t> reals;
    for (std::size_t j = pos + 1; j < n; ++j) {
      if (j == best || consumed[j]) continue;
      if (std::abs(azimuths[order[j]] - mid) <= tolerance_deg) reals.push_back(j);
    }
    if (reals.empty()) {
      ++pos;
      continue;
    }
    Combination c;
    c.input_a = order[pos];
    c.input_b = order[best];
    c.target_azimuth_deg = mid;
    consumed[pos] = consumed[best] = 1;
    for (std::size_t j : reals) {
      consumed[j] = 1;
      c.reals.push_back(order[j]);
    }
    out.push_back(std::move(c));
    pos = best + 1;
  }
  return out;
}

std::vector<Combination> form_combinations(const std::vector<LabeledImage>& images, const FormationConfig& config) {
  if (images.size() < 3) throw InsufficientDataError("form_combinations needs at least 3 images, got " + std::to_string(images.size()));
  for (const auto& im : images) {
    if (im.class_id != images.front().class_id) throw ContractError("form_combinations expects a single class");
  }
  std::vector<double> az;
  az.reserve(images.size());
  for (const auto& im : images) az.push_back(im.azimuth_deg);
  return form_combinations(az, config.interval_deg, config.effective_tolerance());
}

Split split_train_test(const std::vector<LabeledImage>& images) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < images.size(); ++i) by_class[images[i].class_id].push_back(i);
  Split s;
  for (auto& [cls, idx] : by_class) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return images[a].azimuth_deg < images[b].azimuth_deg; });
    for (std::size_t k = 0; k < idx.size(); ++k) (k % 2 == 0 ? s.train : s.test).push_back(images[idx[k]]);
  }
  return s;
}

Box centered_box(int size, int extent) {
  const int lo = (size - extent) / 2;
  return {lo, lo, lo + extent, lo + extent};
}

OffsetRange admissible_offsets(int rows, int cols, int chip_size, const Box& box) {
  OffsetRange r;
  r.row_min = std::max(0, box.row1 - chip_size);
  r.row_max = std::min(box.row0, rows - chip_size);
  r.col_min = std::max(0, box.col1 - chip_size);
  r.col_max = std::min(box.col0, cols - chip_size);
  if (r.row_min > r.row_max || r.col_min > r.col_max) {
    throw ExtentError("chip of size " + std::to_string(chip_size) + " cannot contain the target box");
  }
  return r;
}

std::vector<LabeledImage> chip_augment(const LabeledImage& image, int count, int chip_size, const Box& box,
                                       std::uint64_t seed) {
  if (count < 1) throw ValidationError("chip count must be positive");
  const auto range = admissible_offsets(static_cast<int>(image.pixels.rows()), static_cast<int>(image.pixels.cols()),
                                        chip_size, box);
  Rng rng(seed);
  std::uniform_int_distribution<int> row(range.row_min, range.row_max);
  std::uniform_int_distribution<int> col(range.col_min, range.col_max);
  std::vector<LabeledImage> chips;
  chips.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int r0 = row(rng);
    const int c0 = col(rng);
    LabeledImage chip = image;
    chip.pixels = image.pixels.block(r0, c0, chip_size, chip_size);
    chip.id = image.id + "-chip" + std::to_string(i);
    chip.source = ImageSource::kChipped;
    chips.push_back(std::move(chip));
  }
  return chips;
}

void write_combinations(const std::filesystem::path& path, int class_id, const std::vector<Combination>& combos,
                        const std::vector<std::string>& paths, bool append) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const bool fresh = !append || !std::filesystem::exists(path);
  std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  if (fresh) out << "class_id,input_a_path,input_b_path,target_azimuth_deg,reals_paths\n";
  for (const auto& c : combos) {
    out << class_id << ',' << paths.at(c.input_a) << ',' << paths.at(c.input_b) << ','
        << format_fixed(c.target_azimuth_deg, 4) << ',';
    for (std::size_t i = 0; i < c.reals.size(); ++i) out << (i ? ";" : "") << paths.at(c.reals[i]);
    out << '\n';
  }
}

}  // namespace azgan
