#pragma once

#include "azgan/image.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace azgan {

/// Writes a binary 16-bit PGM (P5, maxval 65535, big-endian samples).
/// Pixels are quantized against `full_scale` (defaults to the image max);
/// the scale is kept in a header comment so read_pgm can restore intensities.
void write_pgm(const std::filesystem::path& path, const Image& pixels, double full_scale = 0.0);
Image read_pgm(const std::filesystem::path& path);

struct ManifestRow {
  std::string path;
  int class_id = 0;
  double azimuth_deg = 0.0;
  double depression_deg = 17.0;
  ImageSource source = ImageSource::kRendered;
};

/// CSV with header path,class_id,azimuth_deg,depression_deg,source; azimuths
/// carry four decimals.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

/// Splits one CSV line on commas (no quoting is used by any file here).
std::vector<std::string> split_csv_line(const std::string& line, char sep = ',');

/// Fixed-point formatting used by every CSV writer.
std::string format_fixed(double value, int decimals);

}  // namespace azgan
