#include "azgan/io.hpp"

#include "azgan/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace azgan {

std::string format_fixed(double value, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
  std::string s = buf;
  if (s.rfind("-0.", 0) == 0 && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

void write_pgm(const std::filesystem::path& path, const Image& pixels, double full_scale) {
  if (full_scale <= 0.0) full_scale = pixels.size() > 0 ? pixels.maxCoeff() : 0.0;
  if (full_scale <= 0.0) full_scale = 1.0;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  char scale_text[64];
  std::snprintf(scale_text, sizeof scale_text, "%.17g", full_scale);
  out << "P5\n# scale " << scale_text << "\n" << pixels.cols() << ' ' << pixels.rows() << "\n65535\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(pixels.size()) * 2);
  for (Eigen::Index i = 0; i < pixels.size(); ++i) {
    const double v = std::clamp(pixels.data()[i] / full_scale, 0.0, 1.0);
    const auto q = static_cast<unsigned>(std::lround(v * 65535.0));
    bytes[static_cast<std::size_t>(2 * i)] = static_cast<unsigned char>(q >> 8);
    bytes[static_cast<std::size_t>(2 * i + 1)] = static_cast<unsigned char>(q & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

namespace {

// Next whitespace-delimited header token, collecting "# scale" comments.
std::string next_token(std::istream& in, double& scale) {
  std::string tok;
  while (in) {
    int ch = in.peek();
    if (ch == '#') {
      std::string comment;
      std::getline(in, comment);
      std::istringstream cs(comment.substr(1));
      std::string key;
      double v = 0;
      if (cs >> key >> v && key == "scale") scale = v;
      continue;
    }
    if (std::isspace(ch)) {
      in.get();
      if (!tok.empty()) return tok;
      continue;
    }
    if (ch == EOF) break;
    tok.push_back(static_cast<char>(in.get()));
  }
  return tok;
}

}  // namespace

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  double scale = 1.0;
  if (next_token(in, scale) != "P5") throw FormatError(path.string() + ": not a binary PGM");
  const int w = std::stoi(next_token(in, scale));
  const int h = std::stoi(next_token(in, scale));
  const int maxval = std::stoi(next_token(in, scale));
  if (w <= 0 || h <= 0 || maxval != 65535) throw FormatError(path.string() + ": unsupported PGM header");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 2);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError(path.string() + ": truncated");
  Image img(h, w);
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const unsigned q = (static_cast<unsigned>(bytes[static_cast<std::size_t>(2 * i)]) << 8) |
                       bytes[static_cast<std::size_t>(2 * i + 1)];
    img.data()[i] = q / 65535.0 * scale;
  }
  return img;
}

std::vector<std::string> split_csv_line(const std::string& line, char sep) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRow>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "path,class_id,azimuth_deg,depression_deg,source\n";
  for (const auto& r : rows) {
    out << r.path << ',' << r.class_id << ',' << format_fixed(r.azimuth_deg, 4) << ','
        << format_fixed(r.depression_deg, 4) << ',' << to_string(r.source) << '\n';
  }
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("path,class_id,azimuth_deg", 0) != 0) throw FormatError(path.string() + ": bad manifest header");
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw FormatError(path.string() + ": expected 5 columns in '" + line + "'");
    rows.push_back({f[0], std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), parse_image_source(f[4])});
  }
  return rows;
}

}  // namespace azgan
