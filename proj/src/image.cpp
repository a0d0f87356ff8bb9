#include "minutiae/image.hpp"

#include "minutiae/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace minutiae {

GrayImage::GrayImage(int width, int height, float fill) {
  require(width >= 0 && height >= 0, "GrayImage: negative dimensions");
  require(std::isfinite(fill) && fill >= 0.0f && fill <= 1.0f, "GrayImage: fill outside [0,1]");
  pixels_ = Plane::Constant(height, width, fill);
}

GrayImage::GrayImage(Plane pixels) : pixels_(std::move(pixels)) {
  require(pixels_.allFinite(), "GrayImage: non-finite intensity");
  if (pixels_.size() > 0) {
    require(pixels_.minCoeff() >= 0.0f && pixels_.maxCoeff() <= 1.0f,
            "GrayImage: intensity outside [0,1]");
  }
}

GrayImage GrayImage::clipped(Plane pixels) {
  pixels = pixels.unaryExpr([](float v) { return std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f; });
  return GrayImage(std::move(pixels));
}

Rect::Rect(double x, double y, double s) : x0(x), y0(y), side(s) {
  require(s > 0.0, "Rect: side must be positive");
}

double wrap_degrees(double degrees, double period) {
  double v = std::fmod(degrees, period);
  if (v < 0.0) v += period;
  // fmod of a tiny negative can round up to exactly `period`
  if (v >= period) v -= period;
  return v;
}

Angle::Angle(double degrees, double period) : period_(period) {
  require(period == 180.0 || period == 360.0, "Angle: period must be 180 or 360");
  require(std::isfinite(degrees), "Angle: non-finite value");
  value_ = wrap_degrees(degrees, period);
}

double Angle::radians() const { return value_ * std::numbers::pi / 180.0; }

double angular_diff(const Angle& a, const Angle& b) {
  require(a.period() == b.period(), "angular_diff: mismatched periods");
  const double d = std::abs(a.degrees() - b.degrees());
  return std::min(d, a.period() - d);
}

double iou(const Rect& a, const Rect& b) {
  const double w = std::min(a.x1(), b.x1()) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1(), b.y1()) - std::max(a.y0, b.y0);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  const double inter = w * h;
  return inter / (a.area() + b.area() - inter);
}

namespace {

float interpolate(const Plane& p, double x, double y) {
  const int w = static_cast<int>(p.cols());
  const int h = static_cast<int>(p.rows());
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = (1.0 - fx) * p(y0, x0) + fx * p(y0, x1);
  const double bottom = (1.0 - fx) * p(y1, x0) + fx * p(y1, x1);
  return static_cast<float>((1.0 - fy) * top + fy * bottom);
}

}  // namespace

float bilinear_sample(const GrayImage& img, double x, double y) {
  if (img.empty() || !(x >= 0.0 && x <= img.width() - 1) || !(y >= 0.0 && y <= img.height() - 1)) {
    throw std::out_of_range("bilinear_sample: coordinates outside image");
  }
  return interpolate(img.pixels(), x, y);
}

float sample_clamped(const Plane& plane, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(plane.cols() - 1));
  y = std::clamp(y, 0.0, static_cast<double>(plane.rows() - 1));
  return interpolate(plane, x, y);
}

GrayImage resize(const GrayImage& img, int new_width, int new_height) {
  if (new_width < 1 || new_height < 1) throw std::out_of_range("resize: zero target dimension");
  require(!img.empty(), "resize: empty image");
  if (new_width == img.width() && new_height == img.height()) return img;
  const double sx = new_width > 1 ? double(img.width() - 1) / (new_width - 1) : 0.0;
  const double sy = new_height > 1 ? double(img.height() - 1) / (new_height - 1) : 0.0;
  Plane out(new_height, new_width);
  for (int y = 0; y < new_height; ++y) {
    for (int x = 0; x < new_width; ++x) {
      out(y, x) = interpolate(img.pixels(), x * sx, y * sy);
    }
  }
  return GrayImage::clipped(std::move(out));
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
  std::string token;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
      if (!token.empty()) break;
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(c);
  }
  return token;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path.string());
  const std::string magic = next_token(in);
  if (magic != "P2" && magic != "P5") throw std::runtime_error("read_pgm: not a PGM file: " + path.string());
  int width = 0, height = 0, maxval = 0;
  try {
    width = std::stoi(next_token(in));
    height = std::stoi(next_token(in));
    maxval = std::stoi(next_token(in));
  } catch (const std::exception&) {
    throw std::runtime_error("read_pgm: malformed header in " + path.string());
  }
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255) {
    throw std::runtime_error("read_pgm: unsupported geometry or maxval in " + path.string());
  }
  Plane pixels(height, width);
  if (magic == "P5") {
    std::string buffer(static_cast<size_t>(width) * height, '\0');
    if (!in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()))) {
      throw std::runtime_error("read_pgm: truncated raster in " + path.string());
    }
    for (int i = 0; i < width * height; ++i) {
      pixels.data()[i] = static_cast<unsigned char>(buffer[i]) / static_cast<float>(maxval);
    }
  } else {
    for (int i = 0; i < width * height; ++i) {
      int v;
      if (!(in >> v) || v < 0 || v > maxval) throw std::runtime_error("read_pgm: bad sample in " + path.string());
      pixels.data()[i] = v / static_cast<float>(maxval);
    }
  }
  return GrayImage(std::move(pixels));
}

std::string encode_pgm(const GrayImage& img) {
  std::ostringstream out;
  out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  std::string raster(static_cast<size_t>(img.width()) * img.height(), '\0');
  for (size_t i = 0; i < raster.size(); ++i) {
    raster[i] = static_cast<char>(static_cast<unsigned char>(std::lround(img.pixels().data()[i] * 255.0f)));
  }
  out << raster;
  return out.str();
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path.string());
  const std::string bytes = encode_pgm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path.string());
}

}  // namespace minutiae
