#ifndef MINUTIAE_IMAGE_HPP_
#define MINUTIAE_IMAGE_HPP_

#include <Eigen/Dense>

#include <filesystem>
#include <string>

namespace minutiae {

/// Row-major float raster. Row index is y, column index is x.
using Plane = Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Immutable grayscale image with intensities in [0,1].
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(int width, int height, float fill = 0.0f);
  /// Takes ownership of `pixels`; throws ContractViolation if any value is
  /// non-finite or outside [0,1].
  explicit GrayImage(Plane pixels);

  /// Clips to [0,1] instead of rejecting. Non-finite values become 0.
  static GrayImage clipped(Plane pixels);

  int width() const { return static_cast<int>(pixels_.cols()); }
  int height() const { return static_cast<int>(pixels_.rows()); }
  bool empty() const { return pixels_.size() == 0; }
  float operator()(int x, int y) const { return pixels_(y, x); }
  const Plane& pixels() const { return pixels_; }

  friend bool operator==(const GrayImage& a, const GrayImage& b) {
    return a.pixels_.rows() == b.pixels_.rows() && a.pixels_.cols() == b.pixels_.cols() &&
           (a.pixels_ == b.pixels_).all();
  }

 private:
  Plane pixels_;
};

/// Axis-aligned square region.
struct Rect {
  double x0 = 0.0;
  double y0 = 0.0;
  double side = 1.0;

  Rect() = default;
  Rect(double x, double y, double s);

  double x1() const { return x0 + side; }
  double y1() const { return y0 + side; }
  double area() const { return side * side; }
  bool contains(double x, double y) const { return x >= x0 && x <= x1() && y >= y0 && y <= y1(); }
  static Rect centered(double cx, double cy, double side) {
    return Rect(cx - side / 2, cy - side / 2, side);
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

/// Angle in degrees carrying its period: 180 for ridge orientation, 360 for
/// minutia direction. Values are wrapped into [0, period) on construction.
class Angle {
 public:
  Angle(double degrees, double period);

  static Angle orientation(double degrees) { return Angle(degrees, 180.0); }
  static Angle direction(double degrees) { return Angle(degrees, 360.0); }

  double degrees() const { return value_; }
  double radians() const;
  double period() const { return period_; }

  friend bool operator==(const Angle&, const Angle&) = default;

 private:
  double value_;
  double period_;
};

/// Wraps `degrees` into [0, period).
double wrap_degrees(double degrees, double period);

/// Smallest absolute difference between two angles of the same period.
double angular_diff(const Angle& a, const Angle& b);

double iou(const Rect& a, const Rect& b);

/// Bilinear interpolation; throws std::out_of_range outside the pixel grid.
float bilinear_sample(const GrayImage& img, double x, double y);

/// Bilinear interpolation on a raw plane with coordinates clamped to the grid.
float sample_clamped(const Plane& plane, double x, double y);

/// Bilinear resampling with pixel centres aligned on the image corners, so a
/// same-size resize is the identity.
GrayImage resize(const GrayImage& img, int new_width, int new_height);

/// Reflects an out-of-range index back into [0, n) (edge pixel not repeated).
int reflect_index(int i, int n);

/// Plain PGM (P2 or P5). Intensities are divided by maxval on load.
GrayImage read_pgm(const std::filesystem::path& path);
/// Writes binary P5 with maxval 255, rounding to the nearest level.
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
std::string encode_pgm(const GrayImage& img);

}  // namespace minutiae

#endif  // MINUTIAE_IMAGE_HPP_
