#ifndef MINUTIAE_DOMAIN_HPP_
#define MINUTIAE_DOMAIN_HPP_

#include "minutiae/image.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace minutiae {

/// Row-major block grid with a fixed block size in pixels.
struct BlockGrid {
  int block_size = 16;
  int cols = 0;
  int rows = 0;

  static BlockGrid covering(int width, int height, int block_size);
  int size() const { return cols * rows; }
  int index(int col, int row) const { return row * cols + col; }
  /// Block containing pixel (x, y), clamped to the grid.
  int index_of_pixel(double x, double y) const;
  friend bool operator==(const BlockGrid&, const BlockGrid&) = default;
};

/// Block-wise ridge orientation in [0,180) degrees plus coherence in [0,1].
/// Angles are measured in pixel coordinates (x right, y down).
struct OrientationField {
  BlockGrid grid;
  std::vector<double> theta;
  std::vector<double> coherence;

  Angle at(int col, int row) const { return Angle::orientation(theta[grid.index(col, row)]); }
  Angle at_pixel(double x, double y) const { return Angle::orientation(theta[grid.index_of_pixel(x, y)]); }
};

struct SegmentationMask {
  BlockGrid grid;
  std::vector<double> prob;

  bool foreground_at_pixel(double x, double y) const { return prob[grid.index_of_pixel(x, y)] >= 0.5; }
  double foreground_fraction() const;
};

struct FrequencyMap {
  BlockGrid grid;
  std::vector<double> frequency;  // cycles per pixel
  std::vector<bool> valid;        // measured directly (not interpolated)
};

/// Network input channels, all at full image resolution.
struct EnhancementStack {
  enum Channel { raw = 0, enhanced = 1, orientation_sin = 2, orientation_cos = 3, segmentation = 4 };
  static constexpr int kChannels = 5;

  int width = 0;
  int height = 0;
  std::array<Plane, kChannels> channels;
};

inline constexpr double kMinWavelength = 3.0;
inline constexpr double kMaxWavelength = 25.0;

/// Affine map to the target global mean and variance, clipped to [0,1].
GrayImage normalize(const GrayImage& img, double target_mean, double target_var);

/// Gradient-tensor orientation estimate with doubled-angle smoothing.
OrientationField estimate_orientation(const GrayImage& img, int block_size = 16);

struct SegmentParams {
  // Block variance is measured relative to a reference: the given quantile
  // of all block variances in the image, but never below the floor.
  double reference_quantile = 0.9;
  double reference_floor = 0.004;
  double variance_midpoint = 0.5;  // relative variance at which the variance term is neutral
  double variance_slope = 6.0;     // per unit of log relative variance
  double coherence_midpoint = 0.6;
  double coherence_slope = 8.0;
};

/// Logistic foreground probability from relative block variance and
/// coherence, followed by a 3x3 closing of the thresholded grid.
SegmentationMask segment(const GrayImage& img, int block_size = 16, const SegmentParams& params = {});
/// The logistic score alone, exposed for monotonicity checks.
double segment_probability(double relative_variance, double block_coherence, const SegmentParams& params = {});

FrequencyMap estimate_frequency(const GrayImage& img, const OrientationField& orient);

/// Even-symmetric Gabor filtering steered by the block orientation and
/// frequency; output mapped to [0,1] around 0.5.
GrayImage gabor_enhance(const GrayImage& img, const OrientationField& orient, const FrequencyMap& freq);

EnhancementStack build_stack(const GrayImage& raw, const GrayImage& enhanced, const OrientationField& orient,
                             const SegmentationMask& seg);

/// Weighted doubled-angle average; `handcrafted_weight : network_weight`
/// defaults to 1:3.
OrientationField fuse_orientation(const OrientationField& handcrafted, const OrientationField& network,
                                  double handcrafted_weight = 1.0, double network_weight = 3.0);

/// Everything the coarse network consumes, computed from one image.
struct Preprocessed {
  GrayImage normalized;
  OrientationField orientation;
  SegmentationMask mask;
  FrequencyMap frequency;
  GrayImage enhanced;
  EnhancementStack stack;
};

Preprocessed preprocess(const GrayImage& img, int block_size = 16);

// Text grid format: "block_size cols rows" header, then row-major values.
void write_orientation(const std::filesystem::path& path, const OrientationField& field);
OrientationField read_orientation(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const SegmentationMask& mask);
SegmentationMask read_mask(const std::filesystem::path& path);
std::string encode_grid(const BlockGrid& grid, const std::vector<double>& values);

}  // namespace minutiae

#endif  // MINUTIAE_DOMAIN_HPP_
