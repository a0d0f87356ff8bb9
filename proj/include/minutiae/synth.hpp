#ifndef MINUTIAE_SYNTH_HPP_
#define MINUTIAE_SYNTH_HPP_

#include "minutiae/domain.hpp"
#include "minutiae/minutia.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace minutiae {

enum class PatternKind { random, arch, whorl };

struct SynthParams {
  std::uint64_t seed = 1;
  int width = 128;
  int height = 128;
  double wavelength_min = 7.0;  // pixels
  double wavelength_max = 10.0;
  int minutiae_min = 8;
  int minutiae_max = 14;
  double min_separation = 16.0;
  PatternKind pattern = PatternKind::random;
  double core_jitter = 0.1;  // fraction of the image size
  double amplitude_min = 0.3;
  double amplitude_max = 0.45;
  double noise_level = 0.15;  // corpus augmentation: upper bound of noise stdev
  double distortion = 3.0;    // corpus augmentation: upper bound of displacement in pixels
  int creases_max = 3;        // corpus augmentation: upper bound of creases per print

  /// Throws ContractViolation when a field is out of range.
  void validate() const;
};

struct LabeledPrint {
  GrayImage image;
  MinutiaSet gt;
  OrientationField gt_orientation;
  SegmentationMask gt_mask;
  // Dense labels behind gt_orientation and gt_mask: per-pixel doubled-angle
  // ridge tangent (cos, sin) and soft finger support. Empty planes are
  // rebuilt from the block labels when needed.
  Plane flow_cos;
  Plane flow_sin;
  Plane support;
  int requested = 0;           // minutiae asked for
  bool count_reduced = false;  // placement was too crowded for `requested`
};

bool operator==(const LabeledPrint& a, const LabeledPrint& b);

LabeledPrint generate(const SynthParams& params);

/// Smooth backward displacement field: the output pixel x shows the input at
/// x - w(x), so content moves by +w.
class DisplacementField {
 public:
  static DisplacementField translation(double dx, double dy);
  /// Sum of low-frequency plane waves with |w| <= magnitude everywhere.
  static DisplacementField random(double magnitude, int width, int height, std::mt19937_64& rng);

  Eigen::Vector2d at(double x, double y) const;
  Eigen::Matrix2d jacobian(double x, double y) const;
  bool is_zero() const;

 private:
  struct Wave {
    double ax, ay, kx, ky, phase;
  };
  Eigen::Vector2d offset_ = Eigen::Vector2d::Zero();
  std::vector<Wave> waves_;
};

LabeledPrint distort(const LabeledPrint& lp, const DisplacementField& field);
LabeledPrint distort(const LabeledPrint& lp, double magnitude, std::mt19937_64& rng);

/// Additive Gaussian noise with standard deviation `level`, clipped to [0,1].
LabeledPrint add_noise(const LabeledPrint& lp, double level, std::mt19937_64& rng);

/// Paints `count` straight ridge-free bands (creases) across the finger at
/// the mean foreground intensity. Ground truth is unchanged.
LabeledPrint add_creases(const LabeledPrint& lp, int count, std::mt19937_64& rng);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

struct CorpusEntry {
  std::string id;
  std::string split;  // train or test
  std::uint64_t seed = 0;
  size_t count = 0;
  std::string checksum;
  friend bool operator==(const CorpusEntry&, const CorpusEntry&) = default;
};

struct CorpusItem {
  std::string id;
  GrayImage image;
  MinutiaSet gt;
  OrientationField gt_orientation;
  SegmentationMask gt_mask;
};

/// Seed of print `index` in `split`; train and test draw from separate streams.
std::uint64_t derive_seed(std::uint64_t master, std::string_view split, int index);

/// Writes dir/{train,test}/img_####.{pgm,min,orient,mask} and dir/manifest.tsv.
/// `params.seed` is the master seed.
std::vector<CorpusEntry> build_corpus(const std::filesystem::path& dir, int n_train, int n_test,
                                      const SynthParams& params);
std::vector<CorpusEntry> read_manifest(const std::filesystem::path& dir);
std::vector<CorpusItem> load_split(const std::filesystem::path& dir, std::string_view split);

}  // namespace minutiae

#endif  // MINUTIAE_SYNTH_HPP_
