#ifndef MINUTIAE_MINUTIA_HPP_
#define MINUTIAE_MINUTIA_HPP_

#include "minutiae/image.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace minutiae {

enum class Provenance { ground_truth, coarse, fine };

struct Minutia {
  double x = 0.0;
  double y = 0.0;
  Angle direction = Angle::direction(0.0);
  double score = 1.0;
  Provenance provenance = Provenance::ground_truth;
};

/// Minutiae of one image. Locations lie in [0,width) x [0,height).
struct MinutiaSet {
  int width = 0;
  int height = 0;
  std::vector<Minutia> minutiae;

  size_t size() const { return minutiae.size(); }
  /// Throws ContractViolation if a location or score is out of range.
  void validate() const;
};

// "#minutiae-v1 width height count" followed by one "x y direction_deg score"
// line per minutia.
std::string encode_template(const MinutiaSet& set);
MinutiaSet decode_template(const std::string& text);
void write_template(const std::filesystem::path& path, const MinutiaSet& set);
MinutiaSet read_template(const std::filesystem::path& path);

}  // namespace minutiae

#endif  // MINUTIAE_MINUTIA_HPP_
