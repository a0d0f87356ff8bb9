#include "minutiae/domain.hpp"

#include "minutiae/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace minutiae {
namespace {

constexpr double kDegPerRad = 180.0 / std::numbers::pi;
constexpr double kDefaultFrequency = 1.0 / 8.0;

double deg2rad(double d) { return d / kDegPerRad; }

// Doubled-angle angle in [0,180) from a doubled-angle vector.
double half_angle_degrees(double vx, double vy) { return wrap_degrees(0.5 * std::atan2(vy, vx) * kDegPerRad, 180.0); }

struct GradientTensor {
  Plane gxx, gyy, gxy;
};

GradientTensor gradient_tensor(const Plane& p) {
  const int h = static_cast<int>(p.rows());
  const int w = static_cast<int>(p.cols());
  GradientTensor t{Plane::Zero(h, w), Plane::Zero(h, w), Plane::Zero(h, w)};
  auto at = [&](int x, int y) {
    return p(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1));
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float gx = (at(x + 1, y - 1) + 2 * at(x + 1, y) + at(x + 1, y + 1)) -
                       (at(x - 1, y - 1) + 2 * at(x - 1, y) + at(x - 1, y + 1));
      const float gy = (at(x - 1, y + 1) + 2 * at(x, y + 1) + at(x + 1, y + 1)) -
                       (at(x - 1, y - 1) + 2 * at(x, y - 1) + at(x + 1, y - 1));
      t.gxx(y, x) = gx * gx;
      t.gyy(y, x) = gy * gy;
      t.gxy(y, x) = gx * gy;
    }
  }
  return t;
}

// Sum over the pixel window [x0,x1) x [y0,y1) using an integral image.
class IntegralImage {
 public:
  explicit IntegralImage(const Plane& p) : sums_(Eigen::ArrayXXd::Zero(p.rows() + 1, p.cols() + 1)) {
    for (Eigen::Index y = 0; y < p.rows(); ++y) {
      double row = 0.0;
      for (Eigen::Index x = 0; x < p.cols(); ++x) {
        row += p(y, x);
        sums_(y + 1, x + 1) = sums_(y, x + 1) + row;
      }
    }
  }
  double sum(int x0, int y0, int x1, int y1) const {
    return sums_(y1, x1) - sums_(y0, x1) - sums_(y1, x0) + sums_(y0, x0);
  }

 private:
  Eigen::ArrayXXd sums_;
};

std::string format_value(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

struct ParsedGrid {
  BlockGrid grid;
  std::vector<double> values;
};

ParsedGrid read_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  ParsedGrid g;
  if (!(in >> g.grid.block_size >> g.grid.cols >> g.grid.rows) || g.grid.block_size <= 0 || g.grid.cols <= 0 ||
      g.grid.rows <= 0) {
    throw std::runtime_error("malformed grid header in " + path.string());
  }
  std::string token;
  while (in >> token) {
    double v = 0.0;
    auto res = std::from_chars(token.data(), token.data() + token.size(), v);
    if (res.ec != std::errc() || res.ptr != token.data() + token.size()) {
      throw std::runtime_error("malformed grid value in " + path.string());
    }
    g.values.push_back(v);
  }
  return g;
}

}  // namespace

BlockGrid BlockGrid::covering(int width, int height, int block_size) {
  require(block_size > 0, "BlockGrid: block size must be positive");
  return BlockGrid{block_size, (width + block_size - 1) / block_size, (height + block_size - 1) / block_size};
}

int BlockGrid::index_of_pixel(double x, double y) const {
  const int c = std::clamp(static_cast<int>(std::floor(x / block_size)), 0, cols - 1);
  const int r = std::clamp(static_cast<int>(std::floor(y / block_size)), 0, rows - 1);
  return index(c, r);
}

double SegmentationMask::foreground_fraction() const {
  if (prob.empty()) return 0.0;
  return static_cast<double>(std::count_if(prob.begin(), prob.end(), [](double p) { return p >= 0.5; })) /
         static_cast<double>(prob.size());
}

GrayImage normalize(const GrayImage& img, double target_mean, double target_var) {
  require(!img.empty(), "normalize: empty image");
  const double mean = img.pixels().cast<double>().mean();
  const double var = (img.pixels().cast<double>() - mean).square().mean();
  if (var <= 1e-20) return GrayImage(img.width(), img.height(), static_cast<float>(std::clamp(target_mean, 0.0, 1.0)));
  const double scale = std::sqrt(target_var / var);
  Plane out = ((img.pixels().cast<double>() - mean) * scale + target_mean).cast<float>();
  return GrayImage::clipped(std::move(out));
}

OrientationField estimate_orientation(const GrayImage& img, int block_size) {
  require(block_size >= 4, "estimate_orientation: block size must be at least 4");
  const int w = img.width(), h = img.height();
  OrientationField field;
  field.grid = BlockGrid::covering(w, h, block_size);
  const BlockGrid& grid = field.grid;
  const GradientTensor t = gradient_tensor(img.pixels());
  const IntegralImage sxx(t.gxx), syy(t.gyy), sxy(t.gxy);

  // Raw doubled-angle vectors per block.
  std::vector<double> vx(grid.size()), vy(grid.size()), energy(grid.size());

  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const int x0 = c * block_size, x1 = std::min(w, x0 + block_size);
      const int y0 = r * block_size, y1 = std::min(h, y0 + block_size);
      const double a = sxx.sum(x0, y0, x1, y1), b = syy.sum(x0, y0, x1, y1), d = sxy.sum(x0, y0, x1, y1);
      const int i = grid.index(c, r);
      vx[i] = a - b;
      vy[i] = 2.0 * d;
      energy[i] = a + b;
    }
  }

  // Neighbour smoothing of the doubled-angle field: the block itself weighs
  // 16, edge neighbours 2 and corner neighbours 1.
  field.theta.assign(grid.size(), 0.0);
  field.coherence.assign(grid.size(), 0.0);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      double sx = 0, sy = 0, se = 0;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || rr >= grid.rows || cc < 0 || cc >= grid.cols) continue;
          const double wgt = (dr == 0 && dc == 0) ? 16.0 : (2 - std::abs(dr)) * (2 - std::abs(dc));
          const int j = grid.index(cc, rr);
          sx += wgt * vx[j];
          sy += wgt * vy[j];
          se += wgt * energy[j];
        }
      }
      const int i = grid.index(c, r);
      if (se <= 1e-12) continue;
      // gradient doubled angle is opposite to the ridge doubled angle
      field.theta[i] = wrap_degrees(90.0 + half_angle_degrees(sx, sy), 180.0);
      field.coherence[i] = std::clamp(std::hypot(sx, sy) / se, 0.0, 1.0);
    }
  }
  return field;
}

double segment_probability(double relative_variance, double block_coherence, const SegmentParams& params) {
  const double log_term = std::log(std::max(relative_variance, 1e-12) / params.variance_midpoint);
  const double z = params.variance_slope * log_term + params.coherence_slope * (block_coherence - params.coherence_midpoint);
  return 1.0 / (1.0 + std::exp(-z));
}

SegmentationMask segment(const GrayImage& img, int block_size, const SegmentParams& params) {
  require(block_size >= 4, "segment: block size must be at least 4");
  const OrientationField orient = estimate_orientation(img, block_size);
  SegmentationMask mask;
  mask.grid = orient.grid;
  const BlockGrid& grid = mask.grid;
  std::vector<double> variance(grid.size());
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const int x0 = c * block_size, x1 = std::min(img.width(), x0 + block_size);
      const int y0 = r * block_size, y1 = std::min(img.height(), y0 + block_size);
      const auto block = img.pixels().block(y0, x0, y1 - y0, x1 - x0).cast<double>();
      variance[grid.index(c, r)] = (block - block.mean()).square().mean();
    }
  }
  std::vector<double> sorted = variance;
  const size_t rank = std::min(sorted.size() - 1, static_cast<size_t>(params.reference_quantile * (sorted.size() - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(rank), sorted.end());
  const double reference = std::max(sorted[rank], params.reference_floor);
  mask.prob.resize(grid.size());
  for (int i = 0; i < grid.size(); ++i) {
    mask.prob[i] = segment_probability(variance[i] / reference, orient.coherence[i], params);
  }

  // 3x3 closing of the thresholded grid, computed on a grid padded with
  // background so that only enclosed gaps are filled.
  const int pc = grid.cols + 4, pr = grid.rows + 4;
  std::vector<char> fg(pc * pr, 0), dilated(pc * pr, 0);
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) fg[(r + 2) * pc + c + 2] = mask.prob[grid.index(c, r)] >= 0.5;
  for (int r = 1; r < pr - 1; ++r)
    for (int c = 1; c < pc - 1; ++c) {
      char any = 0;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) any |= fg[(r + dr) * pc + c + dc];
      dilated[r * pc + c] = any;
    }
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      char all = 1;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) all &= dilated[(r + 2 + dr) * pc + c + 2 + dc];
      double& p = mask.prob[grid.index(c, r)];
      if (all && p < 0.5) p = 0.5;
    }
  return mask;
}

FrequencyMap estimate_frequency(const GrayImage& img, const OrientationField& orient) {
  require(orient.grid == BlockGrid::covering(img.width(), img.height(), orient.grid.block_size),
          "estimate_frequency: orientation grid does not cover the image");
  const BlockGrid& grid = orient.grid;
  const int bs = grid.block_size;
  FrequencyMap map{grid, std::vector<double>(grid.size(), 0.0), std::vector<bool>(grid.size(), false)};
  const int length = 2 * bs;
  const int width = bs;
  std::vector<double> sig(length), smooth(length);
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const int i = grid.index(c, r);
      const double cx = c * bs + bs / 2.0 - 0.5, cy = r * bs + bs / 2.0 - 0.5;
      const double t = deg2rad(orient.theta[i]);
      const double dx = std::cos(t), dy = std::sin(t);  // along ridges
      const double nx = -dy, ny = dx;                   // across ridges
      for (int k = 0; k < length; ++k) {
        double acc = 0.0;
        const double s = k - length / 2.0 + 0.5;
        for (int m = 0; m < width; ++m) {
          const double q = m - width / 2.0 + 0.5;
          acc += sample_clamped(img.pixels(), cx + s * nx + q * dx, cy + s * ny + q * dy);
        }
        sig[k] = acc / width;
      }
      for (int k = 0; k < length; ++k) {
        const double a = sig[std::max(k - 1, 0)], b = sig[k], d = sig[std::min(k + 1, length - 1)];
        smooth[k] = 0.25 * a + 0.5 * b + 0.25 * d;
      }
      const auto [lo, hi] = std::minmax_element(smooth.begin(), smooth.end());
      if (*hi - *lo < 0.02) continue;
      // the block itself must oscillate, not just its surroundings
      const auto [clo, chi] = std::minmax_element(smooth.begin() + length / 4 + 1, smooth.end() - length / 4 - 1);
      if (*chi - *clo < 0.02) continue;
      double mean = 0.0;
      for (double v : smooth) mean += v;
      mean /= length;
      // one peak per complete above-mean run
      std::vector<int> peaks;
      int k = 0;
      while (k < length) {
        if (smooth[k] <= mean) {
          ++k;
          continue;
        }
        const int start = k;
        int best = k;
        while (k < length && smooth[k] > mean) {
          if (smooth[k] > smooth[best]) best = k;
          ++k;
        }
        if (start > 0 && k < length) peaks.push_back(best);
      }
      if (peaks.size() < 2) continue;
      const double wavelength = double(peaks.back() - peaks.front()) / double(peaks.size() - 1);
      if (wavelength < kMinWavelength || wavelength > kMaxWavelength) continue;
      map.frequency[i] = 1.0 / wavelength;
      map.valid[i] = true;
    }
  }

  // fill invalid blocks from known neighbours, growing outward
  std::vector<bool> known = map.valid;
  if (std::none_of(known.begin(), known.end(), [](bool b) { return b; })) {
    std::fill(map.frequency.begin(), map.frequency.end(), kDefaultFrequency);
    return map;
  }
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<bool> next = known;
    for (int r = 0; r < grid.rows; ++r) {
      for (int c = 0; c < grid.cols; ++c) {
        const int i = grid.index(c, r);
        if (known[i]) continue;
        double acc = 0.0;
        int n = 0;
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const int rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= grid.rows || cc < 0 || cc >= grid.cols) continue;
            const int j = grid.index(cc, rr);
            if (known[j]) {
              acc += map.frequency[j];
              ++n;
            }
          }
        if (n > 0) {
          map.frequency[i] = acc / n;
          next[i] = true;
          changed = true;
        }
      }
    }
    known = std::move(next);
  }
  return map;
}

GrayImage gabor_enhance(const GrayImage& img, const OrientationField& orient, const FrequencyMap& freq) {
  const BlockGrid expected = BlockGrid::covering(img.width(), img.height(), orient.grid.block_size);
  require(orient.grid == expected && freq.grid == expected, "gabor_enhance: grids do not cover the image");
  const BlockGrid& grid = orient.grid;
  const int w = img.width(), h = img.height();
  const Plane& src = img.pixels();
  Eigen::ArrayXXd response = Eigen::ArrayXXd::Zero(h, w);

  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const int i = grid.index(c, r);
      const double f = std::clamp(freq.frequency[i], 1.0 / kMaxWavelength, 1.0 / kMinWavelength);
      const double sigma = 0.5 / f;
      const int radius = static_cast<int>(std::ceil(2.5 * sigma));
      const int side = 2 * radius + 1;
      const double t = deg2rad(orient.theta[i]);
      const double nx = -std::sin(t), ny = std::cos(t);
      Eigen::ArrayXXd envelope(side, side), kernel(side, side);
      for (int v = -radius; v <= radius; ++v) {
        for (int u = -radius; u <= radius; ++u) {
          const double g = std::exp(-(u * u + v * v) / (2 * sigma * sigma));
          envelope(v + radius, u + radius) = g;
          kernel(v + radius, u + radius) = g * std::cos(2 * std::numbers::pi * f * (u * nx + v * ny));
        }
      }
      // remove the DC response so flat regions map to zero
      kernel -= envelope * (kernel.sum() / envelope.sum());
      kernel /= kernel.abs().sum();

      const int x0 = c * grid.block_size, x1 = std::min(w, x0 + grid.block_size);
      const int y0 = r * grid.block_size, y1 = std::min(h, y0 + grid.block_size);
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          double acc = 0.0;
          for (int v = -radius; v <= radius; ++v) {
            const int yy = reflect_index(y + v, h);
            for (int u = -radius; u <= radius; ++u) {
              acc += kernel(v + radius, u + radius) * src(yy, reflect_index(x + u, w));
            }
          }
          response(y, x) = acc;
        }
      }
    }
  }
  const double peak = response.abs().maxCoeff();
  if (peak < 1e-9) return GrayImage(w, h, 0.5f);
  Plane out = (0.5 + 0.5 * response / peak).cast<float>();
  return GrayImage::clipped(std::move(out));
}

EnhancementStack build_stack(const GrayImage& raw, const GrayImage& enhanced, const OrientationField& orient,
                             const SegmentationMask& seg) {
  require(raw.width() == enhanced.width() && raw.height() == enhanced.height(),
          "build_stack: raw and enhanced dimensions differ");
  const BlockGrid expected = BlockGrid::covering(raw.width(), raw.height(), orient.grid.block_size);
  require(orient.grid == expected && seg.grid == expected, "build_stack: block grids do not cover the image");
  const int w = raw.width(), h = raw.height();
  EnhancementStack stack;
  stack.width = w;
  stack.height = h;
  for (Plane& p : stack.channels) p = Plane::Zero(h, w);
  stack.channels[EnhancementStack::raw] = raw.pixels();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = orient.grid.index_of_pixel(x, y);
      const double doubled = deg2rad(2.0 * orient.theta[i]);
      const double p = seg.prob[i];
      stack.channels[EnhancementStack::enhanced](y, x) = static_cast<float>(enhanced(x, y) * p);
      stack.channels[EnhancementStack::orientation_sin](y, x) = static_cast<float>(0.5 * (std::sin(doubled) + 1.0));
      stack.channels[EnhancementStack::orientation_cos](y, x) = static_cast<float>(0.5 * (std::cos(doubled) + 1.0));
      stack.channels[EnhancementStack::segmentation](y, x) = static_cast<float>(p);
    }
  }
  return stack;
}

OrientationField fuse_orientation(const OrientationField& handcrafted, const OrientationField& network,
                                  double handcrafted_weight, double network_weight) {
  require(handcrafted.grid == network.grid, "fuse_orientation: grid mismatch");
  require(handcrafted_weight >= 0 && network_weight >= 0 && handcrafted_weight + network_weight > 0,
          "fuse_orientation: invalid weights");
  if (network_weight == 0.0) return handcrafted;
  if (handcrafted_weight == 0.0) return network;
  const double total = handcrafted_weight + network_weight;
  const double wh = handcrafted_weight / total, wn = network_weight / total;
  OrientationField out;
  out.grid = handcrafted.grid;
  out.theta.resize(out.grid.size());
  out.coherence.resize(out.grid.size());
  for (int i = 0; i < out.grid.size(); ++i) {
    const double a = deg2rad(2 * handcrafted.theta[i]), b = deg2rad(2 * network.theta[i]);
    const double vx = wh * std::cos(a) + wn * std::cos(b);
    const double vy = wh * std::sin(a) + wn * std::sin(b);
    out.theta[i] = half_angle_degrees(vx, vy);
    out.coherence[i] = std::clamp(std::hypot(vx, vy), 0.0, 1.0);
  }
  return out;
}

Preprocessed preprocess(const GrayImage& img, int block_size) {
  Preprocessed p;
  p.normalized = normalize(img, 0.5, 0.04);
  p.orientation = estimate_orientation(p.normalized, block_size);
  p.mask = segment(img, block_size);
  p.frequency = estimate_frequency(p.normalized, p.orientation);
  p.enhanced = gabor_enhance(p.normalized, p.orientation, p.frequency);
  p.stack = build_stack(p.normalized, p.enhanced, p.orientation, p.mask);
  return p;
}

std::string encode_grid(const BlockGrid& grid, const std::vector<double>& values) {
  std::ostringstream out;
  out << grid.block_size << ' ' << grid.cols << ' ' << grid.rows << '\n';
  for (size_t i = 0; i < values.size(); ++i) {
    out << format_value(values[i]) << ((i + 1) % static_cast<size_t>(grid.cols) == 0 ? '\n' : ' ');
  }
  return out.str();
}

void write_orientation(const std::filesystem::path& path, const OrientationField& field) {
  // theta grid followed by the coherence grid
  std::string text = encode_grid(field.grid, field.theta);
  const std::string coh = encode_grid(field.grid, field.coherence);
  text += coh.substr(coh.find('\n') + 1);
  write_text(path, text);
}

OrientationField read_orientation(const std::filesystem::path& path) {
  ParsedGrid g = read_grid(path);
  const size_t n = static_cast<size_t>(g.grid.size());
  if (g.values.size() != n && g.values.size() != 2 * n) {
    throw std::runtime_error("orientation grid has wrong value count: " + path.string());
  }
  OrientationField f;
  f.grid = g.grid;
  f.theta.assign(g.values.begin(), g.values.begin() + static_cast<std::ptrdiff_t>(n));
  if (g.values.size() == 2 * n) {
    f.coherence.assign(g.values.begin() + static_cast<std::ptrdiff_t>(n), g.values.end());
  } else {
    f.coherence.assign(n, 1.0);
  }
  for (double t : f.theta) {
    if (!(t >= 0.0 && t < 180.0)) throw std::runtime_error("orientation outside [0,180): " + path.string());
  }
  return f;
}

void write_mask(const std::filesystem::path& path, const SegmentationMask& mask) {
  write_text(path, encode_grid(mask.grid, mask.prob));
}

SegmentationMask read_mask(const std::filesystem::path& path) {
  ParsedGrid g = read_grid(path);
  if (g.values.size() != static_cast<size_t>(g.grid.size())) {
    throw std::runtime_error("mask grid has wrong value count: " + path.string());
  }
  for (double p : g.values) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::runtime_error("mask probability outside [0,1]: " + path.string());
  }
  return SegmentationMask{g.grid, std::move(g.values)};
}

}  // namespace minutiae
