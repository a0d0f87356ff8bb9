#include "minutiae/synth.hpp"

#include "minutiae/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace minutiae {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kDegPerRad = 180.0 / kPi;

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Smooth ridge-flow phase without minutiae.
struct Carrier {
  PatternKind kind = PatternKind::arch;
  double k = 1.0;  // radians per pixel
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  Eigen::Vector2d normal = Eigen::Vector2d::UnitY();
  Eigen::Vector2d tangent = Eigen::Vector2d::UnitX();
  double curvature = 0.0;
  double scale = 128.0;
  double ellipticity = 1.0;
  double offset = 0.0;

  double phase(double x, double y) const {
    const Eigen::Vector2d d(x - center.x(), y - center.y());
    if (kind == PatternKind::whorl) return k * std::hypot(d.x(), d.y() / ellipticity) + offset;
    const double u = d.dot(normal), v = d.dot(tangent);
    return k * (u + curvature * v * v / scale) + offset;
  }

  Eigen::Vector2d gradient(double x, double y) const {
    const Eigen::Vector2d d(x - center.x(), y - center.y());
    if (kind == PatternKind::whorl) {
      const double rho = std::hypot(d.x(), d.y() / ellipticity);
      if (rho < 1e-9) return Eigen::Vector2d::Zero();
      return k * Eigen::Vector2d(d.x(), d.y() / (ellipticity * ellipticity)) / rho;
    }
    const double v = d.dot(tangent);
    return k * (normal + 2.0 * curvature * v / scale * tangent);
  }

  // Ridge orientation in degrees, [0,180).
  double orientation(double x, double y) const {
    const Eigen::Vector2d g = gradient(x, y);
    return wrap_degrees(std::atan2(g.y(), g.x()) * kDegPerRad + 90.0, 180.0);
  }
};

struct Spiral {
  double x, y, polarity;
};

double full_phase(const Carrier& carrier, const std::vector<Spiral>& spirals, double x, double y) {
  double psi = carrier.phase(x, y);
  for (const Spiral& s : spirals) psi += s.polarity * std::atan2(y - s.y, x - s.x);
  return psi;
}

Eigen::Vector2d full_gradient(const Carrier& carrier, const std::vector<Spiral>& spirals, double x, double y) {
  Eigen::Vector2d g = carrier.gradient(x, y);
  for (const Spiral& s : spirals) {
    const double dx = x - s.x, dy = y - s.y, r2 = dx * dx + dy * dy;
    if (r2 > 1e-12) g += s.polarity * Eigen::Vector2d(-dy, dx) / r2;
  }
  return g;
}

// Soft elliptical finger support.
struct Support {
  Eigen::Vector2d center;
  double a = 1, b = 1;
  double at(double x, double y) const {
    const double rho = std::hypot((x - center.x()) / a, (y - center.y()) / b);
    const double t = std::clamp((1.1 - rho) / 0.2, 0.0, 1.0);
    return t * t * (3 - 2 * t);
  }
};

struct Flow {
  Plane cos2, sin2;
};

template <typename GradientFn>
Flow dense_flow(GradientFn gradient, int w, int h) {
  Flow f{Plane::Zero(h, w), Plane::Zero(h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector2d g = gradient(x, y);
      const double n2 = g.squaredNorm();
      if (n2 < 1e-24) continue;
      // the ridge tangent is normal to the phase gradient, so its doubled
      // angle is opposite to the gradient's
      f.cos2(y, x) = static_cast<float>(-(g.x() * g.x() - g.y() * g.y()) / n2);
      f.sin2(y, x) = static_cast<float>(-2.0 * g.x() * g.y() / n2);
    }
  }
  return f;
}

OrientationField block_orientation(const Plane& cos2, const Plane& sin2, int block) {
  const int h = static_cast<int>(cos2.rows()), w = static_cast<int>(cos2.cols());
  OrientationField f;
  f.grid = BlockGrid::covering(w, h, block);
  f.theta.assign(f.grid.size(), 0.0);
  f.coherence.assign(f.grid.size(), 0.0);
  for (int r = 0; r < f.grid.rows; ++r) {
    for (int c = 0; c < f.grid.cols; ++c) {
      const int x0 = c * block, y0 = r * block;
      const int bw = std::min(w, x0 + block) - x0, bh = std::min(h, y0 + block) - y0;
      const double sx = cos2.block(y0, x0, bh, bw).cast<double>().sum();
      const double sy = sin2.block(y0, x0, bh, bw).cast<double>().sum();
      const int i = f.grid.index(c, r);
      f.theta[i] = wrap_degrees(0.5 * std::atan2(sy, sx) * kDegPerRad, 180.0);
      f.coherence[i] = std::clamp(std::hypot(sx, sy) / (bw * bh), 0.0, 1.0);
    }
  }
  return f;
}

// A block is foreground when its mean support reaches one half.
SegmentationMask block_mask(const Plane& support, int block) {
  const int h = static_cast<int>(support.rows()), w = static_cast<int>(support.cols());
  SegmentationMask m;
  m.grid = BlockGrid::covering(w, h, block);
  m.prob.assign(m.grid.size(), 0.0);
  for (int r = 0; r < m.grid.rows; ++r) {
    for (int c = 0; c < m.grid.cols; ++c) {
      const int x0 = c * block, y0 = r * block;
      const int bw = std::min(w, x0 + block) - x0, bh = std::min(h, y0 + block) - y0;
      m.prob[m.grid.index(c, r)] = support.block(y0, x0, bh, bw).cast<double>().mean() >= 0.5 ? 1.0 : 0.0;
    }
  }
  return m;
}

// Net phase across a segment normal to the ridges, centred at p.
double phase_span(const Carrier& carrier, const std::vector<Spiral>& spirals, const Eigen::Vector2d& p,
                  const Eigen::Vector2d& n, double half_length) {
  constexpr int kSteps = 80;
  double acc = 0.0;
  const double du = 2.0 * half_length / kSteps;
  for (int i = 0; i < kSteps; ++i) {
    const Eigen::Vector2d q = p + (-half_length + (i + 0.5) * du) * n;
    acc += full_gradient(carrier, spirals, q.x(), q.y()).dot(n) * du;
  }
  return acc;
}

// Direction of the minutia at spiral `s`: along the ridge, toward the side
// that carries the extra ridge.
double spiral_direction(const Carrier& carrier, const std::vector<Spiral>& spirals, const Spiral& s) {
  const double theta = carrier.orientation(s.x, s.y) / kDegPerRad;
  const Eigen::Vector2d t(std::cos(theta), std::sin(theta)), n(-std::sin(theta), std::cos(theta));
  const Eigen::Vector2d p(s.x, s.y);
  const double ahead = std::abs(phase_span(carrier, spirals, p + 5.0 * t, n, 10.0));
  const double behind = std::abs(phase_span(carrier, spirals, p - 5.0 * t, n, 10.0));
  const double deg = theta * kDegPerRad;
  return ahead >= behind ? deg : deg + 180.0;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Ridge orientation in radians, interpolated bilinearly between block
// centres in doubled-angle space.
double interpolated_orientation(const OrientationField& f, double x, double y) {
  const int bs = f.grid.block_size;
  const double gx = std::clamp(x / bs - 0.5, 0.0, f.grid.cols - 1.0);
  const double gy = std::clamp(y / bs - 0.5, 0.0, f.grid.rows - 1.0);
  const int c0 = std::min(static_cast<int>(gx), f.grid.cols - 1), r0 = std::min(static_cast<int>(gy), f.grid.rows - 1);
  const int c1 = std::min(c0 + 1, f.grid.cols - 1), r1 = std::min(r0 + 1, f.grid.rows - 1);
  const double fx = gx - c0, fy = gy - r0;
  double vx = 0, vy = 0;
  auto add = [&](int c, int r, double wgt) {
    const double a = 2.0 * f.theta[static_cast<size_t>(f.grid.index(c, r))] / kDegPerRad;
    vx += wgt * std::cos(a);
    vy += wgt * std::sin(a);
  };
  add(c0, r0, (1 - fx) * (1 - fy));
  add(c1, r0, fx * (1 - fy));
  add(c0, r1, (1 - fx) * fy);
  add(c1, r1, fx * fy);
  return 0.5 * std::atan2(vy, vx);
}

Eigen::Vector2d transport_point(const DisplacementField& field, const Eigen::Vector2d& src) {
  // solve x = src + w(x)
  Eigen::Vector2d x = src + field.at(src.x(), src.y());
  for (int i = 0; i < 50; ++i) {
    const Eigen::Vector2d next = src + field.at(x.x(), x.y());
    if ((next - x).norm() < 1e-10) return next;
    x = next;
  }
  return x;
}

}  // namespace

void SynthParams::validate() const {
  require(width >= 32 && height >= 32, "SynthParams: image must be at least 32x32");
  require(wavelength_min >= 4.0 && wavelength_max <= 16.0 && wavelength_min <= wavelength_max,
          "SynthParams: wavelength range must lie in [4,16]");
  require(minutiae_min >= 1 && minutiae_min <= minutiae_max, "SynthParams: minutiae count must be at least 1");
  require(min_separation > 0.0, "SynthParams: min_separation must be positive");
  require(amplitude_min > 0.0 && amplitude_min <= amplitude_max && amplitude_max <= 0.5,
          "SynthParams: amplitude range must lie in (0,0.5]");
  require(noise_level >= 0.0 && noise_level <= 1.0, "SynthParams: noise level must lie in [0,1]");
  require(distortion >= 0.0, "SynthParams: distortion must be nonnegative");
  require(creases_max >= 0, "SynthParams: creases_max must be nonnegative");
  require(core_jitter >= 0.0 && core_jitter <= 0.3, "SynthParams: core jitter must lie in [0,0.3]");
}

bool operator==(const LabeledPrint& a, const LabeledPrint& b) {
  if (!(a.image == b.image) || a.requested != b.requested || a.count_reduced != b.count_reduced) return false;
  if (a.gt.width != b.gt.width || a.gt.height != b.gt.height || a.gt.size() != b.gt.size()) return false;
  for (size_t i = 0; i < a.gt.size(); ++i) {
    const Minutia &p = a.gt.minutiae[i], &q = b.gt.minutiae[i];
    if (p.x != q.x || p.y != q.y || p.direction.degrees() != q.direction.degrees() || p.score != q.score) return false;
  }
  if (!(a.flow_cos.rows() == b.flow_cos.rows() && a.flow_cos.cols() == b.flow_cos.cols() &&
        (a.flow_cos == b.flow_cos).all() && (a.flow_sin == b.flow_sin).all() && a.support.rows() == b.support.rows() &&
        a.support.cols() == b.support.cols() && (a.support == b.support).all())) {
    return false;
  }
  return a.gt_orientation.grid == b.gt_orientation.grid && a.gt_orientation.theta == b.gt_orientation.theta &&
         a.gt_orientation.coherence == b.gt_orientation.coherence && a.gt_mask.grid == b.gt_mask.grid &&
         a.gt_mask.prob == b.gt_mask.prob;
}

LabeledPrint generate(const SynthParams& params) {
  params.validate();
  std::mt19937_64 rng(params.seed);
  const int w = params.width, h = params.height;
  constexpr int kBlock = 16;

  Carrier carrier;
  PatternKind kind = params.pattern;
  if (kind == PatternKind::random) kind = uniform(rng, 0, 1) < 0.5 ? PatternKind::arch : PatternKind::whorl;
  carrier.kind = kind;
  carrier.k = 2 * kPi / uniform(rng, params.wavelength_min, params.wavelength_max);
  carrier.center = Eigen::Vector2d(w * (0.5 + uniform(rng, -params.core_jitter, params.core_jitter)),
                                   h * (0.5 + uniform(rng, -params.core_jitter, params.core_jitter)));
  const double tilt = uniform(rng, -0.6, 0.6);
  carrier.normal = Eigen::Vector2d(std::sin(tilt), std::cos(tilt));
  carrier.tangent = Eigen::Vector2d(std::cos(tilt), -std::sin(tilt));
  carrier.curvature = uniform(rng, 0.3, 0.8);
  carrier.scale = std::max(w, h);
  carrier.ellipticity = uniform(rng, 1.0, 1.3);
  carrier.offset = uniform(rng, 0, 2 * kPi);

  Support support;
  support.center = Eigen::Vector2d(w * (0.5 + uniform(rng, -0.04, 0.04)), h * (0.5 + uniform(rng, -0.04, 0.04)));
  support.a = w * uniform(rng, 0.36, 0.46);
  support.b = h * uniform(rng, 0.40, 0.48);
  const double background = uniform(rng, 0.45, 0.55);
  const double amplitude = uniform(rng, params.amplitude_min, params.amplitude_max);

  LabeledPrint lp;
  {
    const Flow flow = dense_flow([&](double x, double y) { return carrier.gradient(x, y); }, w, h);
    lp.gt_orientation = block_orientation(flow.cos2, flow.sin2, kBlock);
  }
  lp.support = Plane(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) lp.support(y, x) = static_cast<float>(support.at(x, y));
  lp.gt_mask = block_mask(lp.support, kBlock);
  lp.requested = std::uniform_int_distribution<int>(params.minutiae_min, params.minutiae_max)(rng);
  std::vector<Spiral> spirals;
  double polarity = uniform(rng, 0, 1) < 0.5 ? 1.0 : -1.0;
  const OrientationField carrier_field = lp.gt_orientation;
  auto fill = [&] {
    constexpr int kAttempts = 400;
    while (static_cast<int>(spirals.size()) < lp.requested) {
      bool placed = false;
      for (int attempt = 0; attempt < kAttempts && !placed; ++attempt) {
        const double x = uniform(rng, 8.0, w - 8.0), y = uniform(rng, 8.0, h - 8.0);
        if (support.at(x, y) < 0.95 || !lp.gt_mask.foreground_at_pixel(x, y)) continue;
        if (kind == PatternKind::whorl && std::hypot(x - carrier.center.x(), y - carrier.center.y()) < 20.0) continue;
        if (carrier.gradient(x, y).norm() < 0.5 * carrier.k) continue;
        if (angular_diff(Angle::orientation(carrier.orientation(x, y)), carrier_field.at_pixel(x, y)) > 8.0) continue;
        bool crowded = false;
        for (const Spiral& sp : spirals) crowded = crowded || std::hypot(sp.x - x, sp.y - y) < params.min_separation;
        if (crowded) continue;
        spirals.push_back({x, y, polarity});
        polarity = -polarity;
        placed = true;
      }
      if (!placed) return;
    }
  };
  // The ground-truth field includes the ridge bending around each minutia,
  // which can pull a block away from the minutia's own direction; such
  // minutiae are replaced.
  auto refresh_field = [&] {
    Flow flow = dense_flow([&](double x, double y) { return full_gradient(carrier, spirals, x, y); }, w, h);
    lp.gt_orientation = block_orientation(flow.cos2, flow.sin2, kBlock);
    lp.flow_cos = std::move(flow.cos2);
    lp.flow_sin = std::move(flow.sin2);
    const size_t before = spirals.size();
    std::erase_if(spirals, [&](const Spiral& sp) {
      const Angle own = Angle::orientation(carrier.orientation(sp.x, sp.y));
      // every block within reach of a small warp must agree with the direction
      for (double dy : {-4.0, 0.0, 4.0})
        for (double dx : {-4.0, 0.0, 4.0})
          if (angular_diff(own, lp.gt_orientation.at_pixel(sp.x + dx, sp.y + dy)) > 10.0) return true;
      return false;
    });
    return spirals.size() != before;
  };
  constexpr int kRounds = 30;
  for (int round = 0; round < kRounds; ++round) {
    fill();
    if (!refresh_field()) break;
  }
  while (refresh_field()) {
  }
  lp.count_reduced = static_cast<int>(spirals.size()) < lp.requested;
  Plane pixels(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      pixels(y, x) = static_cast<float>(background + amplitude * support.at(x, y) * std::cos(full_phase(carrier, spirals, x, y)));
  lp.image = GrayImage::clipped(std::move(pixels));

  lp.gt.width = w;
  lp.gt.height = h;
  for (const Spiral& s : spirals) {
    lp.gt.minutiae.push_back(
        Minutia{s.x, s.y, Angle::direction(spiral_direction(carrier, spirals, s)), 1.0, Provenance::ground_truth});
  }
  return lp;
}

DisplacementField DisplacementField::translation(double dx, double dy) {
  DisplacementField f;
  f.offset_ = Eigen::Vector2d(dx, dy);
  return f;
}

DisplacementField DisplacementField::random(double magnitude, int width, int height, std::mt19937_64& rng) {
  require(magnitude >= 0.0, "DisplacementField: magnitude must be nonnegative");
  DisplacementField f;
  if (magnitude == 0.0) return f;
  constexpr int kWaves = 3;
  const double extent = std::max(width, height);
  std::vector<double> ax(kWaves), ay(kWaves);
  double sx = 0, sy = 0;
  for (int i = 0; i < kWaves; ++i) {
    ax[i] = uniform(rng, -1, 1);
    ay[i] = uniform(rng, -1, 1);
    sx += std::abs(ax[i]);
    sy += std::abs(ay[i]);
  }
  for (int i = 0; i < kWaves; ++i) {
    const double wavelength = extent * uniform(rng, 0.75, 1.5);
    const double dir = uniform(rng, 0, 2 * kPi);
    const double k = 2 * kPi / wavelength;
    f.waves_.push_back({magnitude * ax[i] / (sx * std::sqrt(2.0)), magnitude * ay[i] / (sy * std::sqrt(2.0)),
                        k * std::cos(dir), k * std::sin(dir), uniform(rng, 0, 2 * kPi)});
  }
  return f;
}

Eigen::Vector2d DisplacementField::at(double x, double y) const {
  Eigen::Vector2d d = offset_;
  for (const Wave& wv : waves_) {
    const double s = std::sin(wv.kx * x + wv.ky * y + wv.phase);
    d += Eigen::Vector2d(wv.ax * s, wv.ay * s);
  }
  return d;
}

Eigen::Matrix2d DisplacementField::jacobian(double x, double y) const {
  Eigen::Matrix2d j = Eigen::Matrix2d::Zero();
  for (const Wave& wv : waves_) {
    const double c = std::cos(wv.kx * x + wv.ky * y + wv.phase);
    j(0, 0) += wv.ax * c * wv.kx;
    j(0, 1) += wv.ax * c * wv.ky;
    j(1, 0) += wv.ay * c * wv.kx;
    j(1, 1) += wv.ay * c * wv.ky;
  }
  return j;
}

bool DisplacementField::is_zero() const { return offset_.isZero(0.0) && waves_.empty(); }

LabeledPrint distort(const LabeledPrint& lp, const DisplacementField& field) {
  if (field.is_zero()) return lp;
  const int w = lp.image.width(), h = lp.image.height();
  LabeledPrint out;
  out.requested = lp.requested;
  out.count_reduced = lp.count_reduced;

  Plane pixels(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector2d src = Eigen::Vector2d(x, y) - field.at(x, y);
      pixels(y, x) = sample_clamped(lp.image.pixels(), src.x(), src.y());
    }
  }
  out.image = GrayImage::clipped(std::move(pixels));

  // Dense labels: pull each output pixel's source label and map the ridge
  // tangent forward with (I - dw)^-1, the Jacobian of the forward map.
  Plane src_cos = lp.flow_cos, src_sin = lp.flow_sin, src_support = lp.support;
  const BlockGrid grid = lp.gt_orientation.grid;
  if (src_cos.size() == 0 || src_support.size() == 0) {
    src_cos = src_sin = src_support = Plane::Zero(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int i = grid.index_of_pixel(x, y);
        const double a = 2.0 * lp.gt_orientation.theta[static_cast<size_t>(i)] / kDegPerRad;
        src_cos(y, x) = static_cast<float>(std::cos(a));
        src_sin(y, x) = static_cast<float>(std::sin(a));
        src_support(y, x) = static_cast<float>(lp.gt_mask.prob[static_cast<size_t>(i)]);
      }
    }
  }
  out.flow_cos = out.flow_sin = out.support = Plane::Zero(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector2d src = Eigen::Vector2d(x, y) - field.at(x, y);
      const bool inside = src.x() >= 0 && src.y() >= 0 && src.x() <= w - 1 && src.y() <= h - 1;
      out.support(y, x) = inside ? sample_clamped(src_support, src.x(), src.y()) : 0.0f;
      const double c2 = sample_clamped(src_cos, src.x(), src.y()), s2 = sample_clamped(src_sin, src.x(), src.y());
      if (c2 * c2 + s2 * s2 < 1e-12) continue;
      const double t = 0.5 * std::atan2(s2, c2);
      const Eigen::Matrix2d jf = (Eigen::Matrix2d::Identity() - field.jacobian(x, y)).inverse();
      const Eigen::Vector2d tangent = jf * Eigen::Vector2d(std::cos(t), std::sin(t));
      const double a = 2.0 * std::atan2(tangent.y(), tangent.x());
      out.flow_cos(y, x) = static_cast<float>(std::cos(a));
      out.flow_sin(y, x) = static_cast<float>(std::sin(a));
    }
  }
  out.gt_orientation = block_orientation(out.flow_cos, out.flow_sin, grid.block_size);
  out.gt_mask = block_mask(out.support, grid.block_size);

  out.gt.width = w;
  out.gt.height = h;
  for (const Minutia& m : lp.gt.minutiae) {
    const Eigen::Vector2d x = transport_point(field, Eigen::Vector2d(m.x, m.y));
    if (!(x.x() >= 0 && x.y() >= 0 && x.x() < w && x.y() < h)) continue;
    if (!out.gt_mask.foreground_at_pixel(x.x(), x.y())) continue;
    const Eigen::Matrix2d jf = (Eigen::Matrix2d::Identity() - field.jacobian(x.x(), x.y())).inverse();
    const double a = m.direction.radians();
    const Eigen::Vector2d d = jf * Eigen::Vector2d(std::cos(a), std::sin(a));
    Minutia moved = m;
    moved.x = x.x();
    moved.y = x.y();
    moved.direction = Angle::direction(std::atan2(d.y(), d.x()) * kDegPerRad);
    out.gt.minutiae.push_back(moved);
  }
  return out;
}

LabeledPrint distort(const LabeledPrint& lp, double magnitude, std::mt19937_64& rng) {
  require(magnitude >= 0.0, "distort: magnitude must be nonnegative");
  if (magnitude == 0.0) return lp;
  return distort(lp, DisplacementField::random(magnitude, lp.image.width(), lp.image.height(), rng));
}

LabeledPrint add_noise(const LabeledPrint& lp, double level, std::mt19937_64& rng) {
  require(level >= 0.0 && level <= 1.0, "add_noise: level must lie in [0,1]");
  if (level == 0.0) return lp;
  LabeledPrint out = lp;
  std::normal_distribution<double> noise(0.0, level);
  Plane pixels = lp.image.pixels();
  for (Eigen::Index i = 0; i < pixels.size(); ++i) pixels.data()[i] = static_cast<float>(pixels.data()[i] + noise(rng));
  out.image = GrayImage::clipped(std::move(pixels));
  return out;
}

LabeledPrint add_creases(const LabeledPrint& lp, int count, std::mt19937_64& rng) {
  require(count >= 0, "add_creases: count must be nonnegative");
  if (count == 0) return lp;
  const int w = lp.image.width(), h = lp.image.height();
  const Plane support = lp.support.size() > 0 ? lp.support : Plane::Ones(h, w);
  const Plane& img = lp.image.pixels();
  double level = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    if (support.data()[i] < 0.5) continue;
    level += img.data()[i];
    ++n;
  }
  level = n > 0 ? level / n : 0.5;

  LabeledPrint out = lp;
  Plane pixels = img;
  for (int k = 0; k < count; ++k) {
    double cx = 0, cy = 0;
    for (int attempt = 0; attempt < 50; ++attempt) {
      cx = uniform(rng, 0, w - 1);
      cy = uniform(rng, 0, h - 1);
      if (support(static_cast<int>(cy), static_cast<int>(cx)) > 0.8) break;
    }
    const double angle = uniform(rng, 0, kPi);
    const double half_len = 0.5 * uniform(rng, 0.3, 0.8) * std::min(w, h);
    const double half_width = uniform(rng, 0.8, 2.0);
    const Eigen::Vector2d t(std::cos(angle), std::sin(angle));
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Eigen::Vector2d d(x - cx, y - cy);
        const double along = std::clamp(d.dot(t), -half_len, half_len);
        const double dist = (d - along * t).norm();
        const double a = std::clamp(half_width + 1.0 - dist, 0.0, 1.0);
        if (a > 0.0) pixels(y, x) = static_cast<float>((1.0 - a) * pixels(y, x) + a * level);
      }
    }
  }
  out.image = GrayImage::clipped(std::move(pixels));
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<size_t>(i)] = kDigits[v & 0xf];
  return s;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view split, int index) {
  const std::uint64_t stream = split == "train" ? 1 : split == "test" ? 2 : 3 + fnv1a64(split);
  return splitmix64(splitmix64(master) ^ splitmix64((stream << 40) ^ static_cast<std::uint64_t>(index)));
}

std::vector<CorpusEntry> build_corpus(const std::filesystem::path& dir, int n_train, int n_test,
                                      const SynthParams& params) {
  require(n_train >= 1 && n_test >= 1, "build_corpus: split sizes must be at least 1");
  params.validate();
  std::vector<CorpusEntry> entries;
  for (const auto& [split, count] : {std::pair<std::string, int>{"train", n_train}, {"test", n_test}}) {
    const std::filesystem::path sub = dir / split;
    std::error_code ec;
    std::filesystem::create_directories(sub, ec);
    if (ec) throw std::runtime_error("cannot create " + sub.string() + ": " + ec.message());
    for (int i = 0; i < count; ++i) {
      SynthParams p = params;
      p.seed = derive_seed(params.seed, split, i);
      LabeledPrint lp = generate(p);
      std::mt19937_64 aug(splitmix64(p.seed ^ 0x5eedULL));
      lp = distort(lp, uniform(aug, 0.0, params.distortion), aug);
      lp = add_creases(lp, std::uniform_int_distribution<int>(0, params.creases_max)(aug), aug);
      lp = add_noise(lp, uniform(aug, 0.0, params.noise_level), aug);

      char name[32];
      std::snprintf(name, sizeof(name), "img_%04d", i);
      const std::filesystem::path base = sub / name;
      const std::string pgm = encode_pgm(lp.image);
      const std::string tmpl = encode_template(lp.gt);
      {
        std::ofstream out(base.string() + ".pgm", std::ios::binary);
        out << pgm;
        if (!out) throw std::runtime_error("write failed for " + base.string() + ".pgm");
      }
      write_template(base.string() + ".min", lp.gt);
      write_orientation(base.string() + ".orient", lp.gt_orientation);
      write_mask(base.string() + ".mask", lp.gt_mask);
      entries.push_back({name, split, p.seed, lp.gt.size(), hex64(fnv1a64(pgm + tmpl))});
    }
  }
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.tsv").string());
  manifest << "id\tsplit\tseed\tcount\tchecksum\n";
  for (const CorpusEntry& e : entries) {
    manifest << e.id << '\t' << e.split << '\t' << e.seed << '\t' << e.count << '\t' << e.checksum << '\n';
  }
  if (!manifest) throw std::runtime_error("write failed for " + (dir / "manifest.tsv").string());
  return entries;
}

std::vector<CorpusEntry> read_manifest(const std::filesystem::path& dir) {
  const std::filesystem::path path = dir / "manifest.tsv";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "id\tsplit\tseed\tcount\tchecksum") {
    throw std::runtime_error(path.string() + ": missing manifest header");
  }
  std::vector<CorpusEntry> entries;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    CorpusEntry e;
    if (!(fields >> e.id >> e.split >> e.seed >> e.count >> e.checksum)) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed manifest row");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<CorpusItem> load_split(const std::filesystem::path& dir, std::string_view split) {
  std::vector<CorpusItem> items;
  for (const CorpusEntry& e : read_manifest(dir)) {
    if (e.split != split) continue;
    const std::string base = (dir / e.split / e.id).string();
    CorpusItem item{e.id, read_pgm(base + ".pgm"), read_template(base + ".min"), read_orientation(base + ".orient"),
                    read_mask(base + ".mask")};
    if (item.gt.size() != e.count) throw std::runtime_error(base + ".min: count differs from manifest");
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace minutiae
