#include "cfprobe/render.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace cfprobe::synthgen {
namespace {

using namespace geometry;

double coverage(double signed_distance) { return std::clamp(0.5 - signed_distance, 0.0, 1.0); }

/// Approximate signed distance (pixels) to an axis-aligned ellipse boundary.
double ellipse_sd(double x, double y, double cx, double cy, double a, double b) {
  const double r = std::hypot((x - cx) / a, (y - cy) / b);
  return (r - 1.0) * std::min(a, b);
}

double mix(double base, double target, double weight) { return base + (target - base) * weight; }

struct Anatomy {
  double ox, oy;  // jitter offsets
  double torso_hw, ribcage_hw, lung_hw, lung_cx[2], heart_hw, tissue;
};

Anatomy anatomy_of(const AttributeRecord& r, Jitter j) {
  Anatomy a{};
  a.ox = j.dx;
  a.oy = j.dy;
  a.torso_hw = kTorsoHalfWidth[static_cast<int>(r.race)];
  a.ribcage_hw = kRibcageHalfWidth[static_cast<int>(r.sex)];
  a.lung_hw = a.ribcage_hw / 2.0 - 1.0;
  a.lung_cx[0] = kTorsoCx - a.ribcage_hw / 2.0 - 1.0;
  a.lung_cx[1] = kTorsoCx + a.ribcage_hw / 2.0 + 1.0;
  a.heart_hw = kHeartHalfWidth[r.findings.cardiomegaly() ? 1 : 0];
  const AgeBin bin = r.age_bin();
  const auto [lo, hi] = age_range(bin);
  const double mid = 0.5 * (lo + hi);
  a.tissue = kTissueLevel[static_cast<int>(bin)] - 0.0008 * (r.age - mid);
  return a;
}

double shade(const AttributeRecord& r, const Anatomy& a, double x, double y) {
  x -= a.ox;
  y -= a.oy;
  const double torso = coverage(ellipse_sd(x, y, kTorsoCx, kTorsoCy, a.torso_hw, kTorsoHalfHeight));
  double v = mix(kBackground, a.tissue, torso);

  double lung = 0.0;
  double effusion = 0.0;
  for (double cx : a.lung_cx) {
    const double c = coverage(ellipse_sd(x, y, cx, kLungCy, a.lung_hw, kLungHalfHeight));
    lung = std::max(lung, c);
    if (r.findings.pleural_effusion() && c > 0.0) {
      // Meniscus: the fluid surface rises toward the lateral wall.
      const double lateral = std::fabs(x - cx) / a.lung_hw;
      const double surface = kEffusionTopY + 5.0 * (1.0 - std::min(lateral, 1.0));
      effusion = std::max(effusion, c * coverage(surface - y));
    }
  }
  v = mix(v, a.tissue - 0.22, lung * torso);

  for (double y0 : {27.0, 32.0, 37.0, 42.0, 47.0}) {
    if (std::fabs(x - kTorsoCx) > a.ribcage_hw + 0.5) continue;
    const double u = (x - kTorsoCx) / a.ribcage_hw;
    const double ry = y0 + 2.5 * u * u;
    v += 0.10 * std::exp(-0.5 * (y - ry) * (y - ry) / 0.64) * torso;
  }

  const double heart = coverage(ellipse_sd(x, y, kHeartCx, kHeartCy, a.heart_hw, kHeartHalfHeight));
  v = mix(v, a.tissue + 0.25, heart * torso);
  v = mix(v, a.tissue + 0.20, effusion * torso);

  if (r.device == Device::pacemaker) {
    const double px = coverage(std::max(kPacemakerX0 - 0.5 - x, x - (kPacemakerX0 + kPacemakerW - 0.5)));
    const double py = coverage(std::max(kPacemakerY0 - 0.5 - y, y - (kPacemakerY0 + kPacemakerH - 0.5)));
    v = mix(v, 0.95, px * py);
  } else if (r.device == Device::tube && y <= 40.5) {
    const double tx = 37.0 + 2.5 * std::sin(y / 9.0);
    v = mix(v, 0.85, coverage(std::fabs(x - tx) - 0.4));
  }
  return v;
}

}  // namespace

Jitter jitter_of(const AttributeRecord& record) {
  std::mt19937_64 rng(record.seed);
  std::uniform_int_distribution<int> d(-1, 1);
  Jitter j;
  j.dx = d(rng);
  j.dy = d(rng);
  return j;
}

ImageArray render_image(const AttributeRecord& record, int size) {
  record.validate();
  std::mt19937_64 rng(record.seed);
  std::uniform_int_distribution<int> jd(-1, 1);
  Jitter j;
  j.dx = jd(rng);
  j.dy = jd(rng);
  const Anatomy a = anatomy_of(record, j);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);

  ImageArray img(size, size);
  const double scale = static_cast<double>(kDefaultImageSize) / size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double v = shade(record, a, (x + 0.5) * scale - 0.5, (y + 0.5) * scale - 0.5) + noise(rng);
      img.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return img;
}

std::vector<bool> cardiac_region_mask(const AttributeRecord& record, int size) {
  const Jitter j = jitter_of(record);
  std::vector<bool> mask(static_cast<std::size_t>(size) * size);
  const double scale = static_cast<double>(kDefaultImageSize) / size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double px = (x + 0.5) * scale - 0.5 - j.dx;
      const double py = (y + 0.5) * scale - 0.5 - j.dy;
      mask[static_cast<std::size_t>(y) * size + x] =
          ellipse_sd(px, py, kHeartCx, kHeartCy, kHeartHalfWidth[1], kHeartHalfHeight) <= 0.0;
    }
  return mask;
}

}  // namespace cfprobe::synthgen
