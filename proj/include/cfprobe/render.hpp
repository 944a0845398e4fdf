#pragma once

#include "cfprobe/attributes.hpp"
#include "cfprobe/image.hpp"

namespace cfprobe::synthgen {

/// Attribute -> visual feature mapping, in 64x64 pixel units before jitter.
///
///   age              tissue intensity of the torso (bin level + small within-bin slope)
///   sex              ribcage / lung-field width
///   race             torso outline half-width (neutral geometric proportion)
///   pleural_effusion bright wedge filling the base of both lung fields
///   cardiomegaly     cardiac silhouette half-width
///   pacemaker        bright rectangle, upper left
///   tube             thin bright curve from the top edge down the midline
///
/// Nuisance: per-record integer jitter in [-1, 1] on both axes and N(0, 0.01) pixel noise.
namespace geometry {
inline constexpr double kTorsoCx = 32.0, kTorsoCy = 40.0, kTorsoHalfHeight = 30.0;
inline constexpr double kTorsoHalfWidth[3] = {25.0, 28.0, 31.0};  // asian, white, black
inline constexpr double kRibcageHalfWidth[2] = {22.0, 16.0};      // male, female
inline constexpr double kLungCy = 38.0, kLungHalfHeight = 13.0;
inline constexpr double kHeartCx = 30.0, kHeartCy = 44.0, kHeartHalfHeight = 8.0;
inline constexpr double kHeartHalfWidth[2] = {7.0, 12.0};  // normal, cardiomegaly
inline constexpr double kEffusionTopY = 43.0;              // wedge surface at the lateral edge
inline constexpr int kPacemakerX0 = 20, kPacemakerY0 = 17, kPacemakerW = 6, kPacemakerH = 4;
inline constexpr double kTissueLevel[3] = {0.56, 0.46, 0.36};  // young, middle, old
inline constexpr double kBackground = 0.02;
inline constexpr double kNoiseSigma = 0.01;
}  // namespace geometry

/// Per-record jitter drawn from the record seed.
struct Jitter {
  int dx = 0;
  int dy = 0;
};
Jitter jitter_of(const AttributeRecord& record);

/// Pure and deterministic given the record (including its seed).
ImageArray render_image(const AttributeRecord& record, int size = kDefaultImageSize);

/// Pixels inside the enlarged cardiac silhouette, shifted by the record's jitter.
std::vector<bool> cardiac_region_mask(const AttributeRecord& record, int size = kDefaultImageSize);

}  // namespace cfprobe::synthgen
