#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cfprobe/attributes.hpp"
#include "cfprobe/causal_spec.hpp"
#include "cfprobe/image.hpp"

namespace cfprobe::synthgen {

enum class Split { train, val, test };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

/// Records, their split assignment, and the spec that generated them.
struct DatasetManifest {
  std::vector<AttributeRecord> records;  // sorted by id
  std::map<std::string, Split> splits;
  CausalSpec spec;
  std::uint64_t seed = 0;
  std::filesystem::path root;  // empty until materialized or loaded

  /// Records of one split, sorted by id.
  std::vector<const AttributeRecord*> in_split(Split s) const;
  const AttributeRecord& record(const std::string& id) const;
  std::filesystem::path image_path(const std::string& id) const;
  /// Loads the materialized PNG.
  ImageArray image(const std::string& id) const;
};

/// Stratified on (sex, findings). Split totals follow largest-remainder rounding of
/// n * fractions; each stratum's per-split count is within +-1 of its proportional quota.
/// Throws ValidationError if fractions do not sum to 1 or a stratum would miss a split.
DatasetManifest build_manifest(const CausalSpec& spec, std::size_t n, std::array<double, 3> split_fractions,
                               std::uint64_t seed);

/// Writes manifest.jsonl, spec.lock and images/{id}.png under dir.
void materialize(DatasetManifest& manifest, const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& dir);

/// Stratum label used for the stratified split, e.g. "female|pleural_effusion+cardiomegaly".
std::string stratum_of(const AttributeRecord& r);

}  // namespace cfprobe::synthgen
