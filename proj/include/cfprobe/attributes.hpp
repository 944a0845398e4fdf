#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace cfprobe {

enum class Sex { male, female };
enum class Race { asian, white, black };
enum class AgeBin { young, middle, old };
enum class Finding { pleural_effusion, cardiomegaly, no_finding };
enum class Device { none, pacemaker, tube };

inline constexpr int kMinAge = 18;
inline constexpr int kMaxAge = 95;

/// young < 40, middle 40..65, old > 65
AgeBin age_bin(int age);
/// Inclusive [lo, hi] age range covered by a bin.
std::pair<int, int> age_range(AgeBin bin);

std::string_view to_string(Sex v);
std::string_view to_string(Race v);
std::string_view to_string(AgeBin v);
std::string_view to_string(Finding v);
std::string_view to_string(Device v);

Sex parse_sex(std::string_view s);
Race parse_race(std::string_view s);
AgeBin parse_age_bin(std::string_view s);
Finding parse_finding(std::string_view s);
Device parse_device(std::string_view s);

/// Set of findings. Empty set is represented as {no_finding}.
class FindingSet {
 public:
  FindingSet() = default;
  FindingSet(bool pleural_effusion, bool cardiomegaly)
      : effusion_(pleural_effusion), cardiomegaly_(cardiomegaly) {}

  /// Throws ValidationError when the list is empty or mixes no_finding with a finding.
  static FindingSet from_list(const std::vector<Finding>& findings);

  bool pleural_effusion() const { return effusion_; }
  bool cardiomegaly() const { return cardiomegaly_; }
  bool no_finding() const { return !effusion_ && !cardiomegaly_; }
  bool contains(Finding f) const;

  /// Canonical order: pleural_effusion, cardiomegaly; or {no_finding}.
  std::vector<Finding> to_list() const;

  friend bool operator==(const FindingSet&, const FindingSet&) = default;

 private:
  bool effusion_ = false;
  bool cardiomegaly_ = false;
};

/// Ground-truth metadata for one synthetic image.
struct AttributeRecord {
  std::string id;
  int age = 50;
  Sex sex = Sex::male;
  Race race = Race::white;
  FindingSet findings;
  Device device = Device::none;
  std::uint64_t seed = 0;

  AgeBin age_bin() const { return cfprobe::age_bin(age); }
  /// Throws ValidationError on empty id or out-of-range age.
  void validate() const;

  friend bool operator==(const AttributeRecord&, const AttributeRecord&) = default;
};

void to_json(nlohmann::json& j, const AttributeRecord& r);
void from_json(const nlohmann::json& j, AttributeRecord& r);

/// Attributes measured by classifiers and intervened on by the effect matrix.
enum class EvalAttribute { sex, race, age_bin, pleural_effusion, cardiomegaly, device };

inline constexpr std::array<EvalAttribute, 6> kEvalAttributes = {
    EvalAttribute::sex,          EvalAttribute::race,   EvalAttribute::age_bin,
    EvalAttribute::pleural_effusion, EvalAttribute::cardiomegaly, EvalAttribute::device};

std::string_view to_string(EvalAttribute a);
EvalAttribute parse_eval_attribute(std::string_view s);
/// 2 for binary attributes, 3 for race / age_bin / device.
int num_classes(EvalAttribute a);
/// Class index of the record's value; binary attributes use 1 for "present"/female.
int label_of(const AttributeRecord& r, EvalAttribute a);

}  // namespace cfprobe
