#include "cfprobe/attributes.hpp"

#include <fmt/format.h>

#include "cfprobe/error.hpp"

namespace cfprobe {

AgeBin age_bin(int age) {
  if (age < 40) return AgeBin::young;
  if (age <= 65) return AgeBin::middle;
  return AgeBin::old;
}

std::pair<int, int> age_range(AgeBin bin) {
  switch (bin) {
    case AgeBin::young: return {kMinAge, 39};
    case AgeBin::middle: return {40, 65};
    case AgeBin::old: return {66, kMaxAge};
  }
  return {kMinAge, kMaxAge};
}

std::string_view to_string(Sex v) { return v == Sex::male ? "male" : "female"; }

std::string_view to_string(Race v) {
  switch (v) {
    case Race::asian: return "asian";
    case Race::white: return "white";
    case Race::black: return "black";
  }
  return "?";
}

std::string_view to_string(AgeBin v) {
  switch (v) {
    case AgeBin::young: return "young";
    case AgeBin::middle: return "middle";
    case AgeBin::old: return "old";
  }
  return "?";
}

std::string_view to_string(Finding v) {
  switch (v) {
    case Finding::pleural_effusion: return "pleural_effusion";
    case Finding::cardiomegaly: return "cardiomegaly";
    case Finding::no_finding: return "no_finding";
  }
  return "?";
}

std::string_view to_string(Device v) {
  switch (v) {
    case Device::none: return "none";
    case Device::pacemaker: return "pacemaker";
    case Device::tube: return "tube";
  }
  return "?";
}

Sex parse_sex(std::string_view s) {
  if (s == "male") return Sex::male;
  if (s == "female") return Sex::female;
  throw ValidationError(fmt::format("unknown sex '{}'", s));
}

Race parse_race(std::string_view s) {
  if (s == "asian") return Race::asian;
  if (s == "white") return Race::white;
  if (s == "black") return Race::black;
  throw ValidationError(fmt::format("unknown race '{}'", s));
}

AgeBin parse_age_bin(std::string_view s) {
  if (s == "young") return AgeBin::young;
  if (s == "middle") return AgeBin::middle;
  if (s == "old") return AgeBin::old;
  throw ValidationError(fmt::format("unknown age bin '{}'", s));
}

Finding parse_finding(std::string_view s) {
  if (s == "pleural_effusion") return Finding::pleural_effusion;
  if (s == "cardiomegaly") return Finding::cardiomegaly;
  if (s == "no_finding") return Finding::no_finding;
  throw ValidationError(fmt::format("unknown finding '{}'", s));
}

Device parse_device(std::string_view s) {
  if (s == "none") return Device::none;
  if (s == "pacemaker") return Device::pacemaker;
  if (s == "tube") return Device::tube;
  throw ValidationError(fmt::format("unknown device '{}'", s));
}

FindingSet FindingSet::from_list(const std::vector<Finding>& findings) {
  if (findings.empty()) throw ValidationError("findings set is empty; use no_finding");
  bool none = false;
  FindingSet out;
  for (Finding f : findings) {
    switch (f) {
      case Finding::no_finding: none = true; break;
      case Finding::pleural_effusion: out.effusion_ = true; break;
      case Finding::cardiomegaly: out.cardiomegaly_ = true; break;
    }
  }
  if (none && !out.no_finding())
    throw ValidationError("no_finding cannot be combined with another finding");
  return out;
}

bool FindingSet::contains(Finding f) const {
  switch (f) {
    case Finding::pleural_effusion: return effusion_;
    case Finding::cardiomegaly: return cardiomegaly_;
    case Finding::no_finding: return no_finding();
  }
  return false;
}

std::vector<Finding> FindingSet::to_list() const {
  if (no_finding()) return {Finding::no_finding};
  std::vector<Finding> out;
  if (effusion_) out.push_back(Finding::pleural_effusion);
  if (cardiomegaly_) out.push_back(Finding::cardiomegaly);
  return out;
}

void AttributeRecord::validate() const {
  if (id.empty()) throw ValidationError("record id is empty");
  if (age < kMinAge || age > kMaxAge)
    throw ValidationError(fmt::format("record {}: age {} outside [{}, {}]", id, age, kMinAge, kMaxAge));
}

void to_json(nlohmann::json& j, const AttributeRecord& r) {
  std::vector<std::string> findings;
  for (Finding f : r.findings.to_list()) findings.emplace_back(to_string(f));
  j = nlohmann::json{{"id", r.id},
                     {"age", r.age},
                     {"sex", to_string(r.sex)},
                     {"race", to_string(r.race)},
                     {"findings", findings},
                     {"device", to_string(r.device)},
                     {"seed", r.seed}};
}

void from_json(const nlohmann::json& j, AttributeRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.age = j.at("age").get<int>();
  r.sex = parse_sex(j.at("sex").get<std::string>());
  r.race = parse_race(j.at("race").get<std::string>());
  std::vector<Finding> findings;
  for (const auto& f : j.at("findings")) findings.push_back(parse_finding(f.get<std::string>()));
  r.findings = FindingSet::from_list(findings);
  r.device = parse_device(j.at("device").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.validate();
}

std::string_view to_string(EvalAttribute a) {
  switch (a) {
    case EvalAttribute::sex: return "sex";
    case EvalAttribute::race: return "race";
    case EvalAttribute::age_bin: return "age_bin";
    case EvalAttribute::pleural_effusion: return "pleural_effusion";
    case EvalAttribute::cardiomegaly: return "cardiomegaly";
    case EvalAttribute::device: return "device";
  }
  return "?";
}

EvalAttribute parse_eval_attribute(std::string_view s) {
  for (EvalAttribute a : kEvalAttributes)
    if (to_string(a) == s) return a;
  throw ValidationError(fmt::format("unknown attribute '{}'", s));
}

int num_classes(EvalAttribute a) {
  switch (a) {
    case EvalAttribute::race:
    case EvalAttribute::age_bin:
    case EvalAttribute::device: return 3;
    default: return 2;
  }
}

int label_of(const AttributeRecord& r, EvalAttribute a) {
  switch (a) {
    case EvalAttribute::sex: return static_cast<int>(r.sex);
    case EvalAttribute::race: return static_cast<int>(r.race);
    case EvalAttribute::age_bin: return static_cast<int>(r.age_bin());
    case EvalAttribute::pleural_effusion: return r.findings.pleural_effusion() ? 1 : 0;
    case EvalAttribute::cardiomegaly: return r.findings.cardiomegaly() ? 1 : 0;
    case EvalAttribute::device: return static_cast<int>(r.device);
  }
  return 0;
}

}  // namespace cfprobe
