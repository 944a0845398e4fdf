#include "cfprobe/prompt.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"

namespace cfprobe::prompter {
namespace {

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && text[pos] == ' ') ++pos;
    std::size_t end = pos;
    while (end < text.size() && text[end] != ' ') ++end;
    if (end > pos) out.push_back(text.substr(pos, end - pos));
    pos = end;
  }
  return out;
}

}  // namespace

std::string_view to_string(PromptAttribute a) {
  switch (a) {
    case PromptAttribute::age: return "age";
    case PromptAttribute::race: return "race";
    case PromptAttribute::sex: return "sex";
    case PromptAttribute::findings: return "findings";
    case PromptAttribute::device: return "device";
  }
  return "?";
}

PromptAttribute parse_prompt_attribute(std::string_view s) {
  for (auto a : {PromptAttribute::age, PromptAttribute::race, PromptAttribute::sex, PromptAttribute::findings,
                 PromptAttribute::device})
    if (to_string(a) == s) return a;
  throw ValidationError(fmt::format("unknown attribute '{}'", s));
}

bool PromptAttributes::has(PromptAttribute a) const {
  switch (a) {
    case PromptAttribute::age: return age.has_value();
    case PromptAttribute::race: return race.has_value();
    case PromptAttribute::sex: return sex.has_value();
    case PromptAttribute::findings: return findings.has_value();
    case PromptAttribute::device: return support_devices.has_value();
  }
  return false;
}

Vocabulary::Vocabulary()
    : words_{"<pad>", "<null>", "Chest",  "X-ray", "of",      "young",    "middle",       "old",
             "asian", "white",  "black",  "male",  "female",  "subject",  "with",         "no",
             "finding", "pleural", "effusion", "cardiomegaly", "and", "support", "devices"} {
  hash_ = sha256_hex(serialize());
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v;
  return v;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    throw ValidationError(fmt::format("token id {} outside vocabulary", id));
  return words_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view word) const {
  for (std::size_t i = 2; i < words_.size(); ++i)
    if (words_[i] == word) return static_cast<int>(i);
  throw ValidationError(fmt::format("out-of-vocabulary word '{}'", word));
}

std::string Vocabulary::serialize() const {
  std::string out;
  for (const auto& w : words_) out += w + "\n";
  return out;
}

TokenList tokenize(std::string_view text) {
  const auto& vocab = Vocabulary::standard();
  const auto words = split_words(text);
  if (words.size() > Vocabulary::kSequenceLength)
    throw ValidationError(fmt::format("prompt has {} words, limit is {}", words.size(), Vocabulary::kSequenceLength));
  TokenList out(Vocabulary::kSequenceLength, Vocabulary::kPad);
  for (std::size_t i = 0; i < words.size(); ++i) out[i] = vocab.id(words[i]);
  return out;
}

std::string detokenize(const TokenList& tokens) {
  const auto& vocab = Vocabulary::standard();
  std::string out;
  for (int t : tokens) {
    if (t == Vocabulary::kPad) continue;
    if (t == Vocabulary::kNull) throw ValidationError("the null prompt has no text form");
    if (!out.empty()) out += ' ';
    out += vocab.word(t);
  }
  return out;
}

TokenList null_tokens() {
  TokenList out(Vocabulary::kSequenceLength, Vocabulary::kPad);
  out[0] = Vocabulary::kNull;
  return out;
}

std::string render_text(const PromptAttributes& a) {
  std::string text = "Chest X-ray";
  std::vector<std::string> demo;
  if (a.age) demo.emplace_back(to_string(*a.age));
  if (a.race) demo.emplace_back(to_string(*a.race));
  if (a.sex) demo.emplace_back(to_string(*a.sex));
  if (!demo.empty()) text += fmt::format(" of {} subject", fmt::join(demo, " "));
  std::vector<std::string> items;
  if (a.findings) {
    if (a.findings->no_finding()) items.emplace_back("no finding");
    if (a.findings->pleural_effusion()) items.emplace_back("pleural effusion");
    if (a.findings->cardiomegaly()) items.emplace_back("cardiomegaly");
  }
  if (a.support_devices.value_or(false)) items.emplace_back("support devices");
  if (!items.empty()) text += fmt::format(" with {}", fmt::join(items, " and "));
  return text;
}

PromptAttributes parse_prompt(std::string_view text) {
  const auto w = split_words(text);
  auto fail = [&](std::string_view why) {
    return ValidationError(fmt::format("prompt '{}' does not follow the template: {}", text, why));
  };
  if (w.size() < 2 || w[0] != "Chest" || w[1] != "X-ray") throw fail("must start with 'Chest X-ray'");
  PromptAttributes a;
  std::size_t i = 2;
  if (i < w.size() && w[i] == "of") {
    ++i;
    bool any = false;
    for (; i < w.size() && w[i] != "subject"; ++i) {
      const std::string word(w[i]);
      if (word == "young" || word == "middle" || word == "old") {
        if (a.age || a.race || a.sex) throw fail("age must come first");
        a.age = parse_age_bin(word);
      } else if (word == "asian" || word == "white" || word == "black") {
        if (a.race || a.sex) throw fail("race must precede sex");
        a.race = parse_race(word);
      } else if (word == "male" || word == "female") {
        if (a.sex) throw fail("sex given twice");
        a.sex = parse_sex(word);
      } else {
        throw fail(fmt::format("unexpected word '{}'", word));
      }
      any = true;
    }
    if (i == w.size() || !any) throw fail("demographics must be followed by 'subject'");
    ++i;
  }
  if (i < w.size()) {
    if (w[i] != "with") throw fail(fmt::format("unexpected word '{}'", w[i]));
    ++i;
    bool effusion = false, cardio = false, none = false, devices = false, any_finding = false;
    while (true) {
      if (i + 1 < w.size() && w[i] == "no" && w[i + 1] == "finding") {
        if (none) throw fail("duplicate 'no finding'");
        none = any_finding = true;
        i += 2;
      } else if (i + 1 < w.size() && w[i] == "pleural" && w[i + 1] == "effusion") {
        if (effusion) throw fail("duplicate finding");
        effusion = any_finding = true;
        i += 2;
      } else if (i < w.size() && w[i] == "cardiomegaly") {
        if (cardio) throw fail("duplicate finding");
        cardio = any_finding = true;
        i += 1;
      } else if (i + 1 < w.size() && w[i] == "support" && w[i + 1] == "devices") {
        if (devices) throw fail("duplicate 'support devices'");
        devices = true;
        i += 2;
      } else {
        throw fail("expected a finding or 'support devices'");
      }
      if (i == w.size()) break;
      if (w[i] != "and") throw fail(fmt::format("unexpected word '{}'", w[i]));
      ++i;
    }
    if (none && (effusion || cardio)) throw fail("'no finding' combined with a finding");
    if (any_finding) {
      a.findings = FindingSet(effusion, cardio);
      a.support_devices = devices;
    } else if (devices) {
      a.support_devices = true;
    }
  }
  return a;
}

Prompt make_prompt(const PromptAttributes& attrs) {
  Prompt p;
  p.text = render_text(attrs);
  p.tokens = tokenize(p.text);
  p.present = parse_prompt(p.text);
  return p;
}

Prompt render_prompt(const AttributeRecord& record) {
  PromptAttributes a;
  a.age = record.age_bin();
  a.race = record.race;
  a.sex = record.sex;
  a.findings = record.findings;
  a.support_devices = record.device != Device::none;
  return make_prompt(a);
}

void Intervention::validate() const {
  const auto a = assigned();
  if (a.empty() && dropped.empty()) throw ValidationError("intervention assigns and drops nothing");
  for (auto d : dropped)
    if (a.count(d))
      throw ValidationError(fmt::format("attribute '{}' is both assigned and dropped", to_string(d)));
}

std::set<PromptAttribute> Intervention::assigned() const {
  std::set<PromptAttribute> out;
  for (auto a : {PromptAttribute::age, PromptAttribute::race, PromptAttribute::sex, PromptAttribute::findings,
                 PromptAttribute::device})
    if (assignments.has(a)) out.insert(a);
  return out;
}

Intervention Intervention::parse(const std::map<std::string, std::string>& assignments,
                                 const std::set<std::string>& dropped) {
  Intervention iv;
  for (const auto& [name, value] : assignments) {
    switch (parse_prompt_attribute(name)) {
      case PromptAttribute::age: {
        int years = 0;
        auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), years);
        if (ec == std::errc() && ptr == value.data() + value.size()) {
          if (years < kMinAge || years > kMaxAge)
            throw ValidationError(fmt::format("age {} outside [{}, {}]", years, kMinAge, kMaxAge));
          iv.assignments.age = age_bin(years);
        } else {
          iv.assignments.age = parse_age_bin(value);
        }
        break;
      }
      case PromptAttribute::race: iv.assignments.race = parse_race(value); break;
      case PromptAttribute::sex: iv.assignments.sex = parse_sex(value); break;
      case PromptAttribute::findings: {
        std::vector<Finding> list;
        std::size_t pos = 0;
        while (pos <= value.size()) {
          const auto end = std::min(value.find('+', pos), value.size());
          list.push_back(parse_finding(std::string_view(value).substr(pos, end - pos)));
          pos = end + 1;
        }
        iv.assignments.findings = FindingSet::from_list(list);
        break;
      }
      case PromptAttribute::device:
        if (value == "none")
          iv.assignments.support_devices = false;
        else if (value == "present" || value == "pacemaker" || value == "tube")
          iv.assignments.support_devices = true;
        else
          throw ValidationError(fmt::format("unknown device value '{}'", value));
        break;
    }
  }
  for (const auto& name : dropped) iv.dropped.insert(parse_prompt_attribute(name));
  iv.validate();
  return iv;
}

Prompt apply_intervention(const Prompt& prompt, const Intervention& iv) {
  iv.validate();
  PromptAttributes a = prompt.present;
  for (auto d : iv.dropped) {
    switch (d) {
      case PromptAttribute::age: a.age.reset(); break;
      case PromptAttribute::race: a.race.reset(); break;
      case PromptAttribute::sex: a.sex.reset(); break;
      case PromptAttribute::findings: a.findings.reset(); break;
      case PromptAttribute::device: a.support_devices.reset(); break;
    }
  }
  if (iv.assignments.age) a.age = iv.assignments.age;
  if (iv.assignments.race) a.race = iv.assignments.race;
  if (iv.assignments.sex) a.sex = iv.assignments.sex;
  if (iv.assignments.findings) a.findings = iv.assignments.findings;
  if (iv.assignments.support_devices) a.support_devices = iv.assignments.support_devices;
  return make_prompt(a);
}

}  // namespace cfprobe::prompter
