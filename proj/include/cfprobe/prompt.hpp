#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cfprobe/attributes.hpp"

namespace cfprobe::prompter {

/// Attributes that can appear in a prompt.
enum class PromptAttribute { age, race, sex, findings, device };
std::string_view to_string(PromptAttribute a);
PromptAttribute parse_prompt_attribute(std::string_view s);

/// Attribute values mentioned by a prompt. `support_devices` is true when
/// "support devices" is mentioned, false when a findings clause is present
/// without it, and unset when the prompt is silent on devices.
struct PromptAttributes {
  std::optional<AgeBin> age;
  std::optional<Race> race;
  std::optional<Sex> sex;
  std::optional<FindingSet> findings;
  std::optional<bool> support_devices;

  bool has(PromptAttribute a) const;
  friend bool operator==(const PromptAttributes&, const PromptAttributes&) = default;
};

/// Closed vocabulary: id 0 = <pad>, id 1 = <null>, then the template words.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  static constexpr int kPad = 0;
  static constexpr int kNull = 1;
  static constexpr std::size_t kSequenceLength = 16;

  std::size_t size() const { return words_.size(); }
  const std::string& word(int id) const;
  /// Throws ValidationError naming the word if it is out of vocabulary.
  int id(std::string_view word) const;
  /// One word per line, in id order.
  std::string serialize() const;
  /// SHA-256 of serialize().
  const std::string& hash() const { return hash_; }

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::string hash_;
};

using TokenList = std::vector<int>;

/// Space-separated words -> fixed-length id sequence padded with <pad>.
TokenList tokenize(std::string_view text);
std::string detokenize(const TokenList& tokens);
/// <null> followed by padding; the unconditional prompt.
TokenList null_tokens();

struct Prompt {
  std::string text;
  TokenList tokens;
  PromptAttributes present;

  friend bool operator==(const Prompt&, const Prompt&) = default;
};

/// Canonical surface form of a set of prompt attributes.
std::string render_text(const PromptAttributes& attrs);
Prompt make_prompt(const PromptAttributes& attrs);
/// Inverse of render_text; throws ValidationError on text outside the template grammar.
PromptAttributes parse_prompt(std::string_view text);

/// "Chest X-ray of <age> <race> <sex> subject with <findings>[ and support devices]".
Prompt render_prompt(const AttributeRecord& record);

/// do(A = a') on the prompt: `assignments` replace values, `dropped` attributes are
/// removed from the text so the model is free to infer them.
struct Intervention {
  PromptAttributes assignments;
  std::set<PromptAttribute> dropped;

  /// Throws ValidationError if both parts are empty or they overlap.
  void validate() const;
  std::set<PromptAttribute> assigned() const;

  /// From string pairs such as {"findings", "no_finding"} or {"device", "none"}.
  /// Findings accept '+'-joined lists. Devices accept none / present / pacemaker / tube.
  static Intervention parse(const std::map<std::string, std::string>& assignments,
                            const std::set<std::string>& dropped);
  friend bool operator==(const Intervention&, const Intervention&) = default;
};

Prompt apply_intervention(const Prompt& prompt, const Intervention& iv);

}  // namespace cfprobe::prompter
