#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfprobe/classifier.hpp"
#include "cfprobe/editor.hpp"

namespace cfprobe::evalsuite {

inline constexpr std::size_t kNumAttributes = kEvalAttributes.size();

/// Mean absolute pixel difference on the [0, 1] scale. Throws ShapeError on mismatch.
double l1_distance(const ImageArray& a, const ImageArray& b);
/// Same distance on the 0-255 byte scale.
inline double l1_distance_bytes(const ImageArray& a, const ImageArray& b) { return 255.0 * l1_distance(a, b); }

/// Per-layer weights of lpips_like, one per trunk stage.
inline constexpr std::array<double, 4> kLpipsLayerWeights = {1.0, 1.0, 1.0, 1.0};

/// Sum over trunk stages of weight * spatial mean of the squared difference of
/// channel-unit-normalized features.
double lpips_like(const ImageArray& a, const ImageArray& b, const ClassifierBank& extractor);
/// Pairwise a[i] vs b[i].
std::vector<double> lpips_like(const std::vector<ImageArray>& a, const std::vector<ImageArray>& b,
                               const ClassifierBank& extractor);

/// |cf - f| of two scalar scores; throws ValidationError outside [0, 1].
double cpg(double factual_score, double counterfactual_score);
/// Mean |cf_i - f_i|; throws ShapeError on length mismatch or empty input.
double cpg(const std::vector<double>& factual_scores, const std::vector<double>& counterfactual_scores);
/// Score of class `cls` under the classifier for both images.
double cpg(const AttributeClassifier& classifier, const ImageArray& factual, const ImageArray& counterfactual, int cls);
double cpg(const AttributeClassifier& classifier, const std::vector<ImageArray>& factual,
           const std::vector<ImageArray>& counterfactual, int cls);

/// Eval-attribute values an intervention changes relative to the record, mapped to
/// their target class. Device targets use class 0 ("none") as the scored class.
std::map<EvalAttribute, int> intervention_targets(const AttributeRecord& record, const prompter::Intervention& iv);

/// Class whose probability is the CPG score for column `b`: the target class if `b`
/// is intervened on, otherwise the record's factual label.
int scored_class(EvalAttribute b, const AttributeRecord& record, const std::map<EvalAttribute, int>& targets);

/// The single-attribute intervention used for effect-matrix row `a`: binary values
/// toggle, race and age bin move to the next value, device toggles present / none.
prompter::Intervention row_intervention(EvalAttribute a, const AttributeRecord& record);

/// One factual / counterfactual pair, reduced to what the reports need.
struct Probe {
  std::string record_id;
  std::vector<EvalAttribute> rows;          // intervened attributes (empty for a no-op)
  std::array<double, 6> factual_scores{};   // scored-class probability per column
  std::array<double, 6> counterfactual_scores{};
  double lpips = 0.0;                       // factual vs counterfactual
  double lpips_reference = 0.0;             // factual vs another factual image
  double l1 = 0.0;

  std::array<double, 6> cpg() const;
  nlohmann::json to_json() const;
  static Probe from_json(const nlohmann::json& j);
};

/// Scores a factual / counterfactual pair for every attribute.
Probe make_probe(const ClassifierBank& bank, const AttributeRecord& record, const prompter::Intervention& iv,
                 const ImageArray& factual, const ImageArray& counterfactual, const ImageArray& reference);

struct Estimate {
  double mean = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  std::size_t n = 0;

  nlohmann::json to_json() const;
};

inline constexpr int kBootstrapResamples = 1000;

/// Percentile bootstrap of the mean (95%). Deterministic in `seed`; empty input gives n = 0 and NaNs.
Estimate bootstrap_mean(const std::vector<double>& values, std::uint64_t seed, int resamples = kBootstrapResamples);

/// Rows = intervened attribute, columns = measured attribute, entries = mean CPG.
struct EffectMatrix {
  std::array<std::array<Estimate, 6>, 6> cells{};

  const Estimate& at(EvalAttribute row, EvalAttribute col) const;
  /// Independent of probe order: probes are sorted by record id before resampling.
  static EffectMatrix from_probes(std::vector<Probe> probes);

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Intervention columns of the summary table.
enum class ReportColumn { sex, disease, race };
inline constexpr std::array<ReportColumn, 3> kReportColumns = {ReportColumn::sex, ReportColumn::disease, ReportColumn::race};
std::string_view to_string(ReportColumn c);

/// LPIPS / L1 / CPG per intervention family; disease pools the effusion and cardiomegaly rows.
struct MetricsReport {
  struct Column {
    Estimate lpips;
    Estimate l1;        // [0, 1] scale
    Estimate l1_bytes;  // 0-255 scale
    Estimate cpg;       // effectiveness: CPG of the intervened attribute
  };
  std::array<Column, 3> columns{};

  static MetricsReport from_probes(std::vector<Probe> probes);
  nlohmann::json to_json() const;
  std::string to_text() const;
};

struct EffectOptions {
  std::size_t n_per_cell = 64;
  synthgen::Split split = synthgen::Split::test;
  /// Rows to run; every attribute by default.
  std::vector<EvalAttribute> rows{kEvalAttributes.begin(), kEvalAttributes.end()};
  /// Optional record filter applied before taking the first n_per_cell records.
  std::function<bool(const AttributeRecord&)> include;
  /// Names the filter in the cache key; change it whenever `include` changes.
  std::string selection = "all";
  editor::EditOptions edit;
  std::filesystem::path cache_dir;  // per-chunk probe cache; empty disables
  std::function<void(std::size_t done, std::size_t total)> on_progress;
};

struct EffectRun {
  std::vector<Probe> probes;
  EffectMatrix matrix;
  MetricsReport report;
  std::string checkpoint_hash;
  std::string classifier_hash;

  nlohmann::json to_json() const;
  /// report.json, report.txt, effect_matrix.json, probes.jsonl.
  void save(const std::filesystem::path& dir) const;
};

/// Abducts each of the first n (filtered) records of the split once, then predicts
/// one counterfactual per requested row and scores every column. Throws ArtifactError
/// if the classifier weights change during the run.
EffectRun effect_matrix(const diffusion::DiffusionState& state, const synthgen::DatasetManifest& manifest,
                        const ClassifierBank& bank, const EffectOptions& options);

}  // namespace cfprobe::evalsuite
