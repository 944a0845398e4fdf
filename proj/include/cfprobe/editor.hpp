#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfprobe/diffusion.hpp"
#include "cfprobe/inversion.hpp"
#include "cfprobe/manifest.hpp"
#include "cfprobe/prompt.hpp"

namespace cfprobe::editor {

using diffusion::DiffusionState;

/// What happens to downstream prompt attributes when demographics are edited.
/// `drop_findings` drops findings and devices on age/sex/race edits; `keep_all` drops nothing.
enum class DropPolicy { drop_findings, keep_all };
std::string_view to_string(DropPolicy p);
DropPolicy parse_drop_policy(std::string_view s);

/// The intervention actually applied: `iv` plus the policy's implicit drops.
prompter::Intervention effective_intervention(const prompter::Intervention& iv, DropPolicy policy);

nlohmann::json intervention_to_json(const prompter::Intervention& iv);
prompter::Intervention intervention_from_json(const nlohmann::json& j);

struct EditOptions {
  double guidance = 3.0;
  inversion::NullTextOptions null_text;
  DropPolicy policy = DropPolicy::drop_findings;
  std::uint64_t seed = 0;  // recorded in provenance; the pipeline itself has no random step
  std::size_t chunk_size = 16;
};

/// Abduction for one factual image: pivot trajectory, optimized nulls and
/// checksums of exactly the tensors the prediction step must reuse.
struct Abduction {
  std::string record_id;
  inversion::LatentTrajectory trajectory;
  inversion::NullEmbeddings nulls;
  std::string checkpoint_hash;
  std::string latent_checksum;
  std::string null_checksum;
  double guidance = 3.0;
};

std::string tensor_checksum(const torch::Tensor& t);

std::vector<Abduction> abduct(const DiffusionState& state, const std::vector<std::string>& ids,
                              const std::vector<ImageArray>& images, const std::vector<prompter::Prompt>& prompts,
                              const EditOptions& options);

/// Guided resampling of each abduction under its edited prompt. Throws ArtifactError
/// when an abduction's checksums or checkpoint do not match.
std::vector<ImageArray> predict(const DiffusionState& state, const std::vector<const Abduction*>& abductions,
                                const std::vector<prompter::Prompt>& prompts);

struct Provenance {
  std::string checkpoint_hash;
  std::uint64_t seed = 0;
  double guidance = 3.0;
  std::string latent_checksum;
  std::string null_checksum;
  int inversion_steps = 0;
  int null_text_iters = 0;
  bool null_text_reverted = false;
  double reconstruction_l1 = 0.0;
  std::string policy;
  std::string created_at;  // ISO-8601 UTC; excluded from determinism comparisons
};

struct CounterfactualResult {
  std::string record_id;
  ImageArray factual;
  prompter::Prompt factual_prompt;
  prompter::Intervention intervention;  // effective intervention
  prompter::Prompt counterfactual_prompt;
  ImageArray counterfactual;
  std::vector<std::uint8_t> difference;  // 8-bit |factual - counterfactual|
  Provenance provenance;

  ImageArray difference_image() const;
  /// Everything except pixel payloads; `with_timestamp = false` gives the determinism key.
  nlohmann::json meta(bool with_timestamp = true) const;

  /// factual.png, cf.png, diff.png, traj.bin (when an abduction is given), then meta.json last.
  void save(const std::filesystem::path& dir, const Abduction* abduction) const;
  /// Throws ArtifactError on a missing or inconsistent bundle.
  static CounterfactualResult load(const std::filesystem::path& dir);
};

/// Packages a prediction; the difference map is computed here.
CounterfactualResult package(const Abduction& abduction, const ImageArray& factual, const prompter::Intervention& iv,
                             const prompter::Prompt& cf_prompt, const ImageArray& counterfactual,
                             const EditOptions& options, double reconstruction_l1);

/// Abduction, action, prediction for one image. Throws ValidationError when the
/// record's rendering does not match the image.
CounterfactualResult generate_counterfactual(const DiffusionState& state, const ImageArray& image,
                                             const AttributeRecord& record, const prompter::Intervention& iv,
                                             const EditOptions& options = {});

using InterventionFor = std::function<prompter::Intervention(const AttributeRecord&)>;

struct BatchFailure {
  std::string record_id;
  std::string error;
};

struct BatchResult {
  std::vector<CounterfactualResult> results;  // sorted by record id
  std::vector<BatchFailure> failures;
  std::size_t resumed = 0;                    // loaded from disk instead of recomputed
};

/// Edits the first `limit` records of `split` (sorted by id). With a non-empty
/// `out`, each result lives in out/<id>/ and completed ids are skipped on rerun;
/// failures are appended to out/failures.jsonl and the batch continues.
BatchResult batch_edit(const DiffusionState& state, const synthgen::DatasetManifest& manifest,
                       const InterventionFor& iv, synthgen::Split split, std::size_t limit,
                       const EditOptions& options, const std::filesystem::path& out = {});
BatchResult batch_edit(const DiffusionState& state, const synthgen::DatasetManifest& manifest,
                       const prompter::Intervention& iv, synthgen::Split split, std::size_t limit,
                       const EditOptions& options, const std::filesystem::path& out = {});

}  // namespace cfprobe::editor
