#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cfprobe/diffusion.hpp"
#include "cfprobe/image.hpp"
#include "cfprobe/prompt.hpp"

namespace cfprobe::inversion {

using diffusion::DiffusionState;
using diffusion::NoisePredictor;
using diffusion::NoiseSchedule;

/// DDIM inversion path of one image: latents[0] is the input (model space),
/// latents[K] the inferred terminal noise latent.
struct LatentTrajectory {
  torch::Tensor latents;  // [K + 1, 1, H, W] float32
  prompter::Prompt prompt;
  double guidance = 1.0;
  std::vector<int> timesteps;

  int steps() const { return static_cast<int>(latents.size(0)) - 1; }
  torch::Tensor terminal() const { return latents[steps()]; }
  /// Throws ShapeError / NumericError on a malformed or non-finite trajectory.
  void validate() const;
};

/// Optimized null-text embeddings, one per inference step.
struct NullEmbeddings {
  torch::Tensor embeddings;               // [K, D]; row level - 1 drives the step leaving `level`
  std::vector<std::vector<double>> loss;  // per step (index level - 1): accepted loss after each iteration
  std::vector<bool> diverged;             // per step: reverted to the default null
  bool reverted = false;                  // whole optimization rejected by the final guard
  double guidance = 1.0;
  double baseline_l1 = 0.0;               // reconstruction L1 with the default null
  double optimized_l1 = 0.0;              // reconstruction L1 with the accepted embeddings

  int steps() const { return static_cast<int>(embeddings.size(0)); }
  void validate() const;
};

struct NullTextOptions {
  int iters_per_step = 10;
  double lr = 1e-2;
  double early_stop = 1e-5;
  double divergence_ratio = 1e3;  // step loss above ratio * initial loss counts as divergence
};

// Tensor-level core, usable with any noise predictor.

/// Runs DDIM updates from level 0 up to K with conditional eps at w = 1.
/// x0 [B, 1, H, W], cond [B, D] -> [K + 1, B, 1, H, W].
torch::Tensor invert_latents(const NoisePredictor& eps, const NoiseSchedule& schedule, const torch::Tensor& x0,
                             const torch::Tensor& cond);

struct NullTextResult {
  torch::Tensor embeddings;                             // [K, B, D]
  std::vector<std::vector<std::vector<double>>> loss;   // [B][K] accepted-loss logs
  std::vector<std::vector<bool>> diverged;              // [B][K]
};

/// Per-step null-text optimization against the pivot latents, batched over images.
/// Each image has its own Adam state and early stop.
NullTextResult optimize_nulls(const NoisePredictor& eps, const NoiseSchedule& schedule, const torch::Tensor& latents,
                              const torch::Tensor& cond, const torch::Tensor& default_null, double w,
                              const NullTextOptions& options);

// State-level API.

std::vector<LatentTrajectory> ddim_invert(const DiffusionState& state, const std::vector<ImageArray>& images,
                                          const std::vector<prompter::Prompt>& prompts);
LatentTrajectory ddim_invert(const DiffusionState& state, const ImageArray& image, const prompter::Prompt& prompt);

/// Throws ValidationError when w < 1 or a trajectory was not computed at w = 1.
/// The final guard reverts every step to the default null if the optimized
/// reconstruction is worse than the default one.
std::vector<NullEmbeddings> optimize_null_text(const DiffusionState& state, const std::vector<LatentTrajectory>& trajs,
                                               double w, const NullTextOptions& options = {});
NullEmbeddings optimize_null_text(const DiffusionState& state, const LatentTrajectory& traj, double w,
                                  const NullTextOptions& options = {});

/// NullEmbeddings that hold the default null at every step.
NullEmbeddings default_nulls(const DiffusionState& state, double w);

/// Guided resampling from terminal latents with per-image prompts and nulls.
std::vector<ImageArray> resample(const DiffusionState& state, const std::vector<torch::Tensor>& terminals,
                                 const std::vector<prompter::Prompt>& prompts,
                                 const std::vector<const NullEmbeddings*>& nulls, double w);

/// Resampling with the factual prompt. Throws ShapeError on a step-count mismatch.
ImageArray reconstruct(const DiffusionState& state, const LatentTrajectory& traj, const NullEmbeddings& nulls, double w);
std::vector<ImageArray> reconstruct(const DiffusionState& state, const std::vector<LatentTrajectory>& trajs,
                                    const std::vector<NullEmbeddings>& nulls, double w);

/// Versioned binary blob: header (magic, version, steps, H, W, width, guidance,
/// timesteps, prompt), latents, optional nulls, CRC-32 trailer.
std::string encode_blob(const LatentTrajectory& traj, const NullEmbeddings* nulls);
struct Blob {
  LatentTrajectory trajectory;
  std::optional<NullEmbeddings> nulls;
};
/// Throws ArtifactError on bad magic, version, sizes or checksum.
Blob decode_blob(std::string_view bytes);
void write_blob(const std::filesystem::path& path, const LatentTrajectory& traj, const NullEmbeddings* nulls);
Blob read_blob(const std::filesystem::path& path);

}  // namespace cfprobe::inversion
