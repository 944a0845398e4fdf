#pragma once

#include <vector>

#include <nlohmann/json.hpp>

namespace cfprobe::diffusion {

/// Linear beta schedule plus the DDIM timestep sub-sequence.
///
/// Sampling walks "levels": level 0 is the clean image (alpha_bar = 1) and level
/// i in [1, K] sits at timestep inference_timesteps[i - 1]. A DDIM step moves
/// from level i to level i - 1 using the noise predicted at level i's timestep.
struct NoiseSchedule {
  int num_train_steps = 400;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<int> inference_timesteps;  // strictly increasing subset of [0, T)

  static NoiseSchedule linear(int num_train_steps = 400, double beta_start = 1e-4, double beta_end = 0.02,
                              int inference_steps = 50);
  /// Same betas, different DDIM sub-sequence. Throws ValidationError if not strictly increasing in [0, T).
  NoiseSchedule with_timesteps(std::vector<int> timesteps) const;

  /// Throws ValidationError when any documented invariant fails.
  void validate() const;

  int num_inference_steps() const { return static_cast<int>(inference_timesteps.size()); }
  /// t == -1 denotes the clean image and returns 1.
  double alpha_bar(int t) const;
  int level_timestep(int level) const;  // -1 for level 0
  double level_alpha_bar(int level) const { return alpha_bar(level_timestep(level)); }

  nlohmann::json to_json() const;
  static NoiseSchedule from_json(const nlohmann::json& j);
};

}  // namespace cfprobe::diffusion
