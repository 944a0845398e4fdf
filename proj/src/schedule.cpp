#include "cfprobe/schedule.hpp"

#include <fmt/format.h>

#include "cfprobe/error.hpp"

namespace cfprobe::diffusion {

NoiseSchedule NoiseSchedule::linear(int num_train_steps, double beta_start, double beta_end, int inference_steps) {
  if (num_train_steps < 2) throw ValidationError("schedule needs at least two timesteps");
  if (inference_steps < 1 || inference_steps > num_train_steps)
    throw ValidationError(fmt::format("inference steps {} outside [1, {}]", inference_steps, num_train_steps));
  NoiseSchedule s;
  s.num_train_steps = num_train_steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  double running = 1.0;
  for (int t = 0; t < num_train_steps; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * t / (num_train_steps - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    running *= 1.0 - beta;
    s.alpha_bars.push_back(running);
  }
  const int stride = num_train_steps / inference_steps;
  for (int i = 0; i < inference_steps; ++i) s.inference_timesteps.push_back(i * stride);
  s.validate();
  return s;
}

NoiseSchedule NoiseSchedule::with_timesteps(std::vector<int> timesteps) const {
  NoiseSchedule s = *this;
  s.inference_timesteps = std::move(timesteps);
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  const auto T = static_cast<std::size_t>(num_train_steps);
  if (betas.size() != T || alphas.size() != T || alpha_bars.size() != T)
    throw ValidationError("schedule arrays do not match the number of timesteps");
  for (std::size_t t = 0; t < T; ++t) {
    if (!(betas[t] > 0.0 && betas[t] < 1.0)) throw ValidationError(fmt::format("beta_{} = {} outside (0, 1)", t, betas[t]));
    if (t > 0 && !(betas[t] > betas[t - 1])) throw ValidationError("betas must be strictly increasing");
    if (!(alpha_bars[t] > 0.0 && alpha_bars[t] <= 1.0))
      throw ValidationError(fmt::format("alpha_bar_{} = {} outside (0, 1]", t, alpha_bars[t]));
    if (t > 0 && !(alpha_bars[t] < alpha_bars[t - 1])) throw ValidationError("alpha_bar must be strictly decreasing");
  }
  if (inference_timesteps.empty()) throw ValidationError("no inference timesteps");
  for (std::size_t i = 0; i < inference_timesteps.size(); ++i) {
    const int t = inference_timesteps[i];
    if (t < 0 || t >= num_train_steps) throw ValidationError(fmt::format("inference timestep {} outside [0, T)", t));
    if (i > 0 && t <= inference_timesteps[i - 1]) throw ValidationError("inference timesteps must be strictly increasing");
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == -1) return 1.0;
  if (t < 0 || t >= num_train_steps) throw ValidationError(fmt::format("timestep {} outside [-1, {})", t, num_train_steps));
  return alpha_bars[static_cast<std::size_t>(t)];
}

int NoiseSchedule::level_timestep(int level) const {
  if (level < 0 || level > num_inference_steps())
    throw ValidationError(fmt::format("level {} outside [0, {}]", level, num_inference_steps()));
  return level == 0 ? -1 : inference_timesteps[static_cast<std::size_t>(level - 1)];
}

nlohmann::json NoiseSchedule::to_json() const {
  return {{"kind", "linear"},
          {"num_train_steps", num_train_steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"inference_timesteps", inference_timesteps}};
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::json& j) {
  auto s = linear(j.at("num_train_steps").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>(),
                  1);
  return s.with_timesteps(j.at("inference_timesteps").get<std::vector<int>>());
}

}  // namespace cfprobe::diffusion
