#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include "cfprobe/image.hpp"
#include "cfprobe/manifest.hpp"
#include "cfprobe/prompt.hpp"
#include "cfprobe/schedule.hpp"

namespace cfprobe::diffusion {

// Images enter the model in [-1, 1]; ImageArray stays in [0, 1].
torch::Tensor to_model_space(const ImageArray& img);                   // [1, 1, H, W]
torch::Tensor to_model_space(const std::vector<ImageArray>& images);   // [B, 1, H, W]
ImageArray from_model_space(const torch::Tensor& x);                   // one image, clamped

/// [B, kSequenceLength] int64 token ids.
torch::Tensor token_batch(const std::vector<prompter::TokenList>& prompts);

/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * noise.
torch::Tensor q_sample(const torch::Tensor& x0, double alpha_bar, const torch::Tensor& noise);
torch::Tensor q_sample(const NoiseSchedule& schedule, const torch::Tensor& x0, int t, const torch::Tensor& noise);

/// Deterministic (eta = 0) DDIM update between two noise levels. The same
/// formula runs forward (sampling, ab_to > ab_from) and backward (inversion).
/// Throws NumericError when ab_from is not positive.
torch::Tensor ddim_step(const torch::Tensor& z, double ab_from, double ab_to, const torch::Tensor& eps);
/// Timestep form; requires t > t_prev, with t_prev == -1 meaning the clean image.
torch::Tensor ddim_step(const NoiseSchedule& schedule, const torch::Tensor& z, int t, int t_prev,
                        const torch::Tensor& eps);

/// eps(z, t, cond) for a batch; cond is [B, cond_width].
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor& z, int t, const torch::Tensor& cond)>;

/// eps_null + w * (eps_cond - eps_null). At w == 1 only the conditional branch runs.
torch::Tensor guided_eps(const NoisePredictor& eps, const torch::Tensor& z, int t, const torch::Tensor& cond,
                         const torch::Tensor& null_cond, double w);

/// Walks levels K..1 from z_K. `nulls` is either [B, D] (shared by every step) or
/// [K, B, D] with nulls[level - 1] used for the step leaving `level`.
torch::Tensor ddim_sample_from(const NoisePredictor& eps, const NoiseSchedule& schedule, const torch::Tensor& z_terminal,
                               const torch::Tensor& cond, const torch::Tensor& nulls, double w);

struct DenoiserConfig {
  int image_size = 64;
  int patch = 4;            // pixel-unshuffle factor before the first conv
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 4};
  bool attention = true;    // self-attention at the lowest resolution
  int cond_width = 128;     // width of text and time conditioning vectors
  int token_width = 64;
  int groups = 8;
  int vocab_size = 0;       // filled from the prompter vocabulary when 0

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Epsilon-prediction U-Net with FiLM conditioning on (time + text) embeddings.
/// The input is pixel-unshuffled by `patch` before the first convolution.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(DenoiserConfig config);

  /// tokens [B, L] int64 -> [B, cond_width]; mean of non-pad token embeddings, then an MLP.
  torch::Tensor encode_text(const torch::Tensor& tokens);
  /// z [B, 1, H, W], t [B] int64, cond [B, cond_width] -> eps [B, 1, H, W]
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& cond);

  const DenoiserConfig& config() const { return config_; }
  std::int64_t parameter_count() const;

 private:
  DenoiserConfig config_;
  torch::nn::Embedding tokens_{nullptr};
  torch::nn::Sequential text_mlp_{nullptr};
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr};
  torch::nn::ModuleList down_{nullptr};
  torch::nn::ModuleList downsample_{nullptr};
  torch::nn::ModuleList mid_{nullptr};
  torch::nn::ModuleList up_{nullptr};
  torch::nn::ModuleList upsample_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Trained weights, schedule and vocabulary binding. Immutable after load.
class DiffusionState {
 public:
  DiffusionState(DenoiserConfig config, NoiseSchedule schedule, std::uint64_t init_seed = 0);

  const DenoiserConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Denoiser& model() { return model_; }
  const Denoiser& model() const { return model_; }
  const std::string& vocabulary_hash() const { return vocabulary_hash_; }
  std::int64_t train_steps() const { return train_steps_; }
  void set_train_steps(std::int64_t steps) { train_steps_ = steps; }
  nlohmann::json& train_log() { return train_log_; }
  const nlohmann::json& train_log() const { return train_log_; }

  /// [B, cond_width] conditioning for prompts / the null prompt.
  torch::Tensor encode(const std::vector<prompter::TokenList>& prompts) const;
  torch::Tensor encode(const prompter::Prompt& prompt) const;
  torch::Tensor null_embedding(std::int64_t batch = 1) const;

  /// Inference-mode predictor (no autograd graph unless the caller enables it).
  NoisePredictor predictor() const;

  /// SHA-256 over parameter bytes in registration order.
  std::string checkpoint_hash() const;
  /// Throws NumericError if any weight is non-finite.
  void check_finite() const;
  /// Eval mode and no gradients on weights; done by load() and at the end of train().
  void freeze();

  /// Writes weights.pt + state.json + vocab.txt into a temp sibling, then renames.
  void save(const std::filesystem::path& dir) const;
  /// Throws ArtifactError on vocabulary mismatch or unreadable files.
  static DiffusionState load(const std::filesystem::path& dir);

 private:
  DenoiserConfig config_;
  NoiseSchedule schedule_;
  Denoiser model_;
  std::string vocabulary_hash_;
  std::int64_t train_steps_ = 0;
  nlohmann::json train_log_ = nlohmann::json::object();
};

/// Images in model space plus per-image prompt attributes.
struct TrainingSet {
  torch::Tensor images;                            // [N, 1, H, W]
  std::vector<prompter::PromptAttributes> prompts;
  static TrainingSet from_manifest(const synthgen::DatasetManifest& manifest, synthgen::Split split);
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double null_fraction = 0.0;
  double seconds = 0.0;
};

struct TrainOptions {
  int epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  double min_lr_ratio = 0.1;  // cosine decay floor
  int warmup_steps = 100;
  double grad_clip = 1.0;
  double p_uncond = 0.1;
  double p_drop_demographic = 0.1;  // each of age / race / sex
  double p_drop_findings = 0.1;     // findings and device together
  double ema_decay = 0.999;         // exponential moving average of weights; 0 disables
  std::uint64_t seed = 0;
  std::function<void(const EpochStats&)> on_epoch;
};

struct TrainResult {
  DiffusionState state;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;  // of the returned (averaged) weights
  std::vector<EpochStats> epochs;
};

/// Epsilon-MSE training with uniform timesteps and classifier-free prompt dropout.
/// Throws NumericError if the loss becomes non-finite.
TrainResult train(const TrainingSet& train_set, const TrainingSet& val_set, const DenoiserConfig& config,
                  const NoiseSchedule& schedule, const TrainOptions& options);
TrainResult train(const synthgen::DatasetManifest& manifest, const DenoiserConfig& config, const NoiseSchedule& schedule,
                  const TrainOptions& options);

/// Per-sample prompt after training-time dropout; nullopt means the null prompt.
std::optional<prompter::PromptAttributes> training_prompt(const prompter::PromptAttributes& full,
                                                          const TrainOptions& options, std::mt19937_64& rng);

/// Epsilon-MSE of the model on fixed (seeded) noise and timesteps.
double evaluate_loss(const DiffusionState& state, const TrainingSet& set, std::uint64_t seed, int batch_size = 64);

/// DDIM sampling with classifier-free guidance from a seeded Gaussian latent.
/// Throws ValidationError when w < 0.
ImageArray sample(const DiffusionState& state, const prompter::Prompt& prompt, double w, std::uint64_t seed);

}  // namespace cfprobe::diffusion
