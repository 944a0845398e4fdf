#include <cmath>
#include <fstream>

#include <ATen/CPUGeneratorImpl.h>
#include <fmt/format.h>

#include "cfprobe/diffusion.hpp"
#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"

namespace cfprobe::diffusion {

torch::Tensor to_model_space(const ImageArray& img) {
  return to_model_space(std::vector<ImageArray>{img});
}

torch::Tensor to_model_space(const std::vector<ImageArray>& images) {
  if (images.empty()) throw ShapeError("no images");
  const int H = images.front().height(), W = images.front().width();
  auto out = torch::empty({static_cast<std::int64_t>(images.size()), 1, H, W}, torch::kFloat32);
  auto* dst = out.data_ptr<float>();
  for (const auto& img : images) {
    if (img.height() != H || img.width() != W) throw ShapeError("images in a batch differ in shape");
    for (float p : img.pixels()) *dst++ = 2.0f * p - 1.0f;
  }
  return out;
}

ImageArray from_model_space(const torch::Tensor& x) {
  const auto t = x.detach().to(torch::kFloat32).contiguous().reshape({-1});
  const auto H = x.size(-2), W = x.size(-1);
  if (t.numel() != H * W) throw ShapeError(fmt::format("expected a single image, got {}", c10::str(x.sizes())));
  std::vector<float> pixels(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
  for (auto& p : pixels) p = std::clamp((p + 1.0f) * 0.5f, 0.0f, 1.0f);
  return ImageArray(static_cast<int>(H), static_cast<int>(W), std::move(pixels));
}

torch::Tensor token_batch(const std::vector<prompter::TokenList>& prompts) {
  if (prompts.empty()) throw ValidationError("no prompts to encode");
  const auto L = static_cast<std::int64_t>(prompter::Vocabulary::kSequenceLength);
  auto tokens = torch::empty({static_cast<std::int64_t>(prompts.size()), L}, torch::kInt64);
  auto* dst = tokens.data_ptr<std::int64_t>();
  for (const auto& p : prompts) {
    if (static_cast<std::int64_t>(p.size()) != L) throw ShapeError("token list has the wrong length");
    for (int id : p) *dst++ = id;
  }
  return tokens;
}

torch::Tensor q_sample(const torch::Tensor& x0, double alpha_bar, const torch::Tensor& noise) {
  if (!x0.sizes().equals(noise.sizes()))
    throw ShapeError(fmt::format("noise {} does not match image {}", c10::str(noise.sizes()), c10::str(x0.sizes())));
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) throw ValidationError(fmt::format("alpha_bar {} outside (0, 1]", alpha_bar));
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * noise;
}

torch::Tensor q_sample(const NoiseSchedule& schedule, const torch::Tensor& x0, int t, const torch::Tensor& noise) {
  if (t < 0 || t >= schedule.num_train_steps)
    throw ValidationError(fmt::format("timestep {} outside [0, {})", t, schedule.num_train_steps));
  return q_sample(x0, schedule.alpha_bar(t), noise);
}

torch::Tensor ddim_step(const torch::Tensor& z, double ab_from, double ab_to, const torch::Tensor& eps) {
  if (!(ab_from > 0.0)) throw NumericError(fmt::format("alpha_bar {} is not positive; x0 estimate undefined", ab_from));
  if (!(ab_to > 0.0 && ab_to <= 1.0) || ab_from > 1.0)
    throw ValidationError(fmt::format("alpha_bar pair ({}, {}) outside (0, 1]", ab_from, ab_to));
  if (!z.sizes().equals(eps.sizes())) throw ShapeError("eps does not match the latent");
  const auto x0_hat = (z - std::sqrt(1.0 - ab_from) * eps) / std::sqrt(ab_from);
  return std::sqrt(ab_to) * x0_hat + std::sqrt(1.0 - ab_to) * eps;
}

torch::Tensor ddim_step(const NoiseSchedule& schedule, const torch::Tensor& z, int t, int t_prev,
                        const torch::Tensor& eps) {
  if (!(t > t_prev)) throw ValidationError(fmt::format("ddim_step needs t > t_prev, got {} and {}", t, t_prev));
  return ddim_step(z, schedule.alpha_bar(t), schedule.alpha_bar(t_prev), eps);
}

torch::Tensor guided_eps(const NoisePredictor& eps, const torch::Tensor& z, int t, const torch::Tensor& cond,
                         const torch::Tensor& null_cond, double w) {
  if (w < 0.0) throw ValidationError(fmt::format("guidance scale {} is negative", w));
  if (w == 1.0) return eps(z, t, cond);
  const auto B = z.size(0);
  const auto both = eps(torch::cat({z, z}), t, torch::cat({cond, null_cond}));
  const auto e_cond = both.slice(0, 0, B), e_null = both.slice(0, B);
  return e_null + w * (e_cond - e_null);
}

torch::Tensor ddim_sample_from(const NoisePredictor& eps, const NoiseSchedule& schedule, const torch::Tensor& z_terminal,
                               const torch::Tensor& cond, const torch::Tensor& nulls, double w) {
  const int K = schedule.num_inference_steps();
  if (nulls.dim() == 3 && nulls.size(0) != K)
    throw ShapeError(fmt::format("{} null embeddings for {} steps", nulls.size(0), K));
  auto z = z_terminal;
  for (int level = K; level >= 1; --level) {
    const auto null_cond = nulls.dim() == 3 ? nulls[level - 1] : nulls;
    const int t = schedule.level_timestep(level);
    const auto e = guided_eps(eps, z, t, cond, null_cond, w);
    z = ddim_step(z, schedule.level_alpha_bar(level), schedule.level_alpha_bar(level - 1), e);
  }
  return z;
}

DiffusionState::DiffusionState(DenoiserConfig config, NoiseSchedule schedule, std::uint64_t init_seed)
    : config_(std::move(config)), schedule_(std::move(schedule)), model_(nullptr),
      vocabulary_hash_(prompter::Vocabulary::standard().hash()) {
  if (config_.vocab_size == 0) config_.vocab_size = static_cast<int>(prompter::Vocabulary::standard().size());
  if (config_.vocab_size != static_cast<int>(prompter::Vocabulary::standard().size()))
    throw ArtifactError(fmt::format("config vocabulary size {} does not match the prompter vocabulary ({})",
                                    config_.vocab_size, prompter::Vocabulary::standard().size()));
  schedule_.validate();
  torch::manual_seed(init_seed);
  model_ = Denoiser(config_);
}

torch::Tensor DiffusionState::encode(const std::vector<prompter::TokenList>& prompts) const {
  return model_.ptr()->encode_text(token_batch(prompts));
}

torch::Tensor DiffusionState::encode(const prompter::Prompt& prompt) const { return encode({prompt.tokens}); }

torch::Tensor DiffusionState::null_embedding(std::int64_t batch) const {
  return encode({prompter::null_tokens()}).expand({batch, config_.cond_width}).contiguous();
}

NoisePredictor DiffusionState::predictor() const {
  auto model = model_.ptr();
  return [model](const torch::Tensor& z, int t, const torch::Tensor& cond) {
    return model->forward(z, torch::full({z.size(0)}, t, torch::kInt64), cond);
  };
}

std::string DiffusionState::checkpoint_hash() const {
  std::vector<std::uint8_t> bytes;
  for (const auto& item : model_->named_parameters()) {
    bytes.insert(bytes.end(), item.key().begin(), item.key().end());
    const auto c = item.value().detach().contiguous();
    const auto* data = static_cast<const std::uint8_t*>(c.data_ptr());
    bytes.insert(bytes.end(), data, data + c.nbytes());
  }
  const auto meta = nlohmann::json{{"config", config_.to_json()}, {"schedule", schedule_.to_json()}}.dump();
  bytes.insert(bytes.end(), meta.begin(), meta.end());
  return sha256_hex(bytes);
}

void DiffusionState::check_finite() const {
  for (const auto& item : model_->named_parameters())
    if (!torch::isfinite(item.value()).all().item().toBool())
      throw NumericError(fmt::format("weight '{}' is not finite", item.key()));
}

void DiffusionState::freeze() {
  model_->eval();
  for (auto& p : model_->parameters()) p.set_requires_grad(false);
}

void DiffusionState::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  check_finite();
  const auto tmp = fs::path(dir.string() + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  torch::serialize::OutputArchive archive;
  model_.ptr()->save(archive);
  archive.save_to((tmp / "weights.pt").string());
  const nlohmann::json state = {{"format", "cfprobe-checkpoint"},
                                {"version", 1},
                                {"config", config_.to_json()},
                                {"schedule", schedule_.to_json()},
                                {"vocabulary_hash", vocabulary_hash_},
                                {"train_steps", train_steps_},
                                {"checkpoint_hash", checkpoint_hash()},
                                {"train_log", train_log_}};
  write_file_atomic(tmp / "state.json", state.dump(2));
  write_file_atomic(tmp / "vocab.txt", prompter::Vocabulary::standard().serialize());
  if (!dir.parent_path().empty()) fs::create_directories(dir.parent_path());
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

DiffusionState DiffusionState::load(const std::filesystem::path& dir) {
  nlohmann::json state;
  try {
    state = nlohmann::json::parse(read_file(dir / "state.json"));
  } catch (const std::exception& e) {
    throw ArtifactError(fmt::format("cannot read checkpoint at {}: {}", dir.string(), e.what()));
  }
  if (state.value("format", "") != "cfprobe-checkpoint")
    throw ArtifactError(fmt::format("{} is not a checkpoint directory", dir.string()));
  const auto& vocab = prompter::Vocabulary::standard();
  if (state.at("vocabulary_hash").get<std::string>() != vocab.hash())
    throw ArtifactError(fmt::format("checkpoint vocabulary hash {} does not match prompter vocabulary {}",
                                    state.at("vocabulary_hash").get<std::string>(), vocab.hash()));
  DiffusionState s(DenoiserConfig::from_json(state.at("config")), NoiseSchedule::from_json(state.at("schedule")));
  try {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "weights.pt").string());
    s.model_->load(archive);
  } catch (const c10::Error& e) {
    throw ArtifactError(fmt::format("cannot load weights from {}: {}", dir.string(), e.what_without_backtrace()));
  }
  s.train_steps_ = state.at("train_steps");
  s.train_log_ = state.value("train_log", nlohmann::json::object());
  s.check_finite();
  s.freeze();
  if (state.contains("checkpoint_hash") && state["checkpoint_hash"].get<std::string>() != s.checkpoint_hash())
    throw ArtifactError(fmt::format("checkpoint at {} fails its hash check", dir.string()));
  return s;
}

ImageArray sample(const DiffusionState& state, const prompter::Prompt& prompt, double w, std::uint64_t seed) {
  if (w < 0.0) throw ValidationError(fmt::format("guidance scale {} is negative", w));
  torch::NoGradGuard guard;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const int S = state.config().image_size;
  const auto z = torch::randn({1, 1, S, S}, gen, torch::kFloat32);
  const auto x = ddim_sample_from(state.predictor(), state.schedule(), z, state.encode(prompt), state.null_embedding(), w);
  return from_model_space(x);
}

}  // namespace cfprobe::diffusion
