#include <chrono>
#include <cmath>
#include <numeric>

#include <ATen/CPUGeneratorImpl.h>
#include <fmt/format.h>

#include "cfprobe/diffusion.hpp"
#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"

namespace cfprobe::diffusion {

namespace {

constexpr double kPi = 3.14159265358979323846;

double learning_rate(const TrainOptions& o, std::int64_t step, std::int64_t total) {
  if (step < o.warmup_steps) return o.lr * static_cast<double>(step + 1) / o.warmup_steps;
  const double span = std::max<std::int64_t>(1, total - o.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - o.warmup_steps) / span);
  return o.lr * (o.min_lr_ratio + (1.0 - o.min_lr_ratio) * 0.5 * (1.0 + std::cos(kPi * progress)));
}

}  // namespace

TrainingSet TrainingSet::from_manifest(const synthgen::DatasetManifest& manifest, synthgen::Split split) {
  const auto records = manifest.in_split(split);
  if (records.empty()) throw ValidationError(fmt::format("split '{}' is empty", synthgen::to_string(split)));
  std::vector<ImageArray> images;
  TrainingSet set;
  for (const auto* r : records) {
    images.push_back(manifest.image(r->id));
    set.prompts.push_back(prompter::render_prompt(*r).present);
  }
  set.images = to_model_space(images);
  return set;
}

std::optional<prompter::PromptAttributes> training_prompt(const prompter::PromptAttributes& full,
                                                          const TrainOptions& options, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < options.p_uncond) return std::nullopt;
  auto p = full;
  if (u(rng) < options.p_drop_demographic) p.age.reset();
  if (u(rng) < options.p_drop_demographic) p.race.reset();
  if (u(rng) < options.p_drop_demographic) p.sex.reset();
  if (u(rng) < options.p_drop_findings) {
    p.findings.reset();
    p.support_devices.reset();
  }
  return p;
}

double evaluate_loss(const DiffusionState& state, const TrainingSet& set, std::uint64_t seed, int batch_size) {
  torch::NoGradGuard guard;
  const auto N = set.images.size(0);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const auto noise = torch::randn(set.images.sizes(), gen, torch::kFloat32);
  const auto t = torch::randint(0, state.schedule().num_train_steps, {N}, gen, torch::kInt64);
  const auto ab = torch::tensor(state.schedule().alpha_bars, torch::kFloat64).to(torch::kFloat32).index_select(0, t);
  std::vector<prompter::TokenList> tokens;
  for (const auto& p : set.prompts) tokens.push_back(prompter::make_prompt(p).tokens);
  const auto all_tokens = token_batch(tokens);
  auto model = state.model();
  const bool was_training = model->is_training();
  model->eval();
  double total = 0.0;
  for (std::int64_t start = 0; start < N; start += batch_size) {
    const auto end = std::min<std::int64_t>(N, start + batch_size);
    const auto a = ab.slice(0, start, end).view({-1, 1, 1, 1});
    const auto x0 = set.images.slice(0, start, end);
    const auto n = noise.slice(0, start, end);
    const auto z = a.sqrt() * x0 + (1 - a).sqrt() * n;
    const auto pred = model->forward(z, t.slice(0, start, end), model->encode_text(all_tokens.slice(0, start, end)));
    total += torch::mse_loss(pred, n, torch::Reduction::Sum).item<double>();
  }
  model->train(was_training);
  return total / static_cast<double>(set.images.numel());
}

TrainResult train(const TrainingSet& train_set, const TrainingSet& val_set, const DenoiserConfig& config,
                  const NoiseSchedule& schedule, const TrainOptions& options) {
  if (options.epochs < 0) throw ValidationError("epochs must be non-negative");
  if (options.batch_size < 1) throw ValidationError("batch size must be positive");
  if (train_set.images.size(0) != static_cast<std::int64_t>(train_set.prompts.size()))
    throw ShapeError("training images and prompts differ in count");
  TrainResult result{DiffusionState(config, schedule, options.seed), 0.0, {}};
  auto& state = result.state;
  auto model = state.model();
  const std::uint64_t val_seed = options.seed ^ 0x5eedULL;
  result.initial_val_loss = evaluate_loss(state, val_set, val_seed);

  const auto N = train_set.images.size(0);
  const auto batches_per_epoch = (N + options.batch_size - 1) / options.batch_size;
  const auto total_steps = batches_per_epoch * options.epochs;
  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(options.lr));
  std::mt19937_64 rng(options.seed);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed + 1);
  const auto alpha_bars = torch::tensor(schedule.alpha_bars, torch::kFloat64).to(torch::kFloat32);
  const auto null = prompter::null_tokens();
  std::vector<std::int64_t> order(static_cast<std::size_t>(N));
  std::int64_t step = 0;
  model->train();
  if (options.ema_decay < 0 || options.ema_decay >= 1) throw ValidationError("EMA decay must be in [0, 1)");
  std::vector<torch::Tensor> ema;
  if (options.ema_decay > 0)
    for (const auto& p : model->parameters()) ema.push_back(p.detach().clone());

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::int64_t nulls = 0;
    for (std::int64_t b = 0; b < batches_per_epoch; ++b) {
      const auto begin = b * options.batch_size;
      const auto end = std::min<std::int64_t>(N, begin + options.batch_size);
      std::vector<std::int64_t> idx(order.begin() + begin, order.begin() + end);
      std::vector<prompter::TokenList> tokens;
      for (auto i : idx) {
        const auto p = training_prompt(train_set.prompts[static_cast<std::size_t>(i)], options, rng);
        if (!p) ++nulls;
        tokens.push_back(p ? prompter::make_prompt(*p).tokens : null);
      }
      const auto B = static_cast<std::int64_t>(idx.size());
      const auto x0 = train_set.images.index_select(0, torch::tensor(idx, torch::kInt64));
      const auto t = torch::randint(0, schedule.num_train_steps, {B}, gen, torch::kInt64);
      const auto noise = torch::randn(x0.sizes(), gen, torch::kFloat32);
      const auto a = alpha_bars.index_select(0, t).view({-1, 1, 1, 1});
      const auto z = a.sqrt() * x0 + (1 - a).sqrt() * noise;

      const double lr = learning_rate(options, step, total_steps);
      for (auto& group : optimizer.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
      optimizer.zero_grad();
      const auto loss = torch::mse_loss(model->forward(z, t, model->encode_text(token_batch(tokens))), noise);
      const double value = loss.item<double>();
      if (!std::isfinite(value))
        throw NumericError(fmt::format("training diverged: loss {} at epoch {}, step {}, lr {:.3g}", value, epoch, step, lr));
      loss.backward();
      if (options.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model->parameters(), options.grad_clip);
      optimizer.step();
      if (!ema.empty()) {
        torch::NoGradGuard guard;
        // Short warmup so early weights do not dominate the average.
        const double d = std::min(options.ema_decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
        const auto params = model->parameters();
        for (std::size_t i = 0; i < ema.size(); ++i) ema[i].mul_(d).add_(params[i].detach(), 1.0 - d);
      }
      loss_sum += value * static_cast<double>(B);
      ++step;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(N);
    stats.val_loss = evaluate_loss(state, val_set, val_seed);
    stats.null_fraction = static_cast<double>(nulls) / static_cast<double>(N);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.epochs.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);
  }

  if (!ema.empty()) {
    torch::NoGradGuard guard;
    const auto params = model->parameters();
    for (std::size_t i = 0; i < ema.size(); ++i) params[i].copy_(ema[i]);
  }
  result.final_val_loss = evaluate_loss(state, val_set, val_seed);
  state.set_train_steps(step);
  auto& log = state.train_log();
  log["initial_val_loss"] = result.initial_val_loss;
  log["final_val_loss"] = result.final_val_loss;
  log["ema_decay"] = options.ema_decay;
  log["batch_size"] = options.batch_size;
  log["lr"] = options.lr;
  log["seed"] = options.seed;
  log["epochs"] = nlohmann::json::array();
  for (const auto& e : result.epochs)
    log["epochs"].push_back({{"epoch", e.epoch},
                             {"train_loss", e.train_loss},
                             {"val_loss", e.val_loss},
                             {"null_fraction", e.null_fraction}});
  state.check_finite();
  state.freeze();
  return result;
}

TrainResult train(const synthgen::DatasetManifest& manifest, const DenoiserConfig& config, const NoiseSchedule& schedule,
                  const TrainOptions& options) {
  if (manifest.root.empty()) throw ArtifactError("manifest is not materialized");
  auto result = train(TrainingSet::from_manifest(manifest, synthgen::Split::train),
                      TrainingSet::from_manifest(manifest, synthgen::Split::val), config, schedule, options);
  result.state.train_log()["manifest_sha256"] = sha256_file(manifest.root / "manifest.jsonl");
  return result;
}

}  // namespace cfprobe::diffusion
