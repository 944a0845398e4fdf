#include <cmath>
#include <cstring>
#include <limits>

#include <fmt/format.h>

#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"
#include "cfprobe/inversion.hpp"

namespace cfprobe::inversion {

namespace {

double mean_l1(const ImageArray& a, const ImageArray& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.pixels()[i] - b.pixels()[i]);
  return s / static_cast<double>(a.size());
}

torch::Tensor stack_nulls(const std::vector<const NullEmbeddings*>& nulls) {
  std::vector<torch::Tensor> parts;
  for (const auto* n : nulls) parts.push_back(n->embeddings);
  return torch::stack(parts, 1);  // [K, B, D]
}

}  // namespace

void LatentTrajectory::validate() const {
  if (!latents.defined() || latents.dim() != 4 || latents.size(0) < 2 || latents.size(1) != 1)
    throw ShapeError("trajectory latents must be [K + 1, 1, H, W] with K >= 1");
  if (static_cast<int>(timesteps.size()) != steps())
    throw ShapeError(fmt::format("trajectory has {} latents but {} timesteps", latents.size(0), timesteps.size()));
  if (!torch::isfinite(latents).all().item().toBool()) throw NumericError("trajectory contains non-finite latents");
}

void NullEmbeddings::validate() const {
  if (!embeddings.defined() || embeddings.dim() != 2) throw ShapeError("null embeddings must be [K, D]");
  if (static_cast<int>(diverged.size()) != steps())
    throw ShapeError("null embeddings need one divergence flag per step");
  if (!torch::isfinite(embeddings).all().item().toBool()) throw NumericError("null embeddings are not finite");
}

torch::Tensor invert_latents(const NoisePredictor& eps, const NoiseSchedule& schedule, const torch::Tensor& x0,
                             const torch::Tensor& cond) {
  torch::NoGradGuard guard;
  const int K = schedule.num_inference_steps();
  std::vector<torch::Tensor> out{x0};
  auto z = x0;
  for (int level = 1; level <= K; ++level) {
    const auto e = eps(z, schedule.level_timestep(level), cond);
    z = diffusion::ddim_step(z, schedule.level_alpha_bar(level - 1), schedule.level_alpha_bar(level), e);
    out.push_back(z);
  }
  return torch::stack(out);
}

NullTextResult optimize_nulls(const NoisePredictor& eps, const NoiseSchedule& schedule, const torch::Tensor& latents,
                              const torch::Tensor& cond, const torch::Tensor& default_null, double w,
                              const NullTextOptions& options) {
  const int K = schedule.num_inference_steps();
  if (latents.size(0) != K + 1) throw ShapeError(fmt::format("{} latents for {} steps", latents.size(0), K));
  if (w < 1.0) throw ValidationError(fmt::format("null-text optimization needs w >= 1, got {}", w));
  const auto B = latents.size(1);
  const auto D = default_null.size(1);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  NullTextResult result;
  result.embeddings = torch::empty({K, B, D}, default_null.options());
  result.loss.assign(static_cast<std::size_t>(B), std::vector<std::vector<double>>(static_cast<std::size_t>(K)));
  result.diverged.assign(static_cast<std::size_t>(B), std::vector<bool>(static_cast<std::size_t>(K), false));

  auto current = default_null.detach().clone();
  auto z = latents[K];
  for (int level = K; level >= 1; --level) {
    const int t = schedule.level_timestep(level);
    const double ab_from = schedule.level_alpha_bar(level), ab_to = schedule.level_alpha_bar(level - 1);
    const auto target = latents[level - 1];
    const auto k = static_cast<std::size_t>(level - 1);
    torch::Tensor e_cond;
    {
      torch::NoGradGuard guard;
      e_cond = eps(z, t, cond);
    }
    auto step_loss = [&](const torch::Tensor& null) {
      const auto e_null = eps(z, t, null);
      const auto e = e_null + w * (e_cond - e_null);
      return (diffusion::ddim_step(z, ab_from, ab_to, e) - target).pow(2).mean({1, 2, 3});
    };

    auto accepted = current.clone();
    if (w == 1.0) {
      // Guidance ignores the null entirely; the default embedding is already optimal.
      torch::NoGradGuard guard;
      accepted = default_null.detach().clone();
      const auto l = step_loss(accepted);
      for (std::int64_t b = 0; b < B; ++b) result.loss[b][k].push_back(l[b].item<double>());
    } else {
      torch::AutoGradMode grad_mode(true);
      auto param = current.clone();
      auto m = torch::zeros_like(param), v = torch::zeros_like(param);
      std::vector<double> best(static_cast<std::size_t>(B), std::numeric_limits<double>::infinity());
      std::vector<double> initial(static_cast<std::size_t>(B), 0.0);
      std::vector<bool> active(static_cast<std::size_t>(B), true);
      for (int it = 0; it <= options.iters_per_step; ++it) {
        const auto x = param.detach().requires_grad_(true);
        const auto per_image = step_loss(x);
        const auto values = per_image.detach().to(torch::kFloat64).contiguous();
        const auto* vals = values.data_ptr<double>();
        for (std::int64_t b = 0; b < B; ++b) {
          const auto i = static_cast<std::size_t>(b);
          if (!active[i]) continue;
          const double value = vals[b];
          if (it == 0) initial[i] = value;
          if (!std::isfinite(value) || value > options.divergence_ratio * std::max(initial[i], options.early_stop)) {
            result.diverged[i][k] = true;
            active[i] = false;
            continue;
          }
          if (value < best[i]) {
            best[i] = value;
            torch::NoGradGuard guard;
            accepted[b].copy_(x[b].detach());
          }
          result.loss[i][k].push_back(best[i]);
          if (best[i] < options.early_stop) active[i] = false;
        }
        const bool any = std::any_of(active.begin(), active.end(), [](bool a) { return a; });
        if (it == options.iters_per_step || !any) break;
        per_image.sum().backward();
        torch::NoGradGuard guard;
        std::vector<float> mask_values(active.begin(), active.end());
        const auto mask = torch::tensor(mask_values, param.options()).unsqueeze(1);
        const auto g = x.grad();
        m = beta1 * m + (1 - beta1) * g;
        v = beta2 * v + (1 - beta2) * g * g;
        const double c1 = 1 - std::pow(beta1, it + 1), c2 = 1 - std::pow(beta2, it + 1);
        param = param - mask * (options.lr * (m / c1) / ((v / c2).sqrt() + adam_eps));
      }
      for (std::int64_t b = 0; b < B; ++b)
        if (result.diverged[static_cast<std::size_t>(b)][k]) accepted[b].copy_(default_null[b]);
    }
    torch::NoGradGuard guard;
    result.embeddings[level - 1].copy_(accepted);
    current = accepted;
    const auto e_null = eps(z, t, accepted);
    z = diffusion::ddim_step(z, ab_from, ab_to, e_null + w * (e_cond - e_null));
  }
  return result;
}

std::vector<LatentTrajectory> ddim_invert(const DiffusionState& state, const std::vector<ImageArray>& images,
                                          const std::vector<prompter::Prompt>& prompts) {
  if (images.size() != prompts.size()) throw ShapeError("one prompt per image is required");
  if (images.empty()) return {};
  for (const auto& img : images) {
    img.validate();
    if (img.height() != state.config().image_size || img.width() != state.config().image_size)
      throw ShapeError(fmt::format("image is {}x{}, model expects {}", img.height(), img.width(), state.config().image_size));
  }
  torch::NoGradGuard guard;
  std::vector<prompter::TokenList> tokens;
  for (const auto& p : prompts) tokens.push_back(p.tokens);
  const auto latents =
      invert_latents(state.predictor(), state.schedule(), diffusion::to_model_space(images), state.encode(tokens));
  std::vector<LatentTrajectory> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    LatentTrajectory traj;
    traj.latents = latents.select(1, static_cast<std::int64_t>(i)).contiguous();
    traj.prompt = prompts[i];
    traj.guidance = 1.0;
    traj.timesteps = state.schedule().inference_timesteps;
    traj.validate();
    out.push_back(std::move(traj));
  }
  return out;
}

LatentTrajectory ddim_invert(const DiffusionState& state, const ImageArray& image, const prompter::Prompt& prompt) {
  return ddim_invert(state, std::vector<ImageArray>{image}, std::vector<prompter::Prompt>{prompt}).front();
}

NullEmbeddings default_nulls(const DiffusionState& state, double w) {
  torch::NoGradGuard guard;
  const int K = state.schedule().num_inference_steps();
  NullEmbeddings n;
  n.embeddings = state.null_embedding().expand({K, state.config().cond_width}).contiguous();
  n.loss.assign(static_cast<std::size_t>(K), {});
  n.diverged.assign(static_cast<std::size_t>(K), false);
  n.guidance = w;
  return n;
}

std::vector<ImageArray> resample(const DiffusionState& state, const std::vector<torch::Tensor>& terminals,
                                 const std::vector<prompter::Prompt>& prompts,
                                 const std::vector<const NullEmbeddings*>& nulls, double w) {
  if (terminals.size() != prompts.size() || terminals.size() != nulls.size())
    throw ShapeError("resample needs one prompt and one null set per latent");
  if (terminals.empty()) return {};
  const int K = state.schedule().num_inference_steps();
  for (const auto* n : nulls)
    if (n->steps() != K) throw ShapeError(fmt::format("{} null embeddings for {} inference steps", n->steps(), K));
  torch::NoGradGuard guard;
  std::vector<prompter::TokenList> tokens;
  for (const auto& p : prompts) tokens.push_back(p.tokens);
  std::vector<torch::Tensor> zs;
  for (const auto& z : terminals) zs.push_back(z.reshape({1, 1, z.size(-2), z.size(-1)}));
  const auto x = diffusion::ddim_sample_from(state.predictor(), state.schedule(), torch::cat(zs), state.encode(tokens),
                                             stack_nulls(nulls), w);
  std::vector<ImageArray> out;
  for (std::int64_t i = 0; i < x.size(0); ++i) out.push_back(diffusion::from_model_space(x[i]));
  return out;
}

std::vector<ImageArray> reconstruct(const DiffusionState& state, const std::vector<LatentTrajectory>& trajs,
                                    const std::vector<NullEmbeddings>& nulls, double w) {
  if (trajs.size() != nulls.size()) throw ShapeError("one null set per trajectory is required");
  std::vector<torch::Tensor> terminals;
  std::vector<prompter::Prompt> prompts;
  std::vector<const NullEmbeddings*> ptrs;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    if (trajs[i].steps() != nulls[i].steps())
      throw ShapeError(fmt::format("trajectory has {} steps but {} null embeddings", trajs[i].steps(), nulls[i].steps()));
    if (trajs[i].timesteps != state.schedule().inference_timesteps)
      throw ShapeError("trajectory timesteps do not match the model schedule");
    terminals.push_back(trajs[i].terminal());
    prompts.push_back(trajs[i].prompt);
    ptrs.push_back(&nulls[i]);
  }
  return resample(state, terminals, prompts, ptrs, w);
}

ImageArray reconstruct(const DiffusionState& state, const LatentTrajectory& traj, const NullEmbeddings& nulls, double w) {
  return reconstruct(state, std::vector<LatentTrajectory>{traj}, std::vector<NullEmbeddings>{nulls}, w).front();
}

std::vector<NullEmbeddings> optimize_null_text(const DiffusionState& state, const std::vector<LatentTrajectory>& trajs,
                                               double w, const NullTextOptions& options) {
  if (w < 1.0) throw ValidationError(fmt::format("null-text optimization needs w >= 1, got {}", w));
  if (trajs.empty()) return {};
  const int K = state.schedule().num_inference_steps();
  std::vector<torch::Tensor> latents;
  std::vector<prompter::TokenList> tokens;
  for (const auto& tr : trajs) {
    tr.validate();
    if (tr.guidance != 1.0) throw ValidationError("pivot trajectories must be computed at w = 1");
    if (tr.steps() != K || tr.timesteps != state.schedule().inference_timesteps)
      throw ShapeError("trajectory does not match the model schedule");
    latents.push_back(tr.latents);
    tokens.push_back(tr.prompt.tokens);
  }
  const auto B = static_cast<std::int64_t>(trajs.size());
  torch::Tensor cond, null;
  {
    torch::NoGradGuard guard;
    cond = state.encode(tokens);
    null = state.null_embedding(B);
  }
  const auto raw = optimize_nulls(state.predictor(), state.schedule(), torch::stack(latents, 1), cond, null, w, options);

  std::vector<NullEmbeddings> out(trajs.size());
  std::vector<NullEmbeddings> baseline(trajs.size(), default_nulls(state, w));
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    auto& n = out[i];
    n.embeddings = raw.embeddings.select(1, static_cast<std::int64_t>(i)).contiguous();
    n.loss = raw.loss[i];
    n.diverged = raw.diverged[i];
    n.guidance = w;
  }
  const auto optimized = reconstruct(state, trajs, out, w);
  const auto plain = reconstruct(state, trajs, baseline, w);
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto input = diffusion::from_model_space(trajs[i].latents[0]);
    out[i].baseline_l1 = mean_l1(plain[i], input);
    out[i].optimized_l1 = mean_l1(optimized[i], input);
    if (out[i].optimized_l1 > out[i].baseline_l1) {
      out[i].embeddings = baseline[i].embeddings.clone();
      out[i].reverted = true;
      out[i].optimized_l1 = out[i].baseline_l1;
    }
    out[i].validate();
  }
  return out;
}

NullEmbeddings optimize_null_text(const DiffusionState& state, const LatentTrajectory& traj, double w,
                                  const NullTextOptions& options) {
  return optimize_null_text(state, std::vector<LatentTrajectory>{traj}, w, options).front();
}

// Blob layout (little-endian):
//   "CFPTRAJ1" | u32 version | u32 K | u32 H | u32 W | u32 D (0 = no nulls) | f64 guidance
//   | i32 timesteps[K] | u32 prompt bytes | prompt text | f32 latents[(K+1)*H*W]
//   | if D: f64 null guidance | u8 reverted | f64 baseline_l1 | f64 optimized_l1 | u8 diverged[K] | f32 nulls[K*D]
//   | u32 crc32 of everything before it
namespace {

constexpr char kMagic[8] = {'C', 'F', 'P', 'T', 'R', 'A', 'J', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_floats(std::string& out, const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous();
  out.append(static_cast<const char*>(c.data_ptr()), c.nbytes());
}

struct Reader {
  std::string_view data;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > data.size()) throw ArtifactError("trajectory blob is truncated");
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
  }
  torch::Tensor floats(std::vector<std::int64_t> shape) {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    need(static_cast<std::size_t>(n) * sizeof(float));
    auto t = torch::empty(shape, torch::kFloat32);
    std::memcpy(t.data_ptr(), data.data() + pos, static_cast<std::size_t>(n) * sizeof(float));
    pos += static_cast<std::size_t>(n) * sizeof(float);
    return t;
  }
};

}  // namespace

std::string encode_blob(const LatentTrajectory& traj, const NullEmbeddings* nulls) {
  traj.validate();
  const auto K = static_cast<std::uint32_t>(traj.steps());
  std::string out(kMagic, sizeof(kMagic));
  put(out, kVersion);
  put(out, K);
  put(out, static_cast<std::uint32_t>(traj.latents.size(2)));
  put(out, static_cast<std::uint32_t>(traj.latents.size(3)));
  if (nulls) {
    nulls->validate();
    if (nulls->steps() != traj.steps()) throw ShapeError("null embeddings do not match the trajectory length");
  }
  put(out, nulls ? static_cast<std::uint32_t>(nulls->embeddings.size(1)) : 0u);
  put(out, traj.guidance);
  for (int t : traj.timesteps) put(out, static_cast<std::int32_t>(t));
  put(out, static_cast<std::uint32_t>(traj.prompt.text.size()));
  out += traj.prompt.text;
  put_floats(out, traj.latents);
  if (nulls) {
    put(out, nulls->guidance);
    put(out, static_cast<std::uint8_t>(nulls->reverted));
    put(out, nulls->baseline_l1);
    put(out, nulls->optimized_l1);
    for (bool d : nulls->diverged) put(out, static_cast<std::uint8_t>(d));
    put_floats(out, nulls->embeddings);
  }
  put(out, crc32(as_bytes_span(std::span<const char>(out.data(), out.size()))));
  return out;
}

Blob decode_blob(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ArtifactError("not a trajectory blob");
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  const auto body = bytes.substr(0, bytes.size() - 4);
  if (crc32(as_bytes_span(std::span<const char>(body.data(), body.size()))) != stored)
    throw ArtifactError("trajectory blob checksum mismatch");
  Reader r{body, sizeof(kMagic)};
  if (const auto v = r.get<std::uint32_t>(); v != kVersion)
    throw ArtifactError(fmt::format("unsupported trajectory blob version {}", v));
  const auto K = r.get<std::uint32_t>(), H = r.get<std::uint32_t>(), W = r.get<std::uint32_t>();
  const auto D = r.get<std::uint32_t>();
  if (K == 0 || K > 100000 || H == 0 || W == 0 || H > 4096 || W > 4096) throw ArtifactError("implausible blob header");
  Blob blob;
  auto& tr = blob.trajectory;
  tr.guidance = r.get<double>();
  for (std::uint32_t i = 0; i < K; ++i) tr.timesteps.push_back(r.get<std::int32_t>());
  const auto n = r.get<std::uint32_t>();
  r.need(n);
  const std::string text(body.substr(r.pos, n));
  r.pos += n;
  try {
    tr.prompt = prompter::make_prompt(prompter::parse_prompt(text));
  } catch (const ValidationError& e) {
    throw ArtifactError(fmt::format("blob prompt is invalid: {}", e.what()));
  }
  tr.latents = r.floats({K + 1, 1, H, W});
  if (D > 0) {
    NullEmbeddings nulls;
    nulls.guidance = r.get<double>();
    nulls.reverted = r.get<std::uint8_t>() != 0;
    nulls.baseline_l1 = r.get<double>();
    nulls.optimized_l1 = r.get<double>();
    for (std::uint32_t i = 0; i < K; ++i) nulls.diverged.push_back(r.get<std::uint8_t>() != 0);
    nulls.loss.assign(K, {});
    nulls.embeddings = r.floats({K, D});
    blob.nulls = std::move(nulls);
  }
  if (r.pos != body.size()) throw ArtifactError("trailing bytes in trajectory blob");
  return blob;
}

void write_blob(const std::filesystem::path& path, const LatentTrajectory& traj, const NullEmbeddings* nulls) {
  write_file_atomic(path, encode_blob(traj, nulls));
}

Blob read_blob(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw ArtifactError(fmt::format("cannot read {}: {}", path.string(), e.what()));
  }
  return decode_blob(bytes);
}

}  // namespace cfprobe::inversion
