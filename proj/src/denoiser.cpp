#include <cmath>

#include <fmt/format.h>

#include "cfprobe/diffusion.hpp"
#include "cfprobe/error.hpp"

namespace cfprobe::diffusion {

namespace nn = torch::nn;

void DenoiserConfig::validate() const {
  if (image_size <= 0 || (image_size & (image_size - 1)) != 0)
    throw ValidationError(fmt::format("image_size {} is not a power of two", image_size));
  if (patch < 1 || image_size % patch != 0) throw ValidationError(fmt::format("patch {} does not divide the image", patch));
  if (channel_mult.empty()) throw ValidationError("channel_mult is empty");
  const int lowest = image_size / patch >> (channel_mult.size() - 1);
  if (lowest < 1 || (image_size / patch) % (1 << (channel_mult.size() - 1)) != 0)
    throw ValidationError("too many resolution levels for the patch grid");
  for (int m : channel_mult)
    if (m < 1 || (base_channels * m) % groups != 0)
      throw ValidationError(fmt::format("channels {} not divisible by {} groups", base_channels * m, groups));
  if (base_channels < 1 || cond_width < 1 || token_width < 1) throw ValidationError("widths must be positive");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"image_size", image_size}, {"patch", patch},         {"base_channels", base_channels},
          {"channel_mult", channel_mult}, {"attention", attention}, {"cond_width", cond_width},
          {"token_width", token_width}, {"groups", groups},     {"vocab_size", vocab_size}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.image_size = j.at("image_size");
  c.patch = j.at("patch");
  c.base_channels = j.at("base_channels");
  c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.attention = j.at("attention");
  c.cond_width = j.at("cond_width");
  c.token_width = j.at("token_width");
  c.groups = j.at("groups");
  c.vocab_size = j.at("vocab_size");
  c.validate();
  return c;
}

namespace {

nn::Conv2d conv3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

// GroupNorm -> SiLU -> conv, twice, with FiLM (scale, shift) from the embedding in between.
struct ResBlockImpl : nn::Module {
  ResBlockImpl(int in, int out, int emb, int groups)
      : norm1(register_module("norm1", nn::GroupNorm(groups, in))),
        conv1(register_module("conv1", conv3(in, out))),
        film(register_module("film", nn::Linear(emb, 2 * out))),
        norm2(register_module("norm2", nn::GroupNorm(groups, out))),
        conv2(register_module("conv2", conv3(out, out))) {
    if (in != out) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1(torch::silu(norm1(x)));
    const auto ss = film(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1).chunk(2, 1);
    h = norm2(h) * (1 + ss[0]) + ss[1];
    h = conv2(torch::silu(h));
    return h + (skip ? skip(x) : x);
  }

  nn::GroupNorm norm1;
  nn::Conv2d conv1;
  nn::Linear film;
  nn::GroupNorm norm2;
  nn::Conv2d conv2;
  nn::Conv2d skip{nullptr};
};
TORCH_MODULE(ResBlock);

// Single-head self-attention over spatial positions.
struct AttentionImpl : nn::Module {
  AttentionImpl(int channels, int groups)
      : norm(register_module("norm", nn::GroupNorm(groups, channels))),
        qkv(register_module("qkv", nn::Conv2d(nn::Conv2dOptions(channels, 3 * channels, 1)))),
        proj(register_module("proj", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    const auto parts = qkv(norm(x)).reshape({B, 3, C, H * W}).unbind(1);
    const auto attn = torch::softmax(torch::bmm(parts[0].transpose(1, 2), parts[1]) / std::sqrt(double(C)), -1);
    const auto out = torch::bmm(parts[2], attn.transpose(1, 2)).reshape({B, C, H, W});
    return x + proj(out);
  }

  nn::GroupNorm norm;
  nn::Conv2d qkv;
  nn::Conv2d proj;
};
TORCH_MODULE(Attention);

torch::Tensor timestep_embedding(const torch::Tensor& t, int width, torch::Dtype dtype) {
  const int half = width / 2;
  const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, dtype) / static_cast<double>(half));
  const auto args = t.to(dtype).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

}  // namespace

DenoiserImpl::DenoiserImpl(DenoiserConfig config) : config_(std::move(config)) {
  if (config_.vocab_size == 0) config_.vocab_size = static_cast<int>(prompter::Vocabulary::standard().size());
  config_.validate();
  const int D = config_.cond_width;
  const int in_ch = config_.patch * config_.patch;
  const int G = config_.groups;

  tokens_ = register_module("tokens", nn::Embedding(config_.vocab_size, config_.token_width));
  text_mlp_ = register_module("text_mlp", nn::Sequential(nn::Linear(config_.token_width, D), nn::SiLU(), nn::Linear(D, D)));
  time_mlp_ = register_module("time_mlp", nn::Sequential(nn::Linear(D, 2 * D), nn::SiLU(), nn::Linear(2 * D, D)));

  std::vector<int> ch;
  for (int m : config_.channel_mult) ch.push_back(config_.base_channels * m);
  const auto L = ch.size();

  conv_in_ = register_module("conv_in", conv3(in_ch, ch[0]));
  down_ = register_module("down", nn::ModuleList());
  downsample_ = register_module("downsample", nn::ModuleList());
  int prev = ch[0];
  for (std::size_t l = 0; l < L; ++l) {
    down_->push_back(ResBlock(prev, ch[l], D, G));
    prev = ch[l];
    if (l + 1 < L) downsample_->push_back(conv3(prev, prev, 2));
  }
  mid_ = register_module("mid", nn::ModuleList());
  mid_->push_back(ResBlock(prev, prev, D, G));
  if (config_.attention) mid_->push_back(Attention(prev, G));

  up_ = register_module("up", nn::ModuleList());
  upsample_ = register_module("upsample", nn::ModuleList());
  for (std::size_t i = 0; i < L; ++i) {
    const auto l = L - 1 - i;
    up_->push_back(ResBlock(prev + ch[l], ch[l], D, G));
    prev = ch[l];
    if (l > 0) upsample_->push_back(conv3(prev, prev));
  }
  norm_out_ = register_module("norm_out", nn::GroupNorm(G, ch[0]));
  conv_out_ = register_module("conv_out", conv3(ch[0], in_ch));
}

torch::Tensor DenoiserImpl::encode_text(const torch::Tensor& tokens) {
  const auto embedded = tokens_(tokens);
  const auto mask = (tokens != prompter::Vocabulary::kPad).to(embedded.scalar_type()).unsqueeze(-1);
  const auto pooled = (embedded * mask).sum(1) / mask.sum(1).clamp_min(1.0);
  return text_mlp_->forward(pooled);
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& cond) {
  if (z.dim() != 4 || z.size(1) != 1 || z.size(2) != config_.image_size || z.size(3) != config_.image_size)
    throw ShapeError(fmt::format("denoiser expects [B, 1, {0}, {0}], got {1}", config_.image_size, c10::str(z.sizes())));
  if (cond.dim() != 2 || cond.size(0) != z.size(0) || cond.size(1) != config_.cond_width)
    throw ShapeError(fmt::format("conditioning must be [{}, {}], got {}", z.size(0), config_.cond_width, c10::str(cond.sizes())));
  const auto emb = time_mlp_->forward(timestep_embedding(t, config_.cond_width, z.scalar_type())) + cond;

  auto h = conv_in_(torch::pixel_unshuffle(z, config_.patch));
  std::vector<torch::Tensor> skips;
  for (std::size_t l = 0; l < down_->size(); ++l) {
    h = down_[l]->as<ResBlockImpl>()->forward(h, emb);
    skips.push_back(h);
    if (l < downsample_->size()) h = downsample_[l]->as<nn::Conv2dImpl>()->forward(h);
  }
  h = mid_[0]->as<ResBlockImpl>()->forward(h, emb);
  if (config_.attention) h = mid_[1]->as<AttentionImpl>()->forward(h);
  for (std::size_t i = 0; i < up_->size(); ++i) {
    h = up_[i]->as<ResBlockImpl>()->forward(torch::cat({h, skips[skips.size() - 1 - i]}, 1), emb);
    if (i < upsample_->size()) {
      h = torch::upsample_nearest2d(h, {h.size(2) * 2, h.size(3) * 2});
      h = upsample_[i]->as<nn::Conv2dImpl>()->forward(h);
    }
  }
  h = conv_out_(torch::silu(norm_out_(h)));
  return torch::pixel_shuffle(h, config_.patch);
}

std::int64_t DenoiserImpl::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

}  // namespace cfprobe::diffusion
