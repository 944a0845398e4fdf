#include "cfprobe/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <ATen/CPUGeneratorImpl.h>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"

namespace cfprobe::evalsuite {

namespace {

constexpr int kStages = 4;
constexpr int kHidden = 128;
constexpr int kBins = 10;

torch::Tensor to_unit_batch(const std::vector<ImageArray>& images, int expected) {
  if (images.empty()) throw ShapeError("no images to classify");
  auto out = torch::empty({static_cast<std::int64_t>(images.size()), 1, expected, expected}, torch::kFloat32);
  auto* dst = out.data_ptr<float>();
  for (const auto& img : images) {
    if (img.height() != expected || img.width() != expected)
      throw ShapeError(fmt::format("classifier expects {0}x{0} images, got {1}x{2}", expected, img.height(),
                                   img.width()));
    dst = std::copy(img.pixels().begin(), img.pixels().end(), dst);
  }
  return out;
}

std::string weights_digest(ClassifierNetImpl& net) {
  std::vector<std::uint8_t> bytes;
  for (const auto& item : net.named_parameters()) {
    bytes.insert(bytes.end(), item.key().begin(), item.key().end());
    const auto c = item.value().detach().contiguous();
    const auto* data = static_cast<const std::uint8_t*>(c.data_ptr());
    bytes.insert(bytes.end(), data, data + c.nbytes());
  }
  return sha256_hex(bytes);
}

nlohmann::json report_json(const ClassifierReport& r) {
  auto bins = nlohmann::json::array();
  for (const auto& b : r.reliability)
    bins.push_back({{"lower", b.lower}, {"upper", b.upper}, {"count", b.count},
                    {"mean_confidence", b.mean_confidence}, {"accuracy", b.accuracy}});
  return {{"attribute", to_string(r.attribute)}, {"val_accuracy", r.val_accuracy},
          {"train_accuracy", r.train_accuracy}, {"reliability", bins}};
}

ClassifierReport report_from_json(const nlohmann::json& j) {
  ClassifierReport r;
  r.attribute = parse_eval_attribute(j.at("attribute").get<std::string>());
  r.val_accuracy = j.at("val_accuracy");
  r.train_accuracy = j.at("train_accuracy");
  for (const auto& b : j.at("reliability"))
    r.reliability.push_back({b.at("lower"), b.at("upper"), b.at("count"), b.at("mean_confidence"), b.at("accuracy")});
  return r;
}

struct LabelledSet {
  std::vector<ImageArray> images;
  torch::Tensor labels;  // [N, 6] int64
};

LabelledSet load_split(const synthgen::DatasetManifest& m, synthgen::Split split) {
  LabelledSet set;
  const auto records = m.in_split(split);
  set.labels = torch::empty({static_cast<std::int64_t>(records.size()), 6}, torch::kInt64);
  auto acc = set.labels.accessor<std::int64_t, 2>();
  for (std::size_t i = 0; i < records.size(); ++i) {
    set.images.push_back(m.image(records[i]->id));
    for (std::size_t a = 0; a < kEvalAttributes.size(); ++a)
      acc[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(a)] = label_of(*records[i], kEvalAttributes[a]);
  }
  return set;
}

std::vector<double> accuracies(const ClassifierBank& bank, const LabelledSet& set) {
  std::vector<double> out;
  for (std::size_t a = 0; a < kEvalAttributes.size(); ++a) {
    std::vector<int> labels(set.images.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
      labels[i] = static_cast<int>(set.labels[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(a)].item<std::int64_t>());
    out.push_back(evaluate_classifier(bank, kEvalAttributes[a], set.images, labels).val_accuracy);
  }
  return out;
}

std::vector<ClassifierReport> blank_reports() {
  std::vector<ClassifierReport> reports;
  for (auto a : kEvalAttributes) {
    ClassifierReport r;
    r.attribute = a;
    reports.push_back(r);
  }
  return reports;
}

}  // namespace

std::size_t attribute_index(EvalAttribute a) {
  return static_cast<std::size_t>(std::find(kEvalAttributes.begin(), kEvalAttributes.end(), a) - kEvalAttributes.begin());
}

ClassifierNetImpl::ClassifierNetImpl(int image_size, int base_channels)
    : image_size_(image_size), base_channels_(base_channels) {
  if (image_size < 16 || (image_size & (image_size - 1)) != 0)
    throw ValidationError(fmt::format("classifier image size {} must be a power of two >= 16", image_size));
  const std::array<int, kStages> widths = {base_channels, 2 * base_channels, 4 * base_channels, 4 * base_channels};
  stages_ = register_module("stages", torch::nn::ModuleList());
  int in = 1;
  for (int w : widths) {
    stages_->push_back(torch::nn::Sequential(
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in, w, 3).padding(1)), torch::nn::ReLU(),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(w, w, 3).padding(1)), torch::nn::ReLU()));
    in = w;
  }
  const int side = image_size / 8;
  shared_ = register_module("shared", torch::nn::Linear(in * side * side, kHidden));
  heads_ = register_module("heads", torch::nn::ModuleList());
  for (auto a : kEvalAttributes) heads_->push_back(torch::nn::Linear(kHidden, num_classes(a)));
}

std::vector<torch::Tensor> ClassifierNetImpl::features(const torch::Tensor& x) {
  std::vector<torch::Tensor> out;
  auto h = (x - 0.5) * 2.0;
  for (int i = 0; i < kStages; ++i) {
    if (i > 0) h = torch::avg_pool2d(h, 2);
    h = stages_[static_cast<std::size_t>(i)]->as<torch::nn::Sequential>()->forward(h);
    out.push_back(h);
  }
  return out;
}

std::vector<torch::Tensor> ClassifierNetImpl::forward(const torch::Tensor& x) {
  const auto h = torch::relu(shared_(features(x).back().flatten(1)));
  std::vector<torch::Tensor> logits;
  for (std::size_t a = 0; a < heads_->size(); ++a) logits.push_back(heads_[a]->as<torch::nn::Linear>()->forward(h));
  return logits;
}

ClassifierBank::ClassifierBank(ClassifierNet net, std::vector<ClassifierReport> reports)
    : net_(std::move(net)), reports_(std::move(reports)) {
  if (reports_.size() != kEvalAttributes.size()) throw ValidationError("classifier bank needs one report per attribute");
  for (std::size_t a = 0; a < reports_.size(); ++a)
    if (reports_[a].attribute != kEvalAttributes[a]) throw ValidationError("classifier reports out of attribute order");
  net_->eval();
  for (auto& p : net_->parameters()) p.set_requires_grad(false);
  hash_ = weights_digest(*net_);
}

std::vector<torch::Tensor> ClassifierBank::probabilities(const std::vector<ImageArray>& images) const {
  torch::NoGradGuard guard;
  auto logits = net_.ptr()->forward(to_unit_batch(images, net_->image_size()));
  for (auto& l : logits) l = torch::softmax(l.to(torch::kFloat64), 1);
  return logits;
}

torch::Tensor ClassifierBank::probabilities(EvalAttribute a, const std::vector<ImageArray>& images) const {
  return probabilities(images)[attribute_index(a)];
}

std::vector<torch::Tensor> ClassifierBank::features(const std::vector<ImageArray>& images) const {
  torch::NoGradGuard guard;
  return net_.ptr()->features(to_unit_batch(images, net_->image_size()));
}

const ClassifierReport& ClassifierBank::report(EvalAttribute a) const { return reports_.at(attribute_index(a)); }

std::string ClassifierBank::current_weights_hash() const { return weights_digest(*net_.ptr()); }

void ClassifierBank::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  const auto tmp = fs::path(dir.string() + ".tmp");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  torch::serialize::OutputArchive archive;
  net_.ptr()->save(archive);
  archive.save_to((tmp / "weights.pt").string());
  auto reports = nlohmann::json::array();
  for (const auto& r : reports_) reports.push_back(report_json(r));
  const nlohmann::json meta = {{"format", "cfprobe-classifiers"},
                               {"version", 1},
                               {"image_size", net_->image_size()},
                               {"base_channels", net_->base_channels()},
                               {"weights_hash", hash_},
                               {"reports", reports}};
  write_file_atomic(tmp / "bank.json", meta.dump(2));
  if (!dir.parent_path().empty()) fs::create_directories(dir.parent_path());
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

ClassifierBank ClassifierBank::load(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(dir / "bank.json"));
  } catch (const std::exception& e) {
    throw ArtifactError(fmt::format("cannot read classifier bank at {}: {}", dir.string(), e.what()));
  }
  if (meta.value("format", "") != "cfprobe-classifiers")
    throw ArtifactError(fmt::format("{} is not a classifier bank", dir.string()));
  ClassifierNet net(meta.at("image_size").get<int>(), meta.at("base_channels").get<int>());
  try {
    torch::serialize::InputArchive archive;
    archive.load_from((dir / "weights.pt").string());
    net->load(archive);
  } catch (const c10::Error& e) {
    throw ArtifactError(fmt::format("cannot load classifier weights from {}: {}", dir.string(),
                                    e.what_without_backtrace()));
  }
  std::vector<ClassifierReport> reports;
  for (const auto& r : meta.at("reports")) reports.push_back(report_from_json(r));
  for (const auto& r : reports)
    if (r.val_accuracy < kAccuracyFloor)
      throw ArtifactError(fmt::format("{} classifier accuracy {:.4f} is below the {:.2f} floor",
                                      to_string(r.attribute), r.val_accuracy, kAccuracyFloor));
  ClassifierBank bank(std::move(net), std::move(reports));
  if (bank.weights_hash() != meta.at("weights_hash").get<std::string>())
    throw ArtifactError(fmt::format("classifier bank at {} fails its hash check", dir.string()));
  return bank;
}

std::vector<double> AttributeClassifier::scores(const std::vector<ImageArray>& images, int cls) const {
  if (bank == nullptr) throw ValidationError("attribute classifier has no bank");
  if (cls < 0 || cls >= num_classes(attribute))
    throw ValidationError(fmt::format("class {} is out of range for {}", cls, to_string(attribute)));
  const auto p = bank->probabilities(attribute, images).select(1, cls).contiguous();
  return {p.data_ptr<double>(), p.data_ptr<double>() + p.numel()};
}

ClassifierReport evaluate_classifier(const ClassifierBank& bank, EvalAttribute a, const std::vector<ImageArray>& images,
                                     const std::vector<int>& labels) {
  if (images.size() != labels.size()) throw ShapeError("images and labels differ in length");
  ClassifierReport report;
  report.attribute = a;
  report.reliability.resize(kBins);
  for (int b = 0; b < kBins; ++b) {
    report.reliability[static_cast<std::size_t>(b)].lower = static_cast<double>(b) / kBins;
    report.reliability[static_cast<std::size_t>(b)].upper = static_cast<double>(b + 1) / kBins;
  }
  std::size_t correct = 0;
  constexpr std::size_t kChunk = 256;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::vector<ImageArray> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                        images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), start + kChunk)));
    const auto p = bank.probabilities(a, chunk);
    const auto [conf, pred] = p.max(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const double c = conf[static_cast<std::int64_t>(i)].item<double>();
      const bool ok = pred[static_cast<std::int64_t>(i)].item<std::int64_t>() == labels[start + i];
      correct += ok;
      auto& bin = report.reliability[static_cast<std::size_t>(std::min(kBins - 1, static_cast<int>(c * kBins)))];
      bin.count += 1;
      bin.mean_confidence += c;
      bin.accuracy += ok;
    }
  }
  for (auto& bin : report.reliability)
    if (bin.count > 0) {
      bin.mean_confidence /= static_cast<double>(bin.count);
      bin.accuracy /= static_cast<double>(bin.count);
    }
  report.val_accuracy = images.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.size());
  return report;
}

ClassifierBank train_classifiers(const synthgen::DatasetManifest& manifest, const ClassifierTrainOptions& options) {
  if (options.epochs <= 0 || options.batch_size <= 0 || options.lr <= 0)
    throw ValidationError("classifier training needs positive epochs, batch size and learning rate");
  const auto train = load_split(manifest, synthgen::Split::train);
  const auto val = load_split(manifest, synthgen::Split::val);
  if (train.images.empty() || val.images.empty()) throw ValidationError("classifier training needs train and val records");
  const int size = train.images.front().height();

  torch::manual_seed(options.seed);
  ClassifierNet net(size);
  torch::optim::Adam optim(net->parameters(), torch::optim::AdamOptions(options.lr));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed + 1);
  std::mt19937_64 rng(options.seed);
  const auto x_all = to_unit_batch(train.images, size);

  std::vector<std::int64_t> order(train.images.size());
  std::iota(order.begin(), order.end(), 0);
  const auto steps_per_epoch = static_cast<int>((order.size() + options.batch_size - 1) / options.batch_size);
  const int total_steps = steps_per_epoch * options.epochs;
  int step = 0;
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    net->train();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(options.batch_size)) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      const auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                               order.begin() + static_cast<std::ptrdiff_t>(end)));
      auto x = x_all.index_select(0, idx);
      const auto y = train.labels.index_select(0, idx);
      const auto sigma = torch::rand({x.size(0), 1, 1, 1}, gen) * options.noise_augment;
      x = (x + sigma * torch::randn(x.sizes(), gen)).clamp(0, 1);
      const double lr = options.lr * 0.5 * (1.0 + std::cos(M_PI * step / std::max(1, total_steps)));
      for (auto& group : optim.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
      const auto logits = net->forward(x);
      auto loss = torch::zeros({}, torch::kFloat32);
      for (std::size_t a = 0; a < logits.size(); ++a)
        loss = loss + torch::cross_entropy_loss(logits[a], y.select(1, static_cast<std::int64_t>(a)));
      const double value = loss.item<double>();
      if (!std::isfinite(value))
        throw NumericError(fmt::format("classifier loss is not finite at epoch {} step {}", epoch, step));
      optim.zero_grad();
      loss.backward();
      optim.step();
      loss_sum += value * static_cast<double>(end - start);
      ++step;
    }
    if (options.on_epoch) {
      net->eval();
      ClassifierBank probe(net, blank_reports());
      // Temporary bank freezes the shared module; unfreeze to keep training.
      for (auto& p : net->parameters()) p.set_requires_grad(true);
      options.on_epoch(epoch, loss_sum / static_cast<double>(order.size()), accuracies(probe, val));
    }
  }

  auto reports = blank_reports();
  ClassifierBank bank(net, reports);
  std::vector<std::string> failing;
  for (std::size_t a = 0; a < kEvalAttributes.size(); ++a) {
    std::vector<int> val_labels(val.images.size()), train_labels(train.images.size());
    for (std::size_t i = 0; i < val_labels.size(); ++i)
      val_labels[i] = static_cast<int>(val.labels[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(a)].item<std::int64_t>());
    for (std::size_t i = 0; i < train_labels.size(); ++i)
      train_labels[i] = static_cast<int>(train.labels[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(a)].item<std::int64_t>());
    reports[a] = evaluate_classifier(bank, kEvalAttributes[a], val.images, val_labels);
    reports[a].train_accuracy = evaluate_classifier(bank, kEvalAttributes[a], train.images, train_labels).val_accuracy;
    if (reports[a].val_accuracy < ClassifierBank::kAccuracyFloor)
      failing.push_back(fmt::format("{} ({:.4f})", to_string(kEvalAttributes[a]), reports[a].val_accuracy));
  }
  if (!failing.empty())
    throw ValidationError(fmt::format("classifier accuracy below {:.2f}: {}", ClassifierBank::kAccuracyFloor,
                                      fmt::join(failing, ", ")));
  return ClassifierBank(net, std::move(reports));
}

}  // namespace cfprobe::evalsuite
