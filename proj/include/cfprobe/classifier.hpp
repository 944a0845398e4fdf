#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include "cfprobe/attributes.hpp"
#include "cfprobe/image.hpp"
#include "cfprobe/manifest.hpp"

namespace cfprobe::evalsuite {

/// Position of an attribute in kEvalAttributes.
std::size_t attribute_index(EvalAttribute a);

/// Convolutional trunk shared by every attribute head; its stage outputs also
/// serve as the perceptual feature extractor.
class ClassifierNetImpl : public torch::nn::Module {
 public:
  explicit ClassifierNetImpl(int image_size = kDefaultImageSize, int base_channels = 16);

  /// x [B, 1, H, W] in [0, 1] -> one feature map per stage.
  std::vector<torch::Tensor> features(const torch::Tensor& x);
  /// Logits per attribute, in kEvalAttributes order.
  std::vector<torch::Tensor> forward(const torch::Tensor& x);

  int image_size() const { return image_size_; }
  int base_channels() const { return base_channels_; }

 private:
  int image_size_;
  int base_channels_;
  torch::nn::ModuleList stages_{nullptr};
  torch::nn::Linear shared_{nullptr};
  torch::nn::ModuleList heads_{nullptr};
};
TORCH_MODULE(ClassifierNet);

struct ReliabilityBin {
  double lower = 0, upper = 0;
  std::size_t count = 0;
  double mean_confidence = 0;
  double accuracy = 0;
};

struct ClassifierReport {
  EvalAttribute attribute = EvalAttribute::sex;
  double val_accuracy = 0;
  double train_accuracy = 0;
  std::vector<ReliabilityBin> reliability;  // 10 equal-width confidence bins on val
};

/// Frozen classifiers for all six attributes plus the perceptual extractor.
class ClassifierBank {
 public:
  static constexpr double kAccuracyFloor = 0.95;

  ClassifierBank(ClassifierNet net, std::vector<ClassifierReport> reports);

  /// Class probabilities [B, num_classes(a)] for images in [0, 1].
  torch::Tensor probabilities(EvalAttribute a, const std::vector<ImageArray>& images) const;
  /// All attributes at once, kEvalAttributes order.
  std::vector<torch::Tensor> probabilities(const std::vector<ImageArray>& images) const;
  std::vector<torch::Tensor> features(const std::vector<ImageArray>& images) const;

  const ClassifierReport& report(EvalAttribute a) const;
  const std::vector<ClassifierReport>& reports() const { return reports_; }
  /// SHA-256 over the frozen weights; audited across a report run.
  const std::string& weights_hash() const { return hash_; }
  std::string current_weights_hash() const;

  void save(const std::filesystem::path& dir) const;
  /// Throws ArtifactError on missing files, hash mismatch or an accuracy below the floor.
  static ClassifierBank load(const std::filesystem::path& dir);

 private:
  ClassifierNet net_;
  std::vector<ClassifierReport> reports_;
  std::string hash_;
};

/// A single attribute's view of the bank.
struct AttributeClassifier {
  const ClassifierBank* bank = nullptr;
  EvalAttribute attribute = EvalAttribute::sex;

  /// Probability of `cls` for each image.
  std::vector<double> scores(const std::vector<ImageArray>& images, int cls) const;
  const ClassifierReport& report() const { return bank->report(attribute); }
};

struct ClassifierTrainOptions {
  int epochs = 8;
  int batch_size = 64;
  double lr = 1e-3;
  double noise_augment = 0.03;  // max sigma of additive Gaussian noise during training
  std::uint64_t seed = 0;
  std::function<void(int epoch, double loss, const std::vector<double>& val_accuracy)> on_epoch;
};

/// Multi-task training of all six heads. Throws ValidationError naming every
/// attribute whose validation accuracy misses the floor.
ClassifierBank train_classifiers(const synthgen::DatasetManifest& manifest, const ClassifierTrainOptions& options);

/// Accuracy and reliability bins of one head on a record set.
ClassifierReport evaluate_classifier(const ClassifierBank& bank, EvalAttribute a,
                                     const std::vector<ImageArray>& images, const std::vector<int>& labels);

}  // namespace cfprobe::evalsuite
