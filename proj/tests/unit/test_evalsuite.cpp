#include "torch_catch.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include <fmt/format.h>

#include "cfprobe/causal_spec.hpp"
#include "cfprobe/error.hpp"
#include "cfprobe/evalsuite.hpp"
#include "cfprobe/hashing.hpp"
#include "cfprobe/render.hpp"

using namespace cfprobe;
using namespace cfprobe::evalsuite;
namespace fs = std::filesystem;

namespace {

ImageArray random_image(std::mt19937_64& rng, int size = kDefaultImageSize) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> px(static_cast<std::size_t>(size) * size);
  for (auto& v : px) v = u(rng);
  return ImageArray(size, size, std::move(px));
}

ImageArray add_noise(const ImageArray& img, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, sigma);
  std::vector<float> px(img.pixels().begin(), img.pixels().end());
  for (auto& v : px) v = static_cast<float>(std::clamp(v + n(rng), 0.0, 1.0));
  return ImageArray(img.height(), img.width(), std::move(px));
}

std::vector<ClassifierReport> reports_with_accuracy(double acc) {
  std::vector<ClassifierReport> out;
  for (auto a : kEvalAttributes) {
    ClassifierReport r;
    r.attribute = a;
    r.val_accuracy = acc;
    r.train_accuracy = acc;
    out.push_back(r);
  }
  return out;
}

ClassifierBank untrained_bank(std::uint64_t seed, double acc = 1.0) {
  torch::manual_seed(seed);
  return ClassifierBank(ClassifierNet(kDefaultImageSize, 8), reports_with_accuracy(acc));
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cfprobe_evalsuite_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Probe probe(std::string id, EvalAttribute row, double f, double cf) {
  Probe p;
  p.record_id = std::move(id);
  p.rows = {row};
  p.factual_scores.fill(f);
  p.counterfactual_scores.fill(cf);
  p.lpips = cf;
  p.l1 = f;
  return p;
}

}  // namespace

TEST_CASE("L1 matches a brute-force oracle on random pairs", "[evalsuite][oracle]") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_image(rng, 16);
    const auto b = random_image(rng, 16);
    double sum = 0.0;
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) sum += std::abs(static_cast<double>(a.at(y, x)) - b.at(y, x));
    const double expected = sum / 256.0;
    CHECK(std::abs(l1_distance(a, b) - expected) < 1e-6);
    CHECK(std::abs(l1_distance_bytes(a, b) - 255.0 * expected) < 1e-6 * 255.0);
  }
  CHECK(l1_distance(ImageArray(8, 8, 0.25f), ImageArray(8, 8, 0.25f)) == 0.0);
  CHECK_THROWS_AS(l1_distance(ImageArray(8, 8), ImageArray(8, 4)), ShapeError);
}

TEST_CASE("CPG analytic cases", "[evalsuite][cpg]") {
  CHECK(cpg(0.3, 0.3) == 0.0);
  CHECK(std::abs(cpg(0.1, 0.9) - 0.8) < 1e-12);
  CHECK(std::abs(cpg(0.9, 0.1) - 0.8) < 1e-12);
  CHECK(std::abs(cpg(std::vector<double>{0.0, 0.2}, std::vector<double>{0.6, 1.0}) - 0.7) < 1e-12);
  CHECK_THROWS_AS(cpg(-0.1, 0.5), ValidationError);
  CHECK_THROWS_AS(cpg(0.5, 1.1), ValidationError);
  CHECK_THROWS_AS(cpg(std::vector<double>{0.1}, std::vector<double>{0.1, 0.2}), ShapeError);
  CHECK_THROWS_AS(cpg(std::vector<double>{}, std::vector<double>{}), ShapeError);
}

TEST_CASE("classifier CPG equals the oracle over bank probabilities", "[evalsuite][cpg][oracle]") {
  const auto bank = untrained_bank(3);
  std::mt19937_64 rng(5);
  std::vector<ImageArray> f, cf;
  for (int i = 0; i < 6; ++i) {
    f.push_back(random_image(rng));
    cf.push_back(random_image(rng));
  }
  const AttributeClassifier race{&bank, EvalAttribute::race};
  const auto pf = bank.probabilities(EvalAttribute::race, f);
  const auto pc = bank.probabilities(EvalAttribute::race, cf);
  double sum = 0.0;
  for (int i = 0; i < 6; ++i) sum += std::abs(pc[i][2].item<double>() - pf[i][2].item<double>());
  // Probabilities are float32; batch composition moves the last bits.
  CHECK(std::abs(cpg(race, f, cf, 2) - sum / 6.0) < 1e-6);
  CHECK(std::abs(cpg(race, f[0], cf[0], 2) - std::abs(pc[0][2].item<double>() - pf[0][2].item<double>())) < 1e-6);
  CHECK_THROWS_AS(race.scores(f, 3), ValidationError);
}

TEST_CASE("lpips_like matches an independent feature oracle", "[evalsuite][lpips][oracle]") {
  const auto bank = untrained_bank(4);
  std::mt19937_64 rng(6);
  const auto a = random_image(rng);
  const auto b = random_image(rng);
  const auto fa = bank.features({a});
  const auto fb = bank.features({b});
  double expected = 0.0;
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const auto x = fa[l][0].to(torch::kFloat64);
    const auto y = fb[l][0].to(torch::kFloat64);
    const auto C = x.size(0), H = x.size(1), W = x.size(2);
    double layer = 0.0;
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        double nx = 0.0, ny = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
          nx += std::pow(x[c][i][j].item<double>(), 2);
          ny += std::pow(y[c][i][j].item<double>(), 2);
        }
        nx = std::sqrt(nx) + 1e-10;
        ny = std::sqrt(ny) + 1e-10;
        for (std::int64_t c = 0; c < C; ++c)
          layer += std::pow(x[c][i][j].item<double>() / nx - y[c][i][j].item<double>() / ny, 2);
      }
    expected += kLpipsLayerWeights[l] * layer / static_cast<double>(H * W);
  }
  CHECK(std::abs(lpips_like(a, b, bank) - expected) < 1e-6 * std::max(1.0, expected));
}

TEST_CASE("lpips_like is a symmetric pseudometric", "[evalsuite][lpips]") {
  const auto bank = untrained_bank(7);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto a = random_image(rng);
    const auto b = random_image(rng);
    CHECK(lpips_like(a, a, bank) < 1e-9);
    const double ab = lpips_like(a, b, bank);
    CHECK(ab >= 0.0);
    CHECK(std::abs(ab - lpips_like(b, a, bank)) < 1e-9);
  }
  CHECK_THROWS_AS(lpips_like(ImageArray(32, 32), ImageArray(32, 32), bank), ShapeError);
}

TEST_CASE("lpips_like grows with noise level", "[evalsuite][lpips]") {
  const auto bank = untrained_bank(9);
  std::mt19937_64 rng(10);
  const auto records = synthgen::sample_attributes(synthgen::CausalSpec::independent(), 40, 12);
  int monotone = 0;
  for (const auto& r : records) {
    const auto img = synthgen::render_image(r);
    const auto small = add_noise(img, 0.02, rng);
    const auto large = add_noise(img, 0.10, rng);
    const auto d = lpips_like({img, img}, {small, large}, bank);
    monotone += d[0] < d[1];
  }
  CHECK(monotone >= 38);
}

TEST_CASE("bootstrap CI brackets the mean and has the normal width", "[evalsuite][bootstrap]") {
  std::mt19937_64 rng(13);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> values(400);
  for (auto& v : values) v = coin(rng) ? 1.0 : 0.0;
  const auto e = bootstrap_mean(values, 1);
  CHECK(e.n == 400);
  CHECK(e.ci_lower <= e.mean);
  CHECK(e.mean <= e.ci_upper);
  const double sd = std::sqrt(e.mean * (1 - e.mean) / 400.0);
  CHECK(std::abs((e.ci_upper - e.ci_lower) - 2 * 1.96 * sd) < 0.25 * 2 * 1.96 * sd);

  const auto again = bootstrap_mean(values, 1);
  CHECK(again.ci_lower == e.ci_lower);
  CHECK(again.ci_upper == e.ci_upper);

  const auto constant = bootstrap_mean(std::vector<double>(20, 0.3), 2);
  CHECK(constant.ci_lower == Catch::Approx(0.3));
  CHECK(constant.ci_upper == Catch::Approx(0.3));

  const auto single = bootstrap_mean({0.7}, 3);
  CHECK(single.ci_lower == single.mean);
  CHECK(single.ci_upper == single.mean);

  const auto empty = bootstrap_mean({}, 4);
  CHECK(empty.n == 0);
  CHECK(std::isnan(empty.mean));
  CHECK(empty.to_json()["mean"].is_null());
}

TEST_CASE("intervention targets and scored classes", "[evalsuite][cpg]") {
  AttributeRecord r;
  r.id = "r";
  r.age = 30;
  r.sex = Sex::male;
  r.race = Race::asian;
  r.findings = FindingSet(true, false);
  r.device = Device::pacemaker;

  for (auto a : kEvalAttributes) {
    const auto targets = intervention_targets(r, row_intervention(a, r));
    REQUIRE(targets.size() == 1);
    CHECK(targets.begin()->first == a);
  }
  const auto race = intervention_targets(r, row_intervention(EvalAttribute::race, r));
  CHECK(race.at(EvalAttribute::race) == static_cast<int>(Race::white));
  CHECK(scored_class(EvalAttribute::race, r, race) == static_cast<int>(Race::white));
  CHECK(scored_class(EvalAttribute::age_bin, r, race) == static_cast<int>(AgeBin::young));
  CHECK(scored_class(EvalAttribute::device, r, race) == static_cast<int>(Device::pacemaker));
  CHECK(scored_class(EvalAttribute::sex, r, race) == 1);

  const auto device = intervention_targets(r, row_intervention(EvalAttribute::device, r));
  CHECK(scored_class(EvalAttribute::device, r, device) == static_cast<int>(Device::none));

  const auto pe = row_intervention(EvalAttribute::pleural_effusion, r);
  CHECK_FALSE(pe.assignments.findings->pleural_effusion());
  CHECK_FALSE(pe.assignments.findings->cardiomegaly());

  // Assigning the factual value is not an intervention on that attribute.
  prompter::Intervention same;
  same.assignments.sex = Sex::male;
  CHECK(intervention_targets(r, same).empty());
}

TEST_CASE("effect matrix cells are CPG means and ignore probe order", "[evalsuite][matrix]") {
  std::vector<Probe> probes;
  for (int i = 0; i < 12; ++i) {
    probes.push_back(probe(fmt::format("img-{:03d}", i), EvalAttribute::sex, 0.1, 0.1 + 0.05 * i));
    probes.push_back(probe(fmt::format("img-{:03d}", i), EvalAttribute::device, 0.5, 0.5));
  }
  const auto m = EffectMatrix::from_probes(probes);
  double expected = 0.0;
  for (int i = 0; i < 12; ++i) expected += 0.05 * i;
  CHECK(m.at(EvalAttribute::sex, EvalAttribute::race).mean == Catch::Approx(expected / 12).epsilon(1e-12));
  CHECK(m.at(EvalAttribute::sex, EvalAttribute::race).n == 12);
  CHECK(m.at(EvalAttribute::device, EvalAttribute::device).mean == 0.0);
  CHECK(m.at(EvalAttribute::race, EvalAttribute::sex).n == 0);

  auto shuffled = probes;
  std::mt19937_64 rng(21);
  for (int k = 0; k < 5; ++k) {
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK(EffectMatrix::from_probes(shuffled).to_json() == m.to_json());
    CHECK(MetricsReport::from_probes(shuffled).to_json() == MetricsReport::from_probes(probes).to_json());
  }
}

TEST_CASE("metrics report pools disease rows and uses the diagonal CPG", "[evalsuite][report]") {
  std::vector<Probe> probes = {probe("a", EvalAttribute::pleural_effusion, 0.0, 0.8),
                               probe("b", EvalAttribute::cardiomegaly, 0.0, 0.6),
                               probe("c", EvalAttribute::race, 0.2, 0.3), probe("d", EvalAttribute::device, 0.0, 1.0)};
  const auto report = MetricsReport::from_probes(probes);
  const auto& disease = report.columns[1];
  CHECK(disease.cpg.n == 2);
  CHECK(disease.cpg.mean == Catch::Approx(0.7));
  CHECK(report.columns[2].cpg.mean == Catch::Approx(0.1));
  CHECK(report.columns[0].cpg.n == 0);
  CHECK(report.columns[2].l1_bytes.mean == Catch::Approx(255.0 * 0.2));
  const auto text = report.to_text();
  CHECK(text.find("LPIPS") != std::string::npos);
  CHECK(text.find("do(disease)") != std::string::npos);
}

TEST_CASE("probe JSON round trip", "[evalsuite][probe]") {
  auto p = probe("img-7", EvalAttribute::cardiomegaly, 0.25, 0.75);
  p.lpips_reference = 0.5;
  const auto back = Probe::from_json(p.to_json());
  CHECK(back.to_json() == p.to_json());
}

TEST_CASE("bank probabilities are valid on degenerate inputs", "[evalsuite][classifier]") {
  const auto bank = untrained_bank(15);
  for (float fill : {0.0f, 0.5f, 1.0f}) {
    const auto probs = bank.probabilities({ImageArray(kDefaultImageSize, kDefaultImageSize, fill)});
    REQUIRE(probs.size() == kNumAttributes);
    for (std::size_t a = 0; a < kNumAttributes; ++a) {
      CHECK(probs[a].size(1) == num_classes(kEvalAttributes[a]));
      CHECK(torch::isfinite(probs[a]).all().item<bool>());
      CHECK(probs[a].min().item<double>() >= 0.0);
      CHECK(std::abs(probs[a].sum().item<double>() - 1.0) < 1e-6);
    }
  }
  CHECK_THROWS_AS(bank.probabilities({ImageArray(16, 16)}), ShapeError);
}

TEST_CASE("bank save and load preserve the weights hash", "[evalsuite][classifier][artifact]") {
  const auto dir = scratch("bank");
  const auto bank = untrained_bank(17);
  bank.save(dir / "bank");
  const auto loaded = ClassifierBank::load(dir / "bank");
  CHECK(loaded.weights_hash() == bank.weights_hash());
  CHECK(loaded.current_weights_hash() == bank.weights_hash());
  std::mt19937_64 rng(18);
  const auto img = random_image(rng);
  CHECK(torch::equal(loaded.probabilities(EvalAttribute::race, {img}), bank.probabilities(EvalAttribute::race, {img})));

  // A recorded hash that no longer matches the weights is rejected.
  auto meta = nlohmann::json::parse(read_file(dir / "bank" / "bank.json"));
  meta["weights_hash"] = std::string(64, '0');
  write_file_atomic(dir / "bank" / "bank.json", meta.dump());
  CHECK_THROWS_AS(ClassifierBank::load(dir / "bank"), ArtifactError);
  CHECK_THROWS_AS(ClassifierBank::load(dir / "missing"), ArtifactError);
}

TEST_CASE("a bank below the accuracy floor is refused", "[evalsuite][classifier][artifact]") {
  const auto dir = scratch("weak");
  untrained_bank(19, 0.6).save(dir / "bank");
  CHECK_THROWS_AS(ClassifierBank::load(dir / "bank"), ArtifactError);
}

TEST_CASE("classifier training reports heads that miss the floor", "[evalsuite][classifier][train]") {
  const auto dir = scratch("train");
  auto manifest = synthgen::build_manifest(synthgen::CausalSpec::independent(), 200, {0.6, 0.2, 0.2}, 23);
  synthgen::materialize(manifest, dir / "data");
  ClassifierTrainOptions options;
  options.epochs = 1;
  options.batch_size = 16;
  options.seed = 1;
  try {
    train_classifiers(manifest, options);
    FAIL("expected a ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("race") != std::string::npos);
  }
}
