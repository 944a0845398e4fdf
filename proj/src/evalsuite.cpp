#include "cfprobe/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"

namespace cfprobe::evalsuite {

namespace fs = std::filesystem;
using prompter::Intervention;

namespace {

constexpr double kNormEps = 1e-10;

void require_same_shape(const ImageArray& a, const ImageArray& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw ShapeError(fmt::format("image shapes differ: {}x{} vs {}x{}", a.height(), a.width(), b.height(), b.width()));
}

std::vector<double> unit_norm_sq_diff(const std::vector<torch::Tensor>& fa, const std::vector<torch::Tensor>& fb) {
  const auto B = fa.front().size(0);
  auto total = torch::zeros({B}, torch::kFloat64);
  for (std::size_t l = 0; l < fa.size(); ++l) {
    const auto a = fa[l].to(torch::kFloat64);
    const auto b = fb[l].to(torch::kFloat64);
    const auto na = a / (a.pow(2).sum(1, true).sqrt() + kNormEps);
    const auto nb = b / (b.pow(2).sum(1, true).sqrt() + kNormEps);
    total += kLpipsLayerWeights[l] * (na - nb).pow(2).sum(1).mean({1, 2});
  }
  return {total.data_ptr<double>(), total.data_ptr<double>() + B};
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::string cell_text(const Estimate& e) {
  if (e.n == 0) return "n/a";
  return fmt::format("{:.3f} [{:.3f},{:.3f}] n={}", e.mean, e.ci_lower, e.ci_upper, e.n);
}

std::vector<std::string> row_names(const std::vector<EvalAttribute>& rows) {
  std::vector<std::string> out;
  for (auto a : rows) out.emplace_back(to_string(a));
  return out;
}

bool sort_key_less(const Probe& a, const Probe& b) {
  if (a.record_id != b.record_id) return a.record_id < b.record_id;
  return a.rows < b.rows;
}

}  // namespace

double l1_distance(const ImageArray& a, const ImageArray& b) {
  require_same_shape(a, b);
  if (a.empty()) throw ShapeError("cannot compare empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    s += std::abs(static_cast<double>(a.pixels()[i]) - static_cast<double>(b.pixels()[i]));
  return s / static_cast<double>(a.size());
}

double lpips_like(const ImageArray& a, const ImageArray& b, const ClassifierBank& extractor) {
  return lpips_like(std::vector<ImageArray>{a}, std::vector<ImageArray>{b}, extractor).front();
}

std::vector<double> lpips_like(const std::vector<ImageArray>& a, const std::vector<ImageArray>& b,
                               const ClassifierBank& extractor) {
  if (a.size() != b.size()) throw ShapeError("lpips_like needs pairs of images");
  if (a.empty()) return {};
  for (std::size_t i = 0; i < a.size(); ++i) require_same_shape(a[i], b[i]);
  return unit_norm_sq_diff(extractor.features(a), extractor.features(b));
}

double cpg(double factual_score, double counterfactual_score) {
  for (double s : {factual_score, counterfactual_score})
    if (!(s >= 0.0 && s <= 1.0)) throw ValidationError(fmt::format("classifier score {} is not in [0, 1]", s));
  return std::abs(counterfactual_score - factual_score);
}

double cpg(const std::vector<double>& factual_scores, const std::vector<double>& counterfactual_scores) {
  if (factual_scores.size() != counterfactual_scores.size())
    throw ShapeError("factual and counterfactual score lists differ in length");
  if (factual_scores.empty()) throw ShapeError("CPG of an empty batch is undefined");
  double s = 0.0;
  for (std::size_t i = 0; i < factual_scores.size(); ++i) s += cpg(factual_scores[i], counterfactual_scores[i]);
  return s / static_cast<double>(factual_scores.size());
}

double cpg(const AttributeClassifier& classifier, const ImageArray& factual, const ImageArray& counterfactual, int cls) {
  return cpg(classifier, std::vector<ImageArray>{factual}, std::vector<ImageArray>{counterfactual}, cls);
}

double cpg(const AttributeClassifier& classifier, const std::vector<ImageArray>& factual,
           const std::vector<ImageArray>& counterfactual, int cls) {
  if (factual.size() != counterfactual.size()) throw ShapeError("factual and counterfactual batches differ in length");
  return cpg(classifier.scores(factual, cls), classifier.scores(counterfactual, cls));
}

std::map<EvalAttribute, int> intervention_targets(const AttributeRecord& r, const Intervention& iv) {
  std::map<EvalAttribute, int> targets;
  const auto& a = iv.assignments;
  if (a.sex && *a.sex != r.sex) targets[EvalAttribute::sex] = static_cast<int>(*a.sex);
  if (a.race && *a.race != r.race) targets[EvalAttribute::race] = static_cast<int>(*a.race);
  if (a.age && *a.age != r.age_bin()) targets[EvalAttribute::age_bin] = static_cast<int>(*a.age);
  if (a.findings) {
    if (a.findings->pleural_effusion() != r.findings.pleural_effusion())
      targets[EvalAttribute::pleural_effusion] = a.findings->pleural_effusion() ? 1 : 0;
    if (a.findings->cardiomegaly() != r.findings.cardiomegaly())
      targets[EvalAttribute::cardiomegaly] = a.findings->cardiomegaly() ? 1 : 0;
  }
  if (a.support_devices && *a.support_devices != (r.device != Device::none))
    targets[EvalAttribute::device] = static_cast<int>(Device::none);
  return targets;
}

int scored_class(EvalAttribute b, const AttributeRecord& record, const std::map<EvalAttribute, int>& targets) {
  // Binary columns always score the positive class; |delta| is the same for either class.
  if (num_classes(b) == 2) return 1;
  if (const auto it = targets.find(b); it != targets.end()) return it->second;
  return label_of(record, b);
}

Intervention row_intervention(EvalAttribute a, const AttributeRecord& r) {
  Intervention iv;
  auto& s = iv.assignments;
  switch (a) {
    case EvalAttribute::sex: s.sex = r.sex == Sex::male ? Sex::female : Sex::male; break;
    case EvalAttribute::race: s.race = static_cast<Race>((static_cast<int>(r.race) + 1) % 3); break;
    case EvalAttribute::age_bin: s.age = static_cast<AgeBin>((static_cast<int>(r.age_bin()) + 1) % 3); break;
    case EvalAttribute::pleural_effusion:
      s.findings = FindingSet(!r.findings.pleural_effusion(), r.findings.cardiomegaly());
      break;
    case EvalAttribute::cardiomegaly:
      s.findings = FindingSet(r.findings.pleural_effusion(), !r.findings.cardiomegaly());
      break;
    case EvalAttribute::device: s.support_devices = r.device == Device::none; break;
  }
  return iv;
}

std::array<double, 6> Probe::cpg() const {
  std::array<double, 6> out{};
  for (std::size_t b = 0; b < out.size(); ++b) out[b] = evalsuite::cpg(factual_scores[b], counterfactual_scores[b]);
  return out;
}

nlohmann::json Probe::to_json() const {
  std::vector<std::string> row_names;
  for (auto a : rows) row_names.emplace_back(to_string(a));
  return {{"record_id", record_id}, {"rows", row_names},  {"factual_scores", factual_scores},
          {"counterfactual_scores", counterfactual_scores}, {"cpg", cpg()}, {"lpips", lpips},
          {"lpips_reference", lpips_reference}, {"l1", l1}};
}

Probe Probe::from_json(const nlohmann::json& j) {
  Probe p;
  p.record_id = j.at("record_id");
  for (const auto& r : j.at("rows")) p.rows.push_back(parse_eval_attribute(r.get<std::string>()));
  p.factual_scores = j.at("factual_scores");
  p.counterfactual_scores = j.at("counterfactual_scores");
  p.lpips = j.at("lpips");
  p.lpips_reference = j.at("lpips_reference");
  p.l1 = j.at("l1");
  return p;
}

Probe make_probe(const ClassifierBank& bank, const AttributeRecord& record, const Intervention& iv,
                 const ImageArray& factual, const ImageArray& counterfactual, const ImageArray& reference) {
  const auto targets = intervention_targets(record, iv);
  Probe p;
  p.record_id = record.id;
  for (const auto& [a, cls] : targets) p.rows.push_back(a);
  const auto probs = bank.probabilities({factual, counterfactual});
  for (std::size_t b = 0; b < kNumAttributes; ++b) {
    const int cls = scored_class(kEvalAttributes[b], record, targets);
    p.factual_scores[b] = probs[b][0][cls].item<double>();
    p.counterfactual_scores[b] = probs[b][1][cls].item<double>();
  }
  const auto d = lpips_like({factual, factual}, {counterfactual, reference}, bank);
  p.lpips = d[0];
  p.lpips_reference = d[1];
  p.l1 = l1_distance(factual, counterfactual);
  return p;
}

nlohmann::json Estimate::to_json() const {
  return {{"mean", number_or_null(mean)}, {"ci_lower", number_or_null(ci_lower)},
          {"ci_upper", number_or_null(ci_upper)}, {"n", n}};
}

Estimate bootstrap_mean(const std::vector<double>& values, std::uint64_t seed, int resamples) {
  Estimate e;
  e.n = values.size();
  if (values.empty()) {
    e.mean = e.ci_lower = e.ci_upper = nan();
    return e;
  }
  if (resamples < 1) throw ValidationError("bootstrap needs at least one resample");
  e.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  const auto R = static_cast<double>(resamples);
  const auto lo = static_cast<std::size_t>(std::floor(0.025 * R));
  const auto hi = std::min(means.size() - 1, static_cast<std::size_t>(std::ceil(0.975 * R)) - 1);
  // Percentile intervals can miss a skewed mean by a hair; keep it bracketed.
  e.ci_lower = std::min(means[lo], e.mean);
  e.ci_upper = std::max(means[hi], e.mean);
  return e;
}

const Estimate& EffectMatrix::at(EvalAttribute row, EvalAttribute col) const {
  return cells[attribute_index(row)][attribute_index(col)];
}

EffectMatrix EffectMatrix::from_probes(std::vector<Probe> probes) {
  std::stable_sort(probes.begin(), probes.end(), sort_key_less);
  std::array<std::array<std::vector<double>, 6>, 6> values;
  for (const auto& p : probes) {
    const auto c = p.cpg();
    for (auto row : p.rows)
      for (std::size_t b = 0; b < kNumAttributes; ++b) values[attribute_index(row)][b].push_back(c[b]);
  }
  EffectMatrix m;
  for (std::size_t r = 0; r < kNumAttributes; ++r)
    for (std::size_t b = 0; b < kNumAttributes; ++b) m.cells[r][b] = bootstrap_mean(values[r][b], 0x5eed + 31 * r + b);
  return m;
}

nlohmann::json EffectMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::object();
  for (std::size_t r = 0; r < kNumAttributes; ++r) {
    nlohmann::json cols = nlohmann::json::object();
    for (std::size_t b = 0; b < kNumAttributes; ++b) cols[std::string(to_string(kEvalAttributes[b]))] = cells[r][b].to_json();
    rows[std::string(to_string(kEvalAttributes[r]))] = cols;
  }
  std::vector<std::string> names;
  for (auto a : kEvalAttributes) names.emplace_back(to_string(a));
  return {{"attributes", names}, {"cells", rows}};
}

std::string EffectMatrix::to_text() const {
  std::ostringstream out;
  out << fmt::format("{:<22}", "intervention \\ measured");
  for (auto a : kEvalAttributes) out << fmt::format(" {:>30}", to_string(a));
  out << '\n';
  for (std::size_t r = 0; r < kNumAttributes; ++r) {
    out << fmt::format("{:<22}", fmt::format("do({})", to_string(kEvalAttributes[r])));
    for (std::size_t b = 0; b < kNumAttributes; ++b) out << fmt::format(" {:>30}", cell_text(cells[r][b]));
    out << '\n';
  }
  return out.str();
}

std::string_view to_string(ReportColumn c) {
  switch (c) {
    case ReportColumn::sex: return "do(sex)";
    case ReportColumn::disease: return "do(disease)";
    case ReportColumn::race: return "do(race)";
  }
  return "?";
}

MetricsReport MetricsReport::from_probes(std::vector<Probe> probes) {
  std::stable_sort(probes.begin(), probes.end(), sort_key_less);
  struct Values {
    std::vector<double> lpips, l1, l1_bytes, cpg;
  };
  std::array<Values, 3> values;
  for (const auto& p : probes) {
    if (p.rows.size() != 1) continue;
    const auto row = p.rows.front();
    std::size_t col;
    if (row == EvalAttribute::sex)
      col = 0;
    else if (row == EvalAttribute::pleural_effusion || row == EvalAttribute::cardiomegaly)
      col = 1;
    else if (row == EvalAttribute::race)
      col = 2;
    else
      continue;
    values[col].lpips.push_back(p.lpips);
    values[col].l1.push_back(p.l1);
    values[col].l1_bytes.push_back(255.0 * p.l1);
    values[col].cpg.push_back(p.cpg()[attribute_index(row)]);
  }
  MetricsReport report;
  for (std::size_t c = 0; c < 3; ++c) {
    const std::uint64_t seed = 0xab1e + 7 * c;
    report.columns[c] = {bootstrap_mean(values[c].lpips, seed), bootstrap_mean(values[c].l1, seed + 1),
                         bootstrap_mean(values[c].l1_bytes, seed + 1), bootstrap_mean(values[c].cpg, seed + 2)};
  }
  return report;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json out = nlohmann::json::object();
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& col = columns[c];
    out[std::string(to_string(kReportColumns[c]))] = {{"lpips", col.lpips.to_json()},
                                                      {"l1", col.l1.to_json()},
                                                      {"l1_bytes", col.l1_bytes.to_json()},
                                                      {"cpg", col.cpg.to_json()}};
  }
  return out;
}

std::string MetricsReport::to_text() const {
  std::ostringstream out;
  out << fmt::format("{:<10}", "metric");
  for (auto c : kReportColumns) out << fmt::format(" {:>32}", to_string(c));
  out << '\n';
  const auto row = [&](std::string_view name, auto member) {
    out << fmt::format("{:<10}", name);
    for (const auto& col : columns) out << fmt::format(" {:>32}", cell_text(col.*member));
    out << '\n';
  };
  row("LPIPS", &Column::lpips);
  row("L1", &Column::l1);
  row("L1 (x255)", &Column::l1_bytes);
  row("CPG", &Column::cpg);
  return out.str();
}

nlohmann::json EffectRun::to_json() const {
  return {{"checkpoint_hash", checkpoint_hash},
          {"classifier_hash", classifier_hash},
          {"probes", probes.size()},
          {"report", report.to_json()},
          {"effect_matrix", matrix.to_json()}};
}

void EffectRun::save(const fs::path& dir) const {
  fs::create_directories(dir);
  std::string lines;
  for (const auto& p : probes) lines += p.to_json().dump() + "\n";
  write_file_atomic(dir / "probes.jsonl", lines);
  write_file_atomic(dir / "effect_matrix.json", matrix.to_json().dump(2));
  write_file_atomic(dir / "report.json", to_json().dump(2));
  write_file_atomic(dir / "report.txt", "Summary (mean [95% CI] n)\n" + report.to_text() + "\nEffect matrix (mean CPG)\n" +
                                            matrix.to_text());
}

EffectRun effect_matrix(const diffusion::DiffusionState& state, const synthgen::DatasetManifest& manifest,
                        const ClassifierBank& bank, const EffectOptions& options) {
  auto records = manifest.in_split(options.split);
  if (options.include)
    std::erase_if(records, [&](const AttributeRecord* r) { return !options.include(*r); });
  if (records.size() > options.n_per_cell) records.resize(options.n_per_cell);
  if (records.size() < 2) throw ValidationError("the effect matrix needs at least two records");

  EffectRun run;
  run.checkpoint_hash = state.checkpoint_hash();
  run.classifier_hash = bank.weights_hash();

  const auto& edit = options.edit;
  const nlohmann::json cache_key = {{"checkpoint", run.checkpoint_hash},
                                    {"classifiers", run.classifier_hash},
                                    {"manifest_seed", manifest.seed},
                                    {"split", to_string(options.split)},
                                    {"guidance", edit.guidance},
                                    {"policy", editor::to_string(edit.policy)},
                                    {"iters", edit.null_text.iters_per_step},
                                    {"lr", edit.null_text.lr},
                                    {"chunk", edit.chunk_size},
                                    {"rows", row_names(options.rows)},
                                    {"selection", options.selection}};
  if (!options.cache_dir.empty()) {
    const auto key_path = options.cache_dir / "key.json";
    if (!fs::exists(key_path) || nlohmann::json::parse(read_file(key_path)) != cache_key) {
      fs::remove_all(options.cache_dir);
      fs::create_directories(options.cache_dir);
      write_file_atomic(key_path, cache_key.dump(2));
    }
  }

  std::vector<ImageArray> factuals;
  for (const auto* r : records) factuals.push_back(manifest.image(r->id));

  const std::size_t chunk = std::max<std::size_t>(1, edit.chunk_size);
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const std::size_t end = std::min(records.size(), start + chunk);
    const auto cache_file = options.cache_dir / fmt::format("chunk_{:05d}_{:05d}.jsonl", start, end);
    std::vector<Probe> probes;
    if (!options.cache_dir.empty() && fs::exists(cache_file)) {
      std::istringstream in(read_file(cache_file));
      for (std::string line; std::getline(in, line);)
        if (!line.empty()) probes.push_back(Probe::from_json(nlohmann::json::parse(line)));
    } else {
      std::vector<std::string> ids;
      std::vector<ImageArray> images;
      std::vector<prompter::Prompt> prompts;
      for (std::size_t i = start; i < end; ++i) {
        ids.push_back(records[i]->id);
        images.push_back(factuals[i]);
        prompts.push_back(prompter::render_prompt(*records[i]));
      }
      const auto abductions = editor::abduct(state, ids, images, prompts, edit);
      for (auto a : options.rows) {
        std::vector<const editor::Abduction*> ptrs;
        std::vector<prompter::Prompt> cf_prompts;
        std::vector<Intervention> ivs;
        for (std::size_t i = start; i < end; ++i) {
          ivs.push_back(editor::effective_intervention(row_intervention(a, *records[i]), edit.policy));
          cf_prompts.push_back(prompter::apply_intervention(prompts[i - start], ivs.back()));
          ptrs.push_back(&abductions[i - start]);
        }
        const auto cfs = editor::predict(state, ptrs, cf_prompts);
        for (std::size_t i = start; i < end; ++i) {
          const auto& reference = factuals[(i + 1) % factuals.size()];
          probes.push_back(make_probe(bank, *records[i], ivs[i - start], factuals[i], cfs[i - start], reference));
        }
      }
      if (!options.cache_dir.empty()) {
        std::string lines;
        for (const auto& p : probes) lines += p.to_json().dump() + "\n";
        write_file_atomic(cache_file, lines);
      }
    }
    run.probes.insert(run.probes.end(), probes.begin(), probes.end());
    if (options.on_progress) options.on_progress(end, records.size());
  }

  if (bank.current_weights_hash() != run.classifier_hash)
    throw ArtifactError("classifier weights changed during the effect-matrix run");
  std::stable_sort(run.probes.begin(), run.probes.end(), sort_key_less);
  run.matrix = EffectMatrix::from_probes(run.probes);
  run.report = MetricsReport::from_probes(run.probes);
  return run;
}

}  // namespace cfprobe::evalsuite
