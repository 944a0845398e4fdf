#include "cfprobe/editor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"
#include "cfprobe/render.hpp"

namespace cfprobe::editor {

namespace fs = std::filesystem;
using prompter::Intervention;
using prompter::Prompt;
using prompter::PromptAttribute;

namespace {

std::string utc_now() {
  const auto now = std::chrono::time_point_cast<std::chrono::seconds>(std::chrono::system_clock::now());
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", now);
}

nlohmann::json prompt_json(const Prompt& p) { return {{"text", p.text}, {"tokens", p.tokens}}; }

Prompt prompt_from_json(const nlohmann::json& j) {
  auto p = prompter::make_prompt(prompter::parse_prompt(j.at("text").get<std::string>()));
  if (j.contains("tokens") && j.at("tokens").get<prompter::TokenList>() != p.tokens)
    throw ArtifactError(fmt::format("stored tokens disagree with prompt '{}'", p.text));
  return p;
}

std::vector<const AttributeRecord*> first_records(const synthgen::DatasetManifest& m, synthgen::Split split,
                                                  std::size_t limit) {
  auto records = m.in_split(split);
  if (records.size() > limit) records.resize(limit);
  return records;
}

void append_failure(const fs::path& out, const BatchFailure& f) {
  if (out.empty()) return;
  fs::create_directories(out);
  std::ofstream log(out / "failures.jsonl", std::ios::app);
  log << nlohmann::json{{"record_id", f.record_id}, {"error", f.error}, {"at", utc_now()}}.dump() << '\n';
}

}  // namespace

std::string_view to_string(DropPolicy p) { return p == DropPolicy::drop_findings ? "drop_findings" : "keep_all"; }

DropPolicy parse_drop_policy(std::string_view s) {
  if (s == "drop_findings") return DropPolicy::drop_findings;
  if (s == "keep_all") return DropPolicy::keep_all;
  throw ValidationError(fmt::format("unknown drop policy '{}' (expected drop_findings or keep_all)", s));
}

Intervention effective_intervention(const Intervention& iv, DropPolicy policy) {
  iv.validate();
  Intervention out = iv;
  if (policy == DropPolicy::drop_findings) {
    const auto& a = iv.assignments;
    if (a.age || a.race || a.sex) {
      if (!a.findings) out.dropped.insert(PromptAttribute::findings);
      if (!a.support_devices) out.dropped.insert(PromptAttribute::device);
    }
  }
  return out;
}

nlohmann::json intervention_to_json(const Intervention& iv) {
  nlohmann::json assignments = nlohmann::json::object();
  const auto& a = iv.assignments;
  if (a.age) assignments["age"] = to_string(*a.age);
  if (a.race) assignments["race"] = to_string(*a.race);
  if (a.sex) assignments["sex"] = to_string(*a.sex);
  if (a.findings) {
    std::vector<std::string> names;
    for (auto f : a.findings->to_list()) names.emplace_back(to_string(f));
    assignments["findings"] = fmt::format("{}", fmt::join(names, "+"));
  }
  if (a.support_devices) assignments["device"] = *a.support_devices ? "present" : "none";
  auto dropped = nlohmann::json::array();
  for (auto d : iv.dropped) dropped.push_back(to_string(d));
  return {{"assignments", assignments}, {"dropped", dropped}};
}

Intervention intervention_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("intervention must be an object");
  std::map<std::string, std::string> assignments;
  std::set<std::string> dropped;
  if (j.contains("assignments")) {
    if (!j.at("assignments").is_object()) throw ValidationError("assignments must be an object of strings");
    for (const auto& [k, v] : j.at("assignments").items()) {
      if (!v.is_string()) throw ValidationError(fmt::format("assignment '{}' must be a string", k));
      assignments[k] = v.get<std::string>();
    }
  }
  if (j.contains("dropped")) {
    if (!j.at("dropped").is_array()) throw ValidationError("dropped must be an array of attribute names");
    for (const auto& v : j.at("dropped")) {
      if (!v.is_string()) throw ValidationError("dropped must be an array of attribute names");
      dropped.insert(v.get<std::string>());
    }
  }
  return Intervention::parse(assignments, dropped);
}

std::string tensor_checksum(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous();
  const auto* data = static_cast<const std::uint8_t*>(c.data_ptr());
  return sha256_hex(std::span<const std::uint8_t>(data, c.nbytes()));
}

std::vector<Abduction> abduct(const DiffusionState& state, const std::vector<std::string>& ids,
                              const std::vector<ImageArray>& images, const std::vector<Prompt>& prompts,
                              const EditOptions& options) {
  if (ids.size() != images.size() || ids.size() != prompts.size())
    throw ShapeError("abduction needs one id and one prompt per image");
  if (images.empty()) return {};
  const auto trajs = inversion::ddim_invert(state, images, prompts);
  auto nulls = inversion::optimize_null_text(state, trajs, options.guidance, options.null_text);
  const auto hash = state.checkpoint_hash();
  std::vector<Abduction> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Abduction a;
    a.record_id = ids[i];
    a.trajectory = trajs[i];
    a.nulls = std::move(nulls[i]);
    a.checkpoint_hash = hash;
    a.latent_checksum = tensor_checksum(a.trajectory.terminal());
    a.null_checksum = tensor_checksum(a.nulls.embeddings);
    a.guidance = options.guidance;
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<ImageArray> predict(const DiffusionState& state, const std::vector<const Abduction*>& abductions,
                                const std::vector<Prompt>& prompts) {
  if (abductions.size() != prompts.size()) throw ShapeError("prediction needs one prompt per abduction");
  if (abductions.empty()) return {};
  const auto hash = state.checkpoint_hash();
  const double w = abductions.front()->guidance;
  std::vector<torch::Tensor> terminals;
  std::vector<const inversion::NullEmbeddings*> nulls;
  for (const auto* a : abductions) {
    if (a->checkpoint_hash != hash)
      throw ArtifactError(fmt::format("abduction of {} was made with checkpoint {}, not {}", a->record_id,
                                      a->checkpoint_hash, hash));
    if (a->guidance != w) throw ValidationError("abductions in one prediction batch must share the guidance scale");
    // The exogenous state must reach the sampler unchanged.
    const auto terminal = a->trajectory.terminal();
    if (tensor_checksum(terminal) != a->latent_checksum || tensor_checksum(a->nulls.embeddings) != a->null_checksum)
      throw ArtifactError(fmt::format("abduction of {} fails its checksum audit", a->record_id));
    terminals.push_back(terminal);
    nulls.push_back(&a->nulls);
  }
  return inversion::resample(state, terminals, prompts, nulls, w);
}

ImageArray CounterfactualResult::difference_image() const {
  return from_bytes(factual.height(), factual.width(), difference);
}

nlohmann::json CounterfactualResult::meta(bool with_timestamp) const {
  const auto& p = provenance;
  nlohmann::json prov = {{"checkpoint_hash", p.checkpoint_hash},
                         {"seed", p.seed},
                         {"guidance", p.guidance},
                         {"latent_checksum", p.latent_checksum},
                         {"null_checksum", p.null_checksum},
                         {"inversion_steps", p.inversion_steps},
                         {"null_text_iters", p.null_text_iters},
                         {"null_text_reverted", p.null_text_reverted},
                         {"reconstruction_l1", p.reconstruction_l1},
                         {"policy", p.policy}};
  if (with_timestamp) prov["created_at"] = p.created_at;
  return {{"format", "cfprobe-counterfactual"},
          {"version", 1},
          {"record_id", record_id},
          {"factual_prompt", prompt_json(factual_prompt)},
          {"intervention", intervention_to_json(intervention)},
          {"counterfactual_prompt", prompt_json(counterfactual_prompt)},
          {"factual_sha256", sha256_hex(to_bytes(factual))},
          {"counterfactual_sha256", sha256_hex(to_bytes(counterfactual))},
          {"difference_sha256", sha256_hex(difference)},
          {"provenance", prov}};
}

void CounterfactualResult::save(const fs::path& dir, const Abduction* abduction) const {
  fs::create_directories(dir);
  fs::remove(dir / "meta.json");
  write_png(dir / "factual.png", factual);
  write_png(dir / "cf.png", counterfactual);
  write_png(dir / "diff.png", difference_image());
  if (abduction != nullptr) inversion::write_blob(dir / "traj.bin", abduction->trajectory, &abduction->nulls);
  write_file_atomic(dir / "meta.json", meta().dump(2));
}

CounterfactualResult CounterfactualResult::load(const fs::path& dir) {
  CounterfactualResult r;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(dir / "meta.json"));
    if (meta.value("format", "") != "cfprobe-counterfactual") throw ArtifactError("not a counterfactual bundle");
    r.record_id = meta.at("record_id");
    r.factual_prompt = prompt_from_json(meta.at("factual_prompt"));
    r.intervention = intervention_from_json(meta.at("intervention"));
    r.counterfactual_prompt = prompt_from_json(meta.at("counterfactual_prompt"));
    const auto& p = meta.at("provenance");
    r.provenance = {p.at("checkpoint_hash"),   p.at("seed"),          p.at("guidance"),
                    p.at("latent_checksum"),   p.at("null_checksum"), p.at("inversion_steps"),
                    p.at("null_text_iters"),   p.at("null_text_reverted"), p.at("reconstruction_l1"),
                    p.at("policy"),            p.value("created_at", "")};
    r.factual = read_png(dir / "factual.png");
    r.counterfactual = read_png(dir / "cf.png");
    r.difference = to_bytes(read_png(dir / "diff.png"));
  } catch (const ArtifactError&) {
    throw;
  } catch (const std::exception& e) {
    throw ArtifactError(fmt::format("cannot load counterfactual bundle {}: {}", dir.string(), e.what()));
  }
  if (sha256_hex(to_bytes(r.factual)) != meta.at("factual_sha256") ||
      sha256_hex(to_bytes(r.counterfactual)) != meta.at("counterfactual_sha256") ||
      sha256_hex(r.difference) != meta.at("difference_sha256"))
    throw ArtifactError(fmt::format("counterfactual bundle {} fails its hash check", dir.string()));
  return r;
}

CounterfactualResult package(const Abduction& abduction, const ImageArray& factual, const Intervention& iv,
                             const Prompt& cf_prompt, const ImageArray& counterfactual, const EditOptions& options,
                             double reconstruction_l1) {
  CounterfactualResult r;
  r.record_id = abduction.record_id;
  // Round-trip through 8 bits so a saved bundle reloads to identical values.
  r.factual = from_bytes(factual.height(), factual.width(), to_bytes(factual));
  r.factual_prompt = abduction.trajectory.prompt;
  r.intervention = iv;
  r.counterfactual_prompt = cf_prompt;
  r.counterfactual = from_bytes(counterfactual.height(), counterfactual.width(), to_bytes(counterfactual));
  r.difference = to_bytes(abs_difference(r.factual, r.counterfactual));
  r.provenance.checkpoint_hash = abduction.checkpoint_hash;
  r.provenance.seed = options.seed;
  r.provenance.guidance = abduction.guidance;
  r.provenance.latent_checksum = abduction.latent_checksum;
  r.provenance.null_checksum = abduction.null_checksum;
  r.provenance.inversion_steps = abduction.trajectory.steps();
  r.provenance.null_text_iters = options.null_text.iters_per_step;
  r.provenance.null_text_reverted = abduction.nulls.reverted;
  r.provenance.reconstruction_l1 = reconstruction_l1;
  r.provenance.policy = std::string(to_string(options.policy));
  r.provenance.created_at = utc_now();
  return r;
}

namespace {

void check_record_matches(const ImageArray& image, const AttributeRecord& record) {
  record.validate();
  if (to_bytes(synthgen::render_image(record, image.height())) != to_bytes(image))
    throw ValidationError(fmt::format("image does not match the rendering of record {}", record.id));
}

// Abducts and predicts a set of records under per-record interventions.
std::vector<CounterfactualResult> edit_group(const DiffusionState& state, const std::vector<const AttributeRecord*>& records,
                                             const std::vector<ImageArray>& images,
                                             const std::vector<Intervention>& ivs, const EditOptions& options,
                                             std::vector<Abduction>* abductions_out) {
  std::vector<std::string> ids;
  std::vector<Prompt> prompts, cf_prompts;
  for (std::size_t i = 0; i < records.size(); ++i) {
    ids.push_back(records[i]->id);
    prompts.push_back(prompter::render_prompt(*records[i]));
    cf_prompts.push_back(prompter::apply_intervention(prompts.back(), ivs[i]));
  }
  auto abductions = abduct(state, ids, images, prompts, options);
  std::vector<const Abduction*> ptrs;
  for (const auto& a : abductions) ptrs.push_back(&a);
  const auto cfs = predict(state, ptrs, cf_prompts);
  std::vector<CounterfactualResult> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    out.push_back(package(abductions[i], images[i], ivs[i], cf_prompts[i], cfs[i], options,
                          abductions[i].nulls.optimized_l1));
  if (abductions_out != nullptr) *abductions_out = std::move(abductions);
  return out;
}

}  // namespace

CounterfactualResult generate_counterfactual(const DiffusionState& state, const ImageArray& image,
                                             const AttributeRecord& record, const Intervention& iv,
                                             const EditOptions& options) {
  check_record_matches(image, record);
  const auto effective = effective_intervention(iv, options.policy);
  return edit_group(state, {&record}, {image}, {effective}, options, nullptr).front();
}

BatchResult batch_edit(const DiffusionState& state, const synthgen::DatasetManifest& manifest,
                       const InterventionFor& iv, synthgen::Split split, std::size_t limit,
                       const EditOptions& options, const fs::path& out) {
  BatchResult batch;
  const auto records = first_records(manifest, split, limit);
  std::vector<const AttributeRecord*> pending;
  std::map<std::string, CounterfactualResult> done;
  for (const auto* r : records) {
    const auto dir = out / r->id;
    if (!out.empty() && fs::exists(dir / "meta.json")) {
      try {
        done.emplace(r->id, CounterfactualResult::load(dir));
        ++batch.resumed;
        continue;
      } catch (const ArtifactError&) {
        // Corrupt bundle: recompute it.
      }
    }
    pending.push_back(r);
  }

  auto run = [&](const std::vector<const AttributeRecord*>& group) {
    std::vector<ImageArray> images;
    std::vector<Intervention> ivs;
    for (const auto* r : group) {
      images.push_back(manifest.image(r->id));
      ivs.push_back(effective_intervention(iv(*r), options.policy));
    }
    std::vector<Abduction> abductions;
    auto results = edit_group(state, group, images, ivs, options, &abductions);
    for (std::size_t i = 0; i < results.size(); ++i) {
      if (!out.empty()) results[i].save(out / group[i]->id, &abductions[i]);
      done.emplace(group[i]->id, std::move(results[i]));
    }
  };

  const std::size_t chunk = std::max<std::size_t>(1, options.chunk_size);
  for (std::size_t start = 0; start < pending.size(); start += chunk) {
    const std::vector<const AttributeRecord*> group(pending.begin() + static_cast<std::ptrdiff_t>(start),
                                                    pending.begin() + static_cast<std::ptrdiff_t>(std::min(pending.size(), start + chunk)));
    try {
      run(group);
    } catch (const std::exception&) {
      // Isolate the failing ids by retrying one at a time.
      for (const auto* r : group) {
        if (done.contains(r->id)) continue;
        try {
          run({r});
        } catch (const std::exception& e) {
          BatchFailure f{r->id, e.what()};
          append_failure(out, f);
          batch.failures.push_back(std::move(f));
        }
      }
    }
  }
  for (auto& [id, result] : done) batch.results.push_back(std::move(result));
  return batch;
}

BatchResult batch_edit(const DiffusionState& state, const synthgen::DatasetManifest& manifest, const Intervention& iv,
                       synthgen::Split split, std::size_t limit, const EditOptions& options, const fs::path& out) {
  return batch_edit(state, manifest, [&](const AttributeRecord&) { return iv; }, split, limit, options, out);
}

}  // namespace cfprobe::editor
