#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cfprobe/causal_spec.hpp"
#include "cfprobe/classifier.hpp"
#include "cfprobe/diffusion.hpp"
#include "cfprobe/editor.hpp"
#include "cfprobe/error.hpp"
#include "cfprobe/evalsuite.hpp"
#include "cfprobe/hashing.hpp"
#include "cfprobe/inversion.hpp"
#include "cfprobe/manifest.hpp"
#include "cfprobe/service.hpp"

namespace fs = std::filesystem;
using namespace cfprobe;

namespace {

void log(const std::string& msg) { std::cerr << msg << '\n'; }

synthgen::CausalSpec resolve_spec(const std::string& spec) {
  if (spec == "independent") return synthgen::CausalSpec::independent();
  if (spec == "planted") return synthgen::CausalSpec::planted_pacemaker();
  return synthgen::CausalSpec::from_json(nlohmann::json::parse(read_file(spec)));
}

struct DataGen {
  std::string spec = "independent";
  std::size_t n = 6000;
  std::string out;
  std::uint64_t seed = 0;

  void run() const {
    const auto s = resolve_spec(spec);
    auto manifest = synthgen::build_manifest(s, n, s.split_fractions, seed);
    synthgen::materialize(manifest, out);
    log(fmt::format("wrote {} records to {}", manifest.records.size(), out));
  }
};

struct Train {
  std::string manifest;
  int epochs = 30;
  std::string out;
  std::uint64_t seed = 0;
  int batch_size = 16;
  double lr = 1e-3;
  double ema_decay = 0.999;

  void run() const {
    const auto m = synthgen::load_manifest(manifest);
    diffusion::TrainOptions options;
    options.ema_decay = ema_decay;
    options.epochs = epochs;
    options.seed = seed;
    options.batch_size = batch_size;
    options.lr = lr;
    options.on_epoch = [](const diffusion::EpochStats& e) {
      log(fmt::format("epoch {:3d}  train {:.5f}  val {:.5f}  null {:.3f}  {:.0f}s", e.epoch, e.train_loss, e.val_loss,
                      e.null_fraction, e.seconds));
    };
    auto result = diffusion::train(m, diffusion::DenoiserConfig{}, diffusion::NoiseSchedule::linear(), options);
    result.state.train_log()["manifest"] = fs::absolute(manifest).string();
    result.state.save(out);
    log(fmt::format("val loss {:.5f} -> {:.5f}; checkpoint {} ({})", result.initial_val_loss, result.final_val_loss, out,
                    result.state.checkpoint_hash()));
  }
};

struct Sample {
  std::string ckpt;
  std::string prompt;
  std::uint64_t seed = 0;
  double guidance = 3.0;
  std::string out;

  void run() const {
    const auto state = diffusion::DiffusionState::load(ckpt);
    const auto p = prompter::make_prompt(prompter::parse_prompt(prompt));
    write_png(out, diffusion::sample(state, p, guidance, seed));
  }
};

struct ClassifyTrain {
  std::string manifest;
  std::string out;
  int epochs = 8;
  std::uint64_t seed = 0;

  void run() const {
    const auto m = synthgen::load_manifest(manifest);
    evalsuite::ClassifierTrainOptions options;
    options.epochs = epochs;
    options.seed = seed;
    options.on_epoch = [](int epoch, double loss, const std::vector<double>& acc) {
      log(fmt::format("epoch {:2d}  loss {:.4f}  val acc {:.3f}", epoch, loss, fmt::join(acc, " ")));
    };
    const auto bank = evalsuite::train_classifiers(m, options);
    bank.save(out);
    for (const auto& r : bank.reports())
      log(fmt::format("{:<17} val {:.4f}  train {:.4f}", to_string(r.attribute), r.val_accuracy, r.train_accuracy));
    log(fmt::format("classifiers written to {} ({})", out, bank.weights_hash()));
  }
};

struct Invert {
  std::string ckpt;
  std::string image;
  std::string prompt;
  double guidance = 3.0;
  int iters = 10;
  std::string out;

  void run() const {
    const auto state = diffusion::DiffusionState::load(ckpt);
    const auto p = prompter::make_prompt(prompter::parse_prompt(prompt));
    const auto traj = inversion::ddim_invert(state, read_png(image), p);
    const auto nulls = inversion::optimize_null_text(state, traj, guidance, {.iters_per_step = iters});
    inversion::write_blob(out, traj, &nulls);
    log(fmt::format("{} steps; reconstruction L1 {:.5f} (default null {:.5f}){}", traj.steps(), nulls.optimized_l1,
                    nulls.baseline_l1, nulls.reverted ? "; optimization reverted" : ""));
  }
};

// The checkpoint remembers the manifest it was trained on.
synthgen::DatasetManifest manifest_for(const diffusion::DiffusionState& state, const std::string& explicit_path) {
  if (!explicit_path.empty()) return synthgen::load_manifest(explicit_path);
  const auto& tl = state.train_log();
  if (!tl.contains("manifest")) throw ValidationError("checkpoint does not name its manifest; pass --manifest");
  return synthgen::load_manifest(tl["manifest"].get<std::string>());
}

std::map<std::string, std::string> parse_assignments(const std::vector<std::string>& pairs) {
  std::map<std::string, std::string> out;
  for (const auto& kv : pairs) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError(fmt::format("--set expects key=value, got '{}'", kv));
    out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return out;
}

struct Edit {
  std::string ckpt;
  std::string manifest;
  std::string image;
  std::vector<std::string> set;
  std::vector<std::string> drop;
  double guidance = 3.0;
  std::string policy = "drop_findings";
  std::uint64_t seed = 0;
  std::string out;

  void run() const {
    const auto iv = prompter::Intervention::parse(parse_assignments(set), {drop.begin(), drop.end()});
    const auto state = diffusion::DiffusionState::load(ckpt);
    const auto m = manifest_for(state, manifest);
    editor::EditOptions options;
    options.guidance = guidance;
    options.policy = editor::parse_drop_policy(policy);
    options.seed = seed;
    const auto& record = m.record(image);
    const auto factual = m.image(image);
    const auto prompt = prompter::render_prompt(record);
    auto abductions = editor::abduct(state, {record.id}, {factual}, {prompt}, options);
    const auto effective = editor::effective_intervention(iv, options.policy);
    const auto cf_prompt = prompter::apply_intervention(prompt, effective);
    const auto cf = editor::predict(state, {&abductions.front()}, {cf_prompt}).front();
    const auto result = editor::package(abductions.front(), factual, effective, cf_prompt, cf, options,
                                        abductions.front().nulls.optimized_l1);
    result.save(out, &abductions.front());
    log(fmt::format("factual:        {}\ncounterfactual: {}\nL1 {:.5f}; bundle in {}", prompt.text, cf_prompt.text,
                    evalsuite::l1_distance(result.factual, result.counterfactual), out));
  }
};

struct Eval {
  std::string ckpt;
  std::string manifest;
  std::string classifiers;
  std::string out;
  std::size_t n = 64;
  std::string split = "test";
  double guidance = 3.0;
  std::string policy = "keep_all";
  std::string cache;

  void run() const {
    const auto state = diffusion::DiffusionState::load(ckpt);
    const auto m = synthgen::load_manifest(manifest);
    const auto bank = evalsuite::ClassifierBank::load(classifiers);
    evalsuite::EffectOptions options;
    options.n_per_cell = n;
    options.split = synthgen::parse_split(split);
    options.edit.guidance = guidance;
    options.edit.policy = editor::parse_drop_policy(policy);
    options.cache_dir = cache.empty() ? fs::path(out) / "cache" : fs::path(cache);
    options.on_progress = [](std::size_t done, std::size_t total) { log(fmt::format("{}/{} images", done, total)); };
    const auto run = evalsuite::effect_matrix(state, m, bank, options);
    run.save(out);
    std::cout << run.report.to_text() << '\n' << run.matrix.to_text();
  }
};

struct Serve {
  service::ServiceConfig config;
  std::string policy = "drop_findings";

  void run() {
    config.edit.policy = editor::parse_drop_policy(policy);
    service::ProbeService svc(config);
    service::Server server(svc);
    server.start(config.host, config.port);
    log(fmt::format("serving on http://{}:{} (checkpoint {})", config.host, server.port(), svc.checkpoint_hash()));
    server.wait();
  }
};

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"Counterfactual editing probe for text-conditioned diffusion"};
  app.require_subcommand(1);

  auto* data = app.add_subcommand("data", "Synthetic datasets");
  data->require_subcommand(1);
  DataGen gen;
  auto* gen_cmd = data->add_subcommand("gen", "Sample attributes, render images and write a manifest");
  gen_cmd->add_option("--spec", gen.spec, "independent, planted, or a causal spec JSON file")->capture_default_str();
  gen_cmd->add_option("--n", gen.n, "Number of images")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->callback([&] { gen.run(); });

  Train tr;
  auto* train_cmd = app.add_subcommand("train", "Train the denoiser on a manifest");
  train_cmd->add_option("--manifest", tr.manifest)->required();
  train_cmd->add_option("--epochs", tr.epochs)->capture_default_str();
  train_cmd->add_option("--out", tr.out, "Checkpoint directory")->required();
  train_cmd->add_option("--seed", tr.seed)->capture_default_str();
  train_cmd->add_option("--batch-size", tr.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", tr.lr)->capture_default_str();
  train_cmd->add_option("--ema-decay", tr.ema_decay, "Weight averaging; 0 disables")->capture_default_str();
  train_cmd->callback([&] { tr.run(); });

  Sample sm;
  auto* sample_cmd = app.add_subcommand("sample", "Generate an image from a prompt");
  sample_cmd->add_option("--ckpt", sm.ckpt)->required();
  sample_cmd->add_option("--prompt", sm.prompt)->required();
  sample_cmd->add_option("--seed", sm.seed)->capture_default_str();
  sample_cmd->add_option("--guidance", sm.guidance)->capture_default_str();
  sample_cmd->add_option("--out", sm.out)->required();
  sample_cmd->callback([&] { sm.run(); });

  auto* classify = app.add_subcommand("classify", "Attribute classifiers");
  classify->require_subcommand(1);
  ClassifyTrain ct;
  auto* ct_cmd = classify->add_subcommand("train", "Train the classifier bank on an independent dataset");
  ct_cmd->add_option("--manifest", ct.manifest)->required();
  ct_cmd->add_option("--out", ct.out, "Classifier directory")->required();
  ct_cmd->add_option("--epochs", ct.epochs)->capture_default_str();
  ct_cmd->add_option("--seed", ct.seed)->capture_default_str();
  ct_cmd->callback([&] { ct.run(); });

  Invert inv;
  auto* invert_cmd = app.add_subcommand("invert", "DDIM inversion plus null-text optimization of one image");
  invert_cmd->add_option("--ckpt", inv.ckpt)->required();
  invert_cmd->add_option("--image", inv.image, "PNG file")->required();
  invert_cmd->add_option("--prompt", inv.prompt, "Factual prompt")->required();
  invert_cmd->add_option("--guidance", inv.guidance)->capture_default_str();
  invert_cmd->add_option("--iters", inv.iters, "Null-text iterations per step")->capture_default_str();
  invert_cmd->add_option("--out", inv.out, "Trajectory blob")->required();
  invert_cmd->callback([&] { inv.run(); });

  Edit ed;
  auto* edit_cmd = app.add_subcommand("edit", "Counterfactual edit of one manifest image");
  edit_cmd->add_option("--ckpt", ed.ckpt)->required();
  edit_cmd->add_option("--manifest", ed.manifest, "Dataset directory (default: the training manifest)");
  edit_cmd->add_option("--image", ed.image, "Record id")->required();
  edit_cmd->add_option("--set", ed.set, "attribute=value assignment")->take_all();
  edit_cmd->add_option("--drop", ed.drop, "Attribute to remove from the prompt")->take_all();
  edit_cmd->add_option("--guidance", ed.guidance)->capture_default_str();
  edit_cmd->add_option("--policy", ed.policy, "drop_findings or keep_all")->capture_default_str();
  edit_cmd->add_option("--seed", ed.seed)->capture_default_str();
  edit_cmd->add_option("--out", ed.out, "Result directory")->required();
  edit_cmd->callback([&] { ed.run(); });

  Eval ev;
  auto* eval_cmd = app.add_subcommand("eval", "Effect matrix and summary metrics");
  eval_cmd->add_option("--ckpt", ev.ckpt)->required();
  eval_cmd->add_option("--manifest", ev.manifest)->required();
  eval_cmd->add_option("--classifiers", ev.classifiers)->required();
  eval_cmd->add_option("--out", ev.out, "Report directory")->required();
  eval_cmd->add_option("--n", ev.n, "Images per cell")->capture_default_str();
  eval_cmd->add_option("--split", ev.split)->capture_default_str();
  eval_cmd->add_option("--guidance", ev.guidance)->capture_default_str();
  eval_cmd->add_option("--policy", ev.policy, "drop_findings or keep_all")->capture_default_str();
  eval_cmd->add_option("--cache", ev.cache, "Probe cache directory (default: <out>/cache)");
  eval_cmd->callback([&] { ev.run(); });

  Serve sv;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP probe service");
  serve_cmd->add_option("--ckpt", sv.config.checkpoint)->required();
  serve_cmd->add_option("--classifiers", sv.config.classifiers)->required();
  serve_cmd->add_option("--manifest", sv.config.manifest)->required();
  serve_cmd->add_option("--runs", sv.config.runs_dir, "Sessions, results and reports")->capture_default_str();
  serve_cmd->add_option("--host", sv.config.host)->capture_default_str();
  serve_cmd->add_option("--port", sv.config.port)->capture_default_str();
  serve_cmd->add_option("--max-in-flight", sv.config.max_in_flight, "Concurrent edit jobs")->capture_default_str();
  serve_cmd->add_option("--max-waiting", sv.config.max_waiting, "Queued edits before 503")->capture_default_str();
  serve_cmd->add_option("--policy", sv.policy, "Default drop policy")->capture_default_str();
  serve_cmd->callback([&] { sv.run(); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ValidationError& e) {
    log(fmt::format("error: {}", e.what()));
    return 2;
  } catch (const std::exception& e) {
    log(fmt::format("error: {}", e.what()));
    return 1;
  }
  return 0;
}
