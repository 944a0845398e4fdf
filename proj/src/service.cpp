#include "cfprobe/service.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>

#include <fmt/chrono.h>
#include <fmt/format.h>
#include <httplib.h>

#include "cfprobe/error.hpp"
#include "cfprobe/hashing.hpp"

namespace cfprobe::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::time_point_cast<std::chrono::seconds>(std::chrono::system_clock::now());
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", now);
}

std::string decimal(double v) { return fmt::format("{:.6f}", v); }

bool valid_name(const std::string& s) {
  static const std::regex pattern("[A-Za-z0-9_-]{1,64}");
  return std::regex_match(s, pattern);
}

Response error(int status, std::string_view kind, const std::string& message) {
  return {status, {{"error", kind}, {"message", message}}};
}

Response field_errors(const std::vector<std::pair<std::string, std::string>>& errors) {
  auto fields = json::array();
  for (const auto& [field, message] : errors) fields.push_back({{"field", field}, {"message", message}});
  return {422, {{"error", "validation"}, {"fields", fields}}};
}

std::string new_session_id() {
  std::random_device rd;
  return fmt::format("s-{:08x}{:04x}", rd(), rd() & 0xffff);
}

template <class F>
auto load_artifact(std::string_view what, const fs::path& path, F&& f) {
  if (path.empty()) throw ArtifactError(fmt::format("no {} path given", what));
  if (!fs::exists(path)) throw ArtifactError(fmt::format("{} not found at {}", what, path.string()));
  return f(path);
}

// Parsed and field-validated edit request.
struct EditRequest {
  std::string session_id;
  std::string image_id;
  prompter::Intervention intervention;
  std::uint64_t seed = 0;
  double guidance = 3.0;
  editor::DropPolicy policy = editor::DropPolicy::drop_findings;
};

std::variant<EditRequest, Response> parse_edit(const json& body, const synthgen::DatasetManifest& manifest,
                                               const editor::EditOptions& defaults, bool need_session_fields) {
  std::vector<std::pair<std::string, std::string>> errors;
  if (!body.is_object()) return field_errors({{"body", "request body must be a JSON object"}});
  EditRequest req;
  req.guidance = defaults.guidance;
  req.policy = defaults.policy;
  req.seed = defaults.seed;

  if (!body.contains("image_id") || !body["image_id"].is_string())
    errors.emplace_back("image_id", "required string");
  else {
    req.image_id = body["image_id"].get<std::string>();
    try {
      manifest.record(req.image_id);
    } catch (const std::exception&) {
      errors.emplace_back("image_id", fmt::format("unknown image '{}'", req.image_id));
    }
  }

  std::map<std::string, std::string> assignments;
  if (body.contains("assignments")) {
    if (!body["assignments"].is_object())
      errors.emplace_back("assignments", "must be an object of attribute -> value strings");
    else
      for (const auto& [k, v] : body["assignments"].items()) {
        const auto field = "assignments." + k;
        if (!v.is_string()) {
          errors.emplace_back(field, "value must be a string");
          continue;
        }
        try {
          prompter::Intervention::parse({{k, v.get<std::string>()}}, {});
          assignments[k] = v.get<std::string>();
        } catch (const ValidationError& e) {
          errors.emplace_back(field, e.what());
        }
      }
  }
  std::set<std::string> dropped;
  if (body.contains("dropped")) {
    if (!body["dropped"].is_array())
      errors.emplace_back("dropped", "must be an array of attribute names");
    else
      for (std::size_t i = 0; i < body["dropped"].size(); ++i) {
        const auto& v = body["dropped"][i];
        const auto field = fmt::format("dropped[{}]", i);
        if (!v.is_string()) {
          errors.emplace_back(field, "must be a string");
          continue;
        }
        try {
          prompter::parse_prompt_attribute(v.get<std::string>());
          dropped.insert(v.get<std::string>());
        } catch (const ValidationError& e) {
          errors.emplace_back(field, e.what());
        }
      }
  }
  if (body.contains("seed")) {
    if (!body["seed"].is_number_integer() || (!body["seed"].is_number_unsigned() && body["seed"].get<std::int64_t>() < 0))
      errors.emplace_back("seed", "must be a non-negative integer");
    else
      req.seed = body["seed"].get<std::uint64_t>();
  }
  if (body.contains("guidance")) {
    if (!body["guidance"].is_number() || !(body["guidance"].get<double>() >= 1.0) ||
        !(body["guidance"].get<double>() <= 20.0))
      errors.emplace_back("guidance", "must be a number in [1, 20]");
    else
      req.guidance = body["guidance"].get<double>();
  }
  if (body.contains("policy")) {
    try {
      req.policy = editor::parse_drop_policy(body["policy"].is_string() ? body["policy"].get<std::string>() : "");
    } catch (const ValidationError& e) {
      errors.emplace_back("policy", e.what());
    }
  }
  if (need_session_fields && body.contains("session_id")) {
    if (!body["session_id"].is_string() || !valid_name(body["session_id"].get<std::string>()))
      errors.emplace_back("session_id", "must match [A-Za-z0-9_-]{1,64}");
    else
      req.session_id = body["session_id"].get<std::string>();
  }
  if (errors.empty()) {
    try {
      req.intervention = prompter::Intervention::parse(assignments, dropped);
    } catch (const ValidationError& e) {
      errors.emplace_back("assignments", e.what());
    }
  }
  if (!errors.empty()) return field_errors(errors);
  return req;
}

}  // namespace

JobGate::JobGate(std::size_t capacity, std::size_t max_waiting) : capacity_(capacity), max_waiting_(max_waiting) {
  if (capacity == 0) throw ValidationError("job gate capacity must be positive");
}

JobGate::Ticket::Ticket(Ticket&& other) noexcept : gate_(other.gate_), position_(other.position_) {
  other.gate_ = nullptr;
}

JobGate::Ticket::~Ticket() {
  if (gate_ != nullptr) gate_->release();
}

std::optional<JobGate::Ticket> JobGate::acquire() {
  std::unique_lock lock(mu_);
  const std::uint64_t ahead = next_ticket_ - serving_;
  const bool immediate = ahead == 0 && in_flight_ < capacity_;
  if (!immediate && ahead >= max_waiting_) return std::nullopt;
  const std::uint64_t ticket = next_ticket_++;
  const std::size_t position = immediate ? 0 : static_cast<std::size_t>(ahead) + 1;
  cv_.wait(lock, [&] { return ticket == serving_ && in_flight_ < capacity_; });
  ++serving_;
  ++in_flight_;
  cv_.notify_all();
  return Ticket(this, position);
}

void JobGate::release() {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
  }
  cv_.notify_all();
}

std::size_t JobGate::in_flight() const {
  std::lock_guard lock(mu_);
  return in_flight_;
}

std::size_t JobGate::waiting() const {
  std::lock_guard lock(mu_);
  return static_cast<std::size_t>(next_ticket_ - serving_);
}

json HistoryEntry::to_json() const {
  json j = {{"type", "probe"},        {"index", index},           {"image_id", image_id}, {"request", request},
            {"result_ref", result_ref}, {"created_at", created_at}};
  if (probe) j["probe"] = probe->to_json();
  if (!error.empty()) j["error"] = error;
  return j;
}

HistoryEntry HistoryEntry::from_json(const json& j) {
  HistoryEntry e;
  e.index = j.at("index");
  e.image_id = j.at("image_id");
  e.request = j.at("request");
  e.result_ref = j.at("result_ref");
  e.created_at = j.value("created_at", "");
  if (j.contains("probe")) e.probe = evalsuite::Probe::from_json(j["probe"]);
  e.error = j.value("error", "");
  return e;
}

json image_payload(const ImageArray& img) {
  const auto bytes = to_bytes(img);
  return {{"width", img.width()}, {"height", img.height()}, {"encoding", "base64-u8-gray"}, {"data", base64_encode(bytes)}};
}

ImageArray image_from_payload(const json& j) {
  if (j.value("encoding", "") != "base64-u8-gray") throw ValidationError("unsupported image encoding");
  const auto bytes = base64_decode(j.at("data").get<std::string>());
  return from_bytes(j.at("height"), j.at("width"), bytes);
}

ProbeService::ProbeService(const ServiceConfig& config)
    : ProbeService(config,
                   load_artifact("checkpoint", config.checkpoint,
                                 [](const fs::path& p) { return diffusion::DiffusionState::load(p); }),
                   load_artifact("classifiers", config.classifiers,
                                 [](const fs::path& p) { return evalsuite::ClassifierBank::load(p); }),
                   load_artifact("manifest", config.manifest,
                                 [](const fs::path& p) { return synthgen::load_manifest(p); })) {}

ProbeService::ProbeService(const ServiceConfig& config, diffusion::DiffusionState state, evalsuite::ClassifierBank bank,
                           synthgen::DatasetManifest manifest)
    : config_(config),
      state_(std::move(state)),
      bank_(std::move(bank)),
      manifest_(std::move(manifest)),
      checkpoint_hash_(state_.checkpoint_hash()),
      gate_(config.max_in_flight, config.max_waiting) {
  state_.freeze();
  if (manifest_.records.empty()) throw ArtifactError("manifest has no records");
  fs::create_directories(config_.runs_dir / "sessions");
  fs::create_directories(config_.runs_dir / "results");
  fs::create_directories(config_.runs_dir / "reports");
}

Response ProbeService::health() const {
  return {200,
          {{"status", "ok"},
           {"checkpoint_hash", checkpoint_hash_},
           {"classifier_hash", bank_.weights_hash()},
           {"records", manifest_.records.size()},
           {"max_in_flight", gate_.capacity()}}};
}

Response ProbeService::list_images(const std::string& split, std::size_t limit, std::size_t offset) const {
  synthgen::Split s;
  try {
    s = synthgen::parse_split(split);
  } catch (const ValidationError& e) {
    return field_errors({{"split", e.what()}});
  }
  const auto records = manifest_.in_split(s);
  auto items = json::array();
  for (std::size_t i = offset; i < records.size() && items.size() < limit; ++i) {
    const auto& r = *records[i];
    items.push_back({{"id", r.id}, {"record", r}, {"prompt", prompter::render_prompt(r).text}});
  }
  return {200, {{"split", split}, {"total", records.size()}, {"offset", offset}, {"images", items}}};
}

Response ProbeService::image(const std::string& id) const {
  const AttributeRecord* record = nullptr;
  try {
    record = &manifest_.record(id);
  } catch (const std::exception&) {
    return error(404, "not_found", fmt::format("unknown image '{}'", id));
  }
  return {200,
          {{"id", id},
           {"split", to_string(manifest_.splits.at(id))},
           {"record", *record},
           {"prompt", prompter::render_prompt(*record).text},
           {"image", image_payload(manifest_.image(id))}}};
}

Response ProbeService::preview(const json& body) const {
  auto parsed = parse_edit(body, manifest_, config_.edit, false);
  if (auto* r = std::get_if<Response>(&parsed)) return *r;
  const auto& req = std::get<EditRequest>(parsed);
  const auto factual = prompter::render_prompt(manifest_.record(req.image_id));
  const auto effective = editor::effective_intervention(req.intervention, req.policy);
  return {200,
          {{"image_id", req.image_id},
           {"factual_prompt", factual.text},
           {"prompt", prompter::apply_intervention(factual, effective).text},
           {"intervention", editor::intervention_to_json(effective)}}};
}

fs::path ProbeService::session_log(const std::string& id) const { return config_.runs_dir / "sessions" / (id + ".jsonl"); }

ProbeService::Session& ProbeService::session(const std::string& id, bool create) {
  std::lock_guard lock(sessions_mu_);
  if (auto it = sessions_.find(id); it != sessions_.end()) return *it->second;
  auto s = std::make_unique<Session>();
  const auto log = session_log(id);
  if (fs::exists(log)) {
    const auto entries = load_history(id);
    s->next_index = entries.empty() ? 0 : entries.back().index + 1;
  } else {
    if (!create) throw ValidationError(fmt::format("unknown session '{}'", id));
    const json header = {{"type", "session"},
                         {"session_id", id},
                         {"checkpoint_hash", checkpoint_hash_},
                         {"manifest", manifest_.root.string()},
                         {"created_at", utc_now()}};
    std::ofstream(log, std::ios::app) << header.dump() << '\n';
  }
  return *sessions_.emplace(id, std::move(s)).first->second;
}

void ProbeService::append(const std::string& session_id, const HistoryEntry& entry) {
  std::ofstream out(session_log(session_id), std::ios::app);
  out << entry.to_json().dump() << '\n';
  out.flush();
  if (!out) throw ArtifactError(fmt::format("cannot append to session log {}", session_id));
}

std::vector<HistoryEntry> ProbeService::load_history(const std::string& session_id) const {
  std::vector<HistoryEntry> entries;
  std::istringstream in(read_file(session_log(session_id)));
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (j.value("type", "") == "probe") entries.push_back(HistoryEntry::from_json(j));
  }
  return entries;
}

Response ProbeService::submit_edit(const json& body) {
  auto parsed = parse_edit(body, manifest_, config_.edit, true);
  if (auto* r = std::get_if<Response>(&parsed)) return *r;
  auto req = std::get<EditRequest>(std::move(parsed));
  if (req.session_id.empty()) req.session_id = new_session_id();
  auto& sess = session(req.session_id, true);

  auto ticket = gate_.acquire();
  if (!ticket)
    return {503, {{"error", "queue_full"}, {"message", "edit queue is full; retry later"},
                  {"in_flight", gate_.in_flight()}, {"waiting", gate_.waiting()}}};

  editor::EditOptions options = config_.edit;
  options.seed = req.seed;
  options.guidance = req.guidance;
  options.policy = req.policy;
  const auto& record = manifest_.record(req.image_id);

  std::lock_guard session_lock(sess.mu);
  HistoryEntry entry;
  entry.index = sess.next_index;
  entry.image_id = req.image_id;
  entry.request = body;
  entry.created_at = utc_now();
  try {
    const auto factual = manifest_.image(req.image_id);
    const auto result = editor::generate_counterfactual(state_, factual, record, req.intervention, options);
    const auto split_records = manifest_.in_split(manifest_.splits.at(record.id));
    std::size_t pos = 0;
    while (split_records[pos]->id != record.id) ++pos;
    const auto reference = manifest_.image(split_records[(pos + 1) % split_records.size()]->id);
    const auto probe = evalsuite::make_probe(bank_, record, result.intervention, result.factual,
                                             result.counterfactual, reference);
    entry.result_ref = fmt::format("results/{}/{}", req.session_id, entry.index);
    result.save(config_.runs_dir / entry.result_ref, nullptr);
    entry.probe = probe;
    append(req.session_id, entry);
    ++sess.next_index;

    json scores = json::object(), cpg = json::object();
    const auto c = probe.cpg();
    for (std::size_t a = 0; a < evalsuite::kNumAttributes; ++a) {
      const std::string name(to_string(kEvalAttributes[a]));
      scores[name] = {{"factual", decimal(probe.factual_scores[a])},
                      {"counterfactual", decimal(probe.counterfactual_scores[a])}};
      cpg[name] = decimal(c[a]);
    }
    std::vector<std::string> rows;
    for (auto a : probe.rows) rows.emplace_back(to_string(a));
    return {200,
            {{"session_id", req.session_id},
             {"probe_index", entry.index},
             {"queue_position", ticket->queue_position()},
             {"result_ref", entry.result_ref},
             {"image_id", req.image_id},
             {"factual_prompt", result.factual_prompt.text},
             {"counterfactual_prompt", result.counterfactual_prompt.text},
             {"intervention", editor::intervention_to_json(result.intervention)},
             {"intervened", rows},
             {"factual", image_payload(result.factual)},
             {"counterfactual", image_payload(result.counterfactual)},
             {"difference", image_payload(result.difference_image())},
             {"scores", scores},
             {"cpg", cpg},
             {"lpips", decimal(probe.lpips)},
             {"l1", decimal(probe.l1)},
             {"provenance", result.meta(false).at("provenance")}}};
  } catch (const std::exception& e) {
    entry.error = e.what();
    append(req.session_id, entry);
    ++sess.next_index;
    return {500, {{"error", "edit_failed"}, {"message", e.what()}, {"session_id", req.session_id},
                  {"probe_index", entry.index}}};
  }
}

Response ProbeService::history(const std::string& session_id) const {
  if (!valid_name(session_id) || !fs::exists(session_log(session_id)))
    return error(404, "not_found", fmt::format("unknown session '{}'", session_id));
  auto probes = json::array();
  for (const auto& e : load_history(session_id)) probes.push_back(e.to_json());
  return {200, {{"session_id", session_id}, {"checkpoint_hash", checkpoint_hash_}, {"probes", probes}}};
}

Response ProbeService::session_effect_matrix(const std::string& session_id) const {
  if (!valid_name(session_id) || !fs::exists(session_log(session_id)))
    return error(404, "not_found", fmt::format("unknown session '{}'", session_id));
  std::vector<evalsuite::Probe> probes;
  for (const auto& e : load_history(session_id))
    if (e.probe) probes.push_back(*e.probe);
  const auto m = evalsuite::EffectMatrix::from_probes(probes);
  return {200, {{"session_id", session_id}, {"probes", probes.size()}, {"matrix", m.to_json()}, {"text", m.to_text()}}};
}

Response ProbeService::report(const std::string& run) const {
  const auto path = config_.runs_dir / "reports" / run / "report.json";
  if (!valid_name(run) || !fs::exists(path)) return error(404, "not_found", fmt::format("unknown report run '{}'", run));
  return {200, json::parse(read_file(path))};
}

Response ProbeService::queue() const {
  return {200, {{"in_flight", gate_.in_flight()}, {"waiting", gate_.waiting()}, {"capacity", gate_.capacity()}}};
}

struct Server::Impl {
  httplib::Server http;
  std::thread thread;
};

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

std::size_t query_size(const httplib::Request& req, const std::string& key, std::size_t fallback) {
  if (!req.has_param(key)) return fallback;
  const auto v = req.get_param_value(key);
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ValidationError(fmt::format("{} must be a non-negative integer", key));
  return out;
}

}  // namespace

Server::Server(ProbeService& service) : impl_(std::make_unique<Impl>()) {
  auto& http = impl_->http;
  // httplib's defaults add SO_REUSEPORT, which lets a second server share a busy port.
  http.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  http.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                            {"Access-Control-Allow-Headers", "Content-Type"},
                            {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  http.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  http.Get("/health", [&service](const httplib::Request&, httplib::Response& res) { reply(res, service.health()); });
  http.Get("/queue", [&service](const httplib::Request&, httplib::Response& res) { reply(res, service.queue()); });
  http.Get("/images", [&service](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto split = req.has_param("split") ? req.get_param_value("split") : "test";
      reply(res, service.list_images(split, std::min<std::size_t>(query_size(req, "limit", 50), 1000),
                                     query_size(req, "offset", 0)));
    } catch (const ValidationError& e) {
      reply(res, field_errors({{"query", e.what()}}));
    }
  });
  http.Get(R"(/images/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.image(req.matches[1]));
  });
  const auto with_json = [](auto handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        reply(res, error(400, "bad_json", e.what()));
        return;
      }
      reply(res, handler(body));
    };
  };
  http.Post("/edits", with_json([&service](const json& b) { return service.submit_edit(b); }));
  http.Post("/prompt-preview", with_json([&service](const json& b) { return service.preview(b); }));
  http.Get(R"(/sessions/([^/]+)/history)", [&service](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.history(req.matches[1]));
  });
  http.Get(R"(/sessions/([^/]+)/effect-matrix)", [&service](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.session_effect_matrix(req.matches[1]));
  });
  http.Get(R"(/reports/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    reply(res, service.report(req.matches[1]));
  });
  http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      reply(res, error(500, "internal", e.what()));
    }
  });
}

Server::~Server() { stop(); }

void Server::start(const std::string& host, int port) {
  auto& http = impl_->http;
  if (port == 0) {
    port_ = http.bind_to_any_port(host);
    if (port_ < 0) throw std::runtime_error(fmt::format("cannot bind {} to any port", host));
  } else {
    if (!http.bind_to_port(host, port))
      throw std::runtime_error(fmt::format("cannot bind {}:{}; is the port already in use?", host, port));
    port_ = port;
  }
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
}

void Server::stop() {
  if (!impl_) return;
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

void Server::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace cfprobe::service
