#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfprobe/classifier.hpp"
#include "cfprobe/diffusion.hpp"
#include "cfprobe/editor.hpp"
#include "cfprobe/evalsuite.hpp"
#include "cfprobe/manifest.hpp"

namespace cfprobe::service {

struct ServiceConfig {
  std::filesystem::path checkpoint;
  std::filesystem::path classifiers;
  std::filesystem::path manifest;
  std::filesystem::path runs_dir = "runs";  // sessions/, results/, reports/
  std::string host = "127.0.0.1";
  int port = 7878;
  std::size_t max_in_flight = 1;  // K: concurrent edit jobs
  std::size_t max_waiting = 64;   // queued edits beyond K; further requests get 503
  editor::EditOptions edit;
};

/// FIFO admission gate: at most `capacity` holders, bounded waiting line.
class JobGate {
 public:
  JobGate(std::size_t capacity, std::size_t max_waiting);

  class Ticket {
   public:
    Ticket(Ticket&&) noexcept;
    Ticket& operator=(Ticket&&) = delete;
    ~Ticket();
    /// Jobs that were ahead of this one when it arrived (0 = started at once).
    std::size_t queue_position() const { return position_; }

   private:
    friend class JobGate;
    Ticket(JobGate* gate, std::size_t position) : gate_(gate), position_(position) {}
    JobGate* gate_;
    std::size_t position_;
  };

  /// Blocks until admitted. Returns nothing when the waiting line is full.
  std::optional<Ticket> acquire();
  std::size_t in_flight() const;
  std::size_t waiting() const;
  std::size_t capacity() const { return capacity_; }

 private:
  void release();
  const std::size_t capacity_;
  const std::size_t max_waiting_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::size_t in_flight_ = 0;
  std::uint64_t next_ticket_ = 0;
  std::uint64_t serving_ = 0;  // lowest ticket not yet admitted
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

/// One probe in a session log.
struct HistoryEntry {
  std::size_t index = 0;
  std::string image_id;
  nlohmann::json request;         // as submitted
  std::string result_ref;         // relative to runs_dir; empty on failure
  std::optional<evalsuite::Probe> probe;
  std::string error;              // non-empty on failure
  std::string created_at;

  nlohmann::json to_json() const;
  static HistoryEntry from_json(const nlohmann::json& j);
};

/// Transport-independent request handling; the HTTP server only routes to it.
class ProbeService {
 public:
  /// Throws ArtifactError with a diagnostic if any artifact is missing or invalid.
  explicit ProbeService(const ServiceConfig& config);
  ProbeService(const ServiceConfig& config, diffusion::DiffusionState state, evalsuite::ClassifierBank bank,
               synthgen::DatasetManifest manifest);

  Response health() const;
  Response list_images(const std::string& split, std::size_t limit, std::size_t offset) const;
  Response image(const std::string& id) const;
  Response preview(const nlohmann::json& body) const;
  /// Body: {session_id?, image_id, assignments, dropped, seed?, guidance?, policy?}.
  Response submit_edit(const nlohmann::json& body);
  Response history(const std::string& session_id) const;
  Response session_effect_matrix(const std::string& session_id) const;
  Response report(const std::string& run) const;
  Response queue() const;

  /// Session log as stored on disk.
  std::vector<HistoryEntry> load_history(const std::string& session_id) const;
  const ServiceConfig& config() const { return config_; }
  const std::string& checkpoint_hash() const { return checkpoint_hash_; }

 private:
  struct Session {
    std::mutex mu;
    std::size_t next_index = 0;
  };
  Session& session(const std::string& id, bool create);
  std::filesystem::path session_log(const std::string& id) const;
  void append(const std::string& session_id, const HistoryEntry& entry);

  ServiceConfig config_;
  diffusion::DiffusionState state_;
  evalsuite::ClassifierBank bank_;
  synthgen::DatasetManifest manifest_;
  std::string checkpoint_hash_;
  JobGate gate_;
  mutable std::mutex sessions_mu_;
  std::map<std::string, std::unique_ptr<Session>> sessions_;
};

/// HTTP front end over a ProbeService.
class Server {
 public:
  explicit Server(ProbeService& service);
  ~Server();
  /// Binds and serves on a background thread. Throws std::runtime_error if the port is busy.
  void start(const std::string& host, int port);
  /// Port actually bound (useful with port 0).
  int port() const { return port_; }
  void stop();
  /// Blocks until stop() is called from elsewhere.
  void wait();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

/// Image payload: {width, height, encoding: "base64-u8-gray", data}.
nlohmann::json image_payload(const ImageArray& img);
ImageArray image_from_payload(const nlohmann::json& j);

}  // namespace cfprobe::service
