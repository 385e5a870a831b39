// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <thread>
#include <string>
#include <vector>

#include "maskcycle/nets.hpp"

namespace httplib {
class Server;
}

namespace maskcycle {

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8787;
  std::size_t max_payload_bytes = 10u * 1024u * 1024u;
  std::vector<std::string> cors_origins{"*"};
  std::string checkpoint_id;
};

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

/// Serves one frozen checkpoint:
///   POST /translate      {direction: a2b|b2a, image: base64 PNG/JPEG, mask?: base64 PNG} -> {image, latencyMs}
///   POST /masks/sample   {scheme: {...} | variant + params inline, seed, size?} -> {mask}
///   GET  /info           checkpoint id, resolution, domains, scheme, iteration
///   GET  /health         200 {"status":"ok"} once loaded, 503 before
/// The model is never mutated after load; forward passes are serialized by a mutex.
class InferenceService {
 public:
  explicit InferenceService(ServiceOptions options = {});
  ~InferenceService();

  InferenceService(const InferenceService&) = delete;
  InferenceService& operator=(const InferenceService&) = delete;

  void load(Checkpoint checkpoint);
  void load(const std::filesystem::path& path);
  bool loaded() const { return loaded_.load(); }

  ServiceResponse translate(const std::string& body);
  ServiceResponse sample_mask(const std::string& body) const;
  ServiceResponse info() const;
  ServiceResponse health() const;

  /// Binds and serves until stop(). Returns false if the socket could not be bound.
  bool listen();
  /// Binds to host and an OS-chosen port, serving on a background thread; returns the port.
  int start_background();
  void stop();
  httplib::Server& server() { return *server_; }

 private:
  void install_routes();

  ServiceOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::unique_ptr<std::thread> thread_;
  std::atomic<bool> loaded_{false};
  mutable std::mutex forward_mutex_;
  std::optional<Checkpoint> checkpoint_;
  std::string checkpoint_id_;
};

}  // namespace maskcycle
