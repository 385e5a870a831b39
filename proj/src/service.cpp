// SPDX-License-Identifier: Apache-2.0
#include "maskcycle/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>

#include "maskcycle/errors.hpp"
#include "maskcycle/image_io.hpp"
#include "maskcycle/mask.hpp"

namespace maskcycle {

namespace {

ServiceResponse error_response(int status, const std::string& message) { return {status, {{"error", message}}}; }

/// Decodes a client mask of any dimensions, requires strictly black/white
/// pixels, and resamples it nearest-neighbour to size x size.
Mask decode_client_mask(const std::vector<std::uint8_t>& bytes, int size) {
  const RawImage raw = decode_png(bytes);
  const int colour = raw.channels >= 3 ? 3 : 1;
  for (int i = 0; i < raw.height; ++i) {
    for (int j = 0; j < raw.width; ++j) {
      const auto v = raw.at(i, j, 0);
      for (int c = 1; c < colour; ++c)
        if (raw.at(i, j, c) != v) throw FormatError("mask is not binary (non-gray pixel)");
      if (v != 0 && v != 255) throw FormatError("mask is not binary (value " + std::to_string(v) + ")");
    }
  }
  Mask mask(size);
  for (int i = 0; i < size; ++i) {
    const int si = std::min(raw.height - 1, static_cast<int>(static_cast<std::int64_t>(i) * raw.height / size));
    for (int j = 0; j < size; ++j) {
      const int sj = std::min(raw.width - 1, static_cast<int>(static_cast<std::int64_t>(j) * raw.width / size));
      mask.set(i, j, raw.at(si, sj, 0) == 255 ? 1 : 0);
    }
  }
  return mask;
}

}  // namespace

InferenceService::InferenceService(ServiceOptions options)
    : options_(std::move(options)), server_(std::make_unique<httplib::Server>()) {
  install_routes();
}

InferenceService::~InferenceService() { stop(); }

void InferenceService::load(Checkpoint checkpoint) {
  checkpoint.models.eval();
  for (auto& p : checkpoint.models.generator_parameters()) p.set_requires_grad(false);
  checkpoint_id_ = options_.checkpoint_id.empty() ? "iter-" + std::to_string(checkpoint.iteration)
                                                  : options_.checkpoint_id;
  checkpoint_ = std::move(checkpoint);
  loaded_.store(true);
}

void InferenceService::load(const std::filesystem::path& path) {
  if (options_.checkpoint_id.empty()) options_.checkpoint_id = path.filename().string();
  load(load_checkpoint(path));
}

ServiceResponse InferenceService::health() const {
  if (!loaded()) return {503, {{"status", "loading"}}};
  return {200, {{"status", "ok"}}};
}

ServiceResponse InferenceService::info() const {
  if (!loaded()) return error_response(503, "model not loaded");
  const auto& c = *checkpoint_;
  return {200,
          {{"checkpoint", checkpoint_id_},
           {"resolution", c.models.config.resolution},
           {"domains", {c.domain_a, c.domain_b}},
           {"scheme", c.scheme},
           {"iteration", c.iteration}}};
}

ServiceResponse InferenceService::translate(const std::string& body) {
  if (body.size() > options_.max_payload_bytes) return error_response(413, "payload exceeds the size limit");
  if (!loaded()) return error_response(503, "model not loaded");
  const auto started = std::chrono::steady_clock::now();

  nlohmann::json request;
  try {
    request = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_response(400, "body is not valid JSON");
  }
  if (!request.is_object()) return error_response(400, "body must be a JSON object");
  const auto direction = request.value("direction", std::string{});
  if (direction != "a2b" && direction != "b2a") return error_response(400, "direction must be a2b or b2a");
  if (!request.contains("image") || !request["image"].is_string())
    return error_response(400, "image must be a base64 string");

  const int size = checkpoint_->models.config.resolution;
  torch::Tensor image;
  Mask mask = Mask::full(size);
  try {
    image = resize_bilinear(to_tensor(decode_image(base64_decode(request["image"].get<std::string>()))), size);
  } catch (const Error& e) {
    return error_response(400, std::string("image: ") + e.what());
  }
  if (request.contains("mask") && !request["mask"].is_null()) {
    if (!request["mask"].is_string()) return error_response(400, "mask must be a base64 string");
    try {
      mask = decode_client_mask(base64_decode(request["mask"].get<std::string>()), size);
    } catch (const Error& e) {
      return error_response(400, std::string("mask: ") + e.what());
    }
  }

  std::vector<std::uint8_t> png;
  {
    std::lock_guard<std::mutex> lock(forward_mutex_);
    torch::NoGradGuard no_grad;
    auto& generator = direction == "a2b" ? checkpoint_->models.g_ab : checkpoint_->models.g_ba;
    png = encode_png(to_raw(maskcycle::translate(generator, image, mask)));
  }
  const double latency =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return {200, {{"image", base64_encode(png)}, {"latencyMs", latency}}};
}

ServiceResponse InferenceService::sample_mask(const std::string& body) const {
  if (body.size() > options_.max_payload_bytes) return error_response(413, "payload exceeds the size limit");
  nlohmann::json request;
  try {
    request = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_response(400, "body is not valid JSON");
  }
  if (!request.is_object()) return error_response(400, "body must be a JSON object");
  try {
    std::uint64_t seed = 0;
    int size = loaded() ? checkpoint_->models.config.resolution : 128;
    nlohmann::json scheme;
    if (request.contains("scheme")) {
      scheme = request["scheme"];
    } else {
      scheme = request;
      scheme.erase("seed");
      scheme.erase("size");
    }
    if (request.contains("seed")) seed = request["seed"].get<std::uint64_t>();
    if (request.contains("size")) size = request["size"].get<int>();
    if (size < 1 || size > 4096) return error_response(400, "size must be in [1, 4096]");
    Rng rng(seed);
    const auto mask = maskcycle::sample_mask(size, scheme_from_json(scheme), rng);
    return {200, {{"mask", base64_encode(encode_mask_png(mask))}}};
  } catch (const Error& e) {
    return error_response(400, e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, std::string("invalid request: ") + e.what());
  }
}

void InferenceService::install_routes() {
  auto& srv = *server_;
  srv.set_payload_max_length(options_.max_payload_bytes);
  const auto send = [this](const httplib::Request& req, httplib::Response& res, const ServiceResponse& out) {
    const auto origin = req.get_header_value("Origin");
    const auto& allowed = options_.cors_origins;
    if (std::find(allowed.begin(), allowed.end(), "*") != allowed.end()) {
      res.set_header("Access-Control-Allow-Origin", "*");
    } else if (!origin.empty() && std::find(allowed.begin(), allowed.end(), origin) != allowed.end()) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Vary", "Origin");
    }
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  srv.Options(R"(.*)", [send](const httplib::Request& req, httplib::Response& res) {
    send(req, res, {204, nullptr});
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.body.clear();
  });
  srv.Post("/translate", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(req, res, translate(req.body));
  });
  srv.Post("/masks/sample", [this, send](const httplib::Request& req, httplib::Response& res) {
    send(req, res, sample_mask(req.body));
  });
  srv.Get("/info", [this, send](const httplib::Request& req, httplib::Response& res) { send(req, res, info()); });
  srv.Get("/health", [this, send](const httplib::Request& req, httplib::Response& res) { send(req, res, health()); });
}

bool InferenceService::listen() { return server_->listen(options_.host, options_.port); }

int InferenceService::start_background() {
  const int port = server_->bind_to_any_port(options_.host);
  if (port <= 0) throw Error("cannot bind a port on " + options_.host);
  thread_ = std::make_unique<std::thread>([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

void InferenceService::stop() {
  if (server_) server_->stop();
  if (thread_ && thread_->joinable()) thread_->join();
  thread_.reset();
}

}  // namespace maskcycle
