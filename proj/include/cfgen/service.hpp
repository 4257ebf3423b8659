#pragma once

// HTTP/JSON API over one loaded model and dataset:
//   GET  /api/model
//   GET  /api/frames?offset=&limit=
//   GET  /api/frames/{id}
//   POST /api/counterfactual
//   GET  /api/path/{result_id}/{step}
// Errors carry {"error": reason, "message": text} with 404, 409 or 422.

#include <cstddef>
#include <memory>
#include <optional>
#include <string>

#include "cfgen/counterfactual.hpp"
#include "cfgen/dataset.hpp"
#include "cfgen/jvae.hpp"
#include "json.hpp"

namespace cfgen::service {

struct ServiceOptions {
  /// Generations allowed to run at once; further requests wait.
  std::ptrdiff_t max_concurrent = 2;
  /// Results kept for path lookups; the oldest is dropped first.
  std::size_t cache_capacity = 256;
  std::size_t max_page = 500;
  cf::CFOptions defaults;
};

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

class Service {
 public:
  Service(vae::JointVAE model, data::TrajectoryDataset dataset, ServiceOptions options = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  ApiResponse get_model() const;
  ApiResponse get_frames(const std::optional<std::string>& offset, const std::optional<std::string>& limit) const;
  ApiResponse get_frame(const std::string& id) const;
  ApiResponse post_counterfactual(const std::string& body);
  ApiResponse get_path(const std::string& result_id, const std::string& step) const;

  /// Binds to `port` (0 picks a free one) and returns the bound port, or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  bool serve();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// CFGEN_PORT when set to a valid port, else `fallback`.
int port_from_env(int fallback = 8080);

}  // namespace cfgen::service
