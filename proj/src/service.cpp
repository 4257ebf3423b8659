#include "cfgen/service.hpp"

#include <charconv>
#include <cstdlib>
#include <deque>
#include <mutex>
#include <semaphore>
#include <unordered_map>

#include "cfgen/errors.hpp"
#include "cfgen/experiments.hpp"
#include "cfgen/manifest.hpp"
#include "httplib.h"

namespace cfgen::service {

namespace {

ApiResponse error(int status, const std::string& reason, const std::string& message) {
  return {status, {{"error", reason}, {"message", message}}};
}

std::optional<long long> parse_int(const std::string& s) {
  long long v = 0;
  const auto* end = s.data() + s.size();
  const auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  return v;
}

nlohmann::json outcome_json(const OutcomeVector& y) {
  nlohmann::json j;
  for (std::size_t i = 0; i < kOutcomeCount; ++i) j[to_string(static_cast<OutcomeVariable>(i))] = y[i];
  return j;
}

std::string status_reason(const std::string& status) {
  if (status == "degenerate") return "the query already meets the criterion at alpha 0";
  if (status == "nun_fallback") return "interpolation met the criterion only at the NUN itself";
  if (status == "already_valid") return "the query already meets the criterion under the outcome heads";
  if (status == "max_steps") return "step budget exhausted before the criterion was met";
  if (status == "not_found") return "no training frame meets the criterion";
  return "";
}

}  // namespace

struct Service::Impl {
  vae::JointVAE model;
  data::TrajectoryDataset dataset;
  ServiceOptions options;
  cf::CaseLibrary library;
  std::counting_semaphore<1024> slots;
  mutable std::mutex cache_mutex;
  std::unordered_map<std::string, cf::CFResult> cache;
  std::deque<std::string> order;
  httplib::Server server;

  Impl(vae::JointVAE m, data::TrajectoryDataset d, ServiceOptions o)
      : model(std::move(m)),
        dataset(std::move(d)),
        options(o),
        library(cf::CaseLibrary::from_dataset(dataset)),
        slots(std::clamp<std::ptrdiff_t>(o.max_concurrent, 1, 1024)) {}

  std::optional<cf::CFResult> cached(const std::string& id) const {
    std::lock_guard lock(cache_mutex);
    const auto it = cache.find(id);
    if (it == cache.end()) return std::nullopt;
    return it->second;
  }

  void remember(const std::string& id, const cf::CFResult& r) {
    std::lock_guard lock(cache_mutex);
    if (cache.contains(id)) return;
    cache.emplace(id, r);
    order.push_back(id);
    while (order.size() > std::max<std::size_t>(options.cache_capacity, 1)) {
      cache.erase(order.front());
      order.pop_front();
    }
  }

  nlohmann::json frame_summary(std::size_t i) const {
    const auto& f = dataset.frames[i];
    return {{"id", i},
            {"episode", f.episode},
            {"step", f.step},
            {"split", dataset.is_test(i) ? "test" : "train"},
            {"outcome", outcome_json(f.outcome)}};
  }
};

Service::Service(vae::JointVAE model, data::TrajectoryDataset dataset, ServiceOptions options) {
  if (!(model.schema() == dataset.schema)) throw SchemaError("model and dataset schemas differ");
  impl_ = std::make_unique<Impl>(std::move(model), std::move(dataset), options);
  auto& svr = impl_->server;
  auto reply = [](httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto param = [](const httplib::Request& req, const char* key) -> std::optional<std::string> {
    if (!req.has_param(key)) return std::nullopt;
    return req.get_param_value(key);
  };
  svr.Get("/api/model", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, get_model()); });
  svr.Get("/api/frames", [this, reply, param](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_frames(param(req, "offset"), param(req, "limit")));
  });
  svr.Get(R"(/api/frames/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_frame(req.matches[1]));
  });
  svr.Post("/api/counterfactual", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, post_counterfactual(req.body));
  });
  svr.Get(R"(/api/path/([^/]+)/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_path(req.matches[1], req.matches[2]));
  });
  svr.set_error_handler([reply](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) reply(res, error(404, "unknown_route", "no route for " + req.path));
  });
  svr.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      if (ep) std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    }
    reply(res, error(500, "internal", what));
  });
}

Service::~Service() { stop(); }

ApiResponse Service::get_model() const {
  const auto& m = impl_->model;
  const auto& d = impl_->dataset;
  nlohmann::json vars = nlohmann::json::array(), eps;
  for (std::size_t i = 0; i < kOutcomeCount; ++i) {
    const auto name = to_string(static_cast<OutcomeVariable>(i));
    vars.push_back(name);
    eps[name] = exp::epsilon_for(d, i, {});
  }
  return {200,
          {{"env", envs::to_string(d.schema.env)},
           {"schema", d.schema},
           {"outcome_variables", vars},
           {"latent_dim", m.latent_dim()},
           {"mode", vae::to_string(m.mode())},
           {"architecture", m.architecture()},
           {"frames", d.frames.size()},
           {"train_frames", d.train_indices().size()},
           {"test_frames", d.test_indices().size()},
           {"statistics", d.statistics},
           {"default_epsilon", eps},
           {"methods", {"nun", "interpolate", "gradient"}},
           {"defaults", impl_->options.defaults}}};
}

ApiResponse Service::get_frames(const std::optional<std::string>& offset, const std::optional<std::string>& limit) const {
  long long off = 0, lim = 50;
  if (offset) {
    const auto v = parse_int(*offset);
    if (!v || *v < 0) return error(422, "invalid_paging", "offset must be a nonnegative integer");
    off = *v;
  }
  if (limit) {
    const auto v = parse_int(*limit);
    if (!v || *v < 1 || *v > static_cast<long long>(impl_->options.max_page))
      return error(422, "invalid_paging",
                   "limit must be an integer in [1, " + std::to_string(impl_->options.max_page) + "]");
    lim = *v;
  }
  const auto total = static_cast<long long>(impl_->dataset.frames.size());
  nlohmann::json frames = nlohmann::json::array();
  for (long long i = off; i < std::min(total, off + lim); ++i)
    frames.push_back(impl_->frame_summary(static_cast<std::size_t>(i)));
  return {200, {{"total", total}, {"offset", off}, {"limit", lim}, {"frames", frames}}};
}

ApiResponse Service::get_frame(const std::string& id) const {
  const auto v = parse_int(id);
  const auto& d = impl_->dataset;
  if (!v || *v < 0 || *v >= static_cast<long long>(d.frames.size()))
    return error(404, "unknown_frame", "no frame '" + id + "'");
  const auto i = static_cast<std::size_t>(*v);
  const auto& f = d.frames[i];
  auto j = impl_->frame_summary(i);
  j["observation"] = data::observation_to_json(f.observation);
  j["raw"] = outcome_json(f.raw);
  j["action"] = f.action;
  j["reward"] = f.reward;
  j["q_values"] = f.q_values;
  return {200, j};
}

ApiResponse Service::post_counterfactual(const std::string& body) {
  nlohmann::json req;
  try {
    req = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    return error(422, "invalid_request", std::string("body is not JSON: ") + e.what());
  }
  if (!req.is_object()) return error(422, "invalid_request", "body must be a JSON object");
  const auto& d = impl_->dataset;
  const auto& schema = impl_->model.schema();

  if (!req.contains("frame_id") || !req["frame_id"].is_number_integer())
    return error(422, "invalid_request", "frame_id must be an integer");
  const auto frame_id = req["frame_id"].get<long long>();
  if (frame_id < 0 || frame_id >= static_cast<long long>(d.frames.size()))
    return error(404, "unknown_frame", "no frame " + std::to_string(frame_id));
  const auto frame = static_cast<std::size_t>(frame_id);

  measures::ValiditySpec spec;
  cf::Method method = cf::Method::gradient;
  cf::CFOptions options = impl_->options.defaults;
  try {
    const auto& var = req.at("variable");
    spec.variable = var.is_string() ? static_cast<std::size_t>(outcome_from_string(var.get<std::string>()))
                                    : var.get<std::size_t>();
    if (spec.variable >= kOutcomeCount) throw ParameterError("outcome variable index out of range");
    spec.sign = req.at("sign").get<int>();
    spec.epsilon = req.contains("epsilon") && !req["epsilon"].is_null() ? req["epsilon"].get<double>()
                                                                       : exp::epsilon_for(d, spec.variable, {});
    measures::check_spec(spec);
  } catch (const std::exception& e) {
    return error(422, "invalid_spec", e.what());
  }
  const double y = d.frames[frame].outcome[spec.variable];
  if (!exp::has_margin(y, spec.sign, spec.epsilon))
    return error(422, "target_out_of_range",
                 "y + sign * epsilon = " + std::to_string(y + spec.sign * spec.epsilon) + " lies outside [-1, 1]");
  try {
    method = cf::method_from_string(req.value("method", "gradient"));
    if (req.contains("params")) {
      nlohmann::json merged = options;
      merged.update(req["params"]);
      options = merged.get<cf::CFOptions>();
    }
  } catch (const std::exception& e) {
    return error(422, "invalid_params", e.what());
  }

  const nlohmann::json key{{"model", impl_->model.digest()},
                           {"frame", frame},
                           {"spec", spec},
                           {"method", cf::to_string(method)},
                           {"options", options}};
  const auto id = run::sha256_hex(key.dump()).substr(0, 16);
  auto result = impl_->cached(id);
  if (!result) {
    const auto query = exp::query_for_frame(d, frame, spec);
    try {
      impl_->slots.acquire();
      struct Release {
        std::counting_semaphore<1024>& s;
        ~Release() { s.release(); }
      } release{impl_->slots};
      result = cf::generate(impl_->model, query, impl_->library, method, options);
    } catch (const cf::TraversalError& e) {
      return error(409, "traversal_failed", e.what());
    } catch (const std::exception& e) {
      return error(409, "generation_failed", e.what());
    }
    if (result->status == "not_found") return error(409, "nun_not_found", status_reason("not_found"));
    impl_->remember(id, *result);
  }

  const auto& r = *result;
  const auto& x_q = d.features(frame);
  auto j = cf::to_json(r, schema, true);
  j["result_id"] = id;
  j["frame_id"] = frame;
  j["reason"] = status_reason(r.status);
  j["x_q"] = data::observation_to_json(d.frames[frame].observation);
  const auto mask = measures::diff_mask(x_q, r.x_c, schema);
  j["diff_mask"] = std::vector<int>(mask.begin(), mask.end());
  j["quality"] = {{"odiff", r.quality.odiff}, {"anomaly", r.quality.anomaly}, {"valid", r.valid}};
  nlohmann::json outs = nlohmann::json::array();
  for (const auto& y_pred : impl_->model.predict_outcomes_batch(r.path)) outs.push_back(outcome_json(y_pred));
  j["path_outcomes"] = outs;
  j["y_q"] = outcome_json(r.y_q);
  j["y_c"] = outcome_json(r.y_c);
  return {200, j};
}

ApiResponse Service::get_path(const std::string& result_id, const std::string& step) const {
  const auto r = impl_->cached(result_id);
  if (!r) return error(404, "unknown_result", "no result '" + result_id + "'");
  const auto k = parse_int(step);
  if (!k || *k < 0 || *k >= static_cast<long long>(r->path.size()))
    return error(404, "unknown_step", "step must be in [0, " + std::to_string(r->path.size()) + ")");
  const auto& z = r->path[static_cast<std::size_t>(*k)];
  const auto& schema = impl_->model.schema();
  const auto x = harden(impl_->model.decode(z), schema);
  return {200,
          {{"result_id", result_id},
           {"step", *k},
           {"steps", r->path.size()},
           {"z", z},
           {"observation", data::observation_to_json(decode_observation(x, schema))},
           {"outcomes", outcome_json(impl_->model.predict_outcomes(z))}}};
}

int Service::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool Service::serve() { return impl_->server.listen_after_bind(); }

void Service::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

int port_from_env(int fallback) {
  const char* v = std::getenv("CFGEN_PORT");
  if (!v) return fallback;
  const auto p = parse_int(v);
  if (!p || *p < 0 || *p > 65535) return fallback;
  return static_cast<int>(*p);
}

}  // namespace cfgen::service
