#include "cfgen/counterfactual.hpp"

#include <algorithm>
#include <cmath>

#include "cfgen/errors.hpp"

namespace cfgen::cf {

std::string to_string(Method m) {
  switch (m) {
    case Method::nun: return "nun";
    case Method::interpolate: return "interpolate";
    case Method::gradient: return "gradient";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  if (s == "nun") return Method::nun;
  if (s == "interpolate" || s == "interp" || s == "interppt") return Method::interpolate;
  if (s == "gradient") return Method::gradient;
  throw ParameterError("unknown method '" + s + "' (expected nun, interpolate or gradient)");
}

void to_json(nlohmann::json& j, const CFOptions& o) {
  j = nlohmann::json{{"plausibility", o.plausibility}, {"lambda1", o.lambda1},         {"lambda2", o.lambda2},
                     {"max_steps", o.max_steps},       {"alpha_steps", o.alpha_steps}, {"lambda_grid", o.lambda_grid},
                     {"lambda_max", o.lambda_max}};
}

void from_json(const nlohmann::json& j, CFOptions& o) {
  const CFOptions d;
  o.plausibility = j.value("plausibility", d.plausibility);
  o.lambda1 = j.value("lambda1", d.lambda1);
  o.lambda2 = j.value("lambda2", d.lambda2);
  o.max_steps = j.value("max_steps", d.max_steps);
  o.alpha_steps = j.value("alpha_steps", d.alpha_steps);
  o.lambda_grid = j.value("lambda_grid", d.lambda_grid);
  o.lambda_max = j.value("lambda_max", d.lambda_max);
  if (o.max_steps < 0 || o.alpha_steps < 1 || o.lambda_grid < 1 || o.lambda_max < 0.0 || o.lambda2 < 0.0 ||
      !std::isfinite(o.lambda1))
    throw ParameterError("invalid counterfactual options");
}

CaseLibrary CaseLibrary::from_dataset(const data::TrajectoryDataset& dataset) {
  CaseLibrary lib;
  lib.schema = dataset.schema;
  for (auto i : dataset.train_indices()) {
    lib.frames.push_back(i);
    lib.features.push_back(dataset.features(i));
    lib.outcomes.push_back(dataset.frames[i].outcome);
  }
  return lib;
}

std::optional<std::size_t> find_nun(const CFQuery& query, const CaseLibrary& library) {
  if (library.size() == 0) throw ContractError("find_nun on an empty case library");
  measures::check_spec(query.spec);
  std::optional<std::size_t> best;
  double best_d = 0.0;
  for (std::size_t k = 0; k < library.size(); ++k) {
    if (!measures::validity(library.outcomes[k], query.y_q, query.spec)) continue;
    const double d = measures::odiff(query.x_q, library.features[k], library.schema);
    if (!best || d < best_d) {
      best = k;
      best_d = d;
    }
  }
  return best;
}

PlausibilityGradient plausibility_gradient(const vae::JointVAE& model, const vae::Latent& z) {
  const auto target_latent = model.roundtrip(z);
  ad::Graph g;
  const auto p = model.params().bind(g, false);
  const auto zv = g.variable(ad::Tensor({1, z.size()}, z));
  const auto tv = g.constant(ad::Tensor({1, z.size()}, target_latent));
  const auto target = ad::detach(g, model.soften(g, model.decode(g, p, tv)));
  const auto dist = ad::l2_norm(g, ad::sub(g, model.soften(g, model.decode(g, p, zv)), target));
  g.backward(dist);
  return {g.value(dist).item(), g.grad(zv).vec()};
}

vae::Latent plausibility_adjust(const vae::JointVAE& model, const vae::Latent& z, double lambda) {
  if (lambda < 0.0) throw ParameterError("plausibility step must be nonnegative");
  if (lambda == 0.0) return z;
  const auto pg = plausibility_gradient(model, z);
  vae::Latent out = z;
  for (std::size_t i = 0; i < z.size(); ++i) out[i] -= lambda * pg.gradient[i];
  return out;
}

namespace {

CFResult start(const CFQuery& query, Method method) {
  measures::check_spec(query.spec);
  CFResult r;
  r.method = method;
  r.y_q = query.y_q;
  r.spec = query.spec;
  return r;
}

void finish(const vae::JointVAE& model, const CFQuery& query, CFResult& r) {
  const auto& z = r.path.back();
  r.y_c = model.predict_outcomes(z);
  if (r.x_c.empty()) r.x_c = harden(model.decode(z), model.schema());
  r.quality.odiff = measures::odiff(query.x_q, r.x_c, model.schema());
  r.quality.anomaly = measures::anomaly_score(model, z);
  r.quality.valid = r.valid;
}

bool finite(const vae::Latent& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

CFResult nun_cf(const vae::JointVAE& model, const CFQuery& query, const CaseLibrary& library) {
  CFResult r = start(query, Method::nun);
  const auto zq = model.encode_mean(query.x_q);
  const auto k = find_nun(query, library);
  if (!k) {
    r.status = "not_found";
    r.path = {zq};
    r.x_c = query.x_q;
    finish(model, query, r);
    r.valid = r.quality.valid = false;
    return r;
  }
  r.nun_frame = library.frames[*k];
  r.path = {zq, model.encode_mean(library.features[*k])};
  r.x_c = library.features[*k];
  finish(model, query, r);
  r.valid = r.quality.valid = measures::validity(library.outcomes[*k], query.y_q, query.spec);
  r.y_c = library.outcomes[*k];
  return r;
}

CFResult interpolate_cf(const vae::JointVAE& model, const CFQuery& query, const CaseLibrary& library,
                        std::size_t nun_position, const CFOptions& options) {
  CFResult r = start(query, Method::interpolate);
  if (nun_position >= library.size()) throw ContractError("NUN position outside the case library");
  if (!measures::validity(library.outcomes[nun_position], query.y_q, query.spec))
    throw ContractError("interpolation target does not satisfy the counterfactual criterion");
  r.nun_frame = library.frames[nun_position];
  const auto zq = model.encode_mean(query.x_q);
  const auto zn = model.encode_mean(library.features[nun_position]);
  const int n = options.alpha_steps;
  std::vector<vae::Latent> grid;
  for (int k = 0; k <= n; ++k) {
    const double a = static_cast<double>(k) / n;
    vae::Latent z(zq.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = zq[i] + a * (zn[i] - zq[i]);
    grid.push_back(std::move(z));
  }
  const auto pred = model.predict_outcomes_batch(grid);
  int hit = -1;
  for (int k = 0; k <= n && hit < 0; ++k)
    if (measures::validity(pred[static_cast<std::size_t>(k)], query.y_q, query.spec)) hit = k;

  if (hit < 0 || hit == n) {
    r.status = "nun_fallback";
    r.alpha = 1.0;
    r.path = {zq};
    r.x_c = library.features[nun_position];
    finish(model, query, r);
    r.valid = r.quality.valid = false;
    r.unadjusted_valid = false;
    return r;
  }
  r.alpha = static_cast<double>(hit) / n;
  r.status = hit == 0 ? "degenerate" : "ok";
  r.path = {zq};
  if (hit > 0) r.path.push_back(grid[static_cast<std::size_t>(hit)]);
  r.unadjusted_valid = true;
  const auto z_alpha = grid[static_cast<std::size_t>(hit)];
  vae::Latent z_c = z_alpha;
  if (options.plausibility && options.lambda_max > 0.0) {
    const auto pg = plausibility_gradient(model, z_alpha);
    double norm = 0.0;
    for (double v : pg.gradient) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0.0 && std::isfinite(norm)) {
      double best_score = measures::anomaly_score(model, z_alpha);
      double best_lambda = 0.0;
      for (int j = 1; j < options.lambda_grid; ++j) {
        const double lambda = options.lambda_max * j / (options.lambda_grid - 1);
        vae::Latent z = z_alpha;
        for (std::size_t i = 0; i < z.size(); ++i) z[i] -= lambda * pg.gradient[i] / norm;
        const double score = measures::anomaly_score(model, z);
        if (score < best_score) {
          best_score = score;
          best_lambda = lambda;
          z_c = std::move(z);
        }
      }
      r.lambda = best_lambda;
      if (best_lambda > 0.0) r.path.push_back(z_c);
    }
  }
  r.valid = measures::validity(model.predict_outcomes(z_c), query.y_q, query.spec);
  finish(model, query, r);
  return r;
}

CFResult gradient_cf(const vae::JointVAE& model, const CFQuery& query, const CFOptions& options) {
  CFResult r = start(query, Method::gradient);
  const auto i = query.spec.variable;
  vae::Latent z = model.encode_mean(query.x_q);
  r.path.push_back(z);
  r.valid = measures::validity(model.predict_outcomes(z), query.y_q, query.spec);
  if (r.valid) r.status = "already_valid";
  while (!r.valid && r.steps < options.max_steps) {
    const auto [y, grad] = model.head_gradient(z, i);
    if (!finite(grad)) throw TraversalError("non-finite outcome gradient at step " + std::to_string(r.steps), r.path);
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += query.spec.sign * options.lambda1 * grad[k];
    if (options.plausibility && options.lambda2 > 0.0) {
      const auto pg = plausibility_gradient(model, z);
      if (!finite(pg.gradient))
        throw TraversalError("non-finite plausibility gradient at step " + std::to_string(r.steps), r.path);
      for (std::size_t k = 0; k < z.size(); ++k) z[k] -= options.lambda2 * pg.gradient[k];
    }
    if (!finite(z)) throw TraversalError("latent left the finite range at step " + std::to_string(r.steps), r.path);
    ++r.steps;
    r.path.push_back(z);
    r.valid = measures::validity(model.predict_outcomes(z), query.y_q, query.spec);
  }
  if (!r.valid) r.status = "max_steps";
  finish(model, query, r);
  return r;
}

CFResult generate(const vae::JointVAE& model, const CFQuery& query, const CaseLibrary& library, Method method,
                  const CFOptions& options) {
  switch (method) {
    case Method::nun:
      return nun_cf(model, query, library);
    case Method::interpolate: {
      const auto k = find_nun(query, library);
      if (!k) {
        CFResult r = nun_cf(model, query, library);
        r.method = Method::interpolate;
        return r;
      }
      return interpolate_cf(model, query, library, *k, options);
    }
    case Method::gradient:
      return gradient_cf(model, query, options);
  }
  throw ParameterError("unknown method");
}

nlohmann::json to_json(const CFResult& r, const FeatureSchema& schema, bool include_path) {
  nlohmann::json j{{"method", to_string(r.method)},
                   {"status", r.status},
                   {"valid", r.valid},
                   {"steps", r.steps},
                   {"lambda", r.lambda},
                   {"spec", r.spec},
                   {"y_q", r.y_q},
                   {"y_c", r.y_c},
                   {"odiff", r.quality.odiff},
                   {"anomaly", r.quality.anomaly},
                   {"alpha", r.alpha ? nlohmann::json(*r.alpha) : nlohmann::json()},
                   {"unadjusted_valid", r.unadjusted_valid ? nlohmann::json(*r.unadjusted_valid) : nlohmann::json()},
                   {"nun_frame", r.nun_frame ? nlohmann::json(*r.nun_frame) : nlohmann::json()},
                   {"path_length", r.path.size()}};
  j["x_c"] = data::observation_to_json(decode_observation(r.x_c, schema));
  if (include_path) j["path"] = r.path;
  return j;
}

}  // namespace cfgen::cf
