#include "cfgen/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <random>
#include <thread>

#include "cfgen/errors.hpp"
#include "cfgen/random.hpp"

namespace cfgen::exp {

std::string to_string(QuerySplit s) {
  switch (s) {
    case QuerySplit::test: return "test";
    case QuerySplit::train: return "train";
    case QuerySplit::all: return "all";
  }
  return "test";
}

QuerySplit split_from_string(const std::string& s) {
  if (s == "test") return QuerySplit::test;
  if (s == "train") return QuerySplit::train;
  if (s == "all") return QuerySplit::all;
  throw ParameterError("unknown query split '" + s + "' (expected test, train or all)");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  std::vector<std::string> methods;
  for (auto m : c.methods) methods.push_back(cf::to_string(m));
  j = nlohmann::json{{"queries_per_cell", c.queries_per_cell},
                     {"seed", c.seed},
                     {"split", to_string(c.split)},
                     {"epsilon", {{"value_factor", c.epsilon.value_factor}, {"other", c.epsilon.other}}},
                     {"methods", methods},
                     {"options", c.options},
                     {"ablation_plausibility", c.ablation_plausibility},
                     {"ablation_joint", c.ablation_joint},
                     {"corruption_pairs", c.corruption_pairs},
                     {"corruption",
                      {{"edits", c.corruption.edits},
                       {"noise_cells", c.corruption.noise_cells},
                       {"latent_noise", c.corruption.latent_noise}}},
                     {"roundtrip_real", c.roundtrip_real},
                     {"roundtrip_random", c.roundtrip_random},
                     {"roundtrip_steps", c.roundtrip_steps},
                     {"cdf_thresholds", c.cdf_thresholds},
                     {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  c.queries_per_cell = j.value("queries_per_cell", d.queries_per_cell);
  c.seed = j.value("seed", d.seed);
  c.split = split_from_string(j.value("split", to_string(d.split)));
  if (j.contains("epsilon")) {
    c.epsilon.value_factor = j["epsilon"].value("value_factor", d.epsilon.value_factor);
    c.epsilon.other = j["epsilon"].value("other", d.epsilon.other);
  }
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j["methods"]) c.methods.push_back(cf::method_from_string(m.get<std::string>()));
  }
  if (j.contains("options")) c.options = j["options"].get<cf::CFOptions>();
  c.ablation_plausibility = j.value("ablation_plausibility", d.ablation_plausibility);
  c.ablation_joint = j.value("ablation_joint", d.ablation_joint);
  c.corruption_pairs = j.value("corruption_pairs", d.corruption_pairs);
  if (j.contains("corruption")) {
    c.corruption.edits = j["corruption"].value("edits", d.corruption.edits);
    c.corruption.noise_cells = j["corruption"].value("noise_cells", d.corruption.noise_cells);
    c.corruption.latent_noise = j["corruption"].value("latent_noise", d.corruption.latent_noise);
  }
  c.roundtrip_real = j.value("roundtrip_real", d.roundtrip_real);
  c.roundtrip_random = j.value("roundtrip_random", d.roundtrip_random);
  c.roundtrip_steps = j.value("roundtrip_steps", d.roundtrip_steps);
  c.cdf_thresholds = j.value("cdf_thresholds", d.cdf_thresholds);
  c.threads = j.value("threads", d.threads);
  if (c.queries_per_cell < 0 || c.corruption_pairs < 0 || c.roundtrip_real < 0 || c.roundtrip_random < 0 ||
      c.roundtrip_steps < 0 || c.threads < 1 || c.corruption.edits < 0 || c.corruption.noise_cells < 0 ||
      !(c.corruption.latent_noise >= 0.0) ||
      !(c.epsilon.value_factor > 0.0) || !(c.epsilon.other > 0.0))
    throw ParameterError("invalid experiment config");
}

// ---- queries -------------------------------------------------------------

double epsilon_for(const data::TrajectoryDataset& dataset, std::size_t variable, const EpsilonPolicy& policy) {
  if (variable >= kOutcomeCount) throw ParameterError("outcome variable index out of range");
  if (variable == static_cast<std::size_t>(OutcomeVariable::value))
    return policy.value_factor * dataset.statistics.normalized_stddev[variable];
  return policy.other;
}

measures::ValiditySpec spec_for(const data::TrajectoryDataset& dataset, std::size_t variable, int sign,
                                const EpsilonPolicy& policy) {
  measures::ValiditySpec spec{variable, sign, epsilon_for(dataset, variable, policy), measures::VariableKind::numeric};
  measures::check_spec(spec);
  return spec;
}

bool has_margin(double y, int sign, double epsilon) {
  const double target = y + sign * epsilon;
  return target >= -1.0 && target <= 1.0;
}

std::vector<std::size_t> eligible_frames(const data::TrajectoryDataset& dataset, const measures::ValiditySpec& spec,
                                         QuerySplit split) {
  measures::check_spec(spec);
  std::vector<std::size_t> pool;
  switch (split) {
    case QuerySplit::test: pool = dataset.test_indices(); break;
    case QuerySplit::train: pool = dataset.train_indices(); break;
    case QuerySplit::all:
      pool.resize(dataset.frames.size());
      for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
      break;
  }
  std::vector<std::size_t> out;
  for (auto i : pool)
    if (has_margin(dataset.frames[i].outcome[spec.variable], spec.sign, spec.epsilon)) out.push_back(i);
  return out;
}

cf::CFQuery query_for_frame(const data::TrajectoryDataset& dataset, std::size_t frame,
                            const measures::ValiditySpec& spec) {
  if (frame >= dataset.frames.size()) throw ParameterError("frame " + std::to_string(frame) + " out of range");
  return {frame, dataset.features(frame), dataset.frames[frame].outcome, spec};
}

QuerySample sample_queries(const data::TrajectoryDataset& dataset, std::size_t variable, int sign, int n,
                           std::uint64_t seed, QuerySplit split, const EpsilonPolicy& policy) {
  if (n < 0) throw ParameterError("query count must be nonnegative");
  const auto spec = spec_for(dataset, variable, sign, policy);
  auto pool = eligible_frames(dataset, spec, split);
  QuerySample out;
  out.eligible = pool.size();
  std::mt19937_64 rng(derive_seed(seed, 2 * variable + (sign > 0 ? 1 : 0)));
  std::shuffle(pool.begin(), pool.end(), rng);
  const std::size_t k = std::min(pool.size(), static_cast<std::size_t>(n));
  if (k < static_cast<std::size_t>(n))
    out.warning = "cell " + to_string(static_cast<OutcomeVariable>(variable)) + (sign > 0 ? "+" : "-") + ": only " +
                  std::to_string(k) + " of " + std::to_string(n) + " requested queries have enough margin";
  for (std::size_t i = 0; i < k; ++i) out.queries.push_back(query_for_frame(dataset, pool[i], spec));
  return out;
}

std::vector<cf::CFQuery> sample_all_queries(const data::TrajectoryDataset& dataset, const ExperimentConfig& config,
                                            std::vector<std::string>* warnings) {
  std::vector<cf::CFQuery> all;
  for (std::size_t v = 0; v < kOutcomeCount; ++v)
    for (int sign : {1, -1}) {
      auto s = sample_queries(dataset, v, sign, config.queries_per_cell, config.seed, config.split, config.epsilon);
      if (s.warning && warnings) warnings->push_back(*s.warning);
      for (auto& q : s.queries) all.push_back(std::move(q));
    }
  return all;
}

// ---- runs ----------------------------------------------------------------

namespace {

QueryRecord run_one(const cf::CFQuery& q, std::size_t index, const Arm& arm, const cf::CaseLibrary& library,
                    cf::CFOptions options) {
  QueryRecord r;
  r.query = index;
  r.arm = arm.label;
  r.frame = q.frame;
  r.spec = q.spec;
  r.y_q = q.y_q[q.spec.variable];
  options.plausibility = arm.plausibility;
  try {
    const auto res = cf::generate(*arm.vae, q, library, arm.method, options);
    r.status = res.status;
    r.valid = res.valid;
    r.unadjusted_valid = res.unadjusted_valid;
    r.odiff = res.quality.odiff;
    r.anomaly = res.quality.anomaly;
    if (arm.threshold) r.anomalous = res.quality.anomaly > *arm.threshold;
    r.steps = res.steps;
    r.alpha = res.alpha;
    r.lambda = res.lambda;
    r.nun_frame = res.nun_frame;
    r.y_c = res.y_c[q.spec.variable];
  } catch (const std::exception& e) {
    r.status = "error";
    r.valid = false;
    r.error = e.what();
  }
  return r;
}

}  // namespace

std::vector<QueryRecord> run_arms(const data::TrajectoryDataset& dataset, std::span<const cf::CFQuery> queries,
                                  std::span<const Arm> arms, const cf::CFOptions& options, int threads) {
  for (const auto& a : arms)
    if (!a.vae) throw ParameterError("arm '" + a.label + "' has no model");
  const auto library = cf::CaseLibrary::from_dataset(dataset);
  const std::size_t jobs = arms.size() * queries.size();
  std::vector<QueryRecord> out(jobs);
  auto work = [&](std::size_t job) {
    const std::size_t a = job / queries.size(), q = job % queries.size();
    out[job] = run_one(queries[q], q, arms[a], library, options);
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), jobs);
  if (workers <= 1) {
    for (std::size_t j = 0; j < jobs; ++j) work(j);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t j = next++; j < jobs; j = next++) work(j);
    });
  pool.clear();
  return out;
}

Stat describe(std::span<const double> values) {
  Stat s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(s.n));
  return s;
}

std::vector<ArmSummary> summarize(std::span<const QueryRecord> records, std::span<const Arm> arms) {
  std::vector<ArmSummary> out;
  for (const auto& arm : arms) {
    ArmSummary s;
    s.label = arm.label;
    s.model = arm.model;
    s.method = arm.method;
    s.plausibility = arm.plausibility;
    s.threshold = arm.threshold;
    std::vector<double> od, an, vod, van;
    std::size_t anomalous = 0;
    for (const auto& r : records) {
      if (r.arm != arm.label) continue;
      ++s.queries;
      if (!r.error.empty()) {
        ++s.failures;
        continue;
      }
      od.push_back(r.odiff);
      an.push_back(r.anomaly);
      if (r.anomalous && *r.anomalous) ++anomalous;
      if (r.valid) {
        ++s.valid;
        vod.push_back(r.odiff);
        van.push_back(r.anomaly);
      }
    }
    s.validity_fraction = s.queries ? static_cast<double>(s.valid) / static_cast<double>(s.queries) : 0.0;
    s.odiff = describe(od);
    s.anomaly = describe(an);
    s.valid_odiff = describe(vod);
    s.valid_anomaly = describe(van);
    if (arm.threshold) s.anomalous = anomalous;
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<CellSummary> summarize_cells(std::span<const QueryRecord> records, std::span<const Arm> arms) {
  std::vector<CellSummary> out;
  for (const auto& arm : arms)
    for (std::size_t v = 0; v < kOutcomeCount; ++v)
      for (int sign : {1, -1}) {
        CellSummary c;
        c.arm = arm.label;
        c.variable = v;
        c.sign = sign;
        std::vector<double> od;
        for (const auto& r : records) {
          if (r.arm != arm.label || r.spec.variable != v || r.spec.sign != sign) continue;
          ++c.queries;
          if (r.valid) ++c.valid;
          if (r.error.empty()) od.push_back(r.odiff);
        }
        c.validity_fraction = c.queries ? static_cast<double>(c.valid) / static_cast<double>(c.queries) : 0.0;
        c.odiff = describe(od);
        out.push_back(std::move(c));
      }
  return out;
}

CdfTable proximity_cdf(std::span<const QueryRecord> records, std::span<const Arm> arms,
                       std::vector<double> thresholds) {
  if (thresholds.empty()) {
    double hi = 0.0;
    for (const auto& r : records)
      if (r.valid) hi = std::max(hi, r.odiff);
    for (int t = 0; t <= static_cast<int>(std::ceil(hi)); ++t) thresholds.push_back(t);
  }
  std::sort(thresholds.begin(), thresholds.end());
  CdfTable table;
  table.thresholds = thresholds;
  for (const auto& arm : arms) {
    std::vector<std::size_t> counts(thresholds.size(), 0);
    for (const auto& r : records) {
      if (r.arm != arm.label || !r.valid) continue;
      for (std::size_t k = 0; k < thresholds.size(); ++k)
        if (r.odiff <= thresholds[k]) ++counts[k];
    }
    table.counts.emplace_back(arm.label, std::move(counts));
  }
  return table;
}

namespace {

std::string method_label(cf::Method m) {
  switch (m) {
    case cf::Method::nun: return "NUN";
    case cf::Method::interpolate: return "InterpPt";
    case cf::Method::gradient: return "Gradient";
  }
  return "?";
}

ExperimentReport assemble(const data::TrajectoryDataset& dataset, const ExperimentConfig& config,
                          std::vector<cf::CFQuery> queries, std::vector<std::string> warnings,
                          const std::vector<Arm>& arms) {
  ExperimentReport rep;
  rep.config = config;
  rep.warnings = std::move(warnings);
  rep.records = run_arms(dataset, queries, arms, config.options, config.threads);
  rep.queries = std::move(queries);
  rep.summaries = summarize(rep.records, arms);
  rep.cells = summarize_cells(rep.records, arms);
  rep.cdf = proximity_cdf(rep.records, arms, config.cdf_thresholds);
  return rep;
}

}  // namespace

std::vector<Arm> comparison_arms(const vae::JointVAE& model, const ExperimentConfig& config,
                                 std::optional<double> threshold) {
  std::vector<Arm> arms;
  for (auto m : config.methods)
    arms.push_back({method_label(m), vae::to_string(model.mode()), &model, m, config.options.plausibility, threshold});
  return arms;
}

std::vector<Arm> plausibility_arms(const vae::JointVAE& model, const std::string& model_name,
                                   std::optional<double> threshold) {
  std::vector<Arm> arms;
  for (auto m : {cf::Method::interpolate, cf::Method::gradient})
    for (bool adjusted : {true, false}) {
      std::string label = method_label(m) + (adjusted ? "" : " no PlausAdj");
      if (!model_name.empty()) label = model_name + ": " + label;
      arms.push_back({label, vae::to_string(model.mode()), &model, m, adjusted, threshold});
    }
  return arms;
}

ExperimentReport run_comparison(const vae::JointVAE& model, const data::TrajectoryDataset& dataset,
                                const ExperimentConfig& config, std::optional<double> threshold) {
  std::vector<std::string> warnings;
  auto queries = sample_all_queries(dataset, config, &warnings);
  return assemble(dataset, config, std::move(queries), std::move(warnings), comparison_arms(model, config, threshold));
}

ExperimentReport ablation_plausibility(const vae::JointVAE& model, const data::TrajectoryDataset& dataset,
                                       const ExperimentConfig& config, std::optional<double> threshold) {
  std::vector<std::string> warnings;
  auto queries = sample_all_queries(dataset, config, &warnings);
  return assemble(dataset, config, std::move(queries), std::move(warnings), plausibility_arms(model, "", threshold));
}

ExperimentReport ablation_joint(const vae::JointVAE& joint, const vae::JointVAE& recon_only,
                                const data::TrajectoryDataset& dataset, const ExperimentConfig& config,
                                std::optional<double> joint_threshold, std::optional<double> recon_threshold) {
  if (joint.mode() != vae::Mode::joint || recon_only.mode() != vae::Mode::reconstruction_only)
    throw ParameterError("joint ablation needs a joint and a reconstruction-only model");
  std::vector<std::string> warnings;
  auto queries = sample_all_queries(dataset, config, &warnings);
  auto arms = plausibility_arms(joint, "joint", joint_threshold);
  for (auto& a : plausibility_arms(recon_only, "reconstruction_only", recon_threshold)) arms.push_back(std::move(a));
  return assemble(dataset, config, std::move(queries), std::move(warnings), arms);
}

// ---- plausibility studies -----------------------------------------------

namespace {

std::vector<CurvePoint> roundtrip_curve(const vae::JointVAE& model, std::vector<ad::Tensor> xs, int n_steps,
                                        double beta) {
  std::vector<CurvePoint> curve;
  const auto& schema = model.schema();
  for (int k = 0; k <= n_steps; ++k) {
    std::vector<double> losses;
    losses.reserve(xs.size());
    for (const auto& x : xs) losses.push_back(model.elbo_loss(x, beta));
    curve.push_back({k, describe(losses)});
    if (k == n_steps) break;
    const auto zs = model.encode_mean_batch(xs);
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] = harden(model.decode(zs[i]), schema);
  }
  return curve;
}

}  // namespace

RoundtripCurves roundtrip_elbo_study(const vae::JointVAE& model, const data::TrajectoryDataset& dataset, int n_real,
                                     int n_random, int n_steps, std::uint64_t seed, double beta) {
  if (n_real < 0 || n_random < 0 || n_steps < 0) throw ParameterError("roundtrip study sizes must be nonnegative");
  if (n_real > 0 && dataset.frames.empty()) throw ContractError("roundtrip study needs frames");
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::vector<std::size_t> order(dataset.frames.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<ad::Tensor> real;
  for (int i = 0; i < n_real; ++i) real.push_back(dataset.features(order[static_cast<std::size_t>(i) % order.size()]));

  std::mt19937_64 zrng(derive_seed(seed, 2));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.0, 10.0);
  std::vector<ad::Tensor> random;
  for (int i = 0; i < n_random; ++i) {
    const double s = scale(zrng);
    vae::Latent z(model.latent_dim());
    for (auto& v : z) v = normal(zrng) * s;
    random.push_back(harden(model.decode(z), model.schema()));
  }
  return {roundtrip_curve(model, std::move(real), n_steps, beta),
          roundtrip_curve(model, std::move(random), n_steps, beta)};
}

namespace {

using Rng = std::mt19937_64;

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::vector<int> cells_of(const envs::GridObservation& g, auto pred) {
  std::vector<int> out;
  for (int c = 0; c < static_cast<int>(g.kinds.size()); ++c)
    if (pred(g.kinds[static_cast<std::size_t>(c)])) out.push_back(c);
  return out;
}

int pick(Rng& rng, const std::vector<int>& v) { return v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(v.size()) - 1))]; }

int max_strength(const FeatureSchema& schema) {
  for (const auto& n : schema.numeric)
    if (n.name == "strength") return std::max(1, static_cast<int>(std::lround(n.hi)));
  return 1;
}

// Edit kinds cycle: duplicate the player, delete the player, duplicate another entity.
void edit_grid(envs::GridObservation& g, int kind, Rng& rng) {
  const int player = static_cast<int>(envs::EntityKind::player);
  const int empty = static_cast<int>(envs::EntityKind::empty);
  const auto empties = cells_of(g, [&](int k) { return k == empty; });
  const auto players = cells_of(g, [&](int k) { return k == player; });
  const auto others = cells_of(g, [&](int k) { return k != empty && k != player; });
  auto copy_to_empty = [&](int from) {
    if (empties.empty()) return;
    const int to = pick(rng, empties);
    g.kinds[static_cast<std::size_t>(to)] = g.kinds[static_cast<std::size_t>(from)];
    g.strengths[static_cast<std::size_t>(to)] = g.strengths[static_cast<std::size_t>(from)];
  };
  switch (kind % 3) {
    case 0:
      if (!players.empty()) copy_to_empty(pick(rng, players));
      break;
    case 1:
      if (!players.empty()) {
        const int c = pick(rng, players);
        g.kinds[static_cast<std::size_t>(c)] = empty;
        g.strengths[static_cast<std::size_t>(c)] = 0;
      }
      break;
    default:
      if (!others.empty()) copy_to_empty(pick(rng, others));
      break;
  }
}

void noise_grid(envs::GridObservation& g, int top_strength, Rng& rng) {
  const int c = uniform_int(rng, 0, static_cast<int>(g.kinds.size()) - 1);
  const int k = uniform_int(rng, 0, envs::kEntityKinds - 1);
  g.kinds[static_cast<std::size_t>(c)] = k;
  g.strengths[static_cast<std::size_t>(c)] = k == 0 ? 0 : uniform_int(rng, 1, top_strength);
}

ad::Tensor corrupt(const ad::Tensor& x, const FeatureSchema& schema, const CorruptionOptions& o, int salt, Rng& rng) {
  if (!schema.spatial() || schema.env != envs::EnvKind::gridworld) {
    ad::Tensor y = x;
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int e = 0; e < o.edits + o.noise_cells; ++e)
      y[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(y.size()) - 1))] = u(rng);
    return y;
  }
  auto obs = decode_observation(x, schema);
  auto& g = std::get<envs::GridObservation>(obs);
  for (int e = 0; e < o.edits; ++e) edit_grid(g, salt + e, rng);
  const int top = max_strength(schema);
  for (int e = 0; e < o.noise_cells; ++e) noise_grid(g, top, rng);
  return encode_observation(obs, schema);
}

}  // namespace

std::vector<measures::LabeledLatent> build_corruption_set(const vae::JointVAE& model,
                                                          const data::TrajectoryDataset& dataset, int n_pairs,
                                                          std::uint64_t seed, const CorruptionOptions& options) {
  if (n_pairs < 0 || options.edits < 0 || options.noise_cells < 0 || !(options.latent_noise >= 0.0))
    throw ParameterError("corruption sizes must be nonnegative");
  std::vector<measures::LabeledLatent> out;
  if (n_pairs == 0) return out;
  const auto train = dataset.train_indices();
  if (train.size() < 2) throw ContractError("corruption set needs at least two training frames");
  const bool corrupting = options.edits > 0 || options.noise_cells > 0 || options.latent_noise > 0.0;
  Rng rng(derive_seed(seed, 3));
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto& schema = model.schema();
  for (int k = 0; k < n_pairs; ++k) {
    const int n = static_cast<int>(train.size());
    const std::size_t a = train[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))];
    std::size_t b = a;
    while (b == a) b = train[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))];
    const auto za = model.encode_mean(dataset.features(a));
    const auto zb = model.encode_mean(dataset.features(b));
    vae::Latent mid(za.size());
    for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = 0.5 * (za[i] + zb[i]);
    auto x = harden(model.decode(mid), schema);
    if (corrupting) x = corrupt(x, schema, options, k, rng);
    auto z = model.encode_mean(x);
    if (options.latent_noise > 0.0)
      for (auto& v : z) v += options.latent_noise * normal(rng);
    out.push_back({za, false});
    out.push_back({std::move(z), corrupting});
  }
  return out;
}

ThresholdReport fit_anomaly_threshold(const vae::JointVAE& model, std::span<const measures::LabeledLatent> set,
                                      std::uint64_t seed, double holdout_fraction) {
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ParameterError("holdout fraction must be in (0, 1)");
  std::vector<measures::LabeledScore> scored;
  for (const auto& l : set) scored.push_back({measures::anomaly_score(model, l.z), l.anomalous});
  std::mt19937_64 rng(derive_seed(seed, 4));
  std::shuffle(scored.begin(), scored.end(), rng);
  const auto held = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(scored.size())));
  const std::span<const measures::LabeledScore> all(scored);
  const auto train = all.first(scored.size() - held);
  const auto test = all.last(held);
  const auto fit = measures::tune_threshold(train);
  return {vae::to_string(model.mode()), fit.threshold, fit.accuracy, measures::threshold_accuracy(test, fit.threshold),
          train.size(), test.size()};
}

// ---- full protocol -------------------------------------------------------

ExperimentReport evaluate(const vae::JointVAE& model, const data::TrajectoryDataset& dataset,
                          const ExperimentConfig& config, const vae::JointVAE* recon_only) {
  if (recon_only && recon_only->mode() != vae::Mode::reconstruction_only)
    throw ParameterError("the twin must be a reconstruction-only model");
  std::vector<ThresholdReport> thresholds;
  auto fit = [&](const vae::JointVAE& m) -> std::optional<double> {
    if (config.corruption_pairs <= 0) return std::nullopt;
    const auto set = build_corruption_set(m, dataset, config.corruption_pairs, config.seed, config.corruption);
    thresholds.push_back(fit_anomaly_threshold(m, set, config.seed));
    return thresholds.back().threshold;
  };
  const auto thr = fit(model);
  const bool twin = recon_only && config.ablation_joint;
  const auto twin_thr = twin ? fit(*recon_only) : std::nullopt;

  auto arms = comparison_arms(model, config, thr);
  if (config.ablation_plausibility)
    for (auto& a : plausibility_arms(model, "", thr))
      if (!a.plausibility) arms.push_back(std::move(a));
  if (twin)
    for (auto& a : plausibility_arms(*recon_only, "reconstruction_only", twin_thr)) arms.push_back(std::move(a));

  std::vector<std::string> warnings;
  auto queries = sample_all_queries(dataset, config, &warnings);
  auto rep = assemble(dataset, config, std::move(queries), std::move(warnings), arms);
  rep.thresholds = std::move(thresholds);
  if (config.roundtrip_real > 0 || config.roundtrip_random > 0)
    rep.roundtrip = roundtrip_elbo_study(model, dataset, config.roundtrip_real, config.roundtrip_random,
                                         config.roundtrip_steps, config.seed);
  return rep;
}

// ---- persistence ---------------------------------------------------------

namespace {

nlohmann::json opt(const auto& o) { return o ? nlohmann::json(*o) : nlohmann::json(); }

nlohmann::json stat_json(const Stat& s) { return {{"mean", s.mean}, {"std", s.stddev}, {"n", s.n}}; }

nlohmann::json record_json(const QueryRecord& r) {
  return {{"query", r.query},       {"arm", r.arm},         {"frame", opt(r.frame)},
          {"spec", r.spec},         {"status", r.status},   {"valid", r.valid},
          {"unadjusted_valid", opt(r.unadjusted_valid)},    {"odiff", r.odiff},
          {"anomaly", r.anomaly},   {"anomalous", opt(r.anomalous)},
          {"steps", r.steps},       {"alpha", opt(r.alpha)}, {"lambda", r.lambda},
          {"nun_frame", opt(r.nun_frame)},                  {"y_q", r.y_q},
          {"y_c", r.y_c},           {"error", r.error}};
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os.precision(10);
  return os;
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

nlohmann::json to_json(const ExperimentReport& report) {
  nlohmann::json j;
  j["format"] = "cfgen-report";
  j["version"] = 1;
  j["config"] = report.config;
  j["warnings"] = report.warnings;
  j["queries"] = nlohmann::json::array();
  for (const auto& q : report.queries)
    j["queries"].push_back({{"frame", opt(q.frame)}, {"spec", q.spec}, {"y_q", q.y_q}});
  j["records"] = nlohmann::json::array();
  for (const auto& r : report.records) j["records"].push_back(record_json(r));
  j["summaries"] = nlohmann::json::array();
  for (const auto& s : report.summaries)
    j["summaries"].push_back({{"label", s.label},
                              {"model", s.model},
                              {"method", cf::to_string(s.method)},
                              {"plausibility", s.plausibility},
                              {"queries", s.queries},
                              {"valid", s.valid},
                              {"failures", s.failures},
                              {"validity_fraction", s.validity_fraction},
                              {"odiff", stat_json(s.odiff)},
                              {"anomaly", stat_json(s.anomaly)},
                              {"valid_odiff", stat_json(s.valid_odiff)},
                              {"valid_anomaly", stat_json(s.valid_anomaly)},
                              {"anomalous", opt(s.anomalous)},
                              {"threshold", opt(s.threshold)}});
  j["cells"] = nlohmann::json::array();
  for (const auto& c : report.cells)
    j["cells"].push_back({{"arm", c.arm},
                          {"variable", to_string(static_cast<OutcomeVariable>(c.variable))},
                          {"sign", c.sign},
                          {"queries", c.queries},
                          {"valid", c.valid},
                          {"validity_fraction", c.validity_fraction},
                          {"odiff", stat_json(c.odiff)}});
  j["cdf"] = {{"thresholds", report.cdf.thresholds}, {"counts", nlohmann::json::object()}};
  for (const auto& [label, counts] : report.cdf.counts) j["cdf"]["counts"][label] = counts;
  j["thresholds"] = nlohmann::json::array();
  for (const auto& t : report.thresholds)
    j["thresholds"].push_back({{"model", t.model},
                               {"threshold", t.threshold},
                               {"train_accuracy", t.train_accuracy},
                               {"heldout_accuracy", t.heldout_accuracy},
                               {"train_size", t.train_size},
                               {"heldout_size", t.heldout_size}});
  if (report.roundtrip) {
    auto curve = [](const std::vector<CurvePoint>& c) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& p : c) a.push_back({{"step", p.step}, {"loss", stat_json(p.loss)}});
      return a;
    };
    j["roundtrip"] = {{"real", curve(report.roundtrip->real)}, {"random", curve(report.roundtrip->random)}};
  }
  j["manifest"] = report.manifest ? nlohmann::json(*report.manifest) : nlohmann::json();
  return j;
}

std::vector<std::filesystem::path> write_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  {
    const auto p = dir / "summary.csv";
    auto os = open_out(p);
    os << "label,model,method,plausibility,queries,valid,failures,validity_fraction,odiff_mean,odiff_std,"
          "anomaly_mean,anomaly_std,valid_odiff_mean,valid_odiff_std,valid_anomaly_mean,valid_anomaly_std,"
          "anomalous,threshold\n";
    for (const auto& s : report.summaries) {
      os << csv_quote(s.label) << ',' << s.model << ',' << cf::to_string(s.method) << ',' << s.plausibility << ','
         << s.queries << ',' << s.valid << ',' << s.failures << ',' << s.validity_fraction << ',' << s.odiff.mean
         << ',' << s.odiff.stddev << ',' << s.anomaly.mean << ',' << s.anomaly.stddev << ',' << s.valid_odiff.mean
         << ',' << s.valid_odiff.stddev << ',' << s.valid_anomaly.mean << ',' << s.valid_anomaly.stddev << ',';
      if (s.anomalous) os << *s.anomalous;
      os << ',';
      if (s.threshold) os << *s.threshold;
      os << '\n';
    }
    written.push_back(p);
  }
  {
    const auto p = dir / "cells.csv";
    auto os = open_out(p);
    os << "arm,variable,sign,queries,valid,validity_fraction,odiff_mean,odiff_std\n";
    for (const auto& c : report.cells)
      os << csv_quote(c.arm) << ',' << to_string(static_cast<OutcomeVariable>(c.variable)) << ',' << c.sign << ','
         << c.queries << ',' << c.valid << ',' << c.validity_fraction << ',' << c.odiff.mean << ',' << c.odiff.stddev
         << '\n';
    written.push_back(p);
  }
  {
    const auto p = dir / "records.csv";
    auto os = open_out(p);
    os << "query,arm,frame,variable,sign,epsilon,status,valid,odiff,anomaly,anomalous,steps,alpha,lambda,y_q,y_c,"
          "error\n";
    for (const auto& r : report.records) {
      os << r.query << ',' << csv_quote(r.arm) << ',';
      if (r.frame) os << *r.frame;
      os << ',' << to_string(static_cast<OutcomeVariable>(r.spec.variable)) << ',' << r.spec.sign << ','
         << r.spec.epsilon << ',' << r.status << ',' << r.valid << ',' << r.odiff << ',' << r.anomaly << ',';
      if (r.anomalous) os << *r.anomalous;
      os << ',' << r.steps << ',';
      if (r.alpha) os << *r.alpha;
      os << ',' << r.lambda << ',' << r.y_q << ',' << r.y_c << ',' << csv_quote(r.error) << '\n';
    }
    written.push_back(p);
  }
  {
    const auto p = dir / "cdf.csv";
    auto os = open_out(p);
    os << "threshold";
    for (const auto& [label, counts] : report.cdf.counts) os << ',' << csv_quote(label);
    os << '\n';
    for (std::size_t k = 0; k < report.cdf.thresholds.size(); ++k) {
      os << report.cdf.thresholds[k];
      for (const auto& [label, counts] : report.cdf.counts) os << ',' << counts[k];
      os << '\n';
    }
    written.push_back(p);
  }
  if (report.roundtrip) {
    const auto p = dir / "roundtrip.csv";
    auto os = open_out(p);
    os << "step,real_mean,real_std,random_mean,random_std\n";
    const auto& rc = *report.roundtrip;
    for (std::size_t k = 0; k < std::max(rc.real.size(), rc.random.size()); ++k) {
      os << k << ',';
      if (k < rc.real.size()) os << rc.real[k].loss.mean << ',' << rc.real[k].loss.stddev;
      else os << ',';
      os << ',';
      if (k < rc.random.size()) os << rc.random[k].loss.mean << ',' << rc.random[k].loss.stddev;
      else os << ',';
      os << '\n';
    }
    written.push_back(p);
  }
  {
    const auto p = dir / "report.json";
    auto os = open_out(p);
    os << to_json(report).dump(2) << '\n';
    written.push_back(p);
  }
  return written;
}

nlohmann::json load_report(const std::filesystem::path& dir) {
  const auto p = dir / "report.json";
  std::ifstream is(p);
  if (!is) throw FormatError("no report at " + p.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report " + p.string() + " is not JSON: " + e.what());
  }
  if (j.value("format", "") != "cfgen-report" || j.value("version", 0) != 1)
    throw FormatError("unsupported report format in " + p.string());
  if (!j.contains("manifest") || !j["manifest"].is_object())
    throw FormatError("report " + p.string() + " has no run manifest");
  j["manifest"].get<run::RunManifest>();
  return j;
}

}  // namespace cfgen::exp
