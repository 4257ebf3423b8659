// End-to-end acceptance run: one PASS/FAIL line per criterion.
// Runs the default pipeline (agent, 200 gridworld episodes, joint model and
// its reconstruction-only twin, 25 queries per cell) with the CLI's seeds.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "cfgen/agent.hpp"
#include "cfgen/autodiff.hpp"
#include "cfgen/counterfactual.hpp"
#include "cfgen/dataset.hpp"
#include "cfgen/experiments.hpp"
#include "cfgen/features.hpp"
#include "cfgen/jvae.hpp"
#include "cfgen/measures.hpp"
#include "cfgen/random.hpp"

using namespace cfgen;
using namespace cfgen::ad;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(int id, const std::string& name, bool ok, const std::string& detail, double seconds = -1.0,
            double budget = -1.0) {
  if (budget > 0 && seconds > budget) ok = false;
  if (!ok) ++failures;
  std::printf("%s [%d] %s: %s", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  if (seconds >= 0) std::printf(" (%.1fs", seconds);
  if (budget > 0) std::printf(", budget %.0fs", budget);
  if (seconds >= 0) std::printf(")");
  std::printf("\n");
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

Var reduce(Graph& g, Var y, std::mt19937_64 rng) {
  return sum(g, mul(g, y, g.constant(random_tensor(g.value(y).shape(), rng))));
}

envs::GridObservation random_grid(std::mt19937_64& rng) {
  envs::GridObservation o{8, 8, std::vector<int>(64), std::vector<int>(64)};
  for (std::size_t i = 0; i < 64; ++i) {
    o.kinds[i] = rng() % 3 == 0 ? static_cast<int>(rng() % envs::kEntityKinds) : 0;
    o.strengths[i] = o.kinds[i] == 0 ? 0 : 1 + static_cast<int>(rng() % 6);
  }
  o.kinds[rng() % 64] = 1;
  return o;
}

// ---- 1: gradients ----------------------------------------------------------

// Every op family on one seeded instance; returns the worst relative error.
double ops_instance(std::mt19937_64& rng) {
  double worst = 0.0;
  auto check = [&](const ScalarFn& f, const Tensor& x) { worst = std::max(worst, grad_check(f, x)); };
  auto away = [&](Shape s) {
    auto t = random_tensor(std::move(s), rng);
    for (auto& v : t.data()) v = v < 0 ? v - 0.05 : v + 0.05;
    return t;
  };
  const std::mt19937_64 wr = rng;
  check([&](Graph& g, Var x) { return reduce(g, relu(g, x), wr); }, away({3, 4}));
  check([&](Graph& g, Var x) { return reduce(g, tanh(g, x), wr); }, random_tensor({3, 4}, rng, -2, 2));
  check([&](Graph& g, Var x) { return reduce(g, sigmoid(g, x), wr); }, random_tensor({3, 4}, rng, -2, 2));
  check([&](Graph& g, Var x) { return reduce(g, ad::exp(g, x), wr); }, random_tensor({5}, rng));
  check([&](Graph& g, Var x) { return mean(g, scale(g, square(g, x), -1.7)); }, random_tensor({2, 5}, rng));
  check([&](Graph& g, Var x) { return l2_norm(g, x); }, away({6}));
  const std::size_t axis = rng() % 3;
  check([&](Graph& g, Var x) { return reduce(g, softmax(g, x, axis), wr); }, random_tensor({2, 3, 4}, rng, -2, 2));
  const auto other = random_tensor({3, 3}, rng);
  for (auto op : {&add, &sub, &mul}) {
    check([&](Graph& g, Var x) { return reduce(g, op(g, x, g.constant(other)), wr); }, random_tensor({3, 3}, rng));
    check([&](Graph& g, Var x) { return reduce(g, op(g, g.constant(other), x), wr); }, random_tensor({3, 3}, rng));
  }
  {
    const auto x = random_tensor({4, 5}, rng), w = random_tensor({5, 3}, rng), b = random_tensor({3}, rng);
    check([&](Graph& g, Var v) { return reduce(g, linear(g, v, g.constant(w), g.constant(b)), wr); }, x);
    check([&](Graph& g, Var v) { return reduce(g, linear(g, g.constant(x), v, g.constant(b)), wr); }, w);
    check([&](Graph& g, Var v) { return reduce(g, linear(g, g.constant(x), g.constant(w), v), wr); }, b);
  }
  {
    const int stride = 1 + static_cast<int>(rng() % 2), pad = static_cast<int>(rng() % 2);
    const auto x = random_tensor({2, 2, 5, 4}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    check([&](Graph& g, Var v) { return reduce(g, conv2d(g, v, g.constant(k), g.constant(b), stride, pad), wr); }, x);
    check([&](Graph& g, Var v) { return reduce(g, conv2d(g, g.constant(x), v, g.constant(b), stride, pad), wr); }, k);
    check([&](Graph& g, Var v) { return reduce(g, conv2d(g, g.constant(x), g.constant(k), v, stride, pad), wr); }, b);
  }
  check([&](Graph& g, Var x) { return reduce(g, reshape(g, x, {6, 2}), wr); }, random_tensor({3, 4}, rng));
  {
    const auto o = random_tensor({2, 2}, rng);
    const std::size_t cat_axis = rng() % 2;
    check([&](Graph& g, Var x) {
      const std::vector<Var> parts{g.constant(o), x};
      return reduce(g, concat(g, parts, cat_axis), wr);
    }, random_tensor({2, 2}, rng));
  }
  check([&](Graph& g, Var x) { return reduce(g, slice(g, x, 1, 1, 3), wr); }, random_tensor({3, 4}, rng));
  {
    const auto t = random_tensor({4, 3}, rng);
    check([&](Graph& g, Var x) { return loss_mse(g, x, g.constant(t)); }, random_tensor({4, 3}, rng));
    std::vector<int> targets(10);
    for (auto& c : targets) c = static_cast<int>(rng() % 3);
    check([&](Graph& g, Var x) { return loss_categorical(g, x, targets, 1); }, random_tensor({2, 3, 5}, rng, -2, 2));
    const auto mu = random_tensor({3, 4}, rng), lv = random_tensor({3, 4}, rng);
    check([&](Graph& g, Var v) { return gaussian_kl(g, v, g.constant(lv)); }, mu);
    check([&](Graph& g, Var v) { return gaussian_kl(g, g.constant(mu), v); }, lv);
  }
  return worst;
}

// Full training loss of a small model with respect to sampled coordinates of every parameter tensor.
double joint_loss_instance(std::mt19937_64& rng, bool spatial) {
  const auto schema = spatial ? grid_schema({}) : cartpole_schema();
  auto arch = vae::default_architecture(schema);
  arch.latent_dim = 4;
  arch.conv1 = 3;
  arch.conv2 = 4;
  arch.hidden = 12;
  arch.decoder_channels = 3;
  arch.ego_hidden = 6;
  arch.mlp_hidden = 8;
  arch.head_hidden = 6;
  const vae::JointVAE m(schema, arch, vae::Mode::joint, rng());
  const std::size_t n = 2;
  Shape xs{n};
  for (auto v : schema.shape()) xs.push_back(v);
  Tensor x(xs);
  std::vector<OutcomeVector> y(n);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t k = 0; k < n; ++k) {
    const auto f = spatial ? encode_observation(random_grid(rng), schema)
                           : encode_observation(envs::CartpoleObservation{{u(rng), u(rng), 0.1 * u(rng), u(rng)}}, schema);
    std::copy(f.data().begin(), f.data().end(), x.data().begin() + static_cast<std::ptrdiff_t>(k * f.size()));
    for (auto& v : y[k]) v = u(rng);
  }
  std::normal_distribution<double> normal;
  Tensor noise({n, m.latent_dim()});
  for (auto& v : noise.data()) v = normal(rng);
  const double beta = 1e-5 + 0.5 * std::abs(u(rng));
  double worst = 0.0;
  for (std::size_t k = 0; k < m.params().count(); ++k) {
    const ScalarFn f = [&](Graph& g, Var w) {
      std::vector<Var> p;
      for (std::size_t j = 0; j < m.params().count(); ++j) p.push_back(j == k ? w : g.constant(m.params()[j]));
      return m.loss_graph(g, p, x, y, beta, 1.0, noise).total;
    };
    GradCheckOptions o;
    const std::size_t size = m.params()[k].size();
    for (std::size_t c = 0; c < std::min<std::size_t>(4, size); ++c) o.coordinates.push_back(rng() % size);
    worst = std::max(worst, grad_check(f, m.params()[k], o));
  }
  return worst;
}

// ---- 4/5: reference measures -------------------------------------------

int ref_argmax(const Tensor& t, std::size_t first, std::size_t vocab, std::size_t cells, std::size_t c) {
  int best = 0;
  for (std::size_t k = 1; k < vocab; ++k)
    if (t[(first + k) * cells + c] > t[(first + best) * cells + c]) best = static_cast<int>(k);
  return best;
}

double ref_odiff(const Tensor& a, const Tensor& b, const FeatureSchema& s) {
  double total = 0.0;
  for (const auto& l : s.categorical)
    for (std::size_t c = 0; c < s.cells(); ++c)
      total += ref_argmax(a, l.first_channel, l.vocabulary, s.cells(), c) !=
               ref_argmax(b, l.first_channel, l.vocabulary, s.cells(), c);
  for (const auto& n : s.numeric)
    for (std::size_t c = 0; c < s.cells(); ++c)
      total += std::abs(a[n.channel * s.cells() + c] - b[n.channel * s.cells() + c]) / n.width;
  return total;
}

bool ref_validity(const OutcomeVector& yc, const OutcomeVector& yq, const measures::ValiditySpec& s) {
  if (s.kind == measures::VariableKind::categorical) return yc[s.variable] != yq[s.variable];
  return s.sign > 0 ? yc[s.variable] >= yq[s.variable] + s.epsilon : yc[s.variable] <= yq[s.variable] - s.epsilon;
}

const exp::ArmSummary* find(const std::vector<exp::ArmSummary>& s, const std::string& label) {
  for (const auto& a : s)
    if (a.label == label) return &a;
  return nullptr;
}

}  // namespace

int main() {
  const auto start = Clock::now();

  // 1
  {
    const auto t0 = Clock::now();
    double ops = 0.0, joint = 0.0;
    for (int i = 0; i < 100; ++i) {
      std::mt19937_64 rng(derive_seed(100, static_cast<std::uint64_t>(i)));
      ops = std::max(ops, ops_instance(rng));
      joint = std::max(joint, joint_loss_instance(rng, i % 4 != 3));
    }
    report(1, "gradient check", ops < 1e-3 && joint < 1e-3,
           fmt("100 instances, worst relative error ops %.2e, joint loss %.2e (< 1e-3)", ops, joint), since(t0), 60);
  }

  // 4
  {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(4);
    const auto grid = grid_schema({});
    int mismatches = 0;
    for (int n = 0; n < 1000; ++n) {
      measures::ValiditySpec spec;
      spec.variable = rng() % kOutcomeCount;
      spec.sign = rng() % 2 ? 1 : -1;
      spec.kind = rng() % 5 == 0 ? measures::VariableKind::categorical : measures::VariableKind::numeric;
      const int e = 1 + static_cast<int>(rng() % 8);
      spec.epsilon = e / 8.0;
      OutcomeVector yq{}, yc{};
      for (std::size_t i = 0; i < kOutcomeCount; ++i) {
        const int q = static_cast<int>(rng() % 17) - 8;
        yq[i] = q / 8.0;
        yc[i] = (n % 4 == 0 ? q + spec.sign * e : static_cast<int>(rng() % 17) - 8) / 8.0;
      }
      mismatches += measures::validity(yc, yq, spec) != ref_validity(yc, yq, spec);
      const auto a = n % 2 ? encode_observation(random_grid(rng), grid) : random_tensor(grid.shape(), rng);
      const auto b = n % 2 ? encode_observation(random_grid(rng), grid) : random_tensor(grid.shape(), rng);
      mismatches += measures::odiff(a, b, grid) != ref_odiff(a, b, grid);
    }
    report(4, "validity and odiff vs brute force", mismatches == 0, fmt("1000 cases, %d mismatches", mismatches),
           since(t0));
  }

  // pipeline
  const std::uint64_t seed = 1;
  const auto tp = Clock::now();
  envs::EnvConfig env;
  const agent::AgentConfig acfg;
  const auto ag = agent::train_agent(env, acfg, derive_seed(seed, 0));
  const auto traj = agent::rollout(ag, 200, derive_seed(seed, 1));
  const auto dataset = data::build_dataset(traj, ag.temperature(), derive_seed(seed, 2));
  std::printf("info: agent + 200 episodes: %zu frames, %zu train / %zu test episodes (%.1fs)\n",
              dataset.frames.size(), dataset.train_episodes.size(), dataset.test_episodes.size(), since(tp));

  // 2
  vae::JointVAE model(dataset.schema, vae::default_architecture(dataset.schema), vae::Mode::joint,
                      derive_seed(seed, 0));
  vae::TrainReport tr;
  {
    const auto t0 = Clock::now();
    tr = vae::train(model, dataset, {}, derive_seed(seed, 1));
    const double worst = std::max({tr.test_mse[0], tr.test_mse[1], tr.test_mse[2]});
    report(2, "outcome prediction", worst < 0.1,
           fmt("test MSE value %.4f, confidence %.4f, riskiness %.4f (< 0.1)", tr.test_mse[0], tr.test_mse[1],
               tr.test_mse[2]),
           since(t0), 900);
  }

  // 3
  {
    const auto t0 = Clock::now();
    const auto c = exp::roundtrip_elbo_study(model, dataset, 0, 200, 10, derive_seed(seed, 3));
    std::size_t best = 1;
    for (std::size_t k = 1; k < c.random.size(); ++k)
      if (c.random[k - 1].loss.mean - c.random[k].loss.mean > c.random[best - 1].loss.mean - c.random[best].loss.mean)
        best = k;
    report(3, "roundtrip ELBO", c.random[1].loss.mean < c.random[0].loss.mean && best == 1,
           fmt("200 random latents, loss %.4f -> %.4f -> %.4f, largest drop at step %zu", c.random[0].loss.mean,
               c.random[1].loss.mean, c.random[2].loss.mean, best),
           since(t0), 120);
  }

  exp::ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.roundtrip_real = cfg.roundtrip_random = 0;

  // 9
  std::optional<double> thr;
  std::vector<exp::ThresholdReport> thresholds;
  {
    const auto t0 = Clock::now();
    const auto set = exp::build_corruption_set(model, dataset, cfg.corruption_pairs, cfg.seed, cfg.corruption);
    thresholds.push_back(exp::fit_anomaly_threshold(model, set, cfg.seed));
    thr = thresholds.back().threshold;
    report(9, "anomaly threshold", thresholds.back().heldout_accuracy >= 0.9,
           fmt("threshold %.3f, train accuracy %.3f, held-out accuracy %.3f on %zu (>= 0.9)", *thr,
               thresholds.back().train_accuracy, thresholds.back().heldout_accuracy, thresholds.back().heldout_size),
           since(t0), 300);
  }

  const auto queries = exp::sample_all_queries(dataset, cfg);
  const auto library = cf::CaseLibrary::from_dataset(dataset);

  // 5
  {
    const auto t0 = Clock::now();
    std::size_t found = 0, invalid = 0, scan_mismatch = 0;
    for (const auto& q : queries) {
      const auto p = cf::find_nun(q, library);
      if (!p) continue;
      ++found;
      invalid += !ref_validity(library.outcomes[*p], q.y_q, q.spec);
    }
    auto small = library;
    small.frames.resize(500);
    small.features.resize(500);
    small.outcomes.resize(500);
    for (const auto& q : queries) {
      std::optional<std::size_t> best;
      double bd = 0.0;
      for (std::size_t i = 0; i < small.size(); ++i) {
        if (!ref_validity(small.outcomes[i], q.y_q, q.spec)) continue;
        const double d = ref_odiff(q.x_q, small.features[i], small.schema);
        if (!best || d < bd) {
          best = i;
          bd = d;
        }
      }
      scan_mismatch += cf::find_nun(q, small) != best;
    }
    report(5, "nearest unlike neighbor", queries.size() == 150 && invalid == 0 && scan_mismatch == 0,
           fmt("%zu queries, %zu NUNs found, %zu invalid; %zu mismatches vs linear scan on 500 frames",
               queries.size(), found, invalid, scan_mismatch),
           since(t0));
  }

  // 6
  std::vector<exp::Arm> arms;
  std::vector<exp::QueryRecord> records;
  auto run = [&](std::vector<exp::Arm> more) {
    const auto r = exp::run_arms(dataset, queries, more, cfg.options, 1);
    records.insert(records.end(), r.begin(), r.end());
    arms.insert(arms.end(), more.begin(), more.end());
  };
  double t_compare = 0.0;
  {
    const auto t0 = Clock::now();
    run(exp::comparison_arms(model, cfg, thr));
    t_compare = since(t0);
    const auto s = exp::summarize(records, arms);
    const auto *nun = find(s, "NUN"), *ip = find(s, "InterpPt"), *gr = find(s, "Gradient");
    report(6, "method comparison",
           ip->odiff.mean < nun->odiff.mean && gr->odiff.mean < nun->odiff.mean && gr->validity_fraction >= 0.8,
           fmt("mean odiff NUN %.2f, InterpPt %.2f, Gradient %.2f; validity NUN %.3f, InterpPt %.3f, Gradient %.3f",
               nun->odiff.mean, ip->odiff.mean, gr->odiff.mean, nun->validity_fraction, ip->validity_fraction,
               gr->validity_fraction),
           t_compare, 600);
  }

  // 7
  {
    const auto t0 = Clock::now();
    for (auto& a : exp::plausibility_arms(model, "", thr))
      if (!a.plausibility) run({a});
    const auto s = exp::summarize(records, arms);
    bool ok = true;
    std::string detail;
    for (const std::string m : {"InterpPt", "Gradient"}) {
      const auto *adj = find(s, m), *raw = find(s, m + " no PlausAdj");
      ok = ok && adj->anomaly.mean <= raw->anomaly.mean && *adj->anomalous <= *raw->anomalous;
      detail += fmt("%s anomaly %.2f vs %.2f unadjusted, anomalous %zu vs %zu; ", m.c_str(), adj->anomaly.mean,
                    raw->anomaly.mean, *adj->anomalous, *raw->anomalous);
    }
    detail.resize(detail.size() - 2);
    report(7, "plausibility adjustment", ok, detail, t_compare + since(t0), 900);
  }

  // 8
  vae::JointVAE twin(dataset.schema, vae::default_architecture(dataset.schema), vae::Mode::reconstruction_only,
                     derive_seed(seed, 0));
  {
    const auto t0 = Clock::now();
    vae::train(twin, dataset, {}, derive_seed(seed, 1));
    const auto set = exp::build_corruption_set(twin, dataset, cfg.corruption_pairs, cfg.seed, cfg.corruption);
    thresholds.push_back(exp::fit_anomaly_threshold(twin, set, cfg.seed));
    run(exp::plausibility_arms(twin, "reconstruction_only", thresholds.back().threshold));
    const auto s = exp::summarize(records, arms);
    const auto *j = find(s, "Gradient"), *r = find(s, "reconstruction_only: Gradient");
    const auto *ji = find(s, "InterpPt"), *ri = find(s, "reconstruction_only: InterpPt");
    report(8, "joint training ablation",
           j->validity_fraction >= r->validity_fraction && j->anomaly.mean <= r->anomaly.mean,
           fmt("Gradient validity %.3f joint vs %.3f recon-only, anomaly %.2f vs %.2f (InterpPt validity %.3f vs "
               "%.3f, anomaly %.2f vs %.2f; twin threshold %.3f, held-out accuracy %.3f)",
               j->validity_fraction, r->validity_fraction, j->anomaly.mean, r->anomaly.mean, ji->validity_fraction,
               ri->validity_fraction, ji->anomaly.mean, ri->anomaly.mean, thresholds.back().threshold,
               thresholds.back().heldout_accuracy),
           since(t0) + t_compare, 1200);
  }

  // 10
  {
    const auto t0 = Clock::now();
    auto again = cfg;
    again.threads = 2;
    const auto rep = exp::evaluate(model, dataset, again, &twin);
    std::size_t differ = rep.records.size() == records.size() ? 0 : std::max(rep.records.size(), records.size());
    for (std::size_t i = 0; i < std::min(rep.records.size(), records.size()); ++i)
      differ += !(rep.records[i] == records[i]);
    const bool thr_same = rep.thresholds.size() == 2 && rep.thresholds[0].threshold == thresholds[0].threshold &&
                          rep.thresholds[1].threshold == thresholds[1].threshold;
    report(10, "determinism", differ == 0 && thr_same,
           fmt("%zu records rerun on 2 threads, %zu differ; thresholds %s", records.size(), differ,
               thr_same ? "identical" : "differ"),
           since(t0));
  }

  std::printf("info: total %.1fs, %d failed\n", since(start), failures);
  return failures == 0 ? 0 : 1;
}
