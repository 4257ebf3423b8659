// cfgen: generate trajectories, train the joint VAE, evaluate, query, serve.

#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cfgen/agent.hpp"
#include "cfgen/dataset.hpp"
#include "cfgen/experiments.hpp"
#include "cfgen/jvae.hpp"
#include "cfgen/manifest.hpp"
#include "cfgen/random.hpp"
#include "cfgen/service.hpp"

using namespace cfgen;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return nlohmann::json::parse(is);
}

run::RunManifest begin(const std::string& command) {
  run::RunManifest m;
  m.command = command;
  m.versions = run::version_info();
  m.started_at = run::utc_timestamp();
  return m;
}

void finish(run::RunManifest& m, Clock::time_point t0, const fs::path& path) {
  m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  run::write_manifest(m, path);
}

fs::path sibling(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

// ---- gen-data ----------------------------------------------------------------

struct GenData {
  std::string env = "gridworld";
  std::string env_config;
  std::string agent_config;
  int episodes = 200;
  std::uint64_t seed = 1;
  double train_fraction = 0.95;
  std::string out;
  std::string agent_out;
};

int gen_data(const GenData& o) {
  const auto t0 = Clock::now();
  envs::EnvConfig env;
  if (!o.env_config.empty()) env = read_json(o.env_config).get<envs::EnvConfig>();
  env.kind = envs::env_from_string(o.env);
  agent::AgentConfig ac;
  if (!o.agent_config.empty()) ac = read_json(o.agent_config).get<agent::AgentConfig>();
  if (o.episodes < 1) throw ParameterError("--episodes must be positive");

  const auto s_agent = derive_seed(o.seed, 0), s_roll = derive_seed(o.seed, 1), s_split = derive_seed(o.seed, 2);
  agent::TrainingReport tr;
  std::cerr << "training " << o.env << " agent\n";
  const auto a = agent::train_agent(env, ac, s_agent, &tr);
  std::cerr << "greedy return " << tr.eval_return << " (random " << tr.random_return << ")\n";
  const auto traj = agent::rollout(a, o.episodes, s_roll);
  const auto d = data::build_dataset(traj, ac.temperature, s_split, o.train_fraction);
  data::save_dataset(d, o.out);
  const fs::path agent_path = o.agent_out.empty() ? sibling(o.out, ".agent") : fs::path(o.agent_out);
  a.save(agent_path);
  std::cerr << d.frames.size() << " frames, " << d.test_indices().size() << " test, " << d.clipped_test_frames
            << " clipped test frames\n";

  auto m = begin("gen-data");
  m.config = {{"env", env},
              {"agent", ac},
              {"episodes", o.episodes},
              {"train_fraction", o.train_fraction},
              {"eval_return", tr.eval_return},
              {"random_return", tr.random_return}};
  m.seeds = {{"seed", o.seed}, {"agent", s_agent}, {"rollout", s_roll}, {"split", s_split}};
  m.add_output("dataset", o.out);
  m.add_output("agent", agent_path);
  finish(m, t0, sibling(o.out, ".manifest.json"));
  return 0;
}

// ---- train -------------------------------------------------------------------

struct Train {
  std::string data;
  std::string out;
  std::string schedule;
  bool recon_only = false;
  std::string twin_out;
  std::optional<int> epochs;
  std::optional<double> weight_decay;
  std::uint64_t seed = 1;
  bool quiet = false;
};

vae::TrainReport fit(vae::JointVAE& model, const data::TrajectoryDataset& d, const vae::TrainSchedule& s,
                     std::uint64_t seed, bool quiet) {
  return vae::train(model, d, s, seed, [quiet](const vae::EpochLog& l) {
    if (quiet) return;
    std::cerr << l.phase << " epoch " << l.epoch << " loss " << l.train.total << " recon " << l.train.recon
              << " outcome " << l.train.outcome << " test recon " << l.test_recon << " test mse "
              << l.test_outcome_mse << '\n';
  });
}

nlohmann::json report_json(const vae::TrainReport& r) {
  return {{"test_mse", r.test_mse},
          {"test_mse_mean", r.test_mse_mean},
          {"train_categorical_accuracy", r.train_categorical_accuracy},
          {"seconds", r.seconds}};
}

int train(const Train& o) {
  const auto t0 = Clock::now();
  const auto d = data::load_dataset(o.data);
  vae::TrainSchedule s;
  if (!o.schedule.empty()) s = read_json(o.schedule).get<vae::TrainSchedule>();
  if (o.epochs) s.epochs = *o.epochs;
  if (o.weight_decay) s.weight_decay = *o.weight_decay;
  const auto arch = vae::default_architecture(d.schema);
  const auto s_init = derive_seed(o.seed, 0), s_train = derive_seed(o.seed, 1);

  auto m = begin("train");
  m.config = {{"schedule", s}, {"architecture", arch}, {"recon_only_twin", o.recon_only}};
  m.seeds = {{"seed", o.seed}, {"init", s_init}, {"train", s_train}};
  m.add_input("dataset", o.data);

  vae::JointVAE model(d.schema, arch, vae::Mode::joint, s_init);
  const auto r = fit(model, d, s, s_train, o.quiet);
  model.save(o.out, {{"train", report_json(r)}});
  const auto curve = sibling(o.out, ".curve.csv");
  vae::write_loss_curve_csv(r, curve);
  std::cout << "joint test mse " << r.test_mse[0] << ' ' << r.test_mse[1] << ' ' << r.test_mse[2] << '\n';
  m.config["result"] = report_json(r);
  m.add_output("model", o.out);
  m.add_output("loss_curve", curve);

  if (o.recon_only) {
    // same init and batch order as the joint model
    const fs::path twin = o.twin_out.empty() ? sibling(o.out, ".recon") : fs::path(o.twin_out);
    vae::JointVAE rm(d.schema, arch, vae::Mode::reconstruction_only, s_init);
    const auto rr = fit(rm, d, s, s_train, o.quiet);
    rm.save(twin, {{"train", report_json(rr)}});
    const auto rc = sibling(twin, ".curve.csv");
    vae::write_loss_curve_csv(rr, rc);
    std::cout << "reconstruction-only test mse " << rr.test_mse[0] << ' ' << rr.test_mse[1] << ' '
              << rr.test_mse[2] << '\n';
    m.config["twin_result"] = report_json(rr);
    m.add_output("twin", twin);
    m.add_output("twin_loss_curve", rc);
  }
  finish(m, t0, sibling(o.out, ".manifest.json"));
  return 0;
}

// ---- eval --------------------------------------------------------------------

struct Eval {
  std::string model;
  std::string twin;
  std::string data;
  std::string out;
  std::string config;
  std::optional<int> queries;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

int eval(const Eval& o) {
  const auto t0 = Clock::now();
  const auto d = data::load_dataset(o.data);
  const auto model = vae::JointVAE::load(o.model);
  std::optional<vae::JointVAE> twin;
  if (!o.twin.empty()) twin = vae::JointVAE::load(o.twin);
  exp::ExperimentConfig c;
  if (!o.config.empty()) c = read_json(o.config).get<exp::ExperimentConfig>();
  if (o.queries) c.queries_per_cell = *o.queries;
  if (o.seed) c.seed = *o.seed;
  if (o.threads) c.threads = *o.threads;

  auto rep = exp::evaluate(model, d, c, twin ? &*twin : nullptr);
  auto m = begin("eval");
  m.config = c;
  m.seeds = {{"seed", c.seed}};
  m.add_input("dataset", o.data);
  m.add_input("model", o.model);
  if (twin) m.add_input("twin", o.twin);
  m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  rep.manifest = m;
  const auto written = exp::write_report(rep, o.out);
  for (const auto& p : written) m.add_output(p.filename().string(), p);
  finish(m, t0, fs::path(o.out) / "manifest.json");

  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  for (const auto& t : rep.thresholds)
    std::cout << t.model << " anomaly threshold " << t.threshold << " held-out accuracy " << t.heldout_accuracy
              << '\n';
  for (const auto& s : rep.summaries) {
    std::cout << s.label << ": valid " << s.validity_fraction << " odiff " << s.odiff.mean << " +- " << s.odiff.stddev
              << " anomaly " << s.anomaly.mean << " +- " << s.anomaly.stddev;
    if (s.anomalous) std::cout << " anomalous " << *s.anomalous;
    std::cout << '\n';
  }
  return 0;
}

// ---- query -------------------------------------------------------------------

struct Query {
  std::string model;
  std::string data;
  std::size_t frame = 0;
  std::string variable;
  int sign = 1;
  std::optional<double> epsilon;
  std::string method = "gradient";
  bool no_plausibility = false;
  std::optional<int> max_steps;
  std::optional<int> alpha_steps;
  std::string out;
};

int query(const Query& o) {
  const auto t0 = Clock::now();
  const auto d = data::load_dataset(o.data);
  const auto model = vae::JointVAE::load(o.model);
  if (o.frame >= d.frames.size())
    throw ParameterError("frame " + std::to_string(o.frame) + " outside [0, " + std::to_string(d.frames.size()) + ")");
  const auto v = static_cast<std::size_t>(outcome_from_string(o.variable));
  auto spec = exp::spec_for(d, v, o.sign, {});
  if (o.epsilon) spec.epsilon = *o.epsilon;
  measures::check_spec(spec);
  const double y = d.frames[o.frame].outcome[v];
  if (!exp::has_margin(y, o.sign, spec.epsilon))
    throw ParameterError("y + sign * epsilon = " + std::to_string(y + o.sign * spec.epsilon) +
                         " lies outside [-1, 1]");
  cf::CFOptions opts;
  opts.plausibility = !o.no_plausibility;
  if (o.max_steps) opts.max_steps = *o.max_steps;
  if (o.alpha_steps) opts.alpha_steps = *o.alpha_steps;
  const auto method = cf::method_from_string(o.method);
  const auto library = cf::CaseLibrary::from_dataset(d);
  const auto r = cf::generate(model, exp::query_for_frame(d, o.frame, spec), library, method, opts);
  auto j = cf::to_json(r, d.schema, true);
  j["frame_id"] = o.frame;
  if (o.out.empty()) {
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  {
    std::ofstream os(o.out);
    if (!os) throw std::runtime_error("cannot write " + o.out);
    os << j.dump(2) << '\n';
  }
  auto m = begin("query");
  m.config = {{"frame", o.frame}, {"spec", spec}, {"method", o.method}, {"options", opts}};
  m.add_input("dataset", o.data);
  m.add_input("model", o.model);
  m.add_output("result", o.out);
  finish(m, t0, sibling(o.out, ".manifest.json"));
  return 0;
}

// ---- serve -------------------------------------------------------------------

service::Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

struct Serve {
  std::string model;
  std::string data;
  std::string host = "127.0.0.1";
  std::optional<int> port;
  int concurrency = 2;
};

int serve(const Serve& o) {
  auto d = data::load_dataset(o.data);
  auto model = vae::JointVAE::load(o.model);
  service::ServiceOptions so;
  so.max_concurrent = o.concurrency;
  service::Service svc(std::move(model), std::move(d), so);
  const int port = svc.bind(o.host, o.port.value_or(service::port_from_env()));
  if (port < 0) {
    std::cerr << "cannot bind " << o.host << '\n';
    return 1;
  }
  g_service = &svc;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "listening on http://" << o.host << ':' << port << std::endl;
  const bool ok = svc.serve();
  g_service = nullptr;
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual generation for RL agents over a jointly trained VAE latent space", "cfgen"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", std::string(run::kVersion));

  GenData g;
  auto* gc = app.add_subcommand("gen-data", "Train an agent and record a trajectory dataset");
  gc->add_option("--env", g.env, "gridworld or cartpole")->check(CLI::IsMember({"gridworld", "cartpole"}));
  gc->add_option("--env-config", g.env_config, "Environment config JSON")->check(CLI::ExistingFile);
  gc->add_option("--agent-config", g.agent_config, "Agent config JSON")->check(CLI::ExistingFile);
  gc->add_option("--episodes", g.episodes, "Episodes to record");
  gc->add_option("--seed", g.seed);
  gc->add_option("--train-fraction", g.train_fraction)->check(CLI::Range(0.0, 1.0));
  gc->add_option("--out", g.out, "Dataset path")->required();
  gc->add_option("--agent-out", g.agent_out, "Agent checkpoint (default <out>.agent)");

  Train t;
  auto* tc = app.add_subcommand("train", "Train the joint VAE (and optionally its reconstruction-only twin)");
  tc->add_option("--data", t.data)->required()->check(CLI::ExistingFile);
  tc->add_option("--out", t.out, "Checkpoint path")->required();
  tc->add_option("--schedule", t.schedule, "Training schedule JSON")->check(CLI::ExistingFile);
  tc->add_flag("--recon-only", t.recon_only, "Also train the reconstruction-only twin");
  tc->add_option("--twin-out", t.twin_out, "Twin checkpoint (default <out>.recon)");
  tc->add_option("--epochs", t.epochs);
  tc->add_option("--weight-decay", t.weight_decay);
  tc->add_option("--seed", t.seed);
  tc->add_flag("--quiet", t.quiet);

  Eval e;
  auto* ec = app.add_subcommand("eval", "Run the evaluation protocol and write a report directory");
  ec->add_option("--model", e.model)->required()->check(CLI::ExistingFile);
  ec->add_option("--twin", e.twin, "Reconstruction-only twin for the joint ablation")->check(CLI::ExistingFile);
  ec->add_option("--data", e.data)->required()->check(CLI::ExistingFile);
  ec->add_option("--out", e.out, "Report directory")->required();
  ec->add_option("--config", e.config, "Experiment config JSON")->check(CLI::ExistingFile);
  ec->add_option("--queries-per-cell", e.queries);
  ec->add_option("--seed", e.seed);
  ec->add_option("--threads", e.threads);

  Query q;
  auto* qc = app.add_subcommand("query", "Generate one counterfactual and print it as JSON");
  qc->add_option("--model", q.model)->required()->check(CLI::ExistingFile);
  qc->add_option("--data", q.data)->required()->check(CLI::ExistingFile);
  qc->add_option("--frame", q.frame)->required();
  qc->add_option("--variable", q.variable)->required()->check(CLI::IsMember({"value", "confidence", "riskiness"}));
  qc->add_option("--sign", q.sign)->required()->check(CLI::IsMember({-1, 1}));
  qc->add_option("--epsilon", q.epsilon);
  qc->add_option("--method", q.method)->check(CLI::IsMember({"nun", "interpolate", "gradient"}));
  qc->add_flag("--no-plausibility", q.no_plausibility);
  qc->add_option("--max-steps", q.max_steps);
  qc->add_option("--alpha-steps", q.alpha_steps);
  qc->add_option("--out", q.out, "Write the result here instead of stdout");

  Serve s;
  auto* sc = app.add_subcommand("serve", "Serve the HTTP/JSON API");
  sc->add_option("--model", s.model)->required()->check(CLI::ExistingFile);
  sc->add_option("--data", s.data)->required()->check(CLI::ExistingFile);
  sc->add_option("--host", s.host);
  sc->add_option("--port", s.port, "Defaults to CFGEN_PORT, then 8080");
  sc->add_option("--concurrency", s.concurrency)->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gc) return gen_data(g);
    if (*tc) return train(t);
    if (*ec) return eval(e);
    if (*qc) return query(q);
    if (*sc) return serve(s);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 1;
}
