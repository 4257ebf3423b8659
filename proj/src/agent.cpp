#include "cfgen/agent.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <random>

#include "cfgen/errors.hpp"
#include "cfgen/random.hpp"

namespace cfgen::agent {

void to_json(nlohmann::json& j, const AgentConfig& c) {
  j = nlohmann::json{{"hidden", c.hidden},
                     {"gamma", c.gamma},
                     {"temperature", c.temperature},
                     {"train_steps", c.train_steps},
                     {"warmup_steps", c.warmup_steps},
                     {"update_every", c.update_every},
                     {"target_sync", c.target_sync},
                     {"batch_size", c.batch_size},
                     {"replay_capacity", c.replay_capacity},
                     {"learning_rate", c.learning_rate},
                     {"epsilon_start", c.epsilon_start},
                     {"epsilon_end", c.epsilon_end},
                     {"eval_episodes", c.eval_episodes},
                     {"view_radius", c.view_radius},
                     {"return_floor", c.return_floor}};
}

void from_json(const nlohmann::json& j, AgentConfig& c) {
  const AgentConfig d;
  c.hidden = j.value("hidden", d.hidden);
  c.gamma = j.value("gamma", d.gamma);
  c.temperature = j.value("temperature", d.temperature);
  c.train_steps = j.value("train_steps", d.train_steps);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.update_every = j.value("update_every", d.update_every);
  c.target_sync = j.value("target_sync", d.target_sync);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.replay_capacity = j.value("replay_capacity", d.replay_capacity);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.epsilon_start = j.value("epsilon_start", d.epsilon_start);
  c.epsilon_end = j.value("epsilon_end", d.epsilon_end);
  c.eval_episodes = j.value("eval_episodes", d.eval_episodes);
  c.view_radius = j.value("view_radius", d.view_radius);
  c.return_floor = j.value("return_floor", d.return_floor);
}

namespace {

void validate(const AgentConfig& c) {
  if (c.hidden == 0) throw ParameterError("agent hidden width must be positive");
  if (!(c.gamma >= 0.0 && c.gamma < 1.0)) throw ParameterError("gamma must lie in [0, 1)");
  if (!(c.temperature > 0.0)) throw ParameterError("temperature must be positive");
  if (c.train_steps < 0) throw ParameterError("train_steps must be nonnegative");
  if (c.update_every <= 0 || c.target_sync <= 0) throw ParameterError("update periods must be positive");
  if (c.batch_size == 0 || c.replay_capacity < c.batch_size) throw ParameterError("replay too small for batch");
  if (c.view_radius < 1) throw ParameterError("view_radius must be at least 1");
}

ad::Tensor flat_features(const envs::Observation& obs, const FeatureSchema& schema, int radius) {
  auto f = agent_features(obs, schema, radius);
  const std::size_t n = f.size();
  return ad::Tensor({1, n}, std::move(f));
}

std::vector<double> forward(const ValueAgent& agent, const nn::ParameterSet& params, const ad::Tensor& x) {
  ad::Graph g;
  const auto p = params.bind(g, false);
  const auto q = agent.q_graph(g, p, g.constant(x));
  return g.value(q).vec();
}

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

int sample(const std::vector<double>& probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng), acc = 0.0;
  for (std::size_t a = 0; a < probs.size(); ++a) {
    acc += probs[a];
    if (r < acc) return static_cast<int>(a);
  }
  return static_cast<int>(probs.size()) - 1;
}

struct Transition {
  ad::Tensor x;
  int action;
  double reward;
  ad::Tensor next;
  bool done;
};

constexpr std::uint64_t kEvalStream = 0x6576616cULL;

}  // namespace

std::size_t agent_feature_size(const FeatureSchema& schema, int view_radius) {
  if (schema.env == envs::EnvKind::cartpole) return schema.size();
  const auto side = static_cast<std::size_t>(2 * view_radius + 1);
  return 4 * side * side + 1 + 6;
}

std::vector<double> agent_features(const envs::Observation& obs, const FeatureSchema& schema, int view_radius) {
  const auto encoded = encode_observation(obs, schema);
  if (schema.env == envs::EnvKind::cartpole) return encoded.vec();
  const auto& o = std::get<envs::GridObservation>(obs);
  int pr = 0, pc = 0;
  for (int i = 0; i < o.height * o.width; ++i)
    if (o.kinds[static_cast<std::size_t>(i)] == static_cast<int>(envs::EntityKind::player)) {
      pr = i / o.width;
      pc = i % o.width;
    }
  const int ps = o.strengths[static_cast<std::size_t>(pr * o.width + pc)];
  const int side = 2 * view_radius + 1;
  const std::size_t plane = static_cast<std::size_t>(side * side);
  std::vector<double> f(agent_feature_size(schema, view_radius), 0.0);
  for (int dr = -view_radius; dr <= view_radius; ++dr)
    for (int dc = -view_radius; dc <= view_radius; ++dc) {
      const auto k = static_cast<std::size_t>((dr + view_radius) * side + dc + view_radius);
      const int r = pr + dr, c = pc + dc;
      if (r < 0 || c < 0 || r >= o.height || c >= o.width) {
        f[k] = 1.0;
        continue;
      }
      const auto i = static_cast<std::size_t>(r * o.width + c);
      const int kind = o.kinds[i];
      if (kind == static_cast<int>(envs::EntityKind::empty) || kind == static_cast<int>(envs::EntityKind::player))
        continue;
      const int s = o.strengths[i];
      f[(s < ps ? 1 : s == ps ? 2 : 3) * plane + k] = 1.0;
    }
  std::size_t at = 4 * plane;
  f[at++] = static_cast<double>(ps) / schema.numeric.at(0).hi;
  const double scale = static_cast<double>(std::max(o.height, o.width));
  for (const bool weaker : {true, false}) {
    int best = -1, bdr = 0, bdc = 0;
    for (int i = 0; i < o.height * o.width; ++i) {
      const int kind = o.kinds[static_cast<std::size_t>(i)];
      if (kind == static_cast<int>(envs::EntityKind::empty) || kind == static_cast<int>(envs::EntityKind::player))
        continue;
      const int s = o.strengths[static_cast<std::size_t>(i)];
      if (weaker ? s >= ps : s <= ps) continue;
      const int dr = i / o.width - pr, dc = i % o.width - pc;
      const int d = std::abs(dr) + std::abs(dc);
      if (best < 0 || d < best) {
        best = d;
        bdr = dr;
        bdc = dc;
      }
    }
    f[at++] = best >= 0 ? 1.0 : 0.0;
    f[at++] = bdr / scale;
    f[at++] = bdc / scale;
  }
  return f;
}

ValueAgent::ValueAgent(envs::EnvConfig env, AgentConfig config, std::uint64_t seed)
    : env_(std::move(env)), config_(config), schema_(schema_for(env_)) {
  validate(config_);
  std::mt19937_64 rng(seed);
  const std::size_t in = agent_feature_size(schema_, config_.view_radius);
  const std::size_t h = config_.hidden;
  const auto a = static_cast<std::size_t>(env_.action_count());
  params_.add("q.w1", nn::glorot({in, h}, in, h, rng));
  params_.add("q.b1", ad::Tensor({h}, 0.0));
  params_.add("q.w2", nn::glorot({h, a}, h, a, rng));
  params_.add("q.b2", ad::Tensor({a}, 0.0));
}

void ValueAgent::set_margin_scale(double m) {
  if (!(m > 0.0) || !std::isfinite(m)) throw ParameterError("margin scale must be positive and finite");
  margin_scale_ = m;
}

ad::Var ValueAgent::q_graph(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var x) const {
  auto h = ad::relu(g, ad::linear(g, x, p[0], p[1]));
  return ad::linear(g, h, p[2], p[3]);
}

std::vector<double> ValueAgent::q_values(const envs::Observation& obs) const {
  return forward(*this, params_, flat_features(obs, schema_, config_.view_radius));
}

void ValueAgent::save(const std::filesystem::path& path) const {
  nlohmann::json header{{"format", "cfgen-agent"},
                        {"version", 1},
                        {"env", env_},
                        {"config", config_},
                        {"architecture", {{"input", agent_feature_size(schema_, config_.view_radius)}, {"hidden", config_.hidden},
                                          {"actions", action_count()}, {"activation", "relu"}}},
                        {"gamma", config_.gamma},
                        {"temperature", config_.temperature},
                        {"margin_scale", margin_scale_}};
  nn::save_checkpoint(path, std::move(header), params_);
}

ValueAgent ValueAgent::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open agent checkpoint " + path.string());
  const auto header = nn::read_checkpoint_header(is, "cfgen-agent");
  ValueAgent agent;
  try {
    agent = ValueAgent(header.at("env").get<envs::EnvConfig>(), header.at("config").get<AgentConfig>(), 0);
    agent.set_margin_scale(header.at("margin_scale").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed agent header: ") + e.what());
  }
  nn::read_checkpoint_blob(is, header, agent.params_);
  return agent;
}

std::vector<double> softmax_policy(const std::vector<double>& q, double temperature) {
  if (q.empty()) throw DimensionError("softmax over zero actions");
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  const double m = *std::max_element(q.begin(), q.end());
  std::vector<double> p(q.size());
  double z = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) z += p[i] = std::exp((q[i] - m) / temperature);
  for (auto& v : p) v /= z;
  return p;
}

std::vector<double> policy_distribution(const ValueAgent& agent, const envs::Observation& obs) {
  return softmax_policy(agent.q_values(obs), agent.temperature());
}

OutcomeVector interestingness_from_q(const std::vector<double>& q, double temperature, double margin_scale) {
  const auto p = softmax_policy(q, temperature);
  double entropy = 0.0;
  for (double v : p)
    if (v > 0.0) entropy -= v * std::log(v);
  const double max_entropy = std::log(static_cast<double>(q.size()));
  const double normalized = max_entropy > 0.0 ? entropy / max_entropy : 0.0;
  const auto [lo, hi] = std::minmax_element(q.begin(), q.end());
  OutcomeVector y{};
  y[0] = *hi;
  y[1] = std::clamp(2.0 * (1.0 - normalized) - 1.0, -1.0, 1.0);
  y[2] = std::clamp(2.0 * (*hi - *lo) / margin_scale - 1.0, -1.0, 1.0);
  return y;
}

OutcomeVector interestingness(const ValueAgent& agent, const envs::Observation& obs) {
  return interestingness_from_q(agent.q_values(obs), agent.temperature(), agent.margin_scale());
}

double calibrate_margin_scale(const std::vector<std::vector<double>>& q_values) {
  if (q_values.empty()) throw ParameterError("margin calibration needs at least one state");
  std::vector<double> margins;
  margins.reserve(q_values.size());
  for (const auto& q : q_values) {
    const auto [lo, hi] = std::minmax_element(q.begin(), q.end());
    margins.push_back(*hi - *lo);
  }
  std::sort(margins.begin(), margins.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(margins.size())));
  const double m = margins[std::max<std::size_t>(rank, 1) - 1];
  return m > 0.0 ? m : 1.0;
}

double mean_greedy_return(const ValueAgent& agent, int episodes, std::uint64_t seed) {
  if (episodes <= 0) return 0.0;
  envs::Environment env(agent.env());
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    env.reset(derive_seed(seed, static_cast<std::uint64_t>(e)));
    while (!env.done()) total += env.step(argmax(agent.q_values(env.observation())));
  }
  return total / episodes;
}

double mean_random_return(const envs::EnvConfig& config, int episodes, std::uint64_t seed) {
  if (episodes <= 0) return 0.0;
  envs::Environment env(config);
  std::mt19937_64 rng(derive_seed(seed, kEvalStream));
  std::uniform_int_distribution<int> pick(0, config.action_count() - 1);
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    env.reset(derive_seed(seed, static_cast<std::uint64_t>(e)));
    while (!env.done()) total += env.step(pick(rng));
  }
  return total / episodes;
}

ValueAgent train_agent(const envs::EnvConfig& env_config, const AgentConfig& config, std::uint64_t seed,
                       TrainingReport* report) {
  ValueAgent agent(env_config, config, derive_seed(seed, 0));
  const FeatureSchema& schema = agent.schema();
  const int actions = agent.action_count();
  nn::ParameterSet target = agent.params();
  nn::Adam adam(agent.params(), {.learning_rate = config.learning_rate, .clip_norm = 10.0});
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, actions - 1);

  std::deque<Transition> replay;
  std::vector<double> curve;
  envs::Environment env(env_config);
  std::uint64_t episode = 0;
  env.reset(derive_seed(seed, 100 + episode));
  ad::Tensor x = flat_features(env.observation(), schema, config.view_radius);
  double episode_return = 0.0;

  const auto decay_steps = std::max<long>(1, config.train_steps / 2);
  for (long t = 0; t < config.train_steps; ++t) {
    const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(decay_steps));
    const double eps = config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start);
    const int action = u(rng) < eps ? pick(rng) : argmax(forward(agent, agent.params(), x));
    const double reward = env.step(action);
    episode_return += reward;
    ad::Tensor next = flat_features(env.observation(), schema, config.view_radius);
    replay.push_back({x, action, reward, next, env.done()});
    if (replay.size() > config.replay_capacity) replay.pop_front();
    if (env.done()) {
      curve.push_back(episode_return);
      episode_return = 0.0;
      ++episode;
      env.reset(derive_seed(seed, 100 + episode));
      x = flat_features(env.observation(), schema, config.view_radius);
    } else {
      x = std::move(next);
    }

    if (t >= config.warmup_steps && replay.size() >= config.batch_size && t % config.update_every == 0) {
      const std::size_t b = config.batch_size;
      const std::size_t f = x.size();
      std::uniform_int_distribution<std::size_t> idx(0, replay.size() - 1);
      ad::Tensor xs({b, f}), ns({b, f});
      std::vector<const Transition*> batch(b);
      for (std::size_t i = 0; i < b; ++i) {
        batch[i] = &replay[idx(rng)];
        std::copy(batch[i]->x.data().begin(), batch[i]->x.data().end(), xs.data().begin() + i * f);
        std::copy(batch[i]->next.data().begin(), batch[i]->next.data().end(), ns.data().begin() + i * f);
      }
      const auto next_q = forward(agent, target, ns);
      ad::Tensor mask({b, static_cast<std::size_t>(actions)}, 0.0);
      ad::Tensor goal({b, static_cast<std::size_t>(actions)}, 0.0);
      for (std::size_t i = 0; i < b; ++i) {
        const auto row = next_q.begin() + static_cast<std::ptrdiff_t>(i * actions);
        const double best = *std::max_element(row, row + actions);
        const double y = batch[i]->reward + (batch[i]->done ? 0.0 : config.gamma * best);
        mask[i * actions + batch[i]->action] = 1.0;
        goal[i * actions + batch[i]->action] = y;
      }
      ad::Graph g;
      const auto p = agent.params().bind(g, true);
      const auto q = agent.q_graph(g, p, g.constant(xs));
      const auto diff = ad::sub(g, ad::mul(g, q, g.constant(mask)), g.constant(goal));
      const auto loss = ad::scale(g, ad::sum(g, ad::square(g, diff)), 1.0 / static_cast<double>(b));
      g.backward(loss);
      adam.step(agent.params(), agent.params().gradients(g, p));
    }
    if ((t + 1) % config.target_sync == 0) target = agent.params();
  }
  agent.params().round_to_float32();

  const double eval_return = mean_greedy_return(agent, config.eval_episodes, derive_seed(seed, kEvalStream));
  if (report) {
    report->episode_returns = curve;
    report->eval_return = eval_return;
    report->random_return = mean_random_return(env_config, config.eval_episodes, derive_seed(seed, kEvalStream));
  }
  if (eval_return < config.return_floor)
    throw TrainingFailure("agent mean return " + std::to_string(eval_return) + " is below the floor " +
                              std::to_string(config.return_floor),
                          std::move(curve));
  return agent;
}

TrajectorySet rollout(const ValueAgent& agent, int episodes, std::uint64_t seed) {
  TrajectorySet set;
  set.env = agent.env();
  envs::Environment env(agent.env());
  std::mt19937_64 rng(derive_seed(seed, kEvalStream));
  for (int e = 0; e < episodes; ++e) {
    env.reset(derive_seed(seed, static_cast<std::uint64_t>(e)));
    int length = 0;
    while (!env.done()) {
      TrajectoryFrame frame;
      frame.episode = e;
      frame.step = env.steps();
      frame.observation = env.observation();
      frame.q_values = agent.q_values(frame.observation);
      frame.action = sample(softmax_policy(frame.q_values, agent.temperature()), rng);
      frame.reward = env.step(frame.action);
      set.frames.push_back(std::move(frame));
      ++length;
    }
    set.episode_lengths.push_back(length);
  }
  return set;
}

}  // namespace cfgen::agent
