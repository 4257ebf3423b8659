#pragma once

// Action-value agent and the interestingness variables derived from it.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfgen/envs.hpp"
#include "cfgen/features.hpp"
#include "cfgen/nn.hpp"
#include "cfgen/outcomes.hpp"

namespace cfgen::agent {

struct AgentConfig {
  std::size_t hidden = 64;
  double gamma = 0.9;
  /// Softmax temperature of the behavior policy over Q-values.
  double temperature = 0.5;
  long train_steps = 20000;
  long warmup_steps = 500;
  long update_every = 2;
  long target_sync = 500;
  std::size_t batch_size = 32;
  std::size_t replay_capacity = 20000;
  double learning_rate = 1e-3;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  int eval_episodes = 30;
  int view_radius = 3;
  /// Minimum mean greedy return on held-out seeds; training fails below it.
  double return_floor = -1e9;
};

void to_json(nlohmann::json& j, const AgentConfig& c);
void from_json(const nlohmann::json& j, AgentConfig& c);

/// Input of the Q-network. Cartpole: the normalized 4-vector. Gridworld: a
/// player-centred window of radius `view_radius` with channels {wall,
/// weaker, equal, stronger} relative to the player, the player's strength,
/// and offsets to the nearest weaker and nearest stronger entity.
std::vector<double> agent_features(const envs::Observation& obs, const FeatureSchema& schema, int view_radius);
std::size_t agent_feature_size(const FeatureSchema& schema, int view_radius);

/// Q(obs, .) as a one-hidden-layer ReLU network over agent_features.
class ValueAgent {
 public:
  ValueAgent() = default;
  ValueAgent(envs::EnvConfig env, AgentConfig config, std::uint64_t seed);

  const envs::EnvConfig& env() const { return env_; }
  const FeatureSchema& schema() const { return schema_; }
  const AgentConfig& config() const { return config_; }
  double temperature() const { return config_.temperature; }
  double margin_scale() const { return margin_scale_; }
  void set_margin_scale(double m);
  int action_count() const { return env_.action_count(); }

  std::vector<double> q_values(const envs::Observation& obs) const;
  /// Batched Q over agent features [B, F] on a caller-owned graph.
  ad::Var q_graph(ad::Graph& g, const std::vector<ad::Var>& params, ad::Var x) const;

  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  void save(const std::filesystem::path& path) const;
  static ValueAgent load(const std::filesystem::path& path);

 private:
  envs::EnvConfig env_;
  AgentConfig config_;
  FeatureSchema schema_;
  nn::ParameterSet params_;
  double margin_scale_ = 1.0;
};

class TrainingFailure : public std::runtime_error {
 public:
  TrainingFailure(const std::string& what, std::vector<double> curve)
      : std::runtime_error(what), curve_(std::move(curve)) {}
  const std::vector<double>& learning_curve() const { return curve_; }

 private:
  std::vector<double> curve_;
};

struct TrainingReport {
  std::vector<double> episode_returns;  // learning curve
  double eval_return = 0.0;
  double random_return = 0.0;
};

/// Epsilon-greedy Q-learning with replay and a periodically synced target
/// network. Deterministic per seed. Throws TrainingFailure when the greedy
/// return on held-out seeds stays below config.return_floor.
ValueAgent train_agent(const envs::EnvConfig& env, const AgentConfig& config, std::uint64_t seed,
                       TrainingReport* report = nullptr);

std::vector<double> softmax_policy(const std::vector<double>& q, double temperature);
std::vector<double> policy_distribution(const ValueAgent& agent, const envs::Observation& obs);

/// value = max Q; confidence = 2(1 - H(pi)/log|A|) - 1; riskiness =
/// 2 (maxQ - minQ)/M - 1 clipped to [-1, 1].
OutcomeVector interestingness_from_q(const std::vector<double>& q, double temperature, double margin_scale);
OutcomeVector interestingness(const ValueAgent& agent, const envs::Observation& obs);

/// 95th percentile of per-state Q margins (maxQ - minQ).
double calibrate_margin_scale(const std::vector<std::vector<double>>& q_values);

double mean_greedy_return(const ValueAgent& agent, int episodes, std::uint64_t seed);
double mean_random_return(const envs::EnvConfig& env, int episodes, std::uint64_t seed);

struct TrajectoryFrame {
  int episode = 0;
  int step = 0;
  envs::Observation observation;
  int action = 0;
  double reward = 0.0;
  std::vector<double> q_values;
  friend bool operator==(const TrajectoryFrame&, const TrajectoryFrame&) = default;
};

struct TrajectorySet {
  envs::EnvConfig env;
  std::vector<TrajectoryFrame> frames;
  std::vector<int> episode_lengths;
};

/// Runs the softmax behavior policy; frames are recorded before each action.
TrajectorySet rollout(const ValueAgent& agent, int episodes, std::uint64_t seed);

}  // namespace cfgen::agent
