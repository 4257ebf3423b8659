#pragma once

// Small shared fixtures: a briefly trained agent, a short trajectory dataset
// and a one-epoch VAE, built once per test binary.

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "cfgen/agent.hpp"
#include "cfgen/counterfactual.hpp"
#include "cfgen/dataset.hpp"
#include "cfgen/jvae.hpp"

namespace cfgen::fixtures {

inline agent::AgentConfig quick_agent_config() {
  agent::AgentConfig c;
  c.train_steps = 800;
  c.warmup_steps = 100;
  c.target_sync = 100;
  c.replay_capacity = 2000;
  c.eval_episodes = 2;
  return c;
}

inline const agent::ValueAgent& grid_agent() {
  static const agent::ValueAgent a = agent::train_agent(envs::EnvConfig{}, quick_agent_config(), 21);
  return a;
}

inline const data::TrajectoryDataset& grid_dataset() {
  static const data::TrajectoryDataset d = [] {
    const auto traj = agent::rollout(grid_agent(), 24, 22);
    return data::build_dataset(traj, grid_agent().temperature(), 23, 0.75);
  }();
  return d;
}

inline const data::TrajectoryDataset& cartpole_dataset() {
  static const data::TrajectoryDataset d = [] {
    envs::EnvConfig env;
    env.kind = envs::EnvKind::cartpole;
    const auto a = agent::train_agent(env, quick_agent_config(), 31);
    return data::build_dataset(agent::rollout(a, 12, 32), a.temperature(), 33, 0.75);
  }();
  return d;
}

inline vae::Architecture small_architecture(const FeatureSchema& schema) {
  auto a = vae::default_architecture(schema);
  a.latent_dim = schema.spatial() ? 8 : 4;
  a.conv1 = 4;
  a.conv2 = 6;
  a.hidden = 24;
  a.decoder_channels = 4;
  a.ego_hidden = 8;
  a.mlp_hidden = 16;
  a.head_hidden = 8;
  return a;
}

inline vae::JointVAE trained_model(const data::TrajectoryDataset& d, vae::Mode mode, int epochs = 2) {
  vae::JointVAE m(d.schema, small_architecture(d.schema), mode, 41);
  vae::TrainSchedule s;
  s.epochs = epochs;
  vae::train(m, d, s, 42);
  return m;
}

inline const vae::JointVAE& grid_model() {
  static const vae::JointVAE m = trained_model(grid_dataset(), vae::Mode::joint);
  return m;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cfgen_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace cfgen::fixtures
