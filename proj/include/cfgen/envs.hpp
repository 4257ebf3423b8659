#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace cfgen::envs {

enum class EnvKind { cartpole, gridworld };

std::string to_string(EnvKind kind);
EnvKind env_from_string(const std::string& name);

// ---- observations -------------------------------------------------------------

/// position, velocity, angle, angular velocity.
struct CartpoleObservation {
  std::array<double, 4> values{};
  friend bool operator==(const CartpoleObservation&, const CartpoleObservation&) = default;
};

/// Categorical spatial layers in row-major cell order.
struct GridObservation {
  int height = 0;
  int width = 0;
  std::vector<int> kinds;
  std::vector<int> strengths;
  friend bool operator==(const GridObservation&, const GridObservation&) = default;
};

using Observation = std::variant<CartpoleObservation, GridObservation>;

// ---- cartpole -------------------------------------------------------------------

struct CartpoleConfig {
  double gravity = 9.8;
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double half_length = 0.5;
  double force = 10.0;
  double dt = 0.02;
  double angle_threshold = 12.0 * 3.14159265358979323846 / 180.0;
  double track_bound = 2.4;
  int max_steps = 200;
  friend bool operator==(const CartpoleConfig&, const CartpoleConfig&) = default;
};

struct CartpoleState {
  double position = 0.0;
  double velocity = 0.0;
  double angle = 0.0;
  double angular_velocity = 0.0;
  friend bool operator==(const CartpoleState&, const CartpoleState&) = default;
};

enum class CartpoleAction { left = 0, right = 1 };

struct CartpoleStep {
  CartpoleState state;
  double reward = 0.0;
  bool done = false;
};

bool cartpole_terminal(const CartpoleState& s, const CartpoleConfig& config = {});
CartpoleState cartpole_reset(std::uint64_t seed);
/// Euler step of the classic cart-pole dynamics. Throws ContractError on a
/// terminal state.
CartpoleStep cartpole_step(const CartpoleState& s, CartpoleAction action, const CartpoleConfig& config = {});
CartpoleObservation render_observation(const CartpoleState& s);

// ---- gridworld -------------------------------------------------------------------

enum class EntityKind : int { empty = 0, player = 1, wanderer = 2, bouncer = 3, chaser = 4, food = 5 };
inline constexpr int kEntityKinds = 6;
std::string to_string(EntityKind kind);

struct Entity {
  EntityKind kind = EntityKind::empty;
  int strength = 0;
  // Bouncer heading; not observable.
  int heading_row = 0;
  int heading_col = 0;
  friend bool operator==(const Entity&, const Entity&) = default;
};

struct StrengthRange {
  int min = 1;
  int max = 1;
  friend bool operator==(const StrengthRange&, const StrengthRange&) = default;
};

/// Gridworld rules. Reward magnitudes and strength progression are not fixed
/// by anything upstream; they live here so runs can override them.
struct GridConfig {
  int height = 8;
  int width = 8;
  int wanderers = 2;
  int bouncers = 2;
  int chasers = 1;
  int food = 4;
  int player_strength = 2;
  int max_strength = 6;
  StrengthRange food_strength{1, 1};
  StrengthRange wanderer_strength{1, 3};
  StrengthRange bouncer_strength{1, 4};
  StrengthRange chaser_strength{3, 5};
  /// Chasers move on steps where step % chaser_period == 0.
  int chaser_period = 2;
  double consume_reward = 1.0;
  double death_penalty = -3.0;
  double stall_penalty = -0.1;
  int max_steps = 40;
  friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

void to_json(nlohmann::json& j, const GridConfig& c);
void from_json(const nlohmann::json& j, GridConfig& c);

struct GridState {
  int height = 0;
  int width = 0;
  std::vector<Entity> cells;
  int player_row = 0;
  int player_col = 0;
  int step = 0;
  bool done = false;
  std::mt19937_64 rng;

  const Entity& at(int r, int c) const { return cells[static_cast<std::size_t>(r * width + c)]; }
  Entity& at(int r, int c) { return cells[static_cast<std::size_t>(r * width + c)]; }
  int player_strength() const { return at(player_row, player_col).strength; }
  int entity_count() const;
  friend bool operator==(const GridState&, const GridState&) = default;
};

enum class GridAction { up = 0, down = 1, left = 2, right = 3, stay = 4 };
inline constexpr int kGridActions = 5;

struct GridStep {
  GridState state;
  double reward = 0.0;
  bool done = false;
};

GridState grid_reset(std::uint64_t seed, const GridConfig& config = {});
/// Player moves first, then the other entities in row-major order.
GridStep grid_step(const GridState& s, GridAction action, const GridConfig& config = {});
GridObservation render_observation(const GridState& s);

// ---- uniform episode driver -------------------------------------------------------

struct EnvConfig {
  EnvKind kind = EnvKind::gridworld;
  CartpoleConfig cartpole;
  GridConfig grid;

  int action_count() const;
  friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);

/// Single-owner episode runner over either environment. Cartpole episodes
/// are additionally truncated at CartpoleConfig::max_steps.
class Environment {
 public:
  explicit Environment(EnvConfig config);

  void reset(std::uint64_t seed);
  double step(int action);
  bool done() const { return done_; }
  int steps() const { return steps_; }
  Observation observation() const;
  const EnvConfig& config() const { return config_; }

 private:
  EnvConfig config_;
  CartpoleState cartpole_;
  GridState grid_;
  int steps_ = 0;
  bool done_ = true;
};

}  // namespace cfgen::envs
