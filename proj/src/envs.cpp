#include "cfgen/envs.hpp"

#include <cmath>

#include "cfgen/errors.hpp"

namespace cfgen::envs {

std::string to_string(EnvKind kind) { return kind == EnvKind::cartpole ? "cartpole" : "gridworld"; }

EnvKind env_from_string(const std::string& name) {
  if (name == "cartpole") return EnvKind::cartpole;
  if (name == "gridworld") return EnvKind::gridworld;
  throw ParameterError("unknown environment '" + name + "' (expected cartpole or gridworld)");
}

// ---- cartpole ----------------------------------------------------------------------

bool cartpole_terminal(const CartpoleState& s, const CartpoleConfig& config) {
  return std::abs(s.angle) > config.angle_threshold || std::abs(s.position) > config.track_bound;
}

CartpoleState cartpole_reset(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  CartpoleState s;
  s.position = u(rng);
  s.velocity = u(rng);
  s.angle = u(rng);
  s.angular_velocity = u(rng);
  return s;
}

CartpoleStep cartpole_step(const CartpoleState& s, CartpoleAction action, const CartpoleConfig& c) {
  if (cartpole_terminal(s, c)) throw ContractError("cartpole_step on a terminal state");
  const double force = action == CartpoleAction::right ? c.force : -c.force;
  const double total_mass = c.cart_mass + c.pole_mass;
  const double pole_moment = c.pole_mass * c.half_length;
  const double cos_a = std::cos(s.angle);
  const double sin_a = std::sin(s.angle);
  const double temp = (force + pole_moment * s.angular_velocity * s.angular_velocity * sin_a) / total_mass;
  const double angle_acc =
      (c.gravity * sin_a - cos_a * temp) / (c.half_length * (4.0 / 3.0 - c.pole_mass * cos_a * cos_a / total_mass));
  const double acc = temp - pole_moment * angle_acc * cos_a / total_mass;

  CartpoleStep out;
  out.state.position = s.position + c.dt * s.velocity;
  out.state.velocity = s.velocity + c.dt * acc;
  out.state.angle = s.angle + c.dt * s.angular_velocity;
  out.state.angular_velocity = s.angular_velocity + c.dt * angle_acc;
  out.reward = 1.0;
  out.done = cartpole_terminal(out.state, c);
  return out;
}

CartpoleObservation render_observation(const CartpoleState& s) {
  return CartpoleObservation{{s.position, s.velocity, s.angle, s.angular_velocity}};
}

// ---- gridworld ----------------------------------------------------------------------

std::string to_string(EntityKind kind) {
  switch (kind) {
    case EntityKind::empty:
      return "empty";
    case EntityKind::player:
      return "player";
    case EntityKind::wanderer:
      return "wanderer";
    case EntityKind::bouncer:
      return "bouncer";
    case EntityKind::chaser:
      return "chaser";
    case EntityKind::food:
      return "food";
  }
  return "unknown";
}

void to_json(nlohmann::json& j, const GridConfig& c) {
  auto range = [](const StrengthRange& r) { return nlohmann::json::array({r.min, r.max}); };
  j = nlohmann::json{{"height", c.height},
                     {"width", c.width},
                     {"wanderers", c.wanderers},
                     {"bouncers", c.bouncers},
                     {"chasers", c.chasers},
                     {"food", c.food},
                     {"player_strength", c.player_strength},
                     {"max_strength", c.max_strength},
                     {"food_strength", range(c.food_strength)},
                     {"wanderer_strength", range(c.wanderer_strength)},
                     {"bouncer_strength", range(c.bouncer_strength)},
                     {"chaser_strength", range(c.chaser_strength)},
                     {"chaser_period", c.chaser_period},
                     {"consume_reward", c.consume_reward},
                     {"death_penalty", c.death_penalty},
                     {"stall_penalty", c.stall_penalty},
                     {"max_steps", c.max_steps}};
}

void from_json(const nlohmann::json& j, GridConfig& c) {
  auto range = [&](const char* key, StrengthRange& r) {
    if (j.contains(key)) {
      r.min = j.at(key).at(0).get<int>();
      r.max = j.at(key).at(1).get<int>();
    }
  };
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.wanderers = j.value("wanderers", c.wanderers);
  c.bouncers = j.value("bouncers", c.bouncers);
  c.chasers = j.value("chasers", c.chasers);
  c.food = j.value("food", c.food);
  c.player_strength = j.value("player_strength", c.player_strength);
  c.max_strength = j.value("max_strength", c.max_strength);
  range("food_strength", c.food_strength);
  range("wanderer_strength", c.wanderer_strength);
  range("bouncer_strength", c.bouncer_strength);
  range("chaser_strength", c.chaser_strength);
  c.chaser_period = j.value("chaser_period", c.chaser_period);
  c.consume_reward = j.value("consume_reward", c.consume_reward);
  c.death_penalty = j.value("death_penalty", c.death_penalty);
  c.stall_penalty = j.value("stall_penalty", c.stall_penalty);
  c.max_steps = j.value("max_steps", c.max_steps);
}

int GridState::entity_count() const {
  int n = 0;
  for (const auto& e : cells)
    if (e.kind != EntityKind::empty && e.kind != EntityKind::player) ++n;
  return n;
}

namespace {

struct Move {
  int dr = 0;
  int dc = 0;
};

constexpr Move kMoves[kGridActions] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {0, 0}};

bool inside(const GridState& s, int r, int c) { return r >= 0 && c >= 0 && r < s.height && c < s.width; }

int sign(int v) { return (v > 0) - (v < 0); }

void validate(const GridConfig& c) {
  const int cells = c.height * c.width;
  const int entities = 1 + c.wanderers + c.bouncers + c.chasers + c.food;
  if (c.height <= 0 || c.width <= 0) throw ParameterError("grid dimensions must be positive");
  if (entities > cells) throw ParameterError("more entities than grid cells");
  if (c.player_strength < 1 || c.player_strength > c.max_strength) throw ParameterError("invalid player strength");
  for (const auto* r : {&c.food_strength, &c.wanderer_strength, &c.bouncer_strength, &c.chaser_strength})
    if (r->min < 1 || r->max < r->min || r->max > c.max_strength) throw ParameterError("invalid strength range");
  if (c.chaser_period < 1) throw ParameterError("chaser_period must be positive");
  if (c.max_steps < 1) throw ParameterError("max_steps must be positive");
}

// Player eats a weaker entity: +reward and one strength level.
void feed_player(GridState& s, const GridConfig& c, double& reward) {
  Entity& p = s.at(s.player_row, s.player_col);
  p.strength = std::min(c.max_strength, p.strength + 1);
  reward += c.consume_reward;
}

Move entity_move(GridState& s, int r, int c, const Entity& e, const GridConfig& cfg) {
  switch (e.kind) {
    case EntityKind::wanderer: {
      std::uniform_int_distribution<int> pick(0, kGridActions - 1);
      return kMoves[pick(s.rng)];
    }
    case EntityKind::bouncer: {
      Entity& self = s.at(r, c);
      auto blocked = [&](int dr, int dc) {
        const int tr = r + dr, tc = c + dc;
        if (!inside(s, tr, tc)) return true;
        const EntityKind k = s.at(tr, tc).kind;
        return k != EntityKind::empty && k != EntityKind::player;
      };
      if (blocked(self.heading_row, self.heading_col)) {
        self.heading_row = -self.heading_row;
        self.heading_col = -self.heading_col;
        if (blocked(self.heading_row, self.heading_col)) return {};
      }
      return {self.heading_row, self.heading_col};
    }
    case EntityKind::chaser: {
      if (s.step % cfg.chaser_period != 0) return {};
      const int dr = s.player_row - r, dc = s.player_col - c;
      const Move row_move{sign(dr), 0}, col_move{0, sign(dc)};
      const bool prefer_row = std::abs(dr) >= std::abs(dc);
      const Move first = prefer_row ? row_move : col_move;
      const Move second = prefer_row ? col_move : row_move;
      for (const Move m : {first, second}) {
        if (m.dr == 0 && m.dc == 0) continue;
        const EntityKind k = s.at(r + m.dr, c + m.dc).kind;
        if (k == EntityKind::empty || k == EntityKind::player) return m;
      }
      return {};
    }
    default:
      return {};
  }
}

}  // namespace

GridState grid_reset(std::uint64_t seed, const GridConfig& config) {
  validate(config);
  GridState s;
  s.height = config.height;
  s.width = config.width;
  s.cells.assign(static_cast<std::size_t>(config.height * config.width), Entity{});
  s.rng.seed(seed);
  std::uniform_int_distribution<int> cell(0, config.height * config.width - 1);
  auto free_cell = [&]() {
    for (;;) {
      const int idx = cell(s.rng);
      if (s.cells[static_cast<std::size_t>(idx)].kind == EntityKind::empty) return idx;
    }
  };
  auto strength = [&](const StrengthRange& r) { return std::uniform_int_distribution<int>(r.min, r.max)(s.rng); };

  const int p = free_cell();
  s.player_row = p / s.width;
  s.player_col = p % s.width;
  s.cells[static_cast<std::size_t>(p)] = Entity{EntityKind::player, config.player_strength, 0, 0};

  auto place = [&](EntityKind kind, int count, const StrengthRange& range) {
    for (int i = 0; i < count; ++i) {
      Entity e{kind, strength(range), 0, 0};
      if (kind == EntityKind::bouncer) {
        const Move m = kMoves[std::uniform_int_distribution<int>(0, 3)(s.rng)];
        e.heading_row = m.dr;
        e.heading_col = m.dc;
      }
      s.cells[static_cast<std::size_t>(free_cell())] = e;
    }
  };
  place(EntityKind::food, config.food, config.food_strength);
  place(EntityKind::wanderer, config.wanderers, config.wanderer_strength);
  place(EntityKind::bouncer, config.bouncers, config.bouncer_strength);
  place(EntityKind::chaser, config.chasers, config.chaser_strength);
  return s;
}

GridStep grid_step(const GridState& state, GridAction action, const GridConfig& config) {
  if (state.done) throw ContractError("grid_step on a finished episode");
  GridStep out{state, 0.0, false};
  GridState& s = out.state;

  // Player phase.
  const int a = static_cast<int>(action);
  const Move m = (a >= 0 && a < kGridActions) ? kMoves[a] : Move{};
  const int tr = s.player_row + m.dr, tc = s.player_col + m.dc;
  bool moved = false;
  if ((m.dr != 0 || m.dc != 0) && inside(s, tr, tc)) {
    Entity& target = s.at(tr, tc);
    const int ps = s.player_strength();
    if (target.kind == EntityKind::empty || target.strength < ps) {
      const bool eats = target.kind != EntityKind::empty;
      target = s.at(s.player_row, s.player_col);
      s.at(s.player_row, s.player_col) = Entity{};
      s.player_row = tr;
      s.player_col = tc;
      if (eats) feed_player(s, config, out.reward);
      moved = true;
    } else if (target.strength > ps) {
      out.reward += config.death_penalty;
      s.done = true;
    }
  }
  if (!moved && !s.done) out.reward += config.stall_penalty;

  // Entity phase, fixed row-major order over a snapshot of positions.
  if (!s.done) {
    std::vector<std::pair<int, int>> order;
    for (int r = 0; r < s.height; ++r)
      for (int c = 0; c < s.width; ++c) {
        const EntityKind k = s.at(r, c).kind;
        if (k != EntityKind::empty && k != EntityKind::player) order.emplace_back(r, c);
      }
    for (const auto& [r, c] : order) {
      const Entity e = s.at(r, c);
      const Move mv = entity_move(s, r, c, e, config);
      if (mv.dr == 0 && mv.dc == 0) continue;
      const int er = r + mv.dr, ec = c + mv.dc;
      if (!inside(s, er, ec)) continue;
      Entity& target = s.at(er, ec);
      if (target.kind == EntityKind::empty) {
        target = s.at(r, c);
        s.at(r, c) = Entity{};
      } else if (target.kind == EntityKind::player) {
        const int ps = target.strength;
        if (e.strength > ps) {
          out.reward += config.death_penalty;
          s.done = true;
          break;
        }
        if (e.strength < ps) {
          s.at(r, c) = Entity{};
          feed_player(s, config, out.reward);
        }
      }
    }
  }

  ++s.step;
  if (s.step >= config.max_steps) s.done = true;
  out.done = s.done;
  return out;
}

GridObservation render_observation(const GridState& s) {
  GridObservation obs;
  obs.height = s.height;
  obs.width = s.width;
  obs.kinds.reserve(s.cells.size());
  obs.strengths.reserve(s.cells.size());
  for (const auto& e : s.cells) {
    obs.kinds.push_back(static_cast<int>(e.kind));
    obs.strengths.push_back(e.strength);
  }
  return obs;
}

// ---- episode driver -----------------------------------------------------------------

int EnvConfig::action_count() const { return kind == EnvKind::cartpole ? 2 : kGridActions; }

void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)}, {"cartpole_max_steps", c.cartpole.max_steps}, {"grid", c.grid}};
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
  c.kind = env_from_string(j.at("kind").get<std::string>());
  c.cartpole.max_steps = j.value("cartpole_max_steps", c.cartpole.max_steps);
  if (j.contains("grid")) c.grid = j.at("grid").get<GridConfig>();
}

Environment::Environment(EnvConfig config) : config_(std::move(config)) {}

void Environment::reset(std::uint64_t seed) {
  if (config_.kind == EnvKind::cartpole)
    cartpole_ = cartpole_reset(seed);
  else
    grid_ = grid_reset(seed, config_.grid);
  steps_ = 0;
  done_ = false;
}

double Environment::step(int action) {
  if (done_) throw ContractError("step on a finished episode");
  double reward = 0.0;
  if (config_.kind == EnvKind::cartpole) {
    if (action < 0 || action > 1) throw ParameterError("cartpole action must be 0 or 1");
    auto r = cartpole_step(cartpole_, static_cast<CartpoleAction>(action), config_.cartpole);
    cartpole_ = r.state;
    reward = r.reward;
    done_ = r.done;
  } else {
    auto r = grid_step(grid_, static_cast<GridAction>(action), config_.grid);
    grid_ = std::move(r.state);
    reward = r.reward;
    done_ = r.done;
  }
  ++steps_;
  if (config_.kind == EnvKind::cartpole && steps_ >= config_.cartpole.max_steps) done_ = true;
  return reward;
}

Observation Environment::observation() const {
  if (config_.kind == EnvKind::cartpole) return render_observation(cartpole_);
  return render_observation(grid_);
}

}  // namespace cfgen::envs
