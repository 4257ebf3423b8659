#include <gtest/gtest.h>

#include <cmath>

#include "cfgen/envs.hpp"
#include "cfgen/errors.hpp"

using namespace cfgen;
using namespace cfgen::envs;

namespace {

GridState empty_grid(int h, int w, int pr, int pc, int strength) {
  GridState s;
  s.height = h;
  s.width = w;
  s.cells.assign(static_cast<std::size_t>(h * w), Entity{});
  s.player_row = pr;
  s.player_col = pc;
  s.at(pr, pc) = Entity{EntityKind::player, strength, 0, 0};
  return s;
}

int count(const GridState& s, EntityKind k) {
  int n = 0;
  for (const auto& e : s.cells) n += e.kind == k;
  return n;
}

}  // namespace

TEST(Cartpole, StepMatchesTextbookDynamics) {
  const CartpoleConfig c;
  const CartpoleState s{0.1, -0.2, 0.05, 0.3};
  for (auto action : {CartpoleAction::left, CartpoleAction::right}) {
    const double f = action == CartpoleAction::right ? 10.0 : -10.0;
    // Barto, Sutton & Anderson form with m_c = 1, m_p = 0.1, l = 0.5.
    const double m = 1.1, ml = 0.05;
    const double tmp = (f + ml * 0.3 * 0.3 * std::sin(0.05)) / m;
    const double th_acc = (9.8 * std::sin(0.05) - std::cos(0.05) * tmp) /
                          (0.5 * (4.0 / 3.0 - 0.1 * std::cos(0.05) * std::cos(0.05) / m));
    const double x_acc = tmp - ml * th_acc * std::cos(0.05) / m;
    const auto out = cartpole_step(s, action, c);
    EXPECT_NEAR(out.state.position, 0.1 + 0.02 * -0.2, 1e-15);
    EXPECT_NEAR(out.state.velocity, -0.2 + 0.02 * x_acc, 1e-15);
    EXPECT_NEAR(out.state.angle, 0.05 + 0.02 * 0.3, 1e-15);
    EXPECT_NEAR(out.state.angular_velocity, 0.3 + 0.02 * th_acc, 1e-15);
    EXPECT_EQ(out.reward, 1.0);
    EXPECT_FALSE(out.done);
  }
}

TEST(Cartpole, TerminationBounds) {
  const CartpoleConfig c;
  EXPECT_TRUE(cartpole_terminal({2.5, 0, 0, 0}, c));
  EXPECT_TRUE(cartpole_terminal({0, 0, 0.21, 0}, c));
  EXPECT_FALSE(cartpole_terminal({2.3, 0, 0.2, 0}, c));
  EXPECT_THROW(cartpole_step({3.0, 0, 0, 0}, CartpoleAction::left, c), ContractError);
}

TEST(Cartpole, ResetIsSeededAndSmall) {
  EXPECT_EQ(cartpole_reset(5), cartpole_reset(5));
  EXPECT_NE(cartpole_reset(5), cartpole_reset(6));
  const auto s = cartpole_reset(9);
  for (double v : {s.position, s.velocity, s.angle, s.angular_velocity}) EXPECT_LE(std::abs(v), 0.05);
}

TEST(Gridworld, ResetPlacesConfiguredEntities) {
  const GridConfig c;
  const auto s = grid_reset(3, c);
  EXPECT_EQ(count(s, EntityKind::player), 1);
  EXPECT_EQ(count(s, EntityKind::food), c.food);
  EXPECT_EQ(count(s, EntityKind::wanderer), c.wanderers);
  EXPECT_EQ(count(s, EntityKind::bouncer), c.bouncers);
  EXPECT_EQ(count(s, EntityKind::chaser), c.chasers);
  EXPECT_EQ(s.player_strength(), c.player_strength);
  EXPECT_EQ(s.at(s.player_row, s.player_col).kind, EntityKind::player);
  for (const auto& e : s.cells)
    if (e.kind == EntityKind::chaser) EXPECT_TRUE(e.strength >= 3 && e.strength <= 5);
  EXPECT_EQ(grid_reset(3, c), s);
  EXPECT_NE(grid_reset(4, c).cells, s.cells);
}

TEST(Gridworld, EatingWeakerEntityGrowsPlayer) {
  auto s = empty_grid(4, 4, 2, 2, 2);
  s.at(1, 2) = Entity{EntityKind::food, 1, 0, 0};
  const auto out = grid_step(s, GridAction::up);
  EXPECT_DOUBLE_EQ(out.reward, 1.0);
  EXPECT_EQ(out.state.player_row, 1);
  EXPECT_EQ(out.state.player_strength(), 3);
  EXPECT_EQ(out.state.at(2, 2).kind, EntityKind::empty);
  EXPECT_EQ(count(out.state, EntityKind::food), 0);
  EXPECT_FALSE(out.done);
}

TEST(Gridworld, StrengthIsCapped) {
  GridConfig c;
  auto s = empty_grid(4, 4, 2, 2, c.max_strength);
  s.at(2, 3) = Entity{EntityKind::food, 1, 0, 0};
  EXPECT_EQ(grid_step(s, GridAction::right, c).state.player_strength(), c.max_strength);
}

TEST(Gridworld, StrongerEntityKillsPlayer) {
  auto s = empty_grid(4, 4, 2, 2, 2);
  s.at(2, 1) = Entity{EntityKind::food, 5, 0, 0};
  const auto out = grid_step(s, GridAction::left);
  EXPECT_DOUBLE_EQ(out.reward, -3.0);
  EXPECT_TRUE(out.done);
  EXPECT_THROW(grid_step(out.state, GridAction::stay), ContractError);
}

TEST(Gridworld, BlockedOrIdleMovesStall) {
  auto s = empty_grid(4, 4, 0, 0, 2);
  s.at(1, 0) = Entity{EntityKind::food, 2, 0, 0};
  EXPECT_DOUBLE_EQ(grid_step(s, GridAction::up).reward, -0.1);    // off the grid
  EXPECT_DOUBLE_EQ(grid_step(s, GridAction::down).reward, -0.1);  // equal strength
  EXPECT_DOUBLE_EQ(grid_step(s, GridAction::stay).reward, -0.1);
  EXPECT_DOUBLE_EQ(grid_step(s, GridAction::right).reward, 0.0);
}

TEST(Gridworld, EpisodeEndsAtStepLimit) {
  GridConfig c;
  c.max_steps = 3;
  auto s = empty_grid(4, 4, 0, 0, 2);
  for (int i = 0; i < 3; ++i) {
    const auto out = grid_step(s, GridAction::stay, c);
    EXPECT_EQ(out.done, i == 2);
    s = out.state;
  }
}

TEST(Gridworld, ObservationMirrorsCells) {
  const auto s = grid_reset(11);
  const auto o = render_observation(s);
  ASSERT_EQ(o.kinds.size(), s.cells.size());
  for (std::size_t i = 0; i < s.cells.size(); ++i) {
    EXPECT_EQ(o.kinds[i], static_cast<int>(s.cells[i].kind));
    EXPECT_EQ(o.strengths[i], s.cells[i].strength);
  }
}

TEST(Gridworld, InvalidConfigRejected) {
  GridConfig c;
  c.height = 0;
  EXPECT_THROW(grid_reset(1, c), ParameterError);
  c = GridConfig{};
  c.height = 2;
  c.width = 2;  // ten entities on four cells
  EXPECT_THROW(grid_reset(1, c), ParameterError);
}

TEST(Environment, RunsEpisodesToCompletion) {
  for (auto kind : {EnvKind::gridworld, EnvKind::cartpole}) {
    EnvConfig cfg;
    cfg.kind = kind;
    Environment env(cfg);
    env.reset(7);
    int steps = 0;
    while (!env.done()) {
      env.step(steps % cfg.action_count());
      ++steps;
    }
    EXPECT_EQ(env.steps(), steps);
    EXPECT_LE(steps, kind == EnvKind::cartpole ? cfg.cartpole.max_steps : cfg.grid.max_steps);
    EXPECT_THROW(env.step(0), ContractError);
  }
}

TEST(Environment, SameSeedSameTrajectory) {
  EnvConfig cfg;
  Environment a(cfg), b(cfg);
  a.reset(13);
  b.reset(13);
  while (!a.done()) {
    EXPECT_EQ(a.observation(), b.observation());
    EXPECT_EQ(a.step(0), b.step(0));
  }
}

TEST(EnvConfig, JsonRoundTrip) {
  EnvConfig c;
  c.kind = EnvKind::cartpole;
  c.grid.food = 7;
  c.cartpole.max_steps = 50;
  EXPECT_EQ(nlohmann::json(c).get<EnvConfig>(), c);
  EXPECT_EQ(env_from_string(to_string(EnvKind::gridworld)), EnvKind::gridworld);
  EXPECT_THROW(env_from_string("pong"), ParameterError);
}
