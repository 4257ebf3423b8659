#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfgen/errors.hpp"
#include "cfgen/jvae.hpp"
#include "support.hpp"

using namespace cfgen;
using fixtures::grid_dataset;
using fixtures::small_architecture;

namespace {

ad::Tensor batch_of(const data::TrajectoryDataset& d, std::size_t first, std::size_t n) {
  const auto one = d.features(first);
  ad::Shape s{n};
  for (auto v : one.shape()) s.push_back(v);
  ad::Tensor out(s);
  for (std::size_t k = 0; k < n; ++k) {
    const auto f = d.features(first + k);
    std::copy(f.data().begin(), f.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * f.size()));
  }
  return out;
}

std::vector<OutcomeVector> outcomes_of(const data::TrajectoryDataset& d, std::size_t first, std::size_t n) {
  std::vector<OutcomeVector> y;
  for (std::size_t k = 0; k < n; ++k) y.push_back(d.frames[first + k].outcome);
  return y;
}

// Worst relative error of the full loss over a few coordinates of every parameter tensor.
double joint_loss_grad_error(const vae::JointVAE& m, const data::TrajectoryDataset& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t n = 2, first = rng() % (d.frames.size() - n);
  const auto x = batch_of(d, first, n);
  const auto y = outcomes_of(d, first, n);
  std::normal_distribution<double> normal;
  ad::Tensor noise({n, m.latent_dim()});
  for (auto& v : noise.data()) v = normal(rng);
  double worst = 0.0;
  for (std::size_t k = 0; k < m.params().count(); ++k) {
    const ad::ScalarFn f = [&](ad::Graph& g, ad::Var w) {
      std::vector<ad::Var> p;
      for (std::size_t j = 0; j < m.params().count(); ++j) p.push_back(j == k ? w : g.constant(m.params()[j]));
      return m.loss_graph(g, p, x, y, 0.3, 5.0, noise).total;
    };
    ad::GradCheckOptions o;
    const std::size_t size = m.params()[k].size();
    for (int c = 0; c < 6 && static_cast<std::size_t>(c) < size; ++c) o.coordinates.push_back(rng() % size);
    worst = std::max(worst, ad::grad_check(f, m.params()[k], o));
  }
  return worst;
}

}  // namespace

TEST(Schedule, BetaWarmsUpLinearly) {
  vae::TrainSchedule s;
  EXPECT_DOUBLE_EQ(vae::beta_at(s, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(vae::beta_at(s, 0.25), 0.5e-5);
  EXPECT_DOUBLE_EQ(vae::beta_at(s, 0.5), 1e-5);
  EXPECT_DOUBLE_EQ(vae::beta_at(s, 0.9), 1e-5);
  s.warmup_fraction = 0.0;
  EXPECT_DOUBLE_EQ(vae::beta_at(s, 0.0), 1e-5);
  EXPECT_EQ(nlohmann::json(s).get<vae::TrainSchedule>(), s);
}

TEST(JointVAE, ShapesAndDeterministicInit) {
  const auto& d = grid_dataset();
  const vae::JointVAE m(d.schema, small_architecture(d.schema), vae::Mode::joint, 5);
  const auto x = d.features(0);
  const auto e = m.encode(x);
  EXPECT_EQ(e.mu.size(), 8u);
  EXPECT_EQ(e.logvar.size(), 8u);
  EXPECT_EQ(m.decode(e.mu).shape(), d.schema.shape());
  for (double v : m.predict_outcomes(e.mu)) EXPECT_TRUE(v >= -1.0 && v <= 1.0);
  EXPECT_EQ(vae::JointVAE(d.schema, small_architecture(d.schema), vae::Mode::joint, 5).params(), m.params());
  EXPECT_NE(vae::JointVAE(d.schema, small_architecture(d.schema), vae::Mode::joint, 6).params(), m.params());
  EXPECT_EQ(vae::sample_latent(e, 3), vae::sample_latent(e, 3));
}

TEST(JointVAE, ValueLevelMatchesGraphLevel) {
  const auto& d = grid_dataset();
  const auto& m = fixtures::grid_model();
  const auto x = d.features(3);
  const auto mu = m.encode_mean(x);
  const auto batch = m.encode_mean_batch(std::vector<ad::Tensor>{x, d.features(4)});
  EXPECT_EQ(batch[0], mu);
  EXPECT_EQ(m.predict_outcomes_batch(std::vector<vae::Latent>{mu})[0], m.predict_outcomes(mu));
  const auto [value, grad] = m.head_gradient(mu, 1);
  EXPECT_DOUBLE_EQ(value, m.predict_outcomes(mu)[1]);
  // central difference on the head
  for (std::size_t i = 0; i < mu.size(); ++i) {
    auto a = mu, b = mu;
    a[i] += 1e-5;
    b[i] -= 1e-5;
    EXPECT_NEAR(grad[i], (m.predict_outcomes(a)[1] - m.predict_outcomes(b)[1]) / 2e-5, 1e-5);
  }
  EXPECT_EQ(m.roundtrip(mu), m.encode_mean(harden(m.decode(mu), d.schema)));
}

TEST(JointVAE, LossTermsAddUp) {
  const auto& d = grid_dataset();
  const auto& m = fixtures::grid_model();
  const auto x = batch_of(d, 0, 4);
  const auto y = outcomes_of(d, 0, 4);
  const auto l = m.loss(x, y, 0.5, 5.0);
  EXPECT_NEAR(l.total, l.recon + 0.5 * l.kl + 5.0 * l.outcome, 1e-9);
  EXPECT_GE(l.kl, 0.0);
  EXPECT_THROW(m.loss(x, outcomes_of(d, 0, 3), 0.5, 1.0), DimensionError);
}

TEST(JointVAE, ReconstructionOnlyIgnoresOutcomes) {
  const auto& d = grid_dataset();
  const vae::JointVAE m(d.schema, small_architecture(d.schema), vae::Mode::reconstruction_only, 5);
  const auto x = batch_of(d, 0, 4);
  const auto l = m.loss(x, outcomes_of(d, 0, 4), 0.5, 5.0);
  EXPECT_NEAR(l.total, l.recon + 0.5 * l.kl, 1e-9);
  EXPECT_GT(l.outcome, 0.0);
  // the encoder receives no gradient from the outcome term
  ad::Graph g;
  const auto p = m.params().bind(g, true);
  const auto lv = m.loss_graph(g, p, x, outcomes_of(d, 0, 4), 0.0, 1.0);
  g.backward(lv.outcome);
  const auto grads = m.params().gradients(g, p);
  const auto enc = m.parameter_mask({"enc."});
  const auto head = m.parameter_mask({"head."});
  double head_norm = 0.0;
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (enc[k]) {
      for (double v : grads[k].data()) EXPECT_EQ(v, 0.0);
    }
    if (head[k])
      for (double v : grads[k].data()) head_norm += v * v;
  }
  EXPECT_GT(head_norm, 0.0);
}

TEST(JointVAE, FullLossGradientsCheck) {
  const auto& d = grid_dataset();
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const vae::JointVAE m(d.schema, small_architecture(d.schema), vae::Mode::joint, 100 + i);
    worst = std::max(worst, joint_loss_grad_error(m, d, 200 + i));
  }
  EXPECT_LT(worst, 1e-3);
  const auto& c = fixtures::cartpole_dataset();
  const vae::JointVAE mc(c.schema, small_architecture(c.schema), vae::Mode::joint, 7);
  EXPECT_LT(joint_loss_grad_error(mc, c, 8), 1e-3);
}

TEST(Training, DeterministicAndImproves) {
  const auto& d = grid_dataset();
  vae::JointVAE a(d.schema, small_architecture(d.schema), vae::Mode::joint, 41);
  vae::TrainSchedule s;
  s.epochs = 2;
  int calls = 0;
  const auto r = vae::train(a, d, s, 42, [&](const vae::EpochLog&) { ++calls; });
  EXPECT_EQ(calls, 2);
  ASSERT_EQ(r.curve.size(), 2u);
  EXPECT_LT(r.curve[1].train.total, r.curve[0].train.total);
  EXPECT_EQ(a.params(), fixtures::grid_model().params());
  // float32 storage
  for (std::size_t k = 0; k < a.params().count(); ++k)
    for (double v : a.params()[k].data()) EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
}

TEST(Training, ReconstructionOnlyFitsHeadsAfterwards) {
  const auto& d = grid_dataset();
  const auto m = fixtures::trained_model(d, vae::Mode::reconstruction_only, 2);
  vae::JointVAE fresh(d.schema, small_architecture(d.schema), vae::Mode::reconstruction_only, 41);
  vae::TrainSchedule s;
  s.epochs = 2;
  s.head_epochs = 3;
  const auto r = vae::train(fresh, d, s, 42);
  ASSERT_EQ(r.curve.size(), 5u);
  EXPECT_EQ(r.curve[2].phase, "heads");
  EXPECT_EQ(r.curve[4].phase, "heads");
  // encoder identical to the default head schedule
  const auto enc = m.parameter_mask({"enc."});
  for (std::size_t k = 0; k < enc.size(); ++k)
    if (enc[k]) {
      EXPECT_EQ(fresh.params()[k], m.params()[k]);
    }
}

TEST(Persistence, SaveLoadIsBitIdentical) {
  const auto dir = fixtures::temp_dir("jvae");
  const auto& m = fixtures::grid_model();
  m.save(dir / "m.ckpt", {{"note", "x"}});
  const auto l = vae::JointVAE::load(dir / "m.ckpt");
  EXPECT_EQ(l.params(), m.params());
  EXPECT_EQ(l.architecture(), m.architecture());
  EXPECT_EQ(l.mode(), m.mode());
  EXPECT_EQ(l.digest(), m.digest());
  const auto z = m.encode_mean(grid_dataset().features(0));
  EXPECT_EQ(l.decode(z), m.decode(z));
  EXPECT_THROW(vae::JointVAE::load(dir / "nope.ckpt"), std::exception);
  std::filesystem::remove_all(dir);
}

TEST(Metrics, OutcomeMseAndAccuracy) {
  const auto& d = grid_dataset();
  const auto& m = fixtures::grid_model();
  const auto idx = d.test_indices();
  const auto mse = vae::outcome_mse(m, d, idx);
  for (std::size_t v = 0; v < kOutcomeCount; ++v) {
    double ref = 0.0;
    for (auto i : idx) {
      const double e = m.predict_outcomes(m.encode_mean(d.features(i)))[v] - d.frames[i].outcome[v];
      ref += e * e;
    }
    EXPECT_NEAR(mse[v], ref / static_cast<double>(idx.size()), 1e-12);
  }
  const double acc = vae::categorical_accuracy(m, d, idx);
  EXPECT_TRUE(acc > 0.0 && acc <= 1.0);
}
