#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cfgen/errors.hpp"
#include "cfgen/features.hpp"
#include "cfgen/measures.hpp"
#include "support.hpp"

using namespace cfgen;
using measures::ValiditySpec;

namespace {

envs::GridObservation random_grid(std::mt19937_64& rng, int h = 8, int w = 8, int max_strength = 6) {
  envs::GridObservation o{h, w, std::vector<int>(static_cast<std::size_t>(h * w)),
                          std::vector<int>(static_cast<std::size_t>(h * w))};
  for (std::size_t i = 0; i < o.kinds.size(); ++i) {
    o.kinds[i] = rng() % 3 == 0 ? static_cast<int>(rng() % envs::kEntityKinds) : 0;
    o.strengths[i] = o.kinds[i] == 0 ? 0 : 1 + static_cast<int>(rng() % max_strength);
  }
  return o;
}

// First index of the largest value among the layer's channels.
int ref_argmax(const ad::Tensor& t, std::size_t first, std::size_t vocab, std::size_t cells, std::size_t c) {
  int best = 0;
  for (std::size_t k = 1; k < vocab; ++k)
    if (t[(first + k) * cells + c] > t[(first + best) * cells + c]) best = static_cast<int>(k);
  return best;
}

double ref_odiff(const ad::Tensor& a, const ad::Tensor& b, const FeatureSchema& s) {
  double total = 0.0;
  for (const auto& l : s.categorical)
    for (std::size_t c = 0; c < s.cells(); ++c)
      if (ref_argmax(a, l.first_channel, l.vocabulary, s.cells(), c) !=
          ref_argmax(b, l.first_channel, l.vocabulary, s.cells(), c))
        total += 1.0;
  for (const auto& n : s.numeric)
    for (std::size_t c = 0; c < s.cells(); ++c)
      total += std::abs(a[n.channel * s.cells() + c] - b[n.channel * s.cells() + c]) / n.width;
  return total;
}

}  // namespace

TEST(Features, GridRoundTrip) {
  const auto schema = grid_schema({});
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const envs::Observation o = random_grid(rng);
    const auto t = encode_observation(o, schema);
    EXPECT_EQ(t.shape(), (ad::Shape{7, 8, 8}));
    EXPECT_EQ(decode_observation(t, schema), o);
    EXPECT_EQ(harden(t, schema), t);
  }
}

TEST(Features, OneHotAndStrengthScaling) {
  envs::GridConfig c;
  c.height = 2;
  c.width = 1;
  const auto schema = grid_schema(c);
  envs::GridObservation o{2, 1, {1, 0}, {3, 0}};
  const auto t = encode_observation(o, schema);
  EXPECT_EQ(t[1 * 2 + 0], 1.0);  // player channel, cell 0
  EXPECT_EQ(t[0 * 2 + 1], 1.0);  // empty channel, cell 1
  EXPECT_DOUBLE_EQ(t[6 * 2 + 0], 2.0 * 3 / 6 - 1.0);
  EXPECT_DOUBLE_EQ(t[6 * 2 + 1], -1.0);
}

TEST(Features, DecodeNormalizesStrengthByKind) {
  const auto schema = grid_schema({});
  ad::Tensor t(schema.shape(), 0.0);
  const std::size_t cells = schema.cells();
  t[0 * cells + 0] = 1.0;    // empty with a stray strength
  t[6 * cells + 0] = 0.4;
  t[2 * cells + 1] = 1.0;    // wanderer with strength 0
  t[6 * cells + 1] = -1.0;
  const auto g = std::get<envs::GridObservation>(decode_observation(t, schema));
  EXPECT_EQ(g.strengths[0], 0);
  EXPECT_EQ(g.strengths[1], 1);
}

TEST(Features, ArgmaxTiesGoToLowestIndex) {
  const auto schema = grid_schema({});
  ad::Tensor t(schema.shape(), 0.5);
  for (int k : argmax_cells(t, schema, schema.categorical[0])) EXPECT_EQ(k, 0);
}

TEST(Features, RejectsMalformedObservations) {
  const auto schema = grid_schema({});
  EXPECT_THROW(encode_observation(envs::GridObservation{8, 8, std::vector<int>(64, 9), std::vector<int>(64, 0)}, schema),
               SchemaError);
  EXPECT_THROW(encode_observation(envs::GridObservation{4, 4, std::vector<int>(16), std::vector<int>(16)}, schema),
               SchemaError);
  EXPECT_THROW(encode_observation(envs::CartpoleObservation{}, schema), SchemaError);
}

TEST(Features, CartpoleClipsToBounds) {
  const auto schema = cartpole_schema();
  const auto t = encode_observation(envs::CartpoleObservation{{10.0, -10.0, 0.0, 1.75}}, schema);
  EXPECT_EQ(t.shape(), (ad::Shape{4, 1, 1}));
  EXPECT_DOUBLE_EQ(t[0], 1.0);
  EXPECT_DOUBLE_EQ(t[1], -1.0);
  EXPECT_DOUBLE_EQ(t[2], 0.0);
  EXPECT_DOUBLE_EQ(t[3], 0.5);
}

TEST(Validity, AgreesWithReferenceOn1000Cases) {
  std::mt19937_64 rng(7);
  // Dyadic values make boundary cases exact, so equality is exercised.
  auto dyadic = [&] { return static_cast<int>(rng() % 17) - 8; };
  for (int n = 0; n < 1000; ++n) {
    ValiditySpec spec;
    spec.variable = rng() % kOutcomeCount;
    spec.sign = rng() % 2 ? 1 : -1;
    spec.kind = rng() % 5 == 0 ? measures::VariableKind::categorical : measures::VariableKind::numeric;
    const int e = 1 + static_cast<int>(rng() % 8);
    spec.epsilon = e / 8.0;
    OutcomeVector yq{}, yc{};
    std::array<int, kOutcomeCount> iq{}, ic{};
    for (std::size_t i = 0; i < kOutcomeCount; ++i) {
      iq[i] = dyadic();
      ic[i] = n % 4 == 0 ? iq[i] + spec.sign * e : dyadic();
      yq[i] = iq[i] / 8.0;
      yc[i] = ic[i] / 8.0;
    }
    const std::size_t v = spec.variable;
    const bool expected = spec.kind == measures::VariableKind::categorical
                              ? ic[v] != iq[v]
                              : (spec.sign > 0 ? ic[v] - iq[v] >= e : iq[v] - ic[v] >= e);
    ASSERT_EQ(measures::validity(yc, yq, spec), expected) << "case " << n;
  }
}

TEST(Validity, RejectsBadSpecs) {
  OutcomeVector y{};
  EXPECT_THROW(measures::validity(y, y, {3, 1, 0.5}), ParameterError);
  EXPECT_THROW(measures::validity(y, y, {0, 0, 0.5}), ParameterError);
  EXPECT_THROW(measures::validity(y, y, {0, 1, 0.0}), ParameterError);
  EXPECT_THROW(measures::validity(y, y, {0, 1, std::nan("")}), ParameterError);
}

TEST(Odiff, AgreesWithReferenceOn1000Cases) {
  const auto grid = grid_schema({});
  const auto cart = cartpole_schema();
  std::mt19937_64 rng(8);
  for (int n = 0; n < 1000; ++n) {
    const bool spatial = n % 2 == 0;
    const auto& s = spatial ? grid : cart;
    ad::Tensor a, b;
    if (spatial && n % 4 == 0) {
      a = encode_observation(random_grid(rng), s);
      b = encode_observation(random_grid(rng), s);
    } else {
      // soft decoder-style outputs
      a = fixtures::random_tensor(s.shape(), rng);
      b = fixtures::random_tensor(s.shape(), rng);
    }
    ASSERT_EQ(measures::odiff(a, b, s), ref_odiff(a, b, s)) << "case " << n;
    ASSERT_EQ(measures::odiff(a, a, s), 0.0);
    ASSERT_EQ(measures::odiff(a, b, s), measures::odiff(b, a, s));
  }
}

TEST(Odiff, CountsEditsOnRawObservations) {
  const auto s = grid_schema({});
  std::mt19937_64 rng(9);
  for (int n = 0; n < 100; ++n) {
    const auto a = random_grid(rng), b = random_grid(rng);
    double expected = 0.0;
    for (std::size_t i = 0; i < a.kinds.size(); ++i)
      expected += (a.kinds[i] != b.kinds[i]) + std::abs(a.strengths[i] - b.strengths[i]) / 6.0;
    EXPECT_NEAR(measures::odiff(encode_observation(a, s), encode_observation(b, s), s), expected, 1e-12);
  }
}

TEST(Odiff, DiffMaskMarksChangedCells) {
  const auto s = grid_schema({});
  std::mt19937_64 rng(10);
  auto a = random_grid(rng);
  auto b = a;
  b.kinds[5] = b.kinds[5] == 2 ? 3 : 2;
  b.strengths[5] = 1;
  b.strengths[9] = b.kinds[9] == 0 ? 0 : b.strengths[9] % 6 + 1;
  const auto mask = measures::diff_mask(encode_observation(a, s), encode_observation(b, s), s);
  for (std::size_t i = 0; i < mask.size(); ++i)
    EXPECT_EQ(mask[i], a.kinds[i] != b.kinds[i] || a.strengths[i] != b.strengths[i]) << i;
  EXPECT_THROW(measures::odiff(ad::Tensor({3}), ad::Tensor({3}), s), SchemaError);
}

TEST(Threshold, MatchesBruteForce) {
  std::mt19937_64 rng(11);
  for (int n = 0; n < 50; ++n) {
    std::vector<measures::LabeledScore> set;
    for (int i = 0; i < 30; ++i) {
      const bool anomalous = rng() % 2;
      set.push_back({static_cast<double>(rng() % 20) + (anomalous ? 4.0 : 0.0), anomalous});
    }
    set[0].anomalous = true;
    set[1].anomalous = false;
    const auto fit = measures::tune_threshold(set);
    double best = -1.0;
    for (double t = -1.0; t <= 25.0; t += 0.25) best = std::max(best, measures::threshold_accuracy(set, t));
    EXPECT_DOUBLE_EQ(fit.accuracy, best);
    EXPECT_DOUBLE_EQ(measures::threshold_accuracy(set, fit.threshold), fit.accuracy);
  }
}

TEST(Threshold, StrictlyAboveIsAnomalous) {
  const std::vector<measures::LabeledScore> set{{1.0, false}, {2.0, true}};
  EXPECT_DOUBLE_EQ(measures::threshold_accuracy(set, 2.0), 0.5);
  EXPECT_DOUBLE_EQ(measures::threshold_accuracy(set, 1.5), 1.0);
  const std::vector<measures::LabeledScore> one{{1.0, false}, {3.0, false}};
  EXPECT_THROW(measures::tune_threshold(one), DegenerateError);
}

TEST(Anomaly, EqualsRoundtripOdiff) {
  const auto schema = grid_schema({});
  const vae::JointVAE m(schema, fixtures::small_architecture(schema), vae::Mode::joint, 3);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> normal;
  for (int n = 0; n < 10; ++n) {
    vae::Latent z(m.latent_dim());
    for (auto& v : z) v = 2.0 * normal(rng);
    const auto x1 = harden(m.decode(z), schema);
    const auto x2 = harden(m.decode(m.encode_mean(x1)), schema);
    EXPECT_DOUBLE_EQ(measures::anomaly_score(m, z), ref_odiff(x1, x2, schema));
  }
}
