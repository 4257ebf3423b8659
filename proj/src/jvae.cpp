#include "cfgen/jvae.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "cfgen/agent.hpp"
#include "cfgen/random.hpp"

namespace cfgen::vae {

std::string to_string(Mode m) { return m == Mode::joint ? "joint" : "reconstruction_only"; }

Mode mode_from_string(const std::string& s) {
  if (s == "joint") return Mode::joint;
  if (s == "reconstruction_only" || s == "recon-only") return Mode::reconstruction_only;
  throw ParameterError("unknown model mode '" + s + "'");
}

void to_json(nlohmann::json& j, const Architecture& a) {
  j = nlohmann::json{{"latent_dim", a.latent_dim},   {"conv1", a.conv1},
                     {"conv2", a.conv2},             {"hidden", a.hidden},
                     {"decoder_channels", a.decoder_channels}, {"mlp_hidden", a.mlp_hidden},
                     {"head_hidden", a.head_hidden}, {"pooled", a.pooled},
                     {"ego_radius", a.ego_radius}, {"ego_hidden", a.ego_hidden}};
}

void from_json(const nlohmann::json& j, Architecture& a) {
  const Architecture d;
  a.latent_dim = j.value("latent_dim", d.latent_dim);
  a.conv1 = j.value("conv1", d.conv1);
  a.conv2 = j.value("conv2", d.conv2);
  a.hidden = j.value("hidden", d.hidden);
  a.decoder_channels = j.value("decoder_channels", d.decoder_channels);
  a.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  a.head_hidden = j.value("head_hidden", d.head_hidden);
  a.pooled = j.value("pooled", d.pooled);
  a.ego_radius = j.value("ego_radius", d.ego_radius);
  a.ego_hidden = j.value("ego_hidden", d.ego_hidden);
}

Architecture default_architecture(const FeatureSchema& schema) {
  Architecture a;
  a.latent_dim = schema.spatial() ? 64 : 8;
  if (schema.env == envs::EnvKind::gridworld) a.ego_radius = 3;
  return a;
}

void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"epochs", s.epochs},
                     {"batch_size", s.batch_size},
                     {"learning_rate", s.learning_rate},
                     {"beta_max", s.beta_max},
                     {"warmup_fraction", s.warmup_fraction},
                     {"outcome_weight", s.outcome_weight},
                     {"weight_decay", s.weight_decay},
                     {"head_epochs", s.head_epochs}};
}

void from_json(const nlohmann::json& j, TrainSchedule& s) {
  const TrainSchedule d;
  s.epochs = j.value("epochs", d.epochs);
  s.batch_size = j.value("batch_size", d.batch_size);
  s.learning_rate = j.value("learning_rate", d.learning_rate);
  s.beta_max = j.value("beta_max", d.beta_max);
  s.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  s.outcome_weight = j.value("outcome_weight", d.outcome_weight);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.head_epochs = j.value("head_epochs", d.head_epochs);
}

double beta_at(const TrainSchedule& s, double fraction) {
  if (s.warmup_fraction <= 0.0) return s.beta_max;
  return s.beta_max * std::clamp(fraction / s.warmup_fraction, 0.0, 1.0);
}

Latent sample_latent(const Encoding& e, std::uint64_t seed) {
  if (e.mu.size() != e.logvar.size()) throw DimensionError("sample_latent: mu and logvar differ in size");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Latent z(e.mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = e.mu[i] + std::exp(0.5 * e.logvar[i]) * n(rng);
  return z;
}

namespace {

constexpr int kKernel = 3;

ad::Tensor conv_init(std::size_t out, std::size_t in, std::mt19937_64& rng) {
  return nn::glorot({out, in, kKernel, kKernel}, in * kKernel * kKernel, out * kKernel * kKernel, rng);
}

std::size_t strided(std::size_t n) { return (n + 2 - kKernel) / 2 + 1; }

struct Segment {
  std::size_t begin, end;
  bool numeric;
};

std::vector<Segment> segments(const FeatureSchema& s) {
  std::vector<Segment> out;
  for (const auto& l : s.categorical) out.push_back({l.first_channel, l.first_channel + l.vocabulary, false});
  for (const auto& n : s.numeric) out.push_back({n.channel, n.channel + 1, true});
  std::sort(out.begin(), out.end(), [](const Segment& a, const Segment& b) { return a.begin < b.begin; });
  return out;
}

ad::Tensor as_batch(const Latent& z) { return ad::Tensor({1, z.size()}, z); }


}  // namespace

JointVAE::JointVAE(FeatureSchema schema, Architecture arch, Mode mode, std::uint64_t seed)
    : schema_(std::move(schema)), arch_(arch), mode_(mode) {
  if (arch_.latent_dim == 0) throw ParameterError("latent dimension must be positive");
  std::mt19937_64 rng(seed);
  const std::size_t c = schema_.channels();
  const std::size_t d = arch_.latent_dim;
  auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
    params_.add(name + ".w", nn::glorot({in, out}, in, out, rng));
    params_.add(name + ".b", ad::Tensor({out}, 0.0));
  };
  auto conv = [&](const std::string& name, std::size_t in, std::size_t out) {
    params_.add(name + ".k", conv_init(out, in, rng));
    params_.add(name + ".b", ad::Tensor({out}, 0.0));
  };
  encoder_begin_ = params_.count();
  if (schema_.spatial()) {
    conv("enc.conv1", c, arch_.conv1);
    conv("enc.conv2", arch_.conv1, arch_.conv2);
    dense("enc.fc",
          arch_.conv2 * strided(schema_.height) * strided(schema_.width) + (arch_.pooled ? arch_.conv1 + arch_.conv2 : 0),
          arch_.hidden);
    std::size_t trunk = arch_.hidden;
    if (arch_.ego_radius > 0) {
      if (schema_.env != envs::EnvKind::gridworld) throw ParameterError("player-centred encoder needs a gridworld schema");
      dense("enc.ego", agent::agent_feature_size(schema_, static_cast<int>(arch_.ego_radius)), arch_.ego_hidden);
      trunk += arch_.ego_hidden;
    }
    dense("enc.mu", trunk, d);
    dense("enc.logvar", trunk, d);
  } else {
    dense("enc.fc1", schema_.size(), arch_.mlp_hidden);
    dense("enc.fc2", arch_.mlp_hidden, arch_.mlp_hidden);
    dense("enc.mu", arch_.mlp_hidden, d);
    dense("enc.logvar", arch_.mlp_hidden, d);
  }
  decoder_begin_ = params_.count();
  if (schema_.spatial()) {
    dense("dec.fc1", d, arch_.hidden);
    dense("dec.fc2", arch_.hidden, arch_.decoder_channels * schema_.cells());
    conv("dec.conv1", arch_.decoder_channels, arch_.decoder_channels);
    conv("dec.conv2", arch_.decoder_channels, c);
  } else {
    dense("dec.fc1", d, arch_.mlp_hidden);
    dense("dec.fc2", arch_.mlp_hidden, arch_.mlp_hidden);
    dense("dec.out", arch_.mlp_hidden, schema_.size());
  }
  heads_begin_ = params_.count();
  for (std::size_t i = 0; i < kOutcomeCount; ++i) {
    const std::string name = "head." + to_string(static_cast<OutcomeVariable>(i));
    dense(name + ".fc1", d, arch_.head_hidden);
    dense(name + ".fc2", arch_.head_hidden, 1);
  }
}

std::vector<bool> JointVAE::parameter_mask(std::initializer_list<const char*> prefixes) const {
  std::vector<bool> mask(params_.count(), false);
  for (std::size_t i = 0; i < params_.count(); ++i)
    for (const char* p : prefixes)
      if (params_.name(i).rfind(p, 0) == 0) mask[i] = true;
  return mask;
}

namespace {

// [B, C, H, W] -> [B, C]
ad::Var channel_mean(ad::Graph& g, ad::Var h) {
  const ad::Shape s = g.value(h).shape();
  const std::size_t hw = s[2] * s[3];
  const auto flat = ad::reshape(g, h, {s[0] * s[1], hw});
  const auto w = g.constant(ad::Tensor({hw, 1}, std::vector<double>(hw, 1.0 / static_cast<double>(hw))));
  const auto bias = g.constant(ad::Tensor({1}, std::vector<double>{0.0}));
  return ad::reshape(g, ad::linear(g, flat, w, bias), {s[0], s[1]});
}

}  // namespace

ad::Tensor JointVAE::ego_view(const ad::Tensor& x) const {
  const std::size_t b = x.dim(0), n = schema_.size();
  const std::size_t m = agent::agent_feature_size(schema_, static_cast<int>(arch_.ego_radius));
  ad::Tensor out({b, m});
  for (std::size_t i = 0; i < b; ++i) {
    ad::Tensor item(schema_.shape());
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(i * n), n, item.data().begin());
    const auto f = agent::agent_features(decode_observation(item, schema_), schema_, static_cast<int>(arch_.ego_radius));
    std::copy(f.begin(), f.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * m));
  }
  return out;
}

ad::Var JointVAE::encoder_trunk(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var x) const {
  const std::size_t b = g.value(x).dim(0);
  std::size_t i = encoder_begin_;
  if (schema_.spatial()) {
    const auto h1 = ad::tanh(g, ad::conv2d(g, x, p[i], p[i + 1], 1, 1));
    const auto h2 = ad::tanh(g, ad::conv2d(g, h1, p[i + 2], p[i + 3], 2, 1));
    auto h = ad::reshape(g, h2, {b, g.value(h2).size() / b});
    if (arch_.pooled) {
      const std::vector<ad::Var> parts{h, channel_mean(g, h1), channel_mean(g, h2)};
      h = ad::concat(g, parts, 1);
    }
    h = ad::tanh(g, ad::linear(g, h, p[i + 4], p[i + 5]));
    if (arch_.ego_radius == 0) return h;
    const auto ego = ad::tanh(g, ad::linear(g, g.constant(ego_view(g.value(x))), p[i + 6], p[i + 7]));
    const std::vector<ad::Var> parts{h, ego};
    return ad::concat(g, parts, 1);
  }
  auto h = ad::reshape(g, x, {b, schema_.size()});
  h = ad::tanh(g, ad::linear(g, h, p[i], p[i + 1]));
  return ad::tanh(g, ad::linear(g, h, p[i + 2], p[i + 3]));
}

std::pair<ad::Var, ad::Var> JointVAE::encode(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var x) const {
  const ad::Shape expect{schema_.channels(), schema_.height, schema_.width};
  const auto& xs = g.value(x).shape();
  if (xs.size() != 4 || !std::equal(expect.begin(), expect.end(), xs.begin() + 1))
    throw SchemaError("encoder input " + ad::shape_string(xs) + " does not match [B, " + ad::shape_string(expect) + "]");
  const auto h = encoder_trunk(g, p, x);
  const std::size_t i = decoder_begin_ - 4;
  return {ad::linear(g, h, p[i], p[i + 1]), ad::linear(g, h, p[i + 2], p[i + 3])};
}

ad::Var JointVAE::decode(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var z) const {
  const auto& zs = g.value(z).shape();
  if (zs.size() != 2 || zs[1] != arch_.latent_dim)
    throw DimensionError("latent " + ad::shape_string(zs) + " does not have dimension " +
                         std::to_string(arch_.latent_dim));
  const std::size_t b = zs[0];
  const std::size_t i = decoder_begin_;
  ad::Var raw;
  if (schema_.spatial()) {
    auto h = ad::tanh(g, ad::linear(g, z, p[i], p[i + 1]));
    h = ad::tanh(g, ad::linear(g, h, p[i + 2], p[i + 3]));
    h = ad::reshape(g, h, {b, arch_.decoder_channels, schema_.height, schema_.width});
    h = ad::tanh(g, ad::conv2d(g, h, p[i + 4], p[i + 5], 1, 1));
    raw = ad::conv2d(g, h, p[i + 6], p[i + 7], 1, 1);
  } else {
    auto h = ad::tanh(g, ad::linear(g, z, p[i], p[i + 1]));
    h = ad::tanh(g, ad::linear(g, h, p[i + 2], p[i + 3]));
    raw = ad::reshape(g, ad::linear(g, h, p[i + 4], p[i + 5]), {b, schema_.channels(), 1, 1});
  }
  std::vector<ad::Var> parts;
  for (const auto& s : segments(schema_)) {
    auto part = ad::slice(g, raw, 1, s.begin, s.end);
    parts.push_back(s.numeric ? ad::tanh(g, part) : part);
  }
  return parts.size() == 1 ? parts.front() : ad::concat(g, parts, 1);
}

ad::Var JointVAE::soften(ad::Graph& g, ad::Var decoded) const {
  std::vector<ad::Var> parts;
  for (const auto& s : segments(schema_)) {
    auto part = ad::slice(g, decoded, 1, s.begin, s.end);
    parts.push_back(s.numeric ? part : ad::softmax(g, part, 1));
  }
  return parts.size() == 1 ? parts.front() : ad::concat(g, parts, 1);
}

ad::Var JointVAE::head(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var z, std::size_t variable) const {
  if (variable >= kOutcomeCount) throw ParameterError("outcome variable index out of range");
  const std::size_t i = heads_begin_ + 4 * variable;
  auto h = ad::tanh(g, ad::linear(g, z, p[i], p[i + 1]));
  return ad::tanh(g, ad::linear(g, h, p[i + 2], p[i + 3]));
}

ad::Var JointVAE::heads(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var z) const {
  std::vector<ad::Var> parts;
  for (std::size_t v = 0; v < kOutcomeCount; ++v) parts.push_back(head(g, p, z, v));
  return ad::concat(g, parts, 1);
}

ad::Var JointVAE::reconstruction(ad::Graph& g, ad::Var decoded, const ad::Tensor& x) const {
  const std::size_t b = x.dim(0);
  const std::size_t cells = schema_.cells();
  const std::size_t per = schema_.size();
  std::vector<ad::Var> terms;
  for (const auto& layer : schema_.categorical) {
    std::vector<int> targets(b * cells);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t c = 0; c < cells; ++c) {
        int best = 0;
        double bv = x[n * per + layer.first_channel * cells + c];
        for (std::size_t k = 1; k < layer.vocabulary; ++k) {
          const double v = x[n * per + (layer.first_channel + k) * cells + c];
          if (v > bv) {
            bv = v;
            best = static_cast<int>(k);
          }
        }
        targets[n * cells + c] = best;
      }
    auto logits = ad::slice(g, decoded, 1, layer.first_channel, layer.first_channel + layer.vocabulary);
    terms.push_back(ad::loss_categorical(g, logits, targets, 1));
  }
  const auto target = g.constant(x);
  for (const auto& n : schema_.numeric)
    terms.push_back(ad::loss_mse(g, ad::slice(g, decoded, 1, n.channel, n.channel + 1),
                                 ad::slice(g, target, 1, n.channel, n.channel + 1)));
  ad::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(g, total, terms[i]);
  return total;
}

JointVAE::LossVars JointVAE::loss_graph(ad::Graph& g, const std::vector<ad::Var>& p, const ad::Tensor& x,
                                        std::span<const OutcomeVector> y, double beta, double outcome_weight,
                                        const ad::Tensor& noise) const {
  const std::size_t b = x.dim(0);
  if (b == 0) throw ContractError("loss of an empty batch");
  if (y.size() != b) throw DimensionError("one outcome vector per batch item required");
  const auto [mu, logvar] = encode(g, p, g.constant(x));
  ad::Var z = mu;
  if (!noise.empty()) {
    if (noise.shape() != g.value(mu).shape()) throw DimensionError("noise shape does not match latent batch");
    z = ad::add(g, mu, ad::mul(g, ad::exp(g, ad::scale(g, logvar, 0.5)), g.constant(noise)));
  }
  LossVars out;
  out.recon = reconstruction(g, decode(g, p, z), x);
  out.kl = ad::gaussian_kl(g, mu, logvar);
  ad::Tensor yt({b, kOutcomeCount});
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t v = 0; v < kOutcomeCount; ++v) yt[n * kOutcomeCount + v] = y[n][v];
  const auto head_in = mode_ == Mode::joint ? z : ad::detach(g, z);
  out.outcome = ad::scale(g, ad::loss_mse(g, heads(g, p, head_in), g.constant(yt)), static_cast<double>(kOutcomeCount));
  out.total = ad::add(g, out.recon, ad::scale(g, out.kl, beta));
  if (mode_ == Mode::joint) out.total = ad::add(g, out.total, ad::scale(g, out.outcome, outcome_weight));
  return out;
}

ad::Tensor JointVAE::batch(std::span<const ad::Tensor> xs) const {
  for (const auto& x : xs)
    if (x.shape() != schema_.shape())
      throw SchemaError("input " + ad::shape_string(x.shape()) + " does not match schema " +
                        ad::shape_string(schema_.shape()));
  return stack_features(std::vector<ad::Tensor>(xs.begin(), xs.end()));
}

Encoding JointVAE::encode(const ad::Tensor& x) const {
  ad::Graph g;
  const auto p = params_.bind(g, false);
  const auto [mu, logvar] = encode(g, p, g.constant(batch(std::span(&x, 1))));
  return {g.value(mu).vec(), g.value(logvar).vec()};
}

Latent JointVAE::encode_mean(const ad::Tensor& x) const { return encode(x).mu; }

std::vector<Latent> JointVAE::encode_mean_batch(std::span<const ad::Tensor> xs) const {
  std::vector<Latent> out;
  out.reserve(xs.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t at = 0; at < xs.size(); at += kChunk) {
    const auto part = xs.subspan(at, std::min(kChunk, xs.size() - at));
    ad::Graph g;
    const auto p = params_.bind(g, false);
    const auto mu = encode(g, p, g.constant(batch(part))).first;
    const auto& v = g.value(mu).vec();
    for (std::size_t n = 0; n < part.size(); ++n)
      out.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(n * latent_dim()),
                       v.begin() + static_cast<std::ptrdiff_t>((n + 1) * latent_dim()));
  }
  return out;
}

ad::Tensor JointVAE::decode(const Latent& z) const {
  ad::Graph g;
  const auto p = params_.bind(g, false);
  return g.value(decode(g, p, g.constant(as_batch(z)))).reshaped(schema_.shape());
}

Latent JointVAE::roundtrip(const Latent& z) const { return encode_mean(harden(decode(z), schema_)); }

OutcomeVector JointVAE::predict_outcomes(const Latent& z) const {
  ad::Graph g;
  const auto p = params_.bind(g, false);
  const auto& v = g.value(heads(g, p, g.constant(as_batch(z))));
  return {v[0], v[1], v[2]};
}

std::vector<OutcomeVector> JointVAE::predict_outcomes_batch(std::span<const Latent> zs) const {
  std::vector<OutcomeVector> out;
  if (zs.empty()) return out;
  ad::Tensor t({zs.size(), latent_dim()});
  for (std::size_t n = 0; n < zs.size(); ++n) {
    if (zs[n].size() != latent_dim()) throw DimensionError("latent has the wrong dimension");
    std::copy(zs[n].begin(), zs[n].end(), t.data().begin() + static_cast<std::ptrdiff_t>(n * latent_dim()));
  }
  ad::Graph g;
  const auto p = params_.bind(g, false);
  const auto& v = g.value(heads(g, p, g.constant(t)));
  for (std::size_t n = 0; n < zs.size(); ++n) out.push_back({v[n * 3], v[n * 3 + 1], v[n * 3 + 2]});
  return out;
}

std::pair<double, Latent> JointVAE::head_gradient(const Latent& z, std::size_t variable) const {
  ad::Graph g;
  const auto p = params_.bind(g, false);
  const auto zv = g.variable(as_batch(z));
  const auto y = head(g, p, zv, variable);
  g.backward(y);
  return {g.value(y).item(), g.grad(zv).vec()};
}

LossTerms JointVAE::loss(const ad::Tensor& x_batch, std::span<const OutcomeVector> y, double beta,
                         double outcome_weight, const ad::Tensor& noise) const {
  ad::Graph g;
  const auto p = params_.bind(g, false);
  const auto l = loss_graph(g, p, x_batch, y, beta, outcome_weight, noise);
  return {g.value(l.total).item(), g.value(l.recon).item(), g.value(l.kl).item(), g.value(l.outcome).item()};
}

double JointVAE::elbo_loss(const ad::Tensor& x, double beta) const {
  const OutcomeVector none{};
  const auto t = loss(batch(std::span(&x, 1)), std::span(&none, 1), beta, 0.0);
  return t.recon + beta * t.kl;
}

void JointVAE::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json header{{"format", "cfgen-vae"},
                        {"version", 1},
                        {"schema", schema_},
                        {"architecture", arch_},
                        {"latent_dim", arch_.latent_dim},
                        {"mode", to_string(mode_)},
                        {"outcome_variables", {"value", "confidence", "riskiness"}}};
  for (const auto& [k, v] : extra.items()) header[k] = v;
  nn::save_checkpoint(path, std::move(header), params_);
}

JointVAE JointVAE::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open model checkpoint " + path.string());
  const auto header = nn::read_checkpoint_header(is, "cfgen-vae");
  JointVAE m;
  try {
    m = JointVAE(header.at("schema").get<FeatureSchema>(), header.at("architecture").get<Architecture>(),
                 mode_from_string(header.at("mode").get<std::string>()), 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model header: ") + e.what());
  }
  nn::read_checkpoint_blob(is, header, m.params_);
  return m;
}

// ---- training ------------------------------------------------------------------------

OutcomeVector outcome_mse(const JointVAE& model, const data::TrajectoryDataset& dataset,
                          std::span<const std::size_t> frames) {
  OutcomeVector mse{};
  if (frames.empty()) return mse;
  std::vector<ad::Tensor> xs;
  for (auto i : frames) xs.push_back(dataset.features(i));
  const auto zs = model.encode_mean_batch(xs);
  const auto pred = model.predict_outcomes_batch(zs);
  for (std::size_t n = 0; n < frames.size(); ++n)
    for (std::size_t v = 0; v < kOutcomeCount; ++v) {
      const double d = pred[n][v] - dataset.frames[frames[n]].outcome[v];
      mse[v] += d * d;
    }
  for (auto& v : mse) v /= static_cast<double>(frames.size());
  return mse;
}

double categorical_accuracy(const JointVAE& model, const data::TrajectoryDataset& dataset,
                            std::span<const std::size_t> frames) {
  const auto& schema = model.schema();
  if (schema.categorical.empty() || frames.empty()) return 1.0;
  std::vector<ad::Tensor> xs;
  for (auto i : frames) xs.push_back(dataset.features(i));
  const auto zs = model.encode_mean_batch(xs);
  std::size_t hit = 0, total = 0;
  for (std::size_t n = 0; n < frames.size(); ++n) {
    const auto rec = model.decode(zs[n]);
    for (const auto& layer : schema.categorical) {
      const auto a = argmax_cells(xs[n], schema, layer);
      const auto b = argmax_cells(rec, schema, layer);
      for (std::size_t c = 0; c < a.size(); ++c) hit += a[c] == b[c];
      total += a.size();
    }
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

namespace {

double test_recon(const JointVAE& model, const std::vector<ad::Tensor>& xs) {
  if (xs.empty()) return 0.0;
  const std::vector<OutcomeVector> y(xs.size());
  return model.loss(stack_features(xs), y, 0.0, 0.0).recon;
}

}  // namespace

TrainReport train(JointVAE& model, const data::TrajectoryDataset& dataset, const TrainSchedule& s,
                  std::uint64_t seed, const EpochCallback& on_epoch) {
  if (s.epochs < 0 || s.batch_size == 0) throw ParameterError("invalid training schedule");
  if (!(model.schema() == dataset.schema)) throw SchemaError("model and dataset schemas differ");
  const auto t0 = std::chrono::steady_clock::now();
  const auto train_idx = dataset.train_indices();
  const auto test_idx = dataset.test_indices();
  if (train_idx.empty()) throw ContractError("training split is empty");
  std::vector<ad::Tensor> xs, test_xs;
  for (auto i : train_idx) xs.push_back(dataset.features(i));
  for (auto i : test_idx) test_xs.push_back(dataset.features(i));

  std::mt19937_64 rng(derive_seed(seed, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Adam adam(model.params(), {.learning_rate = s.learning_rate, .weight_decay = s.weight_decay});
  const bool joint = model.mode() == Mode::joint;
  const auto vae_mask = joint ? std::vector<bool>{} : model.parameter_mask({"enc.", "dec."});
  const auto head_mask = model.parameter_mask({"head."});
  const std::size_t d = model.latent_dim();
  const std::size_t batches = (xs.size() + s.batch_size - 1) / s.batch_size;
  TrainReport report;
  JointVAE last_good = model;

  std::vector<std::size_t> order(xs.size());
  auto run_epochs = [&](const std::string& phase, int epochs, const std::vector<Latent>* frozen) {
    for (int epoch = 0; epoch < epochs; ++epoch) {
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      EpochLog log;
      log.epoch = epoch;
      log.phase = phase;
      for (std::size_t b = 0; b < batches; ++b) {
        const std::size_t lo = b * s.batch_size, hi = std::min(xs.size(), lo + s.batch_size);
        const std::size_t n = hi - lo;
        std::vector<OutcomeVector> y;
        for (std::size_t k = lo; k < hi; ++k) y.push_back(dataset.frames[train_idx[order[k]]].outcome);
        try {
          ad::Graph g;
          const auto p = model.params().bind(g, true);
          if (frozen) {
            ad::Tensor zt({n, d}), yt({n, kOutcomeCount});
            for (std::size_t k = 0; k < n; ++k) {
              std::copy((*frozen)[order[lo + k]].begin(), (*frozen)[order[lo + k]].end(),
                        zt.data().begin() + static_cast<std::ptrdiff_t>(k * d));
              for (std::size_t v = 0; v < kOutcomeCount; ++v) yt[k * kOutcomeCount + v] = y[k][v];
            }
            const auto loss = ad::scale(g, ad::loss_mse(g, model.heads(g, p, g.constant(zt)), g.constant(yt)),
                                        static_cast<double>(kOutcomeCount));
            g.backward(loss);
            adam.step(model.params(), model.params().gradients(g, p), head_mask);
            log.train.outcome += g.value(loss).item() / static_cast<double>(batches);
          } else {
            std::vector<ad::Tensor> items;
            for (std::size_t k = lo; k < hi; ++k) items.push_back(xs[order[k]]);
            ad::Tensor noise({n, d});
            for (auto& v : noise.data()) v = normal(rng);
            const double progress =
                static_cast<double>(epoch * batches + b) / static_cast<double>(std::max<std::size_t>(1, epochs * batches));
            log.beta = beta_at(s, progress);
            const auto l = model.loss_graph(g, p, stack_features(items), y, log.beta, s.outcome_weight, noise);
            g.backward(l.total);
            adam.step(model.params(), model.params().gradients(g, p), vae_mask);
            const double w = 1.0 / static_cast<double>(batches);
            log.train.total += g.value(l.total).item() * w;
            log.train.recon += g.value(l.recon).item() * w;
            log.train.kl += g.value(l.kl).item() * w;
            log.train.outcome += g.value(l.outcome).item() * w;
          }
          if (!model.params().all_finite()) throw ContractError("non-finite parameter after update");
        } catch (const ContractError& e) {
          throw TrainingDiverged(std::string("training diverged in ") + phase + " epoch " + std::to_string(epoch) +
                                     ": " + e.what(),
                                 last_good, epoch);
        }
      }
      log.test_recon = test_recon(model, test_xs);
      const auto mse = outcome_mse(model, dataset, test_idx);
      log.test_outcome_mse = (mse[0] + mse[1] + mse[2]) / 3.0;
      report.curve.push_back(log);
      if (on_epoch) on_epoch(log);
      last_good = model;
    }
  };

  run_epochs("vae", s.epochs, nullptr);
  if (!joint) {
    const auto frozen = model.encode_mean_batch(xs);
    run_epochs("heads", s.head_epochs < 0 ? s.epochs : s.head_epochs, &frozen);
  }
  model.params().round_to_float32();
  report.test_mse = outcome_mse(model, dataset, test_idx);
  report.test_mse_mean = (report.test_mse[0] + report.test_mse[1] + report.test_mse[2]) / 3.0;
  report.train_categorical_accuracy = categorical_accuracy(model, dataset, train_idx);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void write_loss_curve_csv(const TrainReport& report, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "phase,epoch,beta,train_total,train_recon,train_kl,train_outcome,test_recon,test_outcome_mse\n";
  os.precision(10);
  for (const auto& e : report.curve)
    os << e.phase << ',' << e.epoch << ',' << e.beta << ',' << e.train.total << ',' << e.train.recon << ','
       << e.train.kl << ',' << e.train.outcome << ',' << e.test_recon << ',' << e.test_outcome_mse << '\n';
}

}  // namespace cfgen::vae
