#pragma once

// Joint variational autoencoder: one diagonal-Gaussian latent that both
// reconstructs the feature tensor and predicts the outcome variables through
// small per-variable heads.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "cfgen/autodiff.hpp"
#include "cfgen/dataset.hpp"
#include "cfgen/errors.hpp"
#include "cfgen/features.hpp"
#include "cfgen/nn.hpp"
#include "cfgen/outcomes.hpp"
#include "json.hpp"

namespace cfgen::vae {

using Latent = std::vector<double>;

enum class Mode { joint, reconstruction_only };
std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct Architecture {
  std::size_t latent_dim = 32;
  // Spatial inputs.
  std::size_t conv1 = 16;
  std::size_t conv2 = 32;
  std::size_t hidden = 128;
  std::size_t decoder_channels = 16;
  /// Adds channel-wise global means of both conv layers to the encoder trunk.
  bool pooled = true;
  /// Second encoder over the player-centred relative-strength view of this
  /// radius, the same transform the agent sees (0 disables).
  std::size_t ego_radius = 0;
  std::size_t ego_hidden = 64;
  // Vector inputs.
  std::size_t mlp_hidden = 64;
  std::size_t head_hidden = 32;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

void to_json(nlohmann::json& j, const Architecture& a);
void from_json(const nlohmann::json& j, Architecture& a);

/// d = 64 for spatial schemas, 8 for vector schemas.
Architecture default_architecture(const FeatureSchema& schema);

struct TrainSchedule {
  int epochs = 20;
  std::size_t batch_size = 64;
  double learning_rate = 2e-3;
  double beta_max = 1e-5;
  /// Fraction of training over which beta rises linearly from 0.
  double warmup_fraction = 0.5;
  double outcome_weight = 1.0;
  double weight_decay = 0.1;
  /// Reconstruction-only mode: epochs for the post hoc head fit (defaults to `epochs`).
  int head_epochs = -1;
  friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
void from_json(const nlohmann::json& j, TrainSchedule& s);

/// beta at global progress `fraction` in [0, 1].
double beta_at(const TrainSchedule& s, double fraction);

struct LossTerms {
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double outcome = 0.0;
};

struct Encoding {
  Latent mu;
  Latent logvar;
};

/// z = mu + exp(logvar / 2) * noise, noise ~ N(0, I) from `seed`.
Latent sample_latent(const Encoding& e, std::uint64_t seed);

class JointVAE {
 public:
  JointVAE() = default;
  JointVAE(FeatureSchema schema, Architecture arch, Mode mode, std::uint64_t seed);

  const FeatureSchema& schema() const { return schema_; }
  const Architecture& architecture() const { return arch_; }
  Mode mode() const { return mode_; }
  std::size_t latent_dim() const { return arch_.latent_dim; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  /// Parameter indices whose names start with one of the prefixes
  /// ("enc.", "dec.", "head.").
  std::vector<bool> parameter_mask(std::initializer_list<const char*> prefixes) const;
  /// FNV digest of every weight; identifies the model in manifests.
  std::uint64_t digest() const { return params_.digest(); }

  // ---- graph level: x is [B, C, H, W], z is [B, d] ----
  std::pair<ad::Var, ad::Var> encode(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var x) const;
  /// Categorical logits and tanh-bounded numerics, [B, C, H, W].
  ad::Var decode(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var z) const;
  /// Softmax probabilities for categorical groups, numerics unchanged.
  ad::Var soften(ad::Graph& g, ad::Var decoded) const;
  ad::Var heads(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var z) const;
  ad::Var head(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var z, std::size_t variable) const;

  struct LossVars {
    ad::Var total, recon, kl, outcome;
  };
  /// `noise` [B, d] drives the reparameterization; empty means z = mu.
  LossVars loss_graph(ad::Graph& g, const std::vector<ad::Var>& p, const ad::Tensor& x,
                      std::span<const OutcomeVector> y, double beta, double outcome_weight,
                      const ad::Tensor& noise = {}) const;

  // ---- value level on single items: x is [C, H, W] ----
  Encoding encode(const ad::Tensor& x) const;
  Latent encode_mean(const ad::Tensor& x) const;
  std::vector<Latent> encode_mean_batch(std::span<const ad::Tensor> xs) const;
  ad::Tensor decode(const Latent& z) const;
  /// encode(harden(decode(z))).mu.
  Latent roundtrip(const Latent& z) const;
  OutcomeVector predict_outcomes(const Latent& z) const;
  std::vector<OutcomeVector> predict_outcomes_batch(std::span<const Latent> zs) const;
  /// sigma_i(z) and its gradient with respect to z.
  std::pair<double, Latent> head_gradient(const Latent& z, std::size_t variable) const;

  LossTerms loss(const ad::Tensor& x_batch, std::span<const OutcomeVector> y, double beta, double outcome_weight,
                 const ad::Tensor& noise = {}) const;
  /// recon + beta * KL for one input at z = mu.
  double elbo_loss(const ad::Tensor& x, double beta) const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static JointVAE load(const std::filesystem::path& path);

 private:
  ad::Var encoder_trunk(ad::Graph& g, const std::vector<ad::Var>& p, ad::Var x) const;
  ad::Tensor ego_view(const ad::Tensor& x) const;
  ad::Var reconstruction(ad::Graph& g, ad::Var decoded, const ad::Tensor& x) const;
  ad::Tensor batch(std::span<const ad::Tensor> xs) const;

  FeatureSchema schema_;
  Architecture arch_;
  Mode mode_ = Mode::joint;
  nn::ParameterSet params_;
  std::size_t encoder_begin_ = 0, decoder_begin_ = 0, heads_begin_ = 0;
};

struct EpochLog {
  int epoch = 0;
  std::string phase;  // "vae" or "heads"
  double beta = 0.0;
  LossTerms train;
  double test_recon = 0.0;
  double test_outcome_mse = 0.0;
};

struct TrainReport {
  std::vector<EpochLog> curve;
  OutcomeVector test_mse{};
  double test_mse_mean = 0.0;
  double train_categorical_accuracy = 0.0;
  double seconds = 0.0;
};

/// Thrown on a non-finite loss; carries the model as of the last finished epoch.
class TrainingDiverged : public TrainingError {
 public:
  TrainingDiverged(const std::string& what, JointVAE last_good, int epoch)
      : TrainingError(what), last_good_(std::move(last_good)), epoch_(epoch) {}
  const JointVAE& last_good() const { return last_good_; }
  int epoch() const { return epoch_; }

 private:
  JointVAE last_good_;
  int epoch_;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch Adam on the train split. Joint mode optimizes the full loss;
/// reconstruction-only mode trains encoder/decoder on recon + beta KL, then
/// fits the heads on the frozen mean latents. Weights end rounded to float32.
TrainReport train(JointVAE& model, const data::TrajectoryDataset& dataset, const TrainSchedule& schedule,
                  std::uint64_t seed, const EpochCallback& on_epoch = {});

void write_loss_curve_csv(const TrainReport& report, const std::filesystem::path& path);

/// Per-variable MSE of predict_outcomes(mu) against normalized outcomes.
OutcomeVector outcome_mse(const JointVAE& model, const data::TrajectoryDataset& dataset,
                          std::span<const std::size_t> frames);

/// Fraction of categorical cells recovered by decode(encode(x).mu).
double categorical_accuracy(const JointVAE& model, const data::TrajectoryDataset& dataset,
                            std::span<const std::size_t> frames);

}  // namespace cfgen::vae
