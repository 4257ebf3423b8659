#pragma once

// Evaluation protocol: query sampling per (variable, sign) cell, method
// comparison with micro-averaged quality, proximity CDFs, roundtrip ELBO
// curves, plausibility and joint-training ablations, and the synthetic
// anomaly label set used to tune the anomaly threshold.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfgen/counterfactual.hpp"
#include "cfgen/dataset.hpp"
#include "cfgen/jvae.hpp"
#include "cfgen/manifest.hpp"
#include "cfgen/measures.hpp"
#include "json.hpp"

namespace cfgen::exp {

enum class QuerySplit { test, train, all };
std::string to_string(QuerySplit s);
QuerySplit split_from_string(const std::string& s);

struct EpsilonPolicy {
  /// Value: factor x train-split std of the normalized value.
  double value_factor = 2.0;
  /// Confidence and riskiness.
  double other = 0.5;
  friend bool operator==(const EpsilonPolicy&, const EpsilonPolicy&) = default;
};

struct CorruptionOptions {
  /// Entity edits (duplicate the player, delete it, duplicate another entity) per scene.
  int edits = 2;
  /// Cells overwritten with a random kind and strength.
  int noise_cells = 2;
  /// Std of the Gaussian added to the re-encoded latent.
  double latent_noise = 6.0;
  friend bool operator==(const CorruptionOptions&, const CorruptionOptions&) = default;
};

struct ExperimentConfig {
  int queries_per_cell = 25;
  std::uint64_t seed = 1;
  QuerySplit split = QuerySplit::test;
  EpsilonPolicy epsilon;
  std::vector<cf::Method> methods{cf::Method::nun, cf::Method::interpolate, cf::Method::gradient};
  cf::CFOptions options;
  bool ablation_plausibility = true;
  bool ablation_joint = true;
  /// Pairs for the anomaly label set; half of it is held out.
  int corruption_pairs = 200;
  CorruptionOptions corruption;
  int roundtrip_real = 1000;
  int roundtrip_random = 1000;
  int roundtrip_steps = 10;
  /// Empty means one threshold per integer up to the largest observed odiff.
  std::vector<double> cdf_thresholds;
  int threads = 1;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Missing keys keep their defaults; throws ParameterError on invalid values.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// ---- queries -------------------------------------------------------------

double epsilon_for(const data::TrajectoryDataset& dataset, std::size_t variable, const EpsilonPolicy& policy);
measures::ValiditySpec spec_for(const data::TrajectoryDataset& dataset, std::size_t variable, int sign,
                                const EpsilonPolicy& policy);

/// -1 <= y + s * eps <= 1.
bool has_margin(double y, int sign, double epsilon);

/// Frames of `split` (ascending) whose outcome leaves room for the shift.
std::vector<std::size_t> eligible_frames(const data::TrajectoryDataset& dataset, const measures::ValiditySpec& spec,
                                         QuerySplit split);

struct QuerySample {
  std::vector<cf::CFQuery> queries;
  std::size_t eligible = 0;
  /// Set when fewer than the requested number of frames qualify.
  std::optional<std::string> warning;
};

/// Seeded choice of up to n eligible frames: the eligible list is shuffled
/// with mt19937_64(derive_seed(seed, cell)) and the first n are kept, where
/// cell = 2 * variable + (sign > 0).
QuerySample sample_queries(const data::TrajectoryDataset& dataset, std::size_t variable, int sign, int n,
                           std::uint64_t seed, QuerySplit split = QuerySplit::test, const EpsilonPolicy& policy = {});

cf::CFQuery query_for_frame(const data::TrajectoryDataset& dataset, std::size_t frame,
                            const measures::ValiditySpec& spec);

/// All six cells in order value+, value-, confidence+, ... ; shortfall
/// warnings are appended to `warnings`.
std::vector<cf::CFQuery> sample_all_queries(const data::TrajectoryDataset& dataset, const ExperimentConfig& config,
                                            std::vector<std::string>* warnings = nullptr);

// ---- runs ----------------------------------------------------------------

struct Arm {
  std::string label;
  std::string model;  // "joint" or "reconstruction_only"
  const vae::JointVAE* vae = nullptr;
  cf::Method method = cf::Method::gradient;
  bool plausibility = true;
  std::optional<double> threshold;
};

struct QueryRecord {
  std::size_t query = 0;
  std::string arm;
  std::optional<std::size_t> frame;
  measures::ValiditySpec spec;
  std::string status;
  bool valid = false;
  std::optional<bool> unadjusted_valid;
  double odiff = 0.0;
  double anomaly = 0.0;
  std::optional<bool> anomalous;
  int steps = 0;
  std::optional<double> alpha;
  double lambda = 0.0;
  std::optional<std::size_t> nun_frame;
  double y_q = 0.0;
  double y_c = 0.0;
  /// Non-empty when generation threw; such records count as invalid and are
  /// left out of the odiff and anomaly statistics.
  std::string error;
  friend bool operator==(const QueryRecord&, const QueryRecord&) = default;
};

struct Stat {
  double mean = 0.0;
  /// Population standard deviation.
  double stddev = 0.0;
  std::size_t n = 0;
  friend bool operator==(const Stat&, const Stat&) = default;
};

Stat describe(std::span<const double> values);

struct ArmSummary {
  std::string label;
  std::string model;
  cf::Method method = cf::Method::gradient;
  bool plausibility = true;
  std::size_t queries = 0;
  std::size_t valid = 0;
  std::size_t failures = 0;
  double validity_fraction = 0.0;
  /// Over every query that produced a counterfactual.
  Stat odiff, anomaly;
  /// Over valid counterfactuals only.
  Stat valid_odiff, valid_anomaly;
  std::optional<std::size_t> anomalous;
  std::optional<double> threshold;
};

struct CellSummary {
  std::string arm;
  std::size_t variable = 0;
  int sign = 1;
  std::size_t queries = 0;
  std::size_t valid = 0;
  double validity_fraction = 0.0;
  Stat odiff;
};

struct CdfTable {
  std::vector<double> thresholds;
  /// Per arm, valid counterfactuals with odiff <= each threshold.
  std::vector<std::pair<std::string, std::vector<std::size_t>>> counts;
};

struct CurvePoint {
  int step = 0;
  Stat loss;
};

struct RoundtripCurves {
  std::vector<CurvePoint> real;
  std::vector<CurvePoint> random;
};

struct ThresholdReport {
  std::string model;
  double threshold = 0.0;
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
  std::size_t train_size = 0;
  std::size_t heldout_size = 0;
};

struct ExperimentReport {
  nlohmann::json config;
  std::vector<std::string> warnings;
  std::vector<cf::CFQuery> queries;
  std::vector<QueryRecord> records;
  std::vector<ArmSummary> summaries;
  std::vector<CellSummary> cells;
  CdfTable cdf;
  std::vector<ThresholdReport> thresholds;
  std::optional<RoundtripCurves> roundtrip;
  std::optional<run::RunManifest> manifest;
};

/// Every arm on every query. Records are ordered by (arm, query) regardless
/// of `threads`; a throwing query is recorded, never propagated.
std::vector<QueryRecord> run_arms(const data::TrajectoryDataset& dataset, std::span<const cf::CFQuery> queries,
                                  std::span<const Arm> arms, const cf::CFOptions& options, int threads = 1);

/// Micro-averages recomputed from records, in arm order.
std::vector<ArmSummary> summarize(std::span<const QueryRecord> records, std::span<const Arm> arms);
std::vector<CellSummary> summarize_cells(std::span<const QueryRecord> records, std::span<const Arm> arms);

/// For each threshold t, the number of valid records with odiff <= t.
CdfTable proximity_cdf(std::span<const QueryRecord> records, std::span<const Arm> arms,
                       std::vector<double> thresholds = {});

/// Arms labeled NUN, InterpPt and Gradient for the configured methods.
std::vector<Arm> comparison_arms(const vae::JointVAE& model, const ExperimentConfig& config,
                                 std::optional<double> threshold = std::nullopt);
/// InterpPt and Gradient with and without the plausibility adjustment.
std::vector<Arm> plausibility_arms(const vae::JointVAE& model, const std::string& model_name,
                                   std::optional<double> threshold = std::nullopt);

ExperimentReport run_comparison(const vae::JointVAE& model, const data::TrajectoryDataset& dataset,
                                const ExperimentConfig& config, std::optional<double> threshold = std::nullopt);

ExperimentReport ablation_plausibility(const vae::JointVAE& model, const data::TrajectoryDataset& dataset,
                                       const ExperimentConfig& config, std::optional<double> threshold = std::nullopt);

/// Four-way grid {joint, reconstruction-only} x {adjusted, unadjusted} for
/// InterpPt and Gradient over identical queries. Throws ParameterError when
/// the models' modes are not joint and reconstruction-only.
ExperimentReport ablation_joint(const vae::JointVAE& joint, const vae::JointVAE& recon_only,
                                const data::TrajectoryDataset& dataset, const ExperimentConfig& config,
                                std::optional<double> joint_threshold = std::nullopt,
                                std::optional<double> recon_threshold = std::nullopt);

/// The full protocol on one dataset: anomaly thresholds per model from
/// corruption sets, then NUN/InterpPt/Gradient, the unadjusted InterpPt and
/// Gradient arms when ablation_plausibility is set, the reconstruction-only
/// arms when a twin is given and ablation_joint is set, and the roundtrip
/// curves when roundtrip counts are positive. All arms share one query set.
ExperimentReport evaluate(const vae::JointVAE& model, const data::TrajectoryDataset& dataset,
                          const ExperimentConfig& config, const vae::JointVAE* recon_only = nullptr);

// ---- plausibility studies -----------------------------------------------

/// Mean ELBO loss after k = 0..n_steps encode/decode/harden roundtrips,
/// starting from real frames and from decoded random latents
/// z = N(0, I) * U(0, 10).
RoundtripCurves roundtrip_elbo_study(const vae::JointVAE& model, const data::TrajectoryDataset& dataset, int n_real,
                                     int n_random, int n_steps, std::uint64_t seed, double beta = 1e-5);

/// Plausible: encoded train frames. Anomalous: the decoded midpoint of two
/// train frames after `options` edits, re-encoded, plus latent noise. One of
/// each per pair, interleaved. Zero pairs gives an empty set; requesting no
/// corruption at all labels everything plausible.
std::vector<measures::LabeledLatent> build_corruption_set(const vae::JointVAE& model,
                                                          const data::TrajectoryDataset& dataset, int n_pairs,
                                                          std::uint64_t seed, const CorruptionOptions& options = {});

/// Tunes on the first half of a seeded shuffle, scores the held-out half.
ThresholdReport fit_anomaly_threshold(const vae::JointVAE& model, std::span<const measures::LabeledLatent> set,
                                      std::uint64_t seed, double holdout_fraction = 0.5);

// ---- persistence ---------------------------------------------------------

nlohmann::json to_json(const ExperimentReport& report);

/// report.json (with manifest), summary.csv, cells.csv, records.csv,
/// cdf.csv and roundtrip.csv in `dir`; returns the written paths.
std::vector<std::filesystem::path> write_report(const ExperimentReport& report, const std::filesystem::path& dir);

/// Throws FormatError when report.json is missing, malformed or has no manifest.
nlohmann::json load_report(const std::filesystem::path& dir);

}  // namespace cfgen::exp
