#pragma once

// Trajectory frames with normalized outcome variables, an episode-level
// train/test split and JSON-lines persistence.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cfgen/agent.hpp"
#include "cfgen/envs.hpp"
#include "cfgen/features.hpp"
#include "cfgen/outcomes.hpp"
#include "json.hpp"

namespace cfgen::data {

struct Frame {
  int episode = 0;
  int step = 0;
  envs::Observation observation;
  int action = 0;
  double reward = 0.0;
  std::vector<double> q_values;
  OutcomeVector raw{};
  /// Normalized outcomes in [-1, 1] (test frames clipped).
  OutcomeVector outcome{};
  friend bool operator==(const Frame&, const Frame&) = default;
};

/// Fitted on the train split only.
struct OutcomeStatistics {
  OutcomeVector mean{};
  OutcomeVector stddev{};
  OutcomeVector min{};
  OutcomeVector max{};
  /// Range of the standardized value over the train split.
  double standardized_min = 0.0;
  double standardized_max = 0.0;
  /// Riskiness margin scale M used to compute the raw outcomes.
  double margin_scale = 1.0;
  /// Standard deviation of each normalized variable over the train split.
  OutcomeVector normalized_stddev{};
  friend bool operator==(const OutcomeStatistics&, const OutcomeStatistics&) = default;
};

void to_json(nlohmann::json& j, const OutcomeStatistics& s);
void from_json(const nlohmann::json& j, OutcomeStatistics& s);

/// Value: standardized, then min-max over the train split to [-1, 1].
/// Confidence and riskiness pass through. Throws DegenerateError when the
/// value column is constant.
OutcomeStatistics fit_outcome_statistics(std::span<const OutcomeVector> train_raw);

/// Normalizes one raw vector and clips every variable to [-1, 1]; reports
/// whether any clipping happened.
OutcomeVector normalize_outcome(const OutcomeVector& raw, const OutcomeStatistics& stats, bool* clipped = nullptr);

struct NormalizedOutcomes {
  std::vector<OutcomeVector> values;
  OutcomeStatistics statistics;
};
NormalizedOutcomes normalize_outcomes(std::span<const OutcomeVector> train_raw);

struct EpisodeSplit {
  std::vector<int> train;
  std::vector<int> test;
};

/// Shuffles episode ids with `seed` and keeps round(n * train_fraction) for
/// training, clamped so both sides are nonempty. Both lists come back sorted.
/// Throws SplitError for fewer than two episodes.
EpisodeSplit split_episodes(std::vector<int> episodes, double train_fraction, std::uint64_t seed);

struct TrajectoryDataset {
  envs::EnvConfig env;
  FeatureSchema schema;
  OutcomeStatistics statistics;
  std::vector<Frame> frames;
  std::vector<int> train_episodes;
  std::vector<int> test_episodes;
  double train_fraction = 0.95;
  std::uint64_t split_seed = 0;
  /// Test frames with at least one clipped outcome.
  std::size_t clipped_test_frames = 0;

  bool is_test(std::size_t frame) const;
  std::vector<std::size_t> train_indices() const;
  std::vector<std::size_t> test_indices() const;
  ad::Tensor features(std::size_t frame) const;

  friend bool operator==(const TrajectoryDataset&, const TrajectoryDataset&) = default;
};

/// Splits by episode, calibrates the margin scale on train frames, derives
/// the interestingness variables and normalizes them.
TrajectoryDataset build_dataset(const agent::TrajectorySet& trajectories, double temperature, std::uint64_t split_seed,
                                double train_fraction = 0.95);

void save_dataset(const TrajectoryDataset& dataset, const std::filesystem::path& path);
/// Throws FormatError on version mismatch, malformed or truncated files.
TrajectoryDataset load_dataset(const std::filesystem::path& path);

nlohmann::json observation_to_json(const envs::Observation& obs);
envs::Observation observation_from_json(const nlohmann::json& j, const FeatureSchema& schema);

}  // namespace cfgen::data
