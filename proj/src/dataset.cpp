#include "cfgen/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "cfgen/errors.hpp"

namespace cfgen::data {

void to_json(nlohmann::json& j, const OutcomeStatistics& s) {
  j = nlohmann::json{{"mean", s.mean},
                     {"stddev", s.stddev},
                     {"min", s.min},
                     {"max", s.max},
                     {"standardized_min", s.standardized_min},
                     {"standardized_max", s.standardized_max},
                     {"margin_scale", s.margin_scale},
                     {"normalized_stddev", s.normalized_stddev}};
}

void from_json(const nlohmann::json& j, OutcomeStatistics& s) {
  j.at("mean").get_to(s.mean);
  j.at("stddev").get_to(s.stddev);
  j.at("min").get_to(s.min);
  j.at("max").get_to(s.max);
  s.standardized_min = j.at("standardized_min").get<double>();
  s.standardized_max = j.at("standardized_max").get<double>();
  s.margin_scale = j.at("margin_scale").get<double>();
  j.at("normalized_stddev").get_to(s.normalized_stddev);
}

namespace {

OutcomeVector normalize_unclipped(const OutcomeVector& raw, const OutcomeStatistics& s) {
  OutcomeVector y = raw;
  const double z = (raw[0] - s.mean[0]) / s.stddev[0];
  y[0] = 2.0 * (z - s.standardized_min) / (s.standardized_max - s.standardized_min) - 1.0;
  return y;
}

}  // namespace

OutcomeStatistics fit_outcome_statistics(std::span<const OutcomeVector> train_raw) {
  if (train_raw.empty()) throw DegenerateError("outcome statistics need a nonempty train split");
  OutcomeStatistics s;
  const auto n = static_cast<double>(train_raw.size());
  for (std::size_t v = 0; v < kOutcomeCount; ++v) {
    double sum = 0.0, lo = train_raw[0][v], hi = train_raw[0][v];
    for (const auto& y : train_raw) {
      sum += y[v];
      lo = std::min(lo, y[v]);
      hi = std::max(hi, y[v]);
    }
    const double mean = sum / n;
    double sq = 0.0;
    for (const auto& y : train_raw) sq += (y[v] - mean) * (y[v] - mean);
    s.mean[v] = mean;
    s.stddev[v] = std::sqrt(sq / n);
    s.min[v] = lo;
    s.max[v] = hi;
  }
  if (!(s.stddev[0] > 0.0) || s.max[0] == s.min[0])
    throw DegenerateError("value variable has zero variance on the train split");
  s.standardized_min = (s.min[0] - s.mean[0]) / s.stddev[0];
  s.standardized_max = (s.max[0] - s.mean[0]) / s.stddev[0];
  for (std::size_t v = 0; v < kOutcomeCount; ++v) {
    double sum = 0.0, sq = 0.0;
    for (const auto& y : train_raw) sum += normalize_outcome(y, s)[v];
    const double mean = sum / n;
    for (const auto& y : train_raw) {
      const double d = normalize_outcome(y, s)[v] - mean;
      sq += d * d;
    }
    s.normalized_stddev[v] = std::sqrt(sq / n);
  }
  return s;
}

OutcomeVector normalize_outcome(const OutcomeVector& raw, const OutcomeStatistics& stats, bool* clipped) {
  OutcomeVector y = normalize_unclipped(raw, stats);
  bool any = false;
  for (auto& v : y) {
    const double c = std::clamp(v, -1.0, 1.0);
    any = any || c != v;
    v = c;
  }
  if (clipped) *clipped = any;
  return y;
}

NormalizedOutcomes normalize_outcomes(std::span<const OutcomeVector> train_raw) {
  NormalizedOutcomes out;
  out.statistics = fit_outcome_statistics(train_raw);
  out.values.reserve(train_raw.size());
  for (const auto& y : train_raw) out.values.push_back(normalize_outcome(y, out.statistics));
  return out;
}

EpisodeSplit split_episodes(std::vector<int> episodes, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ParameterError("train_fraction must lie in (0, 1)");
  std::sort(episodes.begin(), episodes.end());
  episodes.erase(std::unique(episodes.begin(), episodes.end()), episodes.end());
  const auto n = static_cast<long long>(episodes.size());
  if (n < 2)
    throw SplitError("need at least 2 episodes for a nonempty test split, got " + std::to_string(n));
  std::mt19937_64 rng(seed);
  std::shuffle(episodes.begin(), episodes.end(), rng);
  const long long k = std::clamp(std::llround(static_cast<double>(n) * train_fraction), 1LL, n - 1);
  EpisodeSplit split;
  split.train.assign(episodes.begin(), episodes.begin() + k);
  split.test.assign(episodes.begin() + k, episodes.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

bool TrajectoryDataset::is_test(std::size_t frame) const {
  return std::binary_search(test_episodes.begin(), test_episodes.end(), frames.at(frame).episode);
}

std::vector<std::size_t> TrajectoryDataset::train_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (!is_test(i)) out.push_back(i);
  return out;
}

std::vector<std::size_t> TrajectoryDataset::test_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (is_test(i)) out.push_back(i);
  return out;
}

ad::Tensor TrajectoryDataset::features(std::size_t frame) const {
  return encode_observation(frames.at(frame).observation, schema);
}

TrajectoryDataset build_dataset(const agent::TrajectorySet& trajectories, double temperature, std::uint64_t split_seed,
                                double train_fraction) {
  TrajectoryDataset d;
  d.env = trajectories.env;
  d.schema = schema_for(d.env);
  d.train_fraction = train_fraction;
  d.split_seed = split_seed;
  std::vector<int> ids;
  for (const auto& f : trajectories.frames) ids.push_back(f.episode);
  auto split = split_episodes(ids, train_fraction, split_seed);
  d.train_episodes = std::move(split.train);
  d.test_episodes = std::move(split.test);

  d.frames.reserve(trajectories.frames.size());
  for (const auto& t : trajectories.frames) {
    Frame f;
    f.episode = t.episode;
    f.step = t.step;
    f.observation = t.observation;
    f.action = t.action;
    f.reward = t.reward;
    f.q_values = t.q_values;
    d.frames.push_back(std::move(f));
  }
  const auto train = d.train_indices();
  std::vector<std::vector<double>> train_q;
  for (auto i : train) train_q.push_back(d.frames[i].q_values);
  const double margin = agent::calibrate_margin_scale(train_q);
  std::vector<OutcomeVector> train_raw;
  for (auto& f : d.frames) f.raw = agent::interestingness_from_q(f.q_values, temperature, margin);
  for (auto i : train) train_raw.push_back(d.frames[i].raw);
  d.statistics = fit_outcome_statistics(train_raw);
  d.statistics.margin_scale = margin;
  for (std::size_t i = 0; i < d.frames.size(); ++i) {
    bool clipped = false;
    d.frames[i].outcome = normalize_outcome(d.frames[i].raw, d.statistics, &clipped);
    if (clipped && d.is_test(i)) ++d.clipped_test_frames;
  }
  return d;
}

nlohmann::json observation_to_json(const envs::Observation& obs) {
  if (const auto* c = std::get_if<envs::CartpoleObservation>(&obs)) return {{"values", c->values}};
  const auto& g = std::get<envs::GridObservation>(obs);
  return {{"height", g.height}, {"width", g.width}, {"kinds", g.kinds}, {"strengths", g.strengths}};
}

envs::Observation observation_from_json(const nlohmann::json& j, const FeatureSchema& schema) {
  if (schema.env == envs::EnvKind::cartpole) return envs::CartpoleObservation{j.at("values").get<std::array<double, 4>>()};
  envs::GridObservation g;
  g.height = j.at("height").get<int>();
  g.width = j.at("width").get<int>();
  g.kinds = j.at("kinds").get<std::vector<int>>();
  g.strengths = j.at("strengths").get<std::vector<int>>();
  return g;
}

void save_dataset(const TrajectoryDataset& d, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write dataset " + path.string());
  nlohmann::json header{{"format", "cfgen-dataset"},
                        {"version", 1},
                        {"env", d.env},
                        {"schema", d.schema},
                        {"outcome_variables", {"value", "confidence", "riskiness"}},
                        {"statistics", d.statistics},
                        {"frame_count", d.frames.size()},
                        {"train_episodes", d.train_episodes},
                        {"test_episodes", d.test_episodes},
                        {"train_fraction", d.train_fraction},
                        {"split_seed", d.split_seed},
                        {"clipped_test_frames", d.clipped_test_frames}};
  os << header.dump() << '\n';
  for (const auto& f : d.frames) {
    nlohmann::json r{{"episode", f.episode}, {"step", f.step},       {"action", f.action},
                     {"reward", f.reward},   {"q", f.q_values},      {"raw", f.raw},
                     {"y", f.outcome},       {"obs", observation_to_json(f.observation)}};
    os << r.dump() << '\n';
  }
  if (!os) throw std::runtime_error("failed writing dataset " + path.string());
}

TrajectoryDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw FormatError("dataset file is empty");
  TrajectoryDataset d;
  std::size_t count = 0;
  try {
    const auto h = nlohmann::json::parse(line);
    if (h.value("format", "") != "cfgen-dataset") throw FormatError("not a dataset file");
    if (h.value("version", 0) != 1) throw FormatError("unsupported dataset version " + h.value("version", nlohmann::json()).dump());
    d.env = h.at("env").get<envs::EnvConfig>();
    d.schema = h.at("schema").get<FeatureSchema>();
    d.statistics = h.at("statistics").get<OutcomeStatistics>();
    count = h.at("frame_count").get<std::size_t>();
    d.train_episodes = h.at("train_episodes").get<std::vector<int>>();
    d.test_episodes = h.at("test_episodes").get<std::vector<int>>();
    d.train_fraction = h.at("train_fraction").get<double>();
    d.split_seed = h.at("split_seed").get<std::uint64_t>();
    d.clipped_test_frames = h.at("clipped_test_frames").get<std::size_t>();
    d.frames.reserve(count);
    while (d.frames.size() < count && std::getline(is, line)) {
      const auto r = nlohmann::json::parse(line);
      Frame f;
      f.episode = r.at("episode").get<int>();
      f.step = r.at("step").get<int>();
      f.action = r.at("action").get<int>();
      f.reward = r.at("reward").get<double>();
      f.q_values = r.at("q").get<std::vector<double>>();
      r.at("raw").get_to(f.raw);
      r.at("y").get_to(f.outcome);
      f.observation = observation_from_json(r.at("obs"), d.schema);
      d.frames.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed dataset: ") + e.what());
  }
  if (d.frames.size() != count)
    throw FormatError("dataset truncated: expected " + std::to_string(count) + " frames, found " +
                      std::to_string(d.frames.size()));
  if (std::getline(is, line) && !line.empty()) throw FormatError("dataset has trailing records");
  return d;
}

}  // namespace cfgen::data
