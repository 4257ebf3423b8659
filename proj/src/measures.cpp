#include "cfgen/measures.hpp"

#include <algorithm>
#include <cmath>

#include "cfgen/errors.hpp"

namespace cfgen::measures {

void to_json(nlohmann::json& j, const ValiditySpec& s) {
  j = nlohmann::json{{"variable", to_string(static_cast<OutcomeVariable>(s.variable))},
                     {"sign", s.sign},
                     {"epsilon", s.epsilon},
                     {"kind", s.kind == VariableKind::numeric ? "numeric" : "categorical"}};
}

void from_json(const nlohmann::json& j, ValiditySpec& s) {
  const auto& v = j.at("variable");
  s.variable = v.is_string() ? static_cast<std::size_t>(outcome_from_string(v.get<std::string>())) : v.get<std::size_t>();
  s.sign = j.at("sign").get<int>();
  s.epsilon = j.at("epsilon").get<double>();
  s.kind = j.value("kind", "numeric") == "categorical" ? VariableKind::categorical : VariableKind::numeric;
}

void check_spec(const ValiditySpec& spec) {
  if (spec.variable >= kOutcomeCount) throw ParameterError("outcome variable index out of range");
  if (spec.kind == VariableKind::numeric) {
    if (spec.sign != 1 && spec.sign != -1) throw ParameterError("sign must be +1 or -1");
    if (!(spec.epsilon > 0.0)) throw ParameterError("epsilon must be positive");
  }
}

bool validity(const OutcomeVector& y_c, const OutcomeVector& y_q, const ValiditySpec& spec) {
  check_spec(spec);
  const std::size_t i = spec.variable;
  if (spec.kind == VariableKind::categorical) return y_c[i] != y_q[i];
  return spec.sign * (y_c[i] - y_q[i]) >= spec.epsilon;
}

namespace {

void check_fits(const ad::Tensor& t, const FeatureSchema& schema) {
  if (t.size() != schema.size())
    throw SchemaError("tensor " + ad::shape_string(t.shape()) + " does not fit schema " +
                      ad::shape_string(schema.shape()));
}

}  // namespace

double odiff(const ad::Tensor& a, const ad::Tensor& b, const FeatureSchema& schema) {
  check_fits(a, schema);
  check_fits(b, schema);
  const std::size_t cells = schema.cells();
  double total = 0.0;
  for (const auto& layer : schema.categorical) {
    const auto ka = argmax_cells(a, schema, layer);
    const auto kb = argmax_cells(b, schema, layer);
    for (std::size_t c = 0; c < cells; ++c) total += ka[c] != kb[c] ? 1.0 : 0.0;
  }
  for (const auto& n : schema.numeric)
    for (std::size_t c = 0; c < cells; ++c) total += std::abs(a[n.channel * cells + c] - b[n.channel * cells + c]) / n.width;
  return total;
}

std::vector<bool> diff_mask(const ad::Tensor& a, const ad::Tensor& b, const FeatureSchema& schema) {
  check_fits(a, schema);
  check_fits(b, schema);
  const std::size_t cells = schema.cells();
  std::vector<bool> mask(cells, false);
  for (const auto& layer : schema.categorical) {
    const auto ka = argmax_cells(a, schema, layer);
    const auto kb = argmax_cells(b, schema, layer);
    for (std::size_t c = 0; c < cells; ++c) mask[c] = mask[c] || ka[c] != kb[c];
  }
  for (const auto& n : schema.numeric)
    for (std::size_t c = 0; c < cells; ++c)
      mask[c] = mask[c] || a[n.channel * cells + c] != b[n.channel * cells + c];
  return mask;
}

double anomaly_score(const vae::JointVAE& model, const vae::Latent& z) {
  const auto& schema = model.schema();
  const auto first = harden(model.decode(z), schema);
  const auto second = harden(model.decode(model.encode_mean(first)), schema);
  return odiff(first, second, schema);
}

double threshold_accuracy(std::span<const LabeledScore> set, double threshold) {
  if (set.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : set) hit += (s.score > threshold) == s.anomalous;
  return static_cast<double>(hit) / static_cast<double>(set.size());
}

ThresholdFit tune_threshold(std::span<const LabeledScore> set) {
  const auto positives = std::count_if(set.begin(), set.end(), [](const LabeledScore& s) { return s.anomalous; });
  if (positives == 0 || positives == static_cast<std::ptrdiff_t>(set.size()))
    throw DegenerateError("threshold tuning needs both plausible and anomalous examples");
  std::vector<double> scores;
  for (const auto& s : set) scores.push_back(s.score);
  std::sort(scores.begin(), scores.end());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<double> candidates{scores.front() - 1.0};
  for (std::size_t i = 0; i + 1 < scores.size(); ++i) candidates.push_back(0.5 * (scores[i] + scores[i + 1]));
  candidates.push_back(scores.back());
  ThresholdFit best{candidates.front(), -1.0};
  for (double t : candidates) {
    const double acc = threshold_accuracy(set, t);
    if (acc > best.accuracy) best = {t, acc};
  }
  return best;
}

ThresholdFit tune_anomaly_threshold(const vae::JointVAE& model, std::span<const LabeledLatent> labeled) {
  std::vector<LabeledScore> scored;
  scored.reserve(labeled.size());
  for (const auto& l : labeled) scored.push_back({anomaly_score(model, l.z), l.anomalous});
  return tune_threshold(scored);
}

}  // namespace cfgen::measures
