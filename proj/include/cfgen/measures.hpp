#pragma once

// Counterfactual quality measures: observational difference, the validity
// predicate and the reconstruction-roundtrip anomaly score.

#include <cstddef>
#include <span>
#include <vector>

#include "cfgen/features.hpp"
#include "cfgen/jvae.hpp"
#include "cfgen/outcomes.hpp"
#include "json.hpp"

namespace cfgen::measures {

enum class VariableKind { numeric, categorical };

struct ValiditySpec {
  std::size_t variable = 0;
  int sign = 1;
  double epsilon = 0.5;
  VariableKind kind = VariableKind::numeric;
  friend bool operator==(const ValiditySpec&, const ValiditySpec&) = default;
};

void to_json(nlohmann::json& j, const ValiditySpec& s);
void from_json(const nlohmann::json& j, ValiditySpec& s);

/// Throws ParameterError for an out-of-range variable, a sign other than
/// +-1 or a nonpositive numeric margin.
void check_spec(const ValiditySpec& spec);

/// Numeric: s * (y_c[i] - y_q[i]) >= eps. Categorical: y_c[i] != y_q[i].
bool validity(const OutcomeVector& y_c, const OutcomeVector& y_q, const ValiditySpec& spec);

/// One per categorical cell whose argmax differs, plus |a - b| / W per
/// numeric cell. Throws SchemaError when either tensor does not fit `schema`.
double odiff(const ad::Tensor& a, const ad::Tensor& b, const FeatureSchema& schema);

/// Cells where the two tensors differ (any categorical argmax or numeric value).
std::vector<bool> diff_mask(const ad::Tensor& a, const ad::Tensor& b, const FeatureSchema& schema);

/// odiff(dec(z), dec(enc(dec(z)))) on hardened decodings.
double anomaly_score(const vae::JointVAE& model, const vae::Latent& z);

struct QualityReport {
  double odiff = 0.0;
  double anomaly = 0.0;
  bool valid = false;
};

struct LabeledScore {
  double score = 0.0;
  bool anomalous = false;
};

/// Scores strictly above `threshold` are classified anomalous.
struct ThresholdFit {
  double threshold = 0.0;
  double accuracy = 0.0;
};

double threshold_accuracy(std::span<const LabeledScore> set, double threshold);

/// Threshold maximizing accuracy; candidates are midpoints between
/// consecutive distinct scores plus both ends, ties to the lowest.
/// Throws DegenerateError when only one label is present.
ThresholdFit tune_threshold(std::span<const LabeledScore> set);

struct LabeledLatent {
  vae::Latent z;
  bool anomalous = false;
};

ThresholdFit tune_anomaly_threshold(const vae::JointVAE& model, std::span<const LabeledLatent> labeled);

}  // namespace cfgen::measures
