#pragma once

// Counterfactual generators: nearest unlike neighbor retrieval, latent
// interpolation toward the NUN, and gradient traversal along an outcome head,
// each optionally followed by the roundtrip plausibility adjustment.

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfgen/dataset.hpp"
#include "cfgen/jvae.hpp"
#include "cfgen/measures.hpp"
#include "json.hpp"

namespace cfgen::cf {

enum class Method { nun, interpolate, gradient };
std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct CFQuery {
  /// Dataset frame the query came from, if any.
  std::optional<std::size_t> frame;
  ad::Tensor x_q;
  OutcomeVector y_q{};
  measures::ValiditySpec spec;
};

/// Indexed train-split frames.
struct CaseLibrary {
  FeatureSchema schema;
  std::vector<std::size_t> frames;
  std::vector<ad::Tensor> features;
  std::vector<OutcomeVector> outcomes;

  std::size_t size() const { return frames.size(); }
  static CaseLibrary from_dataset(const data::TrajectoryDataset& dataset);
};

/// Library position of argmin odiff(x_q, x_c) subject to validity on stored
/// outcomes, ties to the lowest position; nullopt when no frame qualifies.
/// Throws ContractError on an empty library.
std::optional<std::size_t> find_nun(const CFQuery& query, const CaseLibrary& library);

struct CFOptions {
  bool plausibility = true;
  double lambda1 = 5.0;
  double lambda2 = 1.0;
  int max_steps = 1000;
  /// Interpolation grid: alpha in {0, 1/n, ..., 1}.
  int alpha_steps = 100;
  /// Interpolation adjustment grid: lambda_grid points over [0, lambda_max].
  int lambda_grid = 21;
  double lambda_max = 2.0;
  friend bool operator==(const CFOptions&, const CFOptions&) = default;
};

void to_json(nlohmann::json& j, const CFOptions& o);
void from_json(const nlohmann::json& j, CFOptions& o);

struct CFResult {
  Method method = Method::gradient;
  /// ok, degenerate, already_valid, nun_fallback, max_steps, not_found.
  std::string status = "ok";
  ad::Tensor x_c;
  std::vector<vae::Latent> path;
  int steps = 0;
  std::optional<double> alpha;
  double lambda = 0.0;
  bool valid = false;
  /// Validity before the plausibility adjustment (interpolation only).
  std::optional<bool> unadjusted_valid;
  OutcomeVector y_q{};
  OutcomeVector y_c{};
  measures::ValiditySpec spec;
  measures::QualityReport quality;
  std::optional<std::size_t> nun_frame;
};

nlohmann::json to_json(const CFResult& r, const FeatureSchema& schema, bool include_path = true);

class TraversalError : public std::runtime_error {
 public:
  TraversalError(const std::string& what, std::vector<vae::Latent> path)
      : std::runtime_error(what), path_(std::move(path)) {}
  const std::vector<vae::Latent>& path() const { return path_; }

 private:
  std::vector<vae::Latent> path_;
};

struct PlausibilityGradient {
  double distance = 0.0;
  vae::Latent gradient;  // of the distance
};

/// ||soft(dec(z)) - T|| and its gradient in z, where T = soft(dec(enc(harden(dec(z)))))
/// is held constant.
PlausibilityGradient plausibility_gradient(const vae::JointVAE& model, const vae::Latent& z);

/// z - lambda * gradient of the roundtrip distance.
vae::Latent plausibility_adjust(const vae::JointVAE& model, const vae::Latent& z, double lambda);

/// NUN as a counterfactual; valid comes from the stored outcomes.
CFResult nun_cf(const vae::JointVAE& model, const CFQuery& query, const CaseLibrary& library);

/// Throws ContractError when the NUN's stored outcome violates the criterion.
CFResult interpolate_cf(const vae::JointVAE& model, const CFQuery& query, const CaseLibrary& library,
                        std::size_t nun_position, const CFOptions& options = {});

/// Throws TraversalError on a non-finite gradient.
CFResult gradient_cf(const vae::JointVAE& model, const CFQuery& query, const CFOptions& options = {});

/// Runs `method`; NUN-based methods return status not_found when no NUN exists.
CFResult generate(const vae::JointVAE& model, const CFQuery& query, const CaseLibrary& library, Method method,
                  const CFOptions& options = {});

}  // namespace cfgen::cf
