#pragma once

// Numeric encoding of observations. A feature tensor has shape [C, H, W]:
// categorical layers become one-hot channel groups, numeric layers a single
// channel normalized to [-1, 1]. Cartpole uses H = W = 1.

#include <cstddef>
#include <string>
#include <vector>

#include "cfgen/envs.hpp"
#include "cfgen/tensor.hpp"
#include "json.hpp"

namespace cfgen {

struct CategoricalLayer {
  std::string name;
  std::size_t first_channel = 0;
  std::size_t vocabulary = 0;
  friend bool operator==(const CategoricalLayer&, const CategoricalLayer&) = default;
};

struct NumericChannel {
  std::string name;
  std::size_t channel = 0;
  double lo = -1.0;  // raw value mapped to -1
  double hi = 1.0;   // raw value mapped to +1
  /// Interval width in encoded units used by odiff.
  double width = 2.0;
  bool integer = false;
  friend bool operator==(const NumericChannel&, const NumericChannel&) = default;
};

struct FeatureSchema {
  envs::EnvKind env = envs::EnvKind::gridworld;
  std::size_t height = 1;
  std::size_t width = 1;
  std::vector<CategoricalLayer> categorical;
  std::vector<NumericChannel> numeric;

  std::size_t channels() const;
  std::size_t cells() const { return height * width; }
  std::size_t size() const { return channels() * cells(); }
  ad::Shape shape() const { return {channels(), height, width}; }
  bool spatial() const { return cells() > 1; }

  friend bool operator==(const FeatureSchema&, const FeatureSchema&) = default;
};

void to_json(nlohmann::json& j, const FeatureSchema& s);
void from_json(const nlohmann::json& j, FeatureSchema& s);

FeatureSchema grid_schema(const envs::GridConfig& config);
FeatureSchema cartpole_schema();
FeatureSchema schema_for(const envs::EnvConfig& config);

/// One-hot categorical cells, min-max normalized numerics (clipped to bounds).
/// Throws SchemaError for out-of-vocabulary or mis-shaped observations.
ad::Tensor encode_observation(const envs::Observation& obs, const FeatureSchema& schema);

/// Per-cell argmax over categorical channels (ties to the lowest index) and
/// denormalized numerics; integer channels are rounded. Grid cells decoded
/// as empty carry strength 0, occupied cells at least 1.
envs::Observation decode_observation(const ad::Tensor& features, const FeatureSchema& schema);

/// encode(decode(t)): projects a decoder output onto the valid feature set.
ad::Tensor harden(const ad::Tensor& features, const FeatureSchema& schema);

/// Argmax class per cell for one categorical layer, ties to the lowest index.
std::vector<int> argmax_cells(const ad::Tensor& features, const FeatureSchema& schema, const CategoricalLayer& layer);

/// Adds a leading batch axis: [N, C, H, W].
ad::Tensor stack_features(const std::vector<ad::Tensor>& items);

}  // namespace cfgen
