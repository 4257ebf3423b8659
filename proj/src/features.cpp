#include "cfgen/features.hpp"

#include <algorithm>
#include <cmath>

#include "cfgen/errors.hpp"

namespace cfgen {

std::size_t FeatureSchema::channels() const {
  std::size_t c = 0;
  for (const auto& l : categorical) c = std::max(c, l.first_channel + l.vocabulary);
  for (const auto& n : numeric) c = std::max(c, n.channel + 1);
  return c;
}

void to_json(nlohmann::json& j, const FeatureSchema& s) {
  j = nlohmann::json{{"env", envs::to_string(s.env)}, {"height", s.height}, {"width", s.width}};
  j["categorical"] = nlohmann::json::array();
  for (const auto& l : s.categorical)
    j["categorical"].push_back({{"name", l.name}, {"first_channel", l.first_channel}, {"vocabulary", l.vocabulary}});
  j["numeric"] = nlohmann::json::array();
  for (const auto& n : s.numeric)
    j["numeric"].push_back({{"name", n.name},
                            {"channel", n.channel},
                            {"lo", n.lo},
                            {"hi", n.hi},
                            {"width", n.width},
                            {"integer", n.integer}});
}

void from_json(const nlohmann::json& j, FeatureSchema& s) {
  s.env = envs::env_from_string(j.at("env").get<std::string>());
  s.height = j.at("height").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.categorical.clear();
  for (const auto& l : j.at("categorical"))
    s.categorical.push_back({l.at("name").get<std::string>(), l.at("first_channel").get<std::size_t>(),
                             l.at("vocabulary").get<std::size_t>()});
  s.numeric.clear();
  for (const auto& n : j.at("numeric"))
    s.numeric.push_back({n.at("name").get<std::string>(), n.at("channel").get<std::size_t>(), n.at("lo").get<double>(),
                         n.at("hi").get<double>(), n.at("width").get<double>(), n.at("integer").get<bool>()});
}

FeatureSchema grid_schema(const envs::GridConfig& config) {
  FeatureSchema s;
  s.env = envs::EnvKind::gridworld;
  s.height = static_cast<std::size_t>(config.height);
  s.width = static_cast<std::size_t>(config.width);
  s.categorical.push_back({"kind", 0, static_cast<std::size_t>(envs::kEntityKinds)});
  s.numeric.push_back({"strength", static_cast<std::size_t>(envs::kEntityKinds), 0.0,
                       static_cast<double>(config.max_strength), 2.0, true});
  return s;
}

FeatureSchema cartpole_schema() {
  const envs::CartpoleConfig c;
  FeatureSchema s;
  s.env = envs::EnvKind::cartpole;
  s.numeric = {{"position", 0, -c.track_bound, c.track_bound, 2.0, false},
               {"velocity", 1, -3.0, 3.0, 2.0, false},
               {"angle", 2, -c.angle_threshold, c.angle_threshold, 2.0, false},
               {"angular_velocity", 3, -3.5, 3.5, 2.0, false}};
  return s;
}

FeatureSchema schema_for(const envs::EnvConfig& config) {
  return config.kind == envs::EnvKind::cartpole ? cartpole_schema() : grid_schema(config.grid);
}

namespace {

double normalize(const NumericChannel& n, double raw) {
  const double v = 2.0 * (raw - n.lo) / (n.hi - n.lo) - 1.0;
  return std::clamp(v, -1.0, 1.0);
}

double denormalize(const NumericChannel& n, double v) {
  const double raw = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * (n.hi - n.lo) + n.lo;
  return n.integer ? std::round(raw) : raw;
}

void check_shape(const ad::Tensor& t, const FeatureSchema& schema) {
  if (t.shape() != schema.shape())
    throw SchemaError("feature tensor " + ad::shape_string(t.shape()) + " does not match schema " +
                      ad::shape_string(schema.shape()));
}

}  // namespace

ad::Tensor encode_observation(const envs::Observation& obs, const FeatureSchema& schema) {
  ad::Tensor t(schema.shape(), 0.0);
  const std::size_t cells = schema.cells();
  if (schema.env == envs::EnvKind::cartpole) {
    const auto* o = std::get_if<envs::CartpoleObservation>(&obs);
    if (!o) throw SchemaError("expected a cartpole observation");
    for (const auto& n : schema.numeric) t[n.channel] = normalize(n, o->values.at(n.channel));
    return t;
  }
  const auto* o = std::get_if<envs::GridObservation>(&obs);
  if (!o) throw SchemaError("expected a gridworld observation");
  if (static_cast<std::size_t>(o->height) != schema.height || static_cast<std::size_t>(o->width) != schema.width ||
      o->kinds.size() != cells || o->strengths.size() != cells)
    throw SchemaError("grid observation dimensions do not match schema");
  const CategoricalLayer& kind = schema.categorical.at(0);
  const NumericChannel& strength = schema.numeric.at(0);
  for (std::size_t i = 0; i < cells; ++i) {
    const int k = o->kinds[i];
    if (k < 0 || static_cast<std::size_t>(k) >= kind.vocabulary)
      throw SchemaError("entity kind " + std::to_string(k) + " outside vocabulary");
    const int s = o->strengths[i];
    if (s < strength.lo || s > strength.hi) throw SchemaError("strength " + std::to_string(s) + " outside vocabulary");
    t[(kind.first_channel + static_cast<std::size_t>(k)) * cells + i] = 1.0;
    t[strength.channel * cells + i] = normalize(strength, s);
  }
  return t;
}

std::vector<int> argmax_cells(const ad::Tensor& features, const FeatureSchema& schema, const CategoricalLayer& layer) {
  const std::size_t cells = schema.cells();
  std::vector<int> out(cells, 0);
  for (std::size_t i = 0; i < cells; ++i) {
    double best = features[layer.first_channel * cells + i];
    for (std::size_t k = 1; k < layer.vocabulary; ++k) {
      const double v = features[(layer.first_channel + k) * cells + i];
      if (v > best) {
        best = v;
        out[i] = static_cast<int>(k);
      }
    }
  }
  return out;
}

envs::Observation decode_observation(const ad::Tensor& features, const FeatureSchema& schema) {
  check_shape(features, schema);
  if (schema.env == envs::EnvKind::cartpole) {
    envs::CartpoleObservation o;
    for (const auto& n : schema.numeric) o.values.at(n.channel) = denormalize(n, features[n.channel]);
    return o;
  }
  const std::size_t cells = schema.cells();
  envs::GridObservation o;
  o.height = static_cast<int>(schema.height);
  o.width = static_cast<int>(schema.width);
  o.kinds = argmax_cells(features, schema, schema.categorical.at(0));
  const NumericChannel& strength = schema.numeric.at(0);
  o.strengths.resize(cells);
  for (std::size_t i = 0; i < cells; ++i) {
    const int s = static_cast<int>(denormalize(strength, features[strength.channel * cells + i]));
    o.strengths[i] = o.kinds[i] == static_cast<int>(envs::EntityKind::empty) ? 0 : std::max(1, s);
  }
  return o;
}

ad::Tensor harden(const ad::Tensor& features, const FeatureSchema& schema) {
  return encode_observation(decode_observation(features, schema), schema);
}

ad::Tensor stack_features(const std::vector<ad::Tensor>& items) {
  if (items.empty()) throw DimensionError("stack of zero feature tensors");
  ad::Shape shape = items.front().shape();
  shape.insert(shape.begin(), items.size());
  std::vector<double> data;
  data.reserve(ad::shape_size(shape));
  for (const auto& t : items) {
    if (t.shape() != items.front().shape()) throw DimensionError("stack of differently shaped tensors");
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return ad::Tensor(std::move(shape), std::move(data));
}

}  // namespace cfgen
