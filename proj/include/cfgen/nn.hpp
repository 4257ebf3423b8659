#pragma once

// Parameter storage, initialization and the Adam optimizer shared by the
// value agent and the joint VAE.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "cfgen/autodiff.hpp"
#include "json.hpp"

namespace cfgen::nn {

struct ParameterInfo {
  std::string name;
  ad::Shape shape;
};

/// Ordered, named collection of parameter tensors.
class ParameterSet {
 public:
  std::size_t add(std::string name, ad::Tensor init);

  std::size_t count() const { return tensors_.size(); }
  std::size_t total_size() const;
  const ad::Tensor& operator[](std::size_t i) const { return tensors_.at(i); }
  ad::Tensor& operator[](std::size_t i) { return tensors_.at(i); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  std::vector<ParameterInfo> layout() const;

  /// Puts every parameter on `g`, as variables or as constants.
  std::vector<ad::Var> bind(ad::Graph& g, bool trainable) const;
  std::vector<ad::Tensor> gradients(const ad::Graph& g, const std::vector<ad::Var>& bound) const;

  /// Rounds every weight to the nearest float32 so that a float32 checkpoint
  /// reproduces the in-memory model exactly.
  void round_to_float32();
  /// FNV-1a over the raw bytes of the selected parameters (all if empty).
  std::uint64_t digest(const std::vector<std::size_t>& indices = {}) const;
  bool all_finite() const;

  /// Little-endian float32 blob in parameter order.
  void write_blob(std::ostream& os) const;
  void read_blob(std::istream& is);

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor> tensors_;
};

/// Glorot-uniform weights of the given shape; fan-in/out from the shape.
ad::Tensor glorot(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global-norm clip; <= 0 disables.
  double clip_norm = 5.0;
  /// Decoupled weight decay per step, scaled by the learning rate.
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(const ParameterSet& params, AdamOptions options = {});

  /// Applies one update. `mask`, when non-empty, selects which parameters move.
  void step(ParameterSet& params, const std::vector<ad::Tensor>& grads, const std::vector<bool>& mask = {});
  long steps() const { return t_; }

 private:
  AdamOptions options_;
  std::vector<ad::Tensor> m_, v_;
  long t_ = 0;
};

/// Checkpoint layout: one JSON header line, then the float32 weight blob.
/// The parameter layout and blob length are added to `header`.
void save_checkpoint(const std::filesystem::path& path, nlohmann::json header, const ParameterSet& params);

/// Reads the header line; leaves the stream positioned at the blob.
nlohmann::json read_checkpoint_header(std::istream& is, const std::string& expected_format);

/// Reads the blob into `params` after checking its layout against `header`.
void read_checkpoint_blob(std::istream& is, const nlohmann::json& header, ParameterSet& params);

}  // namespace cfgen::nn
