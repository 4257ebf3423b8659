#include "cfgen/nn.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "cfgen/errors.hpp"

namespace cfgen::nn {

std::size_t ParameterSet::add(std::string name, ad::Tensor init) {
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(init));
  return tensors_.size() - 1;
}

std::size_t ParameterSet::total_size() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.size();
  return n;
}

std::vector<ParameterInfo> ParameterSet::layout() const {
  std::vector<ParameterInfo> out;
  for (std::size_t i = 0; i < tensors_.size(); ++i) out.push_back({names_[i], tensors_[i].shape()});
  return out;
}

std::vector<ad::Var> ParameterSet::bind(ad::Graph& g, bool trainable) const {
  std::vector<ad::Var> vars;
  vars.reserve(tensors_.size());
  for (const auto& t : tensors_) vars.push_back(trainable ? g.variable(t) : g.constant(t));
  return vars;
}

std::vector<ad::Tensor> ParameterSet::gradients(const ad::Graph& g, const std::vector<ad::Var>& bound) const {
  std::vector<ad::Tensor> grads;
  grads.reserve(bound.size());
  for (auto v : bound) grads.push_back(g.grad(v));
  return grads;
}

void ParameterSet::round_to_float32() {
  for (auto& t : tensors_)
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

std::uint64_t ParameterSet::digest(const std::vector<std::size_t>& indices) const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const ad::Tensor& t) {
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 1099511628211ULL;
      }
    }
  };
  if (indices.empty())
    for (const auto& t : tensors_) mix(t);
  else
    for (auto i : indices) mix(tensors_.at(i));
  return h;
}

bool ParameterSet::all_finite() const {
  for (const auto& t : tensors_)
    if (!t.all_finite()) return false;
  return true;
}

void ParameterSet::write_blob(std::ostream& os) const {
  for (const auto& t : tensors_)
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                             static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
      os.write(bytes, 4);
    }
}

void ParameterSet::read_blob(std::istream& is) {
  for (auto& t : tensors_)
    for (auto& v : t.data()) {
      unsigned char bytes[4];
      if (!is.read(reinterpret_cast<char*>(bytes), 4)) throw FormatError("weight blob truncated");
      const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                                 (static_cast<std::uint32_t>(bytes[2]) << 16) |
                                 (static_cast<std::uint32_t>(bytes[3]) << 24);
      v = static_cast<double>(std::bit_cast<float>(bits));
      if (!std::isfinite(v)) throw FormatError("weight blob holds a non-finite value");
    }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after weight blob");
}

ad::Tensor glorot(ad::Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  ad::Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Adam::Adam(const ParameterSet& params, AdamOptions options) : options_(options) {
  for (std::size_t i = 0; i < params.count(); ++i) {
    m_.emplace_back(params[i].shape(), 0.0);
    v_.emplace_back(params[i].shape(), 0.0);
  }
}

void Adam::step(ParameterSet& params, const std::vector<ad::Tensor>& grads, const std::vector<bool>& mask) {
  if (grads.size() != params.count()) throw DimensionError("Adam: one gradient per parameter required");
  double scale = 1.0;
  if (options_.clip_norm > 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i)
      if (mask.empty() || mask[i])
        for (double g : grads[i].data()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > options_.clip_norm) scale = options_.clip_norm / norm;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    auto p = params[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] * scale;
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * gj;
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * gj * gj;
      p[j] -= options_.learning_rate * ((m[j] / c1) / (std::sqrt(v[j] / c2) + options_.epsilon) + options_.weight_decay * p[j]);
    }
  }
}

void save_checkpoint(const std::filesystem::path& path, nlohmann::json header, const ParameterSet& params) {
  header["params"] = nlohmann::json::array();
  for (const auto& p : params.layout()) header["params"].push_back({{"name", p.name}, {"shape", p.shape}});
  header["blob_floats"] = params.total_size();
  header["blob_encoding"] = "float32-le";
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << header.dump() << '\n';
  params.write_blob(os);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

nlohmann::json read_checkpoint_header(std::istream& is, const std::string& expected_format) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("checkpoint is empty");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (header.value("format", "") != expected_format)
    throw FormatError("expected a " + expected_format + " checkpoint, got '" + header.value("format", "") + "'");
  if (header.value("version", 0) != 1) throw FormatError("unsupported checkpoint version");
  return header;
}

void read_checkpoint_blob(std::istream& is, const nlohmann::json& header, ParameterSet& params) {
  const auto& layout = header.at("params");
  if (layout.size() != params.count()) throw FormatError("checkpoint parameter count does not match architecture");
  for (std::size_t i = 0; i < params.count(); ++i)
    if (layout[i].at("name").get<std::string>() != params.name(i) ||
        layout[i].at("shape").get<ad::Shape>() != params[i].shape())
      throw FormatError("checkpoint parameter '" + params.name(i) + "' has a different shape");
  if (header.at("blob_floats").get<std::size_t>() != params.total_size())
    throw FormatError("checkpoint blob length does not match architecture");
  params.read_blob(is);
}

}  // namespace cfgen::nn
