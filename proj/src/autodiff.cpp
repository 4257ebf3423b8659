#include "cfgen/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfgen/errors.hpp"

namespace cfgen::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MapMat as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MapMat(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};
AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename F, typename D>
Var unary(Graph& g, Var x, F forward, D derivative) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = forward(xv[i]);
  Tensor y = out;
  return g.record(std::move(out), {x}, [x, y = std::move(y), derivative](Graph& gr, const Tensor& gout) {
    const Tensor& xv = gr.value(x);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = gout[i] * derivative(xv[i], y[i]);
    gr.accumulate(x, gx);
  });
}

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, k, ho, wo;
  int stride, pad;
};

// cols: [cin*k*k, ho*wo] for one sample.
void im2col(const double* x, const ConvGeometry& c, double* cols) {
  const std::size_t hw_out = c.ho * c.wo;
  for (std::size_t ci = 0; ci < c.cin; ++ci)
    for (std::size_t ky = 0; ky < c.k; ++ky)
      for (std::size_t kx = 0; kx < c.k; ++kx) {
        double* row = cols + ((ci * c.k + ky) * c.k + kx) * hw_out;
        for (std::size_t oy = 0; oy < c.ho; ++oy) {
          const long iy = static_cast<long>(oy) * c.stride - c.pad + static_cast<long>(ky);
          for (std::size_t ox = 0; ox < c.wo; ++ox) {
            const long ix = static_cast<long>(ox) * c.stride - c.pad + static_cast<long>(kx);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(c.h) && ix < static_cast<long>(c.w);
            row[oy * c.wo + ox] = inside ? x[(ci * c.h + iy) * c.w + ix] : 0.0;
          }
        }
      }
}

void col2im(const double* cols, const ConvGeometry& c, double* x) {
  const std::size_t hw_out = c.ho * c.wo;
  for (std::size_t ci = 0; ci < c.cin; ++ci)
    for (std::size_t ky = 0; ky < c.k; ++ky)
      for (std::size_t kx = 0; kx < c.k; ++kx) {
        const double* row = cols + ((ci * c.k + ky) * c.k + kx) * hw_out;
        for (std::size_t oy = 0; oy < c.ho; ++oy) {
          const long iy = static_cast<long>(oy) * c.stride - c.pad + static_cast<long>(ky);
          if (iy < 0 || iy >= static_cast<long>(c.h)) continue;
          for (std::size_t ox = 0; ox < c.wo; ++ox) {
            const long ix = static_cast<long>(ox) * c.stride - c.pad + static_cast<long>(kx);
            if (ix < 0 || ix >= static_cast<long>(c.w)) continue;
            x[(ci * c.h + iy) * c.w + ix] += row[oy * c.wo + ox];
          }
        }
      }
}

}  // namespace

// ---- Graph -----------------------------------------------------------------

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, std::nullopt});
  return Var{nodes_.size() - 1};
}

Var Graph::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, true, std::nullopt});
  return Var{nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::vector<Var> operands, BackwardFn fn) {
  bool needs = false;
  for (auto v : operands) {
    if (v.id >= nodes_.size()) throw ContractError("operand is not on this graph");
    needs = needs || nodes_[v.id].requires_grad;
  }
  if (!value.all_finite()) throw ContractError("op produced a non-finite value");
  nodes_.push_back(Node{std::move(value), std::move(operands), needs ? std::move(fn) : nullptr, needs, std::nullopt});
  return Var{nodes_.size() - 1};
}

void Graph::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (g.size() != n.value.size()) throw DimensionError("gradient size mismatch in accumulate");
  if (!n.grad) {
    n.grad = Tensor(n.value.shape(), std::vector<double>(g.data().begin(), g.data().end()));
    return;
  }
  auto dst = n.grad->data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Graph::backward(Var seed) {
  const Node& s = nodes_.at(seed.id);
  if (s.value.size() != 1) throw ContractError("backward seed must be a scalar, got " + shape_string(s.value.shape()));
  for (auto& n : nodes_) n.grad.reset();
  if (!s.requires_grad) return;
  nodes_[seed.id].grad = Tensor(s.value.shape(), 1.0);
  for (std::size_t i = seed.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.grad || !n.backward) continue;
    // Operands precede the node, so the rule never writes to n.grad.
    n.backward(*this, *n.grad);
  }
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.grad ? *n.grad : Tensor(n.value.shape(), 0.0);
}

// ---- dense layers ------------------------------------------------------------

Var linear(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1)
    throw DimensionError("linear expects x[B,in], W[in,out], b[out]");
  const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
  if (wv.dim(0) != in || bv.dim(0) != out)
    throw DimensionError("linear: " + shape_string(xv.shape()) + " x " + shape_string(wv.shape()) + " + " +
                         shape_string(bv.shape()) + " do not conform");
  Tensor y({batch, out});
  auto ym = as_matrix(y, batch, out);
  ym.noalias() = as_matrix(xv, batch, in) * as_matrix(wv, in, out);
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data().data(), static_cast<Eigen::Index>(out));
  return g.record(std::move(y), {x, w, b}, [x, w, b, batch, in, out](Graph& gr, const Tensor& gout) {
    auto gm = as_matrix(gout, batch, out);
    if (gr.requires_grad(x)) {
      Tensor gx({batch, in});
      as_matrix(gx, batch, in).noalias() = gm * as_matrix(gr.value(w), in, out).transpose();
      gr.accumulate(x, gx);
    }
    if (gr.requires_grad(w)) {
      Tensor gw({in, out});
      as_matrix(gw, in, out).noalias() = as_matrix(gr.value(x), batch, in).transpose() * gm;
      gr.accumulate(w, gw);
    }
    if (gr.requires_grad(b)) {
      Tensor gb({out});
      Eigen::Map<Eigen::RowVectorXd>(gb.data().data(), static_cast<Eigen::Index>(out)) = gm.colwise().sum();
      gr.accumulate(b, gb);
    }
  });
}

Var conv2d(Graph& g, Var x, Var kernel, Var bias, int stride, int padding) {
  if (stride <= 0) throw ParameterError("conv2d stride must be positive");
  if (padding < 0) throw ParameterError("conv2d padding must be nonnegative");
  const Tensor& xv = g.value(x);
  const Tensor& kv = g.value(kernel);
  const Tensor& bv = g.value(bias);
  if (xv.rank() != 4 || kv.rank() != 4 || bv.rank() != 1)
    throw DimensionError("conv2d expects x[B,C,H,W], kernel[Cout,Cin,K,K], bias[Cout]");
  if (kv.dim(1) != xv.dim(1) || kv.dim(2) != kv.dim(3) || bv.dim(0) != kv.dim(0))
    throw DimensionError("conv2d: channel counts do not conform: x" + shape_string(xv.shape()) + " kernel" +
                         shape_string(kv.shape()));
  ConvGeometry c{};
  c.batch = xv.dim(0);
  c.cin = xv.dim(1);
  c.h = xv.dim(2);
  c.w = xv.dim(3);
  c.cout = kv.dim(0);
  c.k = kv.dim(2);
  c.stride = stride;
  c.pad = padding;
  const long span_h = static_cast<long>(c.h) + 2L * padding - static_cast<long>(c.k);
  const long span_w = static_cast<long>(c.w) + 2L * padding - static_cast<long>(c.k);
  if (span_h < 0 || span_w < 0) throw DimensionError("conv2d kernel larger than padded input");
  c.ho = static_cast<std::size_t>(span_h / stride + 1);
  c.wo = static_cast<std::size_t>(span_w / stride + 1);

  const std::size_t patch = c.cin * c.k * c.k, hw_out = c.ho * c.wo;
  std::vector<double> cols(c.batch * patch * hw_out);
  Tensor y({c.batch, c.cout, c.ho, c.wo});
  const auto km = as_matrix(kv, c.cout, patch);
  for (std::size_t n = 0; n < c.batch; ++n) {
    double* cn = cols.data() + n * patch * hw_out;
    im2col(xv.data().data() + n * c.cin * c.h * c.w, c, cn);
    MapMat yn(y.data().data() + n * c.cout * hw_out, static_cast<Eigen::Index>(c.cout),
              static_cast<Eigen::Index>(hw_out));
    yn.noalias() = km * ConstMapMat(cn, static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(hw_out));
    yn.colwise() += Eigen::Map<const Eigen::VectorXd>(bv.data().data(), static_cast<Eigen::Index>(c.cout));
  }
  return g.record(std::move(y), {x, kernel, bias},
                  [x, kernel, bias, c, cols = std::move(cols)](Graph& gr, const Tensor& gout) {
                    const std::size_t patch = c.cin * c.k * c.k, hw_out = c.ho * c.wo;
                    const bool need_x = gr.requires_grad(x);
                    const bool need_k = gr.requires_grad(kernel);
                    const bool need_b = gr.requires_grad(bias);
                    Tensor gk({c.cout, c.cin, c.k, c.k});
                    Tensor gb({c.cout});
                    Tensor gx(gr.value(x).shape());
                    auto gkm = as_matrix(gk, c.cout, patch);
                    const auto km = as_matrix(gr.value(kernel), c.cout, patch);
                    RowMat dcols(static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(hw_out));
                    for (std::size_t n = 0; n < c.batch; ++n) {
                      ConstMapMat gn(gout.data().data() + n * c.cout * hw_out, static_cast<Eigen::Index>(c.cout),
                                     static_cast<Eigen::Index>(hw_out));
                      ConstMapMat cn(cols.data() + n * patch * hw_out, static_cast<Eigen::Index>(patch),
                                     static_cast<Eigen::Index>(hw_out));
                      if (need_k) gkm.noalias() += gn * cn.transpose();
                      if (need_b)
                        Eigen::Map<Eigen::VectorXd>(gb.data().data(), static_cast<Eigen::Index>(c.cout)) +=
                            gn.rowwise().sum();
                      if (need_x) {
                        dcols.noalias() = km.transpose() * gn;
                        col2im(dcols.data(), c, gx.data().data() + n * c.cin * c.h * c.w);
                      }
                    }
                    if (need_x) gr.accumulate(x, gx);
                    if (need_k) gr.accumulate(kernel, gk);
                    if (need_b) gr.accumulate(bias, gb);
                  });
}

// ---- elementwise -------------------------------------------------------------

Var relu(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Var activation(Graph& g, Var x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return relu(g, x);
    case Activation::tanh:
      return tanh(g, x);
    case Activation::sigmoid:
      return sigmoid(g, x);
  }
  throw ParameterError("unknown activation");
}

Var exp(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var square(Graph& g, Var x) {
  return unary(
      g, x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var scale(Graph& g, Var x, double c) {
  return unary(
      g, x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var softmax(Graph& g, Var x, std::size_t axis) {
  const Tensor& xv = g.value(x);
  const AxisSplit s = split_axis(xv.shape(), axis);
  Tensor y(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.n * s.inner + i;
      double mx = xv[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) z += (y[base + k * s.inner] = std::exp(xv[base + k * s.inner] - mx));
      for (std::size_t k = 0; k < s.n; ++k) y[base + k * s.inner] /= z;
    }
  Tensor yc = y;
  return g.record(std::move(y), {x}, [x, s, y = std::move(yc)](Graph& gr, const Tensor& gout) {
    Tensor gx(y.shape());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.n * s.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < s.n; ++k) dot += gout[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.n; ++k) {
          const std::size_t j = base + k * s.inner;
          gx[j] = y[j] * (gout[j] - dot);
        }
      }
    gr.accumulate(x, gx);
  });
}

Var add(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "add");
  Tensor y = g.value(a);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += g.value(b)[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, const Tensor& gout) {
    gr.accumulate(a, gout);
    gr.accumulate(b, gout);
  });
}

Var sub(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "sub");
  Tensor y = g.value(a);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= g.value(b)[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, const Tensor& gout) {
    gr.accumulate(a, gout);
    if (gr.requires_grad(b)) {
      Tensor gb = gout;
      for (auto& v : gb.data()) v = -v;
      gr.accumulate(b, gb);
    }
  });
}

Var mul(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "mul");
  Tensor y = g.value(a);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= g.value(b)[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& gr, const Tensor& gout) {
    const Tensor& av = gr.value(a);
    const Tensor& bv = gr.value(b);
    if (gr.requires_grad(a)) {
      Tensor ga(av.shape());
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = gout[i] * bv[i];
      gr.accumulate(a, ga);
    }
    if (gr.requires_grad(b)) {
      Tensor gb(bv.shape());
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = gout[i] * av[i];
      gr.accumulate(b, gb);
    }
  });
}

Var sum(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  const double total = std::accumulate(xv.data().begin(), xv.data().end(), 0.0);
  return g.record(Tensor::scalar(total), {x}, [x](Graph& gr, const Tensor& gout) {
    gr.accumulate(x, Tensor(gr.value(x).shape(), gout.item()));
  });
}

Var mean(Graph& g, Var x) {
  const double n = static_cast<double>(g.value(x).size());
  return scale(g, sum(g, x), 1.0 / n);
}

Var l2_norm(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  double sq = 0.0;
  for (double v : xv.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  return g.record(Tensor::scalar(norm), {x}, [x, norm](Graph& gr, const Tensor& gout) {
    const Tensor& xv = gr.value(x);
    Tensor gx(xv.shape(), 0.0);
    if (norm > 0.0)
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = gout.item() * xv[i] / norm;
    gr.accumulate(x, gx);
  });
}

// ---- structural ---------------------------------------------------------------

Var reshape(Graph& g, Var x, Shape shape) {
  Tensor y = g.value(x).reshaped(std::move(shape));
  return g.record(std::move(y), {x}, [x](Graph& gr, const Tensor& gout) {
    gr.accumulate(x, gout.reshaped(gr.value(x).shape()));
  });
}

Var concat(Graph& g, std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = g.value(parts[0]).shape();
  std::vector<std::size_t> widths;
  Shape out_shape = first;
  out_shape.at(axis) = 0;
  for (Var p : parts) {
    const Shape& s = g.value(p).shape();
    if (s.size() != first.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) throw DimensionError("concat: non-axis extents differ");
    widths.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_axis(out_shape, axis);
  Tensor y(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& pv = g.value(parts[p]);
    const std::size_t block = widths[p] * os.inner;
    for (std::size_t o = 0; o < os.outer; ++o)
      std::copy_n(pv.data().data() + o * block, block, y.data().data() + o * os.n * os.inner + offset);
    offset += block;
  }
  std::vector<Var> operands(parts.begin(), parts.end());
  return g.record(std::move(y), operands, [operands, widths, os](Graph& gr, const Tensor& gout) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < operands.size(); ++p) {
      const std::size_t block = widths[p] * os.inner;
      if (gr.requires_grad(operands[p])) {
        Tensor gp(gr.value(operands[p]).shape());
        for (std::size_t o = 0; o < os.outer; ++o)
          std::copy_n(gout.data().data() + o * os.n * os.inner + offset, block, gp.data().data() + o * block);
        gr.accumulate(operands[p], gp);
      }
      offset += block;
    }
  });
}

Var slice(Graph& g, Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& xv = g.value(x);
  const AxisSplit s = split_axis(xv.shape(), axis);
  if (begin >= end || end > s.n) throw DimensionError("slice bounds out of range");
  Shape out_shape = xv.shape();
  out_shape[axis] = end - begin;
  Tensor y(out_shape);
  const std::size_t block = (end - begin) * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv.data().data() + o * s.n * s.inner + begin * s.inner, block, y.data().data() + o * block);
  return g.record(std::move(y), {x}, [x, s, begin, block](Graph& gr, const Tensor& gout) {
    Tensor gx(gr.value(x).shape(), 0.0);
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(gout.data().data() + o * block, block, gx.data().data() + o * s.n * s.inner + begin * s.inner);
    gr.accumulate(x, gx);
  });
}

Var detach(Graph& g, Var x) { return g.constant(g.value(x)); }

// ---- losses ---------------------------------------------------------------------

Var loss_mse(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "loss_mse");
  return mean(g, square(g, sub(g, a, b)));
}

Var loss_categorical(Graph& g, Var logits, std::span<const int> targets, std::size_t axis) {
  const Tensor& lv = g.value(logits);
  const AxisSplit s = split_axis(lv.shape(), axis);
  const std::size_t positions = s.outer * s.inner;
  if (targets.size() != positions)
    throw DimensionError("loss_categorical: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(positions) + " positions");
  Tensor probs(lv.shape());
  double total = 0.0;
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const int t = targets[o * s.inner + i];
      if (t < 0 || static_cast<std::size_t>(t) >= s.n) throw DimensionError("loss_categorical: class out of range");
      const std::size_t base = o * s.n * s.inner + i;
      double mx = lv[base];
      for (std::size_t k = 1; k < s.n; ++k) mx = std::max(mx, lv[base + k * s.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) z += std::exp(lv[base + k * s.inner] - mx);
      const double log_z = mx + std::log(z);
      for (std::size_t k = 0; k < s.n; ++k) probs[base + k * s.inner] = std::exp(lv[base + k * s.inner] - log_z);
      total += log_z - lv[base + static_cast<std::size_t>(t) * s.inner];
    }
  const double n = static_cast<double>(positions);
  std::vector<int> tgt(targets.begin(), targets.end());
  return g.record(Tensor::scalar(total / n), {logits},
                  [logits, s, n, probs = std::move(probs), tgt = std::move(tgt)](Graph& gr, const Tensor& gout) {
                    Tensor gl = probs;
                    for (std::size_t o = 0; o < s.outer; ++o)
                      for (std::size_t i = 0; i < s.inner; ++i)
                        gl[o * s.n * s.inner + static_cast<std::size_t>(tgt[o * s.inner + i]) * s.inner + i] -= 1.0;
                    const double c = gout.item() / n;
                    for (auto& v : gl.data()) v *= c;
                    gr.accumulate(logits, gl);
                  });
}

Var gaussian_kl(Graph& g, Var mu, Var logvar) {
  const Tensor& m = g.value(mu);
  const Tensor& lv = g.value(logvar);
  require_same_shape(m, lv, "gaussian_kl");
  const double rows = static_cast<double>(m.size() / m.shape().back());
  double total = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) total += 0.5 * (m[i] * m[i] + std::exp(lv[i]) - 1.0 - lv[i]);
  return g.record(Tensor::scalar(total / rows), {mu, logvar}, [mu, logvar, rows](Graph& gr, const Tensor& gout) {
    const Tensor& m = gr.value(mu);
    const Tensor& lv = gr.value(logvar);
    const double c = gout.item() / rows;
    if (gr.requires_grad(mu)) {
      Tensor gm(m.shape());
      for (std::size_t i = 0; i < gm.size(); ++i) gm[i] = c * m[i];
      gr.accumulate(mu, gm);
    }
    if (gr.requires_grad(logvar)) {
      Tensor gl(lv.shape());
      for (std::size_t i = 0; i < gl.size(); ++i) gl[i] = c * 0.5 * (std::exp(lv[i]) - 1.0);
      gr.accumulate(logvar, gl);
    }
  });
}

// ---- gradient checking ----------------------------------------------------------

Tensor numeric_gradient(const ScalarFn& f, const Tensor& x, double step, std::span<const std::size_t> coordinates) {
  auto eval = [&](const Tensor& at) {
    Graph g;
    return g.value(f(g, g.constant(at))).item();
  };
  Tensor grad(x.shape(), 0.0);
  std::vector<std::size_t> coords(coordinates.begin(), coordinates.end());
  if (coords.empty()) {
    coords.resize(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  }
  Tensor probe = x;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = eval(probe);
    probe[i] = orig - step;
    const double down = eval(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

double grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& options) {
  Graph g;
  Var xv = g.variable(x);
  Var y = f(g, xv);
  g.backward(y);
  const Tensor analytic = g.grad(xv);
  const Tensor numeric = numeric_gradient(f, x, options.step, options.coordinates);
  std::vector<std::size_t> coords = options.coordinates;
  if (coords.empty()) {
    coords.resize(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
  }
  double worst = 0.0;
  for (std::size_t i : coords) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), options.floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace cfgen::ad
