#pragma once

// Dense building blocks with explicit backward passes. Activations are
// (tokens x features) row-major matrices; weights are (out x in).

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sef/errors.hpp"
#include "sef/rng.hpp"

namespace sef::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
Mat<T> zeros_like(const Mat<T>& m) {
  return Mat<T>::Zero(m.rows(), m.cols());
}

template <class T>
Mat<T> randn(Rng& rng, int rows, int cols, double stddev) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
  return m;
}

template <class T>
Mat<T> rand_uniform(Rng& rng, int rows, int cols, double bound) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return m;
}

// ---------------------------------------------------------------------------
// Parameter structs. Each exposes visit(f) with f(name, Mat&) so generic code
// can zero, copy, serialize and flatten them.

template <class T>
struct LayerNormP {
  using Scalar = T;
  Mat<T> gamma, beta;  // 1 x D

  static LayerNormP init(int dim) { return {Mat<T>::Ones(1, dim), Mat<T>::Zero(1, dim)}; }
  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <class T>
struct LinearP {
  using Scalar = T;
  Mat<T> w;  // out x in
  Mat<T> b;  // 1 x out

  static LinearP init(Rng& rng, int in, int out, double gain = 1.0) {
    return {randn<T>(rng, out, in, gain / std::sqrt(static_cast<double>(in))), Mat<T>::Zero(1, out)};
  }
  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + ".w", w);
    f(prefix + ".b", b);
  }
};

// Low-rank delta (alpha / r) * B * A on a frozen (out x in) weight.
template <class T>
struct LoraP {
  using Scalar = T;
  Mat<T> a;  // r x in
  Mat<T> b;  // out x r, zero at init

  static LoraP init(Rng& rng, int in, int out, int rank) {
    return {rand_uniform<T>(rng, rank, in, 1.0 / std::sqrt(static_cast<double>(in))), Mat<T>::Zero(out, rank)};
  }
  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(prefix + ".a", a);
    f(prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// Layer norm

template <class T>
struct LnCache {
  Mat<T> xhat;
  ColVec<T> rstd;
};

template <class T>
Mat<T> layernorm_fwd(const Mat<T>& x, const LayerNormP<T>& p, LnCache<T>& c) {
  constexpr T eps = static_cast<T>(1e-5);
  c.xhat.resize(x.rows(), x.cols());
  c.rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mu = x.row(r).mean();
    const auto d = (x.row(r).array() - mu).eval();
    const T var = d.square().mean();
    const T rs = T(1) / std::sqrt(var + eps);
    c.rstd(r) = rs;
    c.xhat.row(r) = d * rs;
  }
  Mat<T> y = (c.xhat.array().rowwise() * p.gamma.row(0).array()).matrix();
  y.rowwise() += p.beta.row(0);
  return y;
}

template <class T>
Mat<T> layernorm_bwd(const Mat<T>& dy, const LayerNormP<T>& p, const LnCache<T>& c, LayerNormP<T>* g) {
  if (g) {
    g->gamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    g->beta += dy.colwise().sum();
  }
  const Mat<T> dxhat = (dy.array().rowwise() * p.gamma.row(0).array()).matrix();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T m1 = dxhat.row(r).mean();
    const T m2 = (dxhat.row(r).array() * c.xhat.row(r).array()).mean();
    dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Linear with optional LoRA

template <class T>
Mat<T> linear_fwd(const Mat<T>& x, const LinearP<T>& p, const LoraP<T>* lora, T scale, Mat<T>* lora_u) {
  Mat<T> y = x * p.w.transpose();
  y.rowwise() += p.b.row(0);
  if (lora) {
    Mat<T> u = x * lora->a.transpose();  // tokens x r
    y.noalias() += scale * (u * lora->b.transpose());
    if (lora_u) *lora_u = std::move(u);
  }
  return y;
}

// Accumulates parameter gradients into the non-null targets. Returns dx when
// need_dx is set, otherwise an empty matrix.
template <class T>
Mat<T> linear_bwd(const Mat<T>& dy, const Mat<T>& x, const LinearP<T>& p, LinearP<T>* g, const LoraP<T>* lora,
                  T scale, const Mat<T>* lora_u, LoraP<T>* lg, bool need_dx) {
  if (g) {
    g->w.noalias() += dy.transpose() * x;
    g->b += dy.colwise().sum();
  }
  Mat<T> dx;
  if (need_dx) dx = dy * p.w;
  if (lora && (lg || need_dx)) {
    const Mat<T> du = scale * (dy * lora->b);  // tokens x r
    if (lg) {
      lg->b.noalias() += scale * (dy.transpose() * *lora_u);
      lg->a.noalias() += du.transpose() * x;
    }
    if (need_dx) dx.noalias() += du * lora->a;
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
T gelu(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * x * x);
}

// Vectorized forms over whole matrices.
template <class T>
Mat<T> gelu(const Mat<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const auto t = (c * (x.array() + T(0.044715) * x.array().cube())).tanh();
  return (T(0.5) * x.array() * (T(1) + t)).matrix();
}

template <class T>
Mat<T> gelu_grad(const Mat<T>& x) {
  constexpr T c = static_cast<T>(0.7978845608028654);
  const auto x2 = x.array().square();
  const auto t = (c * x.array() * (T(1) + T(0.044715) * x2)).tanh().eval();
  return (T(0.5) * (T(1) + t) + T(0.5) * x.array() * (T(1) - t.square()) * c * (T(1) + T(3 * 0.044715) * x2)).matrix();
}

template <class T>
T sigmoid(T z) {
  return z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

// ---------------------------------------------------------------------------
// Multi-head self-attention core (projections handled by the caller).

template <class T>
struct AttnCache {
  std::vector<Mat<T>> probs;  // one tokens x tokens matrix per head
};

template <class T>
Mat<T> attention_fwd(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads, AttnCache<T>& c) {
  const int dh = static_cast<int>(q.cols()) / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> out(q.rows(), q.cols());
  c.probs.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Mat<T> s = scale * (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose());
    const ColVec<T> mx = s.rowwise().maxCoeff();
    s = (s.array().colwise() - mx.array()).exp().matrix();
    const ColVec<T> sum = s.rowwise().sum();
    s.array().colwise() /= sum.array();
    out.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    c.probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return out;
}

template <class T>
void attention_bwd(const Mat<T>& dout, const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int heads,
                   const AttnCache<T>& c, Mat<T>& dq, Mat<T>& dk, Mat<T>& dv) {
  const int dh = static_cast<int>(q.cols()) / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  dq.resize(q.rows(), q.cols());
  dk.resize(k.rows(), k.cols());
  dv.resize(v.rows(), v.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat<T>& p = c.probs[static_cast<std::size_t>(h)];
    const auto dO = dout.middleCols(h * dh, dh);
    const Mat<T> dp = dO * v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh).noalias() = p.transpose() * dO;
    const ColVec<T> rowdot = (dp.array() * p.array()).rowwise().sum();
    const Mat<T> ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix();
    dq.middleCols(h * dh, dh).noalias() = scale * (ds * k.middleCols(h * dh, dh));
    dk.middleCols(h * dh, dh).noalias() = scale * (ds.transpose() * q.middleCols(h * dh, dh));
  }
}

// ---------------------------------------------------------------------------
// Generic helpers over parameter structs (anything with visit()).

template <class P>
auto tensors(P& p) {
  std::vector<std::pair<std::string, Mat<typename P::Scalar>*>> out;
  p.visit([&](const std::string& name, Mat<typename P::Scalar>& m) { out.emplace_back(name, &m); }, "");
  return out;
}

template <class P>
P zeros_like_params(const P& p) {
  P z = p;
  z.visit([](const std::string&, auto& m) { m.setZero(); }, "");
  return z;
}

template <class P>
std::size_t param_count(const P& p) {
  P copy = p;
  std::size_t n = 0;
  copy.visit([&](const std::string&, auto& m) { n += static_cast<std::size_t>(m.size()); }, "");
  return n;
}

template <class P>
void set_zero(P& p) {
  p.visit([](const std::string&, auto& m) { m.setZero(); }, "");
}

// a += b, tensor by tensor.
template <class P>
void add_params(P& a, P& b) {
  auto ta = tensors(a), tb = tensors(b);
  for (std::size_t i = 0; i < ta.size(); ++i) *ta[i].second += *tb[i].second;
}

// Bitwise comparison. Works on copies since visit() is non-const.
template <class P>
bool params_equal(const P& a, const P& b) {
  P ca = a, cb = b;
  auto ta = tensors(ca), tb = tensors(cb);
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    const auto& x = *ta[i].second;
    const auto& y = *tb[i].second;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), sizeof(typename P::Scalar) * static_cast<std::size_t>(x.size())) != 0)
      return false;
  }
  return true;
}

// Scalar-type conversion between two instantiations of the same struct.
template <class Dst, class Src>
Dst cast_params(const Src& src) {
  Src s = src;
  Dst out;
  if constexpr (requires { out.reshape_like(s); }) out.reshape_like(s);
  auto ts = tensors(s), td = tensors(out);
  for (std::size_t i = 0; i < ts.size(); ++i) *td[i].second = ts[i].second->template cast<typename Dst::Scalar>();
  return out;
}

}  // namespace sef::nn
