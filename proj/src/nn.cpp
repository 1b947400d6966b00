#include "gensfc/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gensfc/error.hpp"
#include "gensfc/rng.hpp"

namespace gensfc::nn {

Matrix::Matrix(int rows, int cols, double fill) : rows_(rows), cols_(cols) {
  if (rows < 0 || cols < 0) throw StructuralError("matrix: negative dimension");
  v_.assign(static_cast<std::size_t>(rows) * cols, fill);
}

Matrix::Matrix(int rows, int cols, std::vector<double> values)
    : rows_(rows), cols_(cols), v_(std::move(values)) {
  if (rows < 0 || cols < 0 || v_.size() != static_cast<std::size_t>(rows) * cols)
    throw StructuralError("matrix: value count does not match shape");
}

Matrix Matrix::row(std::span<const double> values) {
  return Matrix(1, static_cast<int>(values.size()), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double x) { std::fill(v_.begin(), v_.end(), x); }

Matrix& Matrix::operator+=(const Matrix& o) {
  if (rows_ != o.rows_ || cols_ != o.cols_) throw StructuralError("matrix +=: shape mismatch");
  for (std::size_t i = 0; i < v_.size(); ++i) v_[i] += o.v_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& x : v_) x *= s;
  return *this;
}

bool Matrix::all_finite() const {
  return std::all_of(v_.begin(), v_.end(), [](double x) { return std::isfinite(x); });
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw StructuralError(what);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    auto ci = c.row_span(i);
    for (int k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto bk = b.row_span(k);
      for (int j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_tn: row counts differ");
  Matrix c(a.cols(), b.cols());
  for (int k = 0; k < a.rows(); ++k) {
    const auto ak = a.row_span(k);
    const auto bk = b.row_span(k);
    for (int i = 0; i < a.cols(); ++i) {
      const double aki = ak[i];
      if (aki == 0.0) continue;
      auto ci = c.row_span(i);
      for (int j = 0; j < b.cols(); ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_nt: column counts differ");
  Matrix c(a.rows(), b.rows());
  for (int i = 0; i < a.rows(); ++i) {
    const auto ai = a.row_span(i);
    for (int j = 0; j < b.rows(); ++j) {
      const auto bj = b.row_span(j);
      double s = 0.0;
      for (int k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
      c(i, j) = s;
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

Matrix relu(const Matrix& x) {
  Matrix y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Matrix relu_backward(const Matrix& pre, const Matrix& upstream) {
  require(pre.rows() == upstream.rows() && pre.cols() == upstream.cols(),
          "relu_backward: shape mismatch");
  Matrix g = upstream;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(pre[i] > 0.0)) g[i] = 0.0;
  return g;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  if (logits.empty()) throw StructuralError("log_softmax: empty input");
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : logits) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : logits) s += std::exp(x - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

double softmax_xent(std::span<const double> logits, int target, std::vector<double>* grad) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
    throw StructuralError("softmax_xent: target out of range");
  const auto lp = log_softmax(logits);
  if (grad) {
    grad->resize(logits.size());
    for (std::size_t i = 0; i < lp.size(); ++i) (*grad)[i] = std::exp(lp[i]);
    (*grad)[static_cast<std::size_t>(target)] -= 1.0;
  }
  return -lp[static_cast<std::size_t>(target)];
}

Matrix dense_forward(const Matrix& x, const Matrix& w, const Matrix& b) {
  require(b.rows() == 1 && b.cols() == w.cols(), "dense_forward: bias shape");
  Matrix y = matmul(x, w);
  for (int i = 0; i < y.rows(); ++i) {
    auto yi = y.row_span(i);
    for (int j = 0; j < y.cols(); ++j) yi[j] += b[static_cast<std::size_t>(j)];
  }
  return y;
}

DenseGrads dense_backward(const Matrix& x, const Matrix& w, const Matrix& upstream) {
  require(upstream.rows() == x.rows() && upstream.cols() == w.cols(), "dense_backward: shape");
  DenseGrads g;
  g.dw = matmul_tn(x, upstream);
  g.db = Matrix(1, upstream.cols());
  for (int i = 0; i < upstream.rows(); ++i)
    for (int j = 0; j < upstream.cols(); ++j) g.db[static_cast<std::size_t>(j)] += upstream(i, j);
  g.dx = matmul_nt(upstream, w);
  return g;
}

Matrix normalized_adjacency(const Matrix& a) {
  require(a.rows() == a.cols(), "normalized_adjacency: matrix not square");
  const int n = a.rows();
  for (int i = 0; i < n; ++i) {
    if (a(i, i) != 0.0) throw StructuralError("normalized_adjacency: non-zero diagonal");
    for (int j = 0; j < n; ++j)
      if (a(i, j) != a(j, i)) throw StructuralError("normalized_adjacency: asymmetric input");
  }
  std::vector<double> inv_sqrt(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double d = 1.0;
    for (int j = 0; j < n; ++j) d += a(i, j);
    inv_sqrt[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(d);
  }
  Matrix out(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double aij = a(i, j) + (i == j ? 1.0 : 0.0);
      if (aij != 0.0)
        out(i, j) = inv_sqrt[static_cast<std::size_t>(i)] * aij * inv_sqrt[static_cast<std::size_t>(j)];
    }
  return out;
}

Matrix mean_pool(const Matrix& h) {
  require(h.rows() >= 1, "mean_pool: no rows");
  Matrix out(1, h.cols());
  for (int i = 0; i < h.rows(); ++i)
    for (int j = 0; j < h.cols(); ++j) out[static_cast<std::size_t>(j)] += h(i, j);
  out *= 1.0 / h.rows();
  return out;
}

Matrix mean_pool_backward(const Matrix& upstream, int rows) {
  require(upstream.rows() == 1 && rows >= 1, "mean_pool_backward: shape");
  Matrix g(rows, upstream.cols());
  const double inv = 1.0 / rows;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < upstream.cols(); ++j) g(i, j) = upstream[static_cast<std::size_t>(j)] * inv;
  return g;
}

Matrix gcn_forward(const Matrix& norm_adj, const Matrix& x, std::span<const Matrix* const> weights,
                   GcnCache* cache) {
  require(norm_adj.rows() == x.rows(), "gcn_forward: adjacency and features disagree");
  if (cache) {
    cache->aggregated.clear();
    cache->pre.clear();
  }
  Matrix h = x;
  for (const Matrix* w : weights) {
    Matrix agg = matmul(norm_adj, h);
    Matrix pre = matmul(agg, *w);
    h = relu(pre);
    if (cache) {
      cache->aggregated.push_back(std::move(agg));
      cache->pre.push_back(std::move(pre));
    }
  }
  return h;
}

Matrix gcn_backward(const Matrix& norm_adj, const GcnCache& cache,
                    std::span<const Matrix* const> weights, const Matrix& upstream,
                    std::span<Matrix* const> dweights) {
  require(weights.size() == cache.pre.size() && dweights.size() == weights.size(),
          "gcn_backward: layer count mismatch");
  Matrix g = upstream;
  for (std::size_t l = weights.size(); l-- > 0;) {
    const Matrix gpre = relu_backward(cache.pre[l], g);
    *dweights[l] += matmul_tn(cache.aggregated[l], gpre);
    g = matmul_tn(norm_adj, matmul_nt(gpre, *weights[l]));
  }
  return g;
}

Matrix glorot_uniform(int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  Matrix w(fan_in, fan_out);
  for (double& v : w.values()) v = rng.uniform(-limit, limit);
  return w;
}

// ---------------------------------------------------------------------------

Matrix& ParamBundle::add(const std::string& name, Matrix init) {
  if (index_.count(name)) throw StructuralError("duplicate parameter " + name);
  index_[name] = entries_.size();
  const int r = init.rows(), c = init.cols();
  entries_.push_back({name, std::move(init), Matrix(r, c), Matrix(r, c), Matrix(r, c)});
  return entries_.back().value;
}

Matrix& ParamBundle::value(const std::string& name) { return entries_.at(index_.at(name)).value; }
const Matrix& ParamBundle::value(const std::string& name) const {
  return entries_.at(index_.at(name)).value;
}
Matrix& ParamBundle::grad(const std::string& name) { return entries_.at(index_.at(name)).grad; }
const Matrix& ParamBundle::grad(const std::string& name) const {
  return entries_.at(index_.at(name)).grad;
}

std::vector<std::string> ParamBundle::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::size_t ParamBundle::num_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamBundle::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

void ParamBundle::reset_optimizer() {
  for (auto& e : entries_) {
    e.m.fill(0.0);
    e.v.fill(0.0);
  }
  step_ = 0;
}

double ParamBundle::grad_norm() const {
  double s = 0.0;
  for (const auto& e : entries_)
    for (double g : e.grad.values()) s += g * g;
  return std::sqrt(s);
}

void ParamBundle::scale_grads(double s) {
  for (auto& e : entries_) e.grad *= s;
}

ParamBundle::Entry& ParamBundle::locate(std::size_t flat, std::size_t& offset) {
  for (auto& e : entries_) {
    if (flat < e.value.size()) {
      offset = flat;
      return e;
    }
    flat -= e.value.size();
  }
  throw StructuralError("flat parameter index out of range");
}

const ParamBundle::Entry& ParamBundle::locate(std::size_t flat, std::size_t& offset) const {
  return const_cast<ParamBundle*>(this)->locate(flat, offset);
}

double& ParamBundle::flat_value(std::size_t i) {
  std::size_t off = 0;
  return locate(i, off).value[off];
}

double ParamBundle::flat_grad(std::size_t i) const {
  std::size_t off = 0;
  return locate(i, off).grad[off];
}

std::vector<double> ParamBundle::flatten() const {
  std::vector<double> out;
  out.reserve(num_values());
  for (const auto& e : entries_) out.insert(out.end(), e.value.values().begin(), e.value.values().end());
  return out;
}

std::vector<double> ParamBundle::flatten_grads() const {
  std::vector<double> out;
  out.reserve(num_values());
  for (const auto& e : entries_) out.insert(out.end(), e.grad.values().begin(), e.grad.values().end());
  return out;
}

void ParamBundle::unflatten(std::span<const double> values) {
  if (values.size() != num_values()) throw StructuralError("unflatten: size mismatch");
  std::size_t k = 0;
  for (auto& e : entries_)
    for (double& v : e.value.values()) v = values[k++];
}

void ParamBundle::adam_step(const AdamConfig& cfg) {
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, step_);
  const double bc2 = 1.0 - std::pow(cfg.beta2, step_);
  for (auto& e : entries_) {
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
      e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = e.m[i] / bc1;
      const double vhat = e.v[i] / bc2;
      e.value[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------

GradCheckResult finite_diff_check(const std::function<double()>& loss,
                                  const std::function<double&(std::size_t)>& coord,
                                  std::span<const double> analytic, const GradCheckOptions& opt) {
  const std::size_t n = analytic.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (n > opt.samples) {
    Rng rng(opt.seed);
    // Partial Fisher-Yates: the first `samples` entries form the subset.
    for (std::size_t i = 0; i < opt.samples; ++i) {
      const std::size_t j = i + rng.below(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(opt.samples);
    std::sort(idx.begin(), idx.end());
  }
  GradCheckResult res;
  for (std::size_t i : idx) {
    double& x = coord(i);
    const double orig = x;
    x = orig + opt.epsilon;
    const double fp = loss();
    x = orig - opt.epsilon;
    const double fm = loss();
    x = orig;
    const double numeric = (fp - fm) / (2.0 * opt.epsilon);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
    double err = std::abs(a - numeric) / denom;
    if (!std::isfinite(err)) err = std::numeric_limits<double>::infinity();
    if (res.checked == 0 || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_index = i;
      res.worst_analytic = a;
      res.worst_numeric = numeric;
    }
    ++res.checked;
  }
  return res;
}

GradCheckResult finite_diff_check(const std::function<double()>& loss, std::span<double> params,
                                  std::span<const double> analytic, const GradCheckOptions& opt) {
  if (params.size() != analytic.size()) throw StructuralError("finite_diff_check: size mismatch");
  return finite_diff_check(
      loss, [&](std::size_t i) -> double& { return params[i]; }, analytic, opt);
}

GradCheckResult finite_diff_check(const std::function<double()>& loss, ParamBundle& params,
                                  const GradCheckOptions& opt) {
  const auto analytic = params.flatten_grads();
  return finite_diff_check(
      loss, [&](std::size_t i) -> double& { return params.flat_value(i); }, analytic, opt);
}

}  // namespace gensfc::nn
