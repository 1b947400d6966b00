#pragma once

// Small dense and graph-convolution kernels with hand-written backward
// passes, an Adam optimizer and a finite-difference gradient checker.
// Row-major doubles, fixed summation order.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace gensfc {
class Rng;
}

namespace gensfc::nn {

class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0);
  Matrix(int rows, int cols, std::vector<double> values);
  static Matrix row(std::span<const double> values);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  double& operator()(int r, int c) { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return v_[static_cast<std::size_t>(r) * cols_ + c]; }
  double& operator[](std::size_t i) { return v_[i]; }
  double operator[](std::size_t i) const { return v_[i]; }

  std::span<double> row_span(int r) {
    return {v_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }
  std::span<const double> row_span(int r) const {
    return {v_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }
  std::vector<double>& values() { return v_; }
  const std::vector<double>& values() const { return v_; }

  void fill(double x);
  Matrix& operator+=(const Matrix& o);
  Matrix& operator*=(double s);
  bool all_finite() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> v_;
};

Matrix matmul(const Matrix& a, const Matrix& b);     // a b
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a b^T
Matrix transpose(const Matrix& a);
Matrix hadamard(const Matrix& a, const Matrix& b);

Matrix relu(const Matrix& x);
// Gradient of relu given its input `pre`.
Matrix relu_backward(const Matrix& pre, const Matrix& upstream);

std::vector<double> log_softmax(std::span<const double> logits);
// -log softmax(logits)[target]; writes d/dlogits into grad when given.
double softmax_xent(std::span<const double> logits, int target, std::vector<double>* grad = nullptr);

// y = x W + b, x: n x in, W: in x out, b: 1 x out.
Matrix dense_forward(const Matrix& x, const Matrix& w, const Matrix& b);
struct DenseGrads {
  Matrix dw, db, dx;
};
DenseGrads dense_backward(const Matrix& x, const Matrix& w, const Matrix& upstream);

// D^-1/2 (A + I) D^-1/2 of a binary symmetric adjacency with zero diagonal.
Matrix normalized_adjacency(const Matrix& adjacency);

Matrix mean_pool(const Matrix& h);  // 1 x cols
Matrix mean_pool_backward(const Matrix& upstream, int rows);

// Layer l: H_{l+1} = relu(A H_l W_l).
struct GcnCache {
  std::vector<Matrix> aggregated;  // A H_l
  std::vector<Matrix> pre;         // A H_l W_l
};
Matrix gcn_forward(const Matrix& norm_adj, const Matrix& x, std::span<const Matrix* const> weights,
                   GcnCache* cache = nullptr);
// Adds the weight gradients into dweights and returns the gradient w.r.t. x.
Matrix gcn_backward(const Matrix& norm_adj, const GcnCache& cache,
                    std::span<const Matrix* const> weights, const Matrix& upstream,
                    std::span<Matrix* const> dweights);

// Uniform in +-sqrt(6 / (fan_in + fan_out)).
Matrix glorot_uniform(int fan_in, int fan_out, Rng& rng);

// Named parameters with gradients and Adam moments. References returned by
// add()/value()/grad() stay valid as more parameters are added.
class ParamBundle {
 public:
  Matrix& add(const std::string& name, Matrix init);
  Matrix& value(const std::string& name);
  const Matrix& value(const std::string& name) const;
  Matrix& grad(const std::string& name);
  const Matrix& grad(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::string> names() const;
  std::size_t num_values() const;
  int step_count() const { return step_; }

  void zero_grad();
  // Clears Adam moments and the step counter.
  void reset_optimizer();
  double grad_norm() const;
  void scale_grads(double s);

  // Flat views in registration order.
  double& flat_value(std::size_t i);
  double flat_grad(std::size_t i) const;
  std::vector<double> flatten() const;
  std::vector<double> flatten_grads() const;
  void unflatten(std::span<const double> values);

  struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };
  // One bias-corrected Adam update from the stored gradients.
  void adam_step(const AdamConfig& cfg);

 private:
  struct Entry {
    std::string name;
    Matrix value, grad, m, v;
  };
  Entry& locate(std::size_t flat, std::size_t& offset);
  const Entry& locate(std::size_t flat, std::size_t& offset) const;

  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  int step_ = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  double epsilon = 1e-6;
  std::size_t samples = 128;  // every coordinate when there are fewer
  // Denominator floor: |a - n| / max(|a|, |n|, abs_floor).
  double abs_floor = 1e-4;
  std::uint64_t seed = 1;
};

// Central differences on a random subset of coordinates. `coord(i)` must give
// mutable access to coordinate i; `loss` must be pure in those coordinates.
GradCheckResult finite_diff_check(const std::function<double()>& loss,
                                  const std::function<double&(std::size_t)>& coord,
                                  std::span<const double> analytic, const GradCheckOptions& opt = {});
GradCheckResult finite_diff_check(const std::function<double()>& loss, std::span<double> params,
                                  std::span<const double> analytic, const GradCheckOptions& opt = {});
// Uses the bundle's stored gradients as the analytic values.
GradCheckResult finite_diff_check(const std::function<double()>& loss, ParamBundle& params,
                                  const GradCheckOptions& opt = {});

}  // namespace gensfc::nn
