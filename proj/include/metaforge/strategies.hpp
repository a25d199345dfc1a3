#pragma once

// Outer-gradient strategies for bi-level problems
//
//   min_theta  L_query(phi(theta)),   phi(theta) = inner adaptation from theta
//
// plus the outer optimizers that consume those gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "metaforge/autograd.hpp"
#include "metaforge/params.hpp"

namespace metaforge::strategies {

class StrategyError : public Error {
 public:
  using Error::Error;
};

// Conjugate gradient did not reach the requested tolerance.
class CgError : public StrategyError {
 public:
  CgError(const std::string& what, double residual, std::size_t iterations);
  double residual() const { return residual_; }
  std::size_t iterations() const { return iterations_; }

 private:
  double residual_;
  std::size_t iterations_;
};

// Builds a scalar loss from a full parameter set. Must be usable with
// tracked and constant parameters alike.
using LossFn = std::function<ag::Tensor(const ParamSet&)>;

struct InnerLoop {
  std::size_t steps = 1;
  double alpha = 0.01;
  // Per-parameter adapt flags; empty means every parameter adapts.
  std::vector<bool> adapt;
  // Parameters that do not influence the inner loss get a zero update
  // instead of raising.
  bool allow_unused = false;
  // Parameters that are not tracked are left alone instead of raising.
  bool allow_nograd = false;

  bool adapts(std::size_t i) const { return adapt.empty() || adapt[i]; }
};

struct Problem {
  ParamSet theta;
  // Learned per-parameter inner rates (same layout as theta). When present
  // they replace alpha and receive their own outer gradient.
  std::optional<ParamSet> lrs;
  InnerLoop inner;
  LossFn support;
  LossFn query;
};

enum class StrategyKind { unrolled, first_order, implicit, es };

std::string_view to_string(StrategyKind kind);
StrategyKind parse_strategy(std::string_view name);

struct ImplicitOptions {
  double lambda = 1.0;
  std::size_t cg_iters = 100;
  double cg_tol = 1e-10;  // relative to the right-hand side norm
};

struct EsOptions {
  double sigma = 0.1;
  std::size_t samples = 64;
  bool antithetic = true;
  std::uint64_t seed = 0;
};

struct StrategySpec {
  StrategyKind kind = StrategyKind::unrolled;
  ImplicitOptions implicit;
  EsOptions es;
};

void validate(const StrategySpec& spec);

struct OuterGrad {
  ParamSet grad;                     // d L_query / d theta
  std::optional<ParamSet> lr_grad;   // d L_query / d lrs
  std::optional<ParamSet> std_error;     // ES only
  std::optional<ParamSet> lr_std_error;  // ES only
  double query_loss = 0.0;           // at the adapted parameters
  int tape_generation = 1;           // highest generation reached by any tape
  std::size_t cg_iterations = 0;
  double cg_residual = 0.0;
};

// One SGD step phi <- phi - rate * grad(loss) over the adapted parameters.
// With create_graph the step stays differentiable. Raises GradError naming
// the parameter when an adapted parameter is unused or untracked and that
// is not allowed.
ParamSet sgd_step(const ParamSet& phi, const ag::Tensor& loss, const InnerLoop& inner,
                  const std::optional<ParamSet>& lrs, bool create_graph);

// Runs the inner loop from theta and returns constant adapted parameters.
ParamSet adapt(const Problem& problem);

OuterGrad outer_grad_unrolled(const Problem& problem);
OuterGrad outer_grad_first_order(const Problem& problem);
OuterGrad outer_grad_implicit(const Problem& problem, const ImplicitOptions& options);
OuterGrad outer_grad_es(const Problem& problem, const EsOptions& options);
OuterGrad outer_grad(const StrategySpec& spec, const Problem& problem);

// Plain gradient of the query loss at theta.
ParamSet plain_grad(const Problem& problem);

struct CgResult {
  std::vector<double> x;
  double residual = 0.0;
  std::size_t iterations = 0;
};

// Solves A x = b for symmetric positive definite A given as a product.
// Stops once ||r|| <= tol * ||b||; throws CgError carrying the residual norm
// otherwise, or when a non-positive curvature direction shows up.
// on_iterate sees every iterate, starting with x0 = 0.
CgResult conjugate_gradient(
    const std::function<std::vector<double>(std::span<const double>)>& apply_a,
    std::span<const double> b, std::size_t max_iters, double tol,
    const std::function<void(std::span<const double>)>& on_iterate = {});

struct EsEstimate {
  std::vector<double> gradient;
  std::vector<double> std_error;
};

// Gaussian-smoothing gradient estimate (1/(m sigma)) sum_i F(z + sigma e_i) e_i
// with e_i ~ N(0, I); antithetic draws come in +-e pairs. std_error is the
// per-coordinate standard error of the mean over independent draws (pairs
// when antithetic).
EsEstimate es_estimate(const std::function<double(std::span<const double>)>& f,
                       std::span<const double> z, const EsOptions& options);

class OuterOptimizer {
 public:
  enum class Kind { sgd, adam };

  static OuterOptimizer sgd(double rate);
  static OuterOptimizer adam(double rate, double beta1 = 0.9, double beta2 = 0.999,
                             double eps = 1e-8);

  Kind kind() const { return kind_; }
  double rate() const { return rate_; }
  std::size_t steps() const { return t_; }

  // Returns the updated parameters. Layouts must match each other and any
  // previous call.
  ParamSet step(const ParamSet& theta, const ParamSet& grad);

 private:
  OuterOptimizer(Kind kind, double rate, double beta1, double beta2, double eps);

  Kind kind_;
  double rate_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

OuterOptimizer parse_optimizer(std::string_view name, double rate);

}  // namespace metaforge::strategies
