#include "metaforge/strategies.hpp"

#include <cmath>
#include <numeric>

#include "metaforge/random.hpp"

namespace metaforge::strategies {

using ag::Tensor;

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void check_problem(const Problem& p) {
  if (!p.support || !p.query) throw StrategyError("problem: support and query losses are required");
  if (!p.inner.adapt.empty() && p.inner.adapt.size() != p.theta.size())
    throw StrategyError("problem: adapt mask has " + std::to_string(p.inner.adapt.size()) +
                        " entries for " + std::to_string(p.theta.size()) + " parameters");
  if (p.lrs && !p.lrs->same_layout(p.theta))
    throw StrategyError("problem: per-parameter rates do not mirror the parameters");
}

std::vector<std::size_t> adapted_indices(const Problem& p) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < p.theta.size(); ++i)
    if (p.inner.adapts(i)) idx.push_back(i);
  return idx;
}

// Elementwise a*x with a constant per-parameter rate or a scalar.
Tensor rate_times(const Tensor& g, const std::optional<ParamSet>& lrs, std::size_t i,
                  double alpha) {
  return lrs ? ag::mul((*lrs)[i], g) : ag::scale(g, alpha);
}

ParamSet constant_copy(const ParamSet& p) { return detach_all(p); }

ParamSet named_like(const ParamSet& layout, std::vector<Tensor> values) {
  ParamSet out;
  for (std::size_t i = 0; i < layout.size(); ++i) out.add(layout.name(i), std::move(values[i]));
  return out;
}

std::vector<double> gather(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

std::vector<Tensor> scatter_like(const std::vector<Tensor>& layout, std::span<const double> v) {
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (const auto& t : layout) {
    out.emplace_back(t.shape(), std::vector<double>(v.begin() + off, v.begin() + off + t.numel()));
    off += t.numel();
  }
  return out;
}

}  // namespace

CgError::CgError(const std::string& what, double residual, std::size_t iterations)
    : StrategyError(what + " (residual " + std::to_string(residual) + " after " +
                    std::to_string(iterations) + " iterations)"),
      residual_(residual),
      iterations_(iterations) {}

std::string_view to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::unrolled: return "unrolled";
    case StrategyKind::first_order: return "first_order";
    case StrategyKind::implicit: return "implicit";
    case StrategyKind::es: return "es";
  }
  return "?";
}

StrategyKind parse_strategy(std::string_view name) {
  for (auto k : {StrategyKind::unrolled, StrategyKind::first_order, StrategyKind::implicit,
                 StrategyKind::es})
    if (to_string(k) == name) return k;
  throw StrategyError("unknown strategy '" + std::string(name) + "'");
}

void validate(const StrategySpec& spec) {
  if (!(spec.implicit.lambda > 0.0)) throw StrategyError("implicit: lambda must be > 0");
  if (!(spec.implicit.cg_tol > 0.0)) throw StrategyError("implicit: cg_tol must be > 0");
  if (spec.implicit.cg_iters == 0) throw StrategyError("implicit: cg_iters must be >= 1");
  if (!(spec.es.sigma > 0.0)) throw StrategyError("es: sigma must be > 0");
  if (spec.es.samples < 2) throw StrategyError("es: need at least 2 samples");
  if (spec.es.antithetic && spec.es.samples % 2 != 0)
    throw StrategyError("es: antithetic sampling needs an even sample count");
}

namespace {

struct StepGrads {
  std::vector<std::size_t> index;
  std::vector<Tensor> grad;
};

StepGrads inner_gradients(const ParamSet& phi, const Tensor& loss, const InnerLoop& inner,
                          bool create_graph) {
  StepGrads out;
  std::vector<Tensor> wrt;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    if (!inner.adapts(i)) continue;
    if (!phi[i].requires_grad()) {
      if (inner.allow_nograd) continue;
      throw ag::GradError("adapt: parameter '" + phi.name(i) + "' does not require grad");
    }
    out.index.push_back(i);
    wrt.push_back(phi[i]);
  }
  try {
    out.grad = ag::backward(loss, wrt, {.create_graph = create_graph,
                                        .allow_unused = inner.allow_unused});
  } catch (const ag::UnusedInputError& e) {
    throw ag::GradError("adapt: parameter '" + phi.name(out.index[e.index()]) +
                        "' does not influence the loss");
  }
  return out;
}

}  // namespace

ParamSet sgd_step(const ParamSet& phi, const Tensor& loss, const InnerLoop& inner,
                  const std::optional<ParamSet>& lrs, bool create_graph) {
  const StepGrads g = inner_gradients(phi, loss, inner, create_graph);
  ParamSet out = phi;
  for (std::size_t j = 0; j < g.index.size(); ++j) {
    const std::size_t i = g.index[j];
    out[i] = ag::sub(phi[i], rate_times(g.grad[j], lrs, i, inner.alpha));
  }
  return out;
}

ParamSet adapt(const Problem& problem) {
  check_problem(problem);
  ParamSet phi = constant_copy(problem.theta);
  for (std::size_t t = 0; t < problem.inner.steps; ++t) {
    ag::Tape tape;
    const ParamSet leaves = track_all(tape, phi);
    phi = constant_copy(sgd_step(leaves, problem.support(leaves), problem.inner,
                                 problem.lrs ? std::optional(constant_copy(*problem.lrs))
                                             : std::nullopt,
                                 false));
  }
  return phi;
}

ParamSet plain_grad(const Problem& problem) {
  ag::Tape tape;
  const ParamSet leaves = track_all(tape, problem.theta);
  const Tensor lq = problem.query(leaves);
  return named_like(problem.theta,
                    ag::backward(lq, leaves.tensors(), {.allow_unused = true}));
}

OuterGrad outer_grad_unrolled(const Problem& problem) {
  check_problem(problem);
  ag::Tape tape;
  const ParamSet theta = track_all(tape, problem.theta);
  std::optional<ParamSet> lrs;
  if (problem.lrs) lrs = track_all(tape, *problem.lrs);
  ParamSet phi = theta;
  for (std::size_t t = 0; t < problem.inner.steps; ++t)
    phi = sgd_step(phi, problem.support(phi), problem.inner, lrs, true);
  const Tensor lq = problem.query(phi);

  std::vector<Tensor> wrt(theta.tensors().begin(), theta.tensors().end());
  if (lrs) wrt.insert(wrt.end(), lrs->tensors().begin(), lrs->tensors().end());
  auto grads = ag::backward(lq, wrt, {.allow_unused = true});

  OuterGrad out;
  const std::size_t n = theta.size();
  out.grad = named_like(problem.theta, {grads.begin(), grads.begin() + static_cast<long>(n)});
  if (lrs) out.lr_grad = named_like(*problem.lrs, {grads.begin() + static_cast<long>(n), grads.end()});
  out.query_loss = lq.item();
  out.tape_generation = tape.generation();
  return out;
}

OuterGrad outer_grad_first_order(const Problem& problem) {
  check_problem(problem);
  const std::size_t n = problem.theta.size();
  const std::optional<ParamSet> lrs =
      problem.lrs ? std::optional(constant_copy(*problem.lrs)) : std::nullopt;
  ParamSet phi = constant_copy(problem.theta);
  std::vector<std::vector<double>> grad_sum(n);
  for (std::size_t i = 0; i < n; ++i) grad_sum[i].assign(phi[i].numel(), 0.0);

  for (std::size_t t = 0; t < problem.inner.steps; ++t) {
    ag::Tape tape;
    const ParamSet leaves = track_all(tape, phi);
    const StepGrads g = inner_gradients(leaves, problem.support(leaves), problem.inner, false);
    for (std::size_t j = 0; j < g.index.size(); ++j) {
      const std::size_t i = g.index[j];
      for (std::size_t k = 0; k < g.grad[j].numel(); ++k) grad_sum[i][k] += g.grad[j][k];
      phi[i] = ag::sub(phi[i], rate_times(g.grad[j], lrs, i, problem.inner.alpha));
    }
  }

  ag::Tape tape;
  const ParamSet leaves = track_all(tape, phi);
  const Tensor lq = problem.query(leaves);
  OuterGrad out;
  out.grad = named_like(problem.theta, ag::backward(lq, leaves.tensors(), {.allow_unused = true}));
  if (lrs) {
    std::vector<Tensor> lr_grad;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> v(phi[i].numel(), 0.0);
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = -grad_sum[i][j] * out.grad[i][j];
      lr_grad.emplace_back(phi[i].shape(), std::move(v));
    }
    out.lr_grad = named_like(*problem.lrs, std::move(lr_grad));
  }
  out.query_loss = lq.item();
  out.tape_generation = tape.generation();
  return out;
}

OuterGrad outer_grad_implicit(const Problem& problem, const ImplicitOptions& options) {
  check_problem(problem);
  if (!(options.lambda > 0.0)) throw StrategyError("implicit: lambda must be > 0");
  const std::size_t n = problem.theta.size();

  OuterGrad out;
  if (problem.lrs) out.lr_grad = zeros_like(*problem.lrs);
  if (problem.inner.steps == 0) {
    // No inner problem is solved: phi = theta and the gradient is plain.
    out.grad = plain_grad(problem);
    out.query_loss = problem.query(problem.theta).item();
    return out;
  }

  const auto adapted = adapted_indices(problem);
  const ParamSet theta = constant_copy(problem.theta);
  const double lambda = options.lambda;

  // Inner loop on the proximal objective support(phi) + lambda/2 |phi - theta|^2.
  Problem proximal = problem;
  proximal.support = [&](const ParamSet& phi) {
    Tensor f = problem.support(phi);
    for (std::size_t i : adapted)
      f = ag::add(f, ag::scale(ag::sum(ag::square(ag::sub(phi[i], theta[i]))), 0.5 * lambda));
    return f;
  };
  const ParamSet phi_star = adapt(proximal);

  // v = grad of the query loss at phi*.
  ag::Tape query_tape;
  const ParamSet q_leaves = track_all(query_tape, phi_star);
  const Tensor lq = problem.query(q_leaves);
  const auto v = ag::backward(lq, q_leaves.tensors(), {.allow_unused = true});

  // Differentiable support gradient at phi* for Hessian-vector products.
  ag::Tape tape;
  const ParamSet leaves = track_all(tape, phi_star);
  std::vector<Tensor> adapted_leaves, frozen_leaves;
  std::vector<std::size_t> frozen;
  for (std::size_t i = 0; i < n; ++i) {
    if (problem.inner.adapts(i)) {
      adapted_leaves.push_back(leaves[i]);
    } else {
      frozen.push_back(i);
      frozen_leaves.push_back(leaves[i]);
    }
  }
  const auto g_in = ag::backward(problem.support(leaves), adapted_leaves,
                                 {.create_graph = true, .allow_unused = true});
  auto contract = [&](std::span<const double> y) {
    const auto ys = scatter_like(adapted_leaves, y);
    Tensor s = Tensor::scalar(0.0);
    for (std::size_t j = 0; j < g_in.size(); ++j) s = ag::add(s, ag::sum(ag::mul(g_in[j], ys[j])));
    return s;
  };
  auto apply_a = [&](std::span<const double> y) {
    const Tensor s = contract(y);
    std::vector<double> hv(y.size(), 0.0);
    if (s.requires_grad()) hv = gather(ag::backward(s, adapted_leaves, {.allow_unused = true}));
    for (std::size_t k = 0; k < hv.size(); ++k) hv[k] += lambda * y[k];
    return hv;
  };

  std::vector<Tensor> v_adapted;
  for (std::size_t i : adapted) v_adapted.push_back(v[i]);
  const CgResult cg =
      conjugate_gradient(apply_a, gather(v_adapted), options.cg_iters, options.cg_tol);

  std::vector<Tensor> grad(n);
  const auto x = scatter_like(adapted_leaves, cg.x);
  for (std::size_t j = 0; j < adapted.size(); ++j) grad[adapted[j]] = ag::scale(x[j], lambda);
  if (!frozen.empty()) {
    // Frozen parameters reach phi* through the support loss:
    // d/d theta_f = v_f - H_{f,a} x.
    const Tensor s = contract(cg.x);
    std::vector<Tensor> cross;
    if (s.requires_grad()) {
      cross = ag::backward(s, frozen_leaves, {.allow_unused = true});
    } else {
      for (const auto& t : frozen_leaves) cross.push_back(Tensor::zeros(t.shape()));
    }
    for (std::size_t j = 0; j < frozen.size(); ++j)
      grad[frozen[j]] = ag::sub(v[frozen[j]], cross[j]).detach();
  }
  out.grad = named_like(problem.theta, std::move(grad));
  out.query_loss = lq.item();
  out.tape_generation = tape.generation();
  out.cg_iterations = cg.iterations;
  out.cg_residual = cg.residual;
  return out;
}

OuterGrad outer_grad_es(const Problem& problem, const EsOptions& options) {
  check_problem(problem);
  StrategySpec spec;
  spec.es = options;
  validate(spec);
  const std::size_t n_theta = problem.theta.numel();
  std::vector<double> z = flatten(problem.theta);
  if (problem.lrs) {
    const auto l = flatten(*problem.lrs);
    z.insert(z.end(), l.begin(), l.end());
  }
  auto f = [&](std::span<const double> point) {
    Problem p = problem;
    p.theta = unflatten(problem.theta, point.subspan(0, n_theta));
    if (problem.lrs) p.lrs = unflatten(*problem.lrs, point.subspan(n_theta));
    return problem.query(adapt(p)).item();
  };
  const EsEstimate est = es_estimate(f, z, options);

  OuterGrad out;
  const std::span<const double> g(est.gradient), se(est.std_error);
  out.grad = unflatten(problem.theta, g.subspan(0, n_theta));
  out.std_error = unflatten(problem.theta, se.subspan(0, n_theta));
  if (problem.lrs) {
    out.lr_grad = unflatten(*problem.lrs, g.subspan(n_theta));
    out.lr_std_error = unflatten(*problem.lrs, se.subspan(n_theta));
  }
  out.query_loss = f(z);
  return out;
}

OuterGrad outer_grad(const StrategySpec& spec, const Problem& problem) {
  validate(spec);
  switch (spec.kind) {
    case StrategyKind::unrolled: return outer_grad_unrolled(problem);
    case StrategyKind::first_order: return outer_grad_first_order(problem);
    case StrategyKind::implicit: return outer_grad_implicit(problem, spec.implicit);
    case StrategyKind::es: return outer_grad_es(problem, spec.es);
  }
  throw StrategyError("unknown strategy");
}

CgResult conjugate_gradient(
    const std::function<std::vector<double>(std::span<const double>)>& apply_a,
    std::span<const double> b, std::size_t max_iters, double tol,
    const std::function<void(std::span<const double>)>& on_iterate) {
  const std::size_t n = b.size();
  CgResult res;
  res.x.assign(n, 0.0);
  if (on_iterate) on_iterate(res.x);
  std::vector<double> r(b.begin(), b.end()), p = r;
  const double b_norm = norm(b);
  double rr = dot(r, r);
  res.residual = std::sqrt(rr);
  if (res.residual <= tol * b_norm) return res;
  for (std::size_t k = 0; k < max_iters; ++k) {
    const auto ap = apply_a(p);
    const double pap = dot(p, ap);
    if (!(pap > 0.0))
      throw CgError("conjugate gradient: operator is not positive definite", res.residual, k);
    const double step = rr / pap;
    for (std::size_t i = 0; i < n; ++i) {
      res.x[i] += step * p[i];
      r[i] -= step * ap[i];
    }
    res.iterations = k + 1;
    if (on_iterate) on_iterate(res.x);
    const double rr_next = dot(r, r);
    res.residual = std::sqrt(rr_next);
    if (res.residual <= tol * b_norm) return res;
    const double beta = rr_next / rr;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    rr = rr_next;
  }
  throw CgError("conjugate gradient did not converge", res.residual, res.iterations);
}

EsEstimate es_estimate(const std::function<double(std::span<const double>)>& f,
                       std::span<const double> z, const EsOptions& options) {
  StrategySpec spec;
  spec.es = options;
  validate(spec);
  const std::size_t d = z.size();
  const std::size_t draws = options.antithetic ? options.samples / 2 : options.samples;
  Rng rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> sum(d, 0.0), sum_sq(d, 0.0), eps(d), point(d);
  for (std::size_t k = 0; k < draws; ++k) {
    for (double& e : eps) e = normal(rng);
    for (std::size_t i = 0; i < d; ++i) point[i] = z[i] + options.sigma * eps[i];
    double weight;
    if (options.antithetic) {
      const double plus = f(point);
      for (std::size_t i = 0; i < d; ++i) point[i] = z[i] - options.sigma * eps[i];
      const double minus = f(point);
      weight = (plus - minus) / (2.0 * options.sigma);
    } else {
      weight = f(point) / options.sigma;
    }
    for (std::size_t i = 0; i < d; ++i) {
      const double c = weight * eps[i];
      sum[i] += c;
      sum_sq[i] += c * c;
    }
  }
  EsEstimate est;
  est.gradient.resize(d);
  est.std_error.resize(d);
  const double m = static_cast<double>(draws);
  for (std::size_t i = 0; i < d; ++i) {
    const double mean = sum[i] / m;
    est.gradient[i] = mean;
    const double var = draws > 1 ? std::max(0.0, (sum_sq[i] - m * mean * mean) / (m - 1.0)) : 0.0;
    est.std_error[i] = std::sqrt(var / m);
  }
  return est;
}

OuterOptimizer::OuterOptimizer(Kind kind, double rate, double beta1, double beta2, double eps)
    : kind_(kind), rate_(rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(rate > 0.0)) throw StrategyError("optimizer: rate must be > 0");
}

OuterOptimizer OuterOptimizer::sgd(double rate) { return {Kind::sgd, rate, 0.0, 0.0, 0.0}; }

OuterOptimizer OuterOptimizer::adam(double rate, double beta1, double beta2, double eps) {
  return {Kind::adam, rate, beta1, beta2, eps};
}

ParamSet OuterOptimizer::step(const ParamSet& theta, const ParamSet& grad) {
  if (!theta.same_layout(grad)) throw StrategyError("optimizer: gradient layout does not match");
  std::vector<double> x = flatten(theta);
  const std::vector<double> g = flatten(grad);
  ++t_;
  if (kind_ == Kind::sgd) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= rate_ * g[i];
    return unflatten(theta, x);
  }
  if (m_.empty()) {
    m_.assign(x.size(), 0.0);
    v_.assign(x.size(), 0.0);
  } else if (m_.size() != x.size()) {
    throw StrategyError("optimizer: parameter count changed between steps");
  }
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < x.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g[i] * g[i];
    x[i] -= rate_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
  return unflatten(theta, x);
}

OuterOptimizer parse_optimizer(std::string_view name, double rate) {
  if (name == "sgd") return OuterOptimizer::sgd(rate);
  if (name == "adam") return OuterOptimizer::adam(rate);
  throw StrategyError("unknown optimizer '" + std::string(name) + "'");
}

}  // namespace metaforge::strategies
