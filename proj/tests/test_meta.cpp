#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <thread>

#include "metaforge/meta.hpp"
#include "metaforge/random.hpp"
#include "test_util.hpp"

using namespace metaforge;
using namespace metaforge::meta;
using ag::Tensor;
using learners::Backbone;
using learners::BackboneOptions;
using tasks::Episode;
using metaforge::testing::max_abs;
using metaforge::testing::rel_err;

namespace {

Tensor random_tensor(Rng& rng, ag::Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ag::numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor labels(std::size_t n_way, std::size_t per_class) {
  std::vector<double> v;
  for (std::size_t c = 0; c < n_way; ++c)
    for (std::size_t k = 0; k < per_class; ++k) v.push_back(static_cast<double>(c));
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Episode random_episode(Rng& rng, std::size_t n, std::size_t k, std::size_t q, std::size_t d) {
  Episode ep;
  ep.n_way = n;
  ep.k_shot = k;
  ep.support_x = random_tensor(rng, {n * k, d});
  ep.support_y = labels(n, k);
  ep.query_x = random_tensor(rng, {n * q, d});
  ep.query_y = labels(n, q);
  return ep;
}

Episode regression_episode(Rng& rng, std::size_t k, std::size_t d) {
  Episode ep;
  ep.n_way = 1;
  ep.k_shot = k;
  ep.support_x = random_tensor(rng, {k, d});
  ep.support_y = random_tensor(rng, {k, 1});
  ep.query_x = random_tensor(rng, {k, d});
  ep.query_y = random_tensor(rng, {k, 1});
  return ep;
}

Backbone small_mlp(std::size_t in, std::size_t out, std::uint64_t seed,
                   std::vector<std::size_t> hidden = {6}) {
  BackboneOptions o;
  o.in_dim = in;
  o.out_dim = out;
  o.hidden = std::move(hidden);
  o.seed = seed;
  return Backbone::mlp(o);
}

Tensor eye(std::size_t d) {
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  return Tensor({d, d}, std::move(v));
}

// relu(x I) I: the identity on the nonnegative orthant.
Backbone identity_embedder(std::size_t d) {
  BackboneOptions o;
  o.in_dim = d;
  o.out_dim = d;
  o.hidden = {d};
  o.activation = learners::Activation::relu;
  ParamSet p;
  p.add("layer0.weight", eye(d));
  p.add("layer0.bias", Tensor::zeros({d}));
  p.add("head.weight", eye(d));
  p.add("head.bias", Tensor::zeros({d}));
  return Backbone::mlp(o).with_params(std::move(p));
}

Tensor rows(std::size_t d, std::vector<double> v) {
  const std::size_t n = v.size() / d;
  return Tensor({n, d}, std::move(v));
}

std::size_t argmax_row(const Tensor& logits, std::size_t r) {
  const std::size_t n = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c)
    if (logits[r * n + c] > logits[r * n + best]) best = c;
  return best;
}

// Sum over all parameters of 0.5 |p - target|^2 with a per-parameter target.
Tensor half_sq_dist(const ParamSet& p, double target) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& t : p.tensors())
    total = ag::add(total, ag::scale(ag::sum(ag::square(ag::sub(t, Tensor::full(t.shape(), target)))), 0.5));
  return total;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  std::vector<std::jthread> threads;
  for (std::size_t i = 0; i < n; ++i) threads.emplace_back([&, i] { body(i); });
}

}  // namespace

TEST(MamlWrapper, ValidatesRates) {
  MamlOptions o;
  o.lr_alpha = 0.01;
  o.lr_beta = 0.01;
  EXPECT_NO_THROW(MamlWrapper(small_mlp(2, 1, 1), o));
  EXPECT_FALSE(MamlOptions{}.first_order);
  o.lr_alpha = 0.0;
  EXPECT_THROW(MamlWrapper(small_mlp(2, 1, 1), o), MetaError);
  o.lr_alpha = 0.01;
  o.lr_beta = -1.0;
  EXPECT_THROW(MamlWrapper(small_mlp(2, 1, 1), o), MetaError);
}

TEST(Clone, ForwardMatchesOriginalBeforeAdapt) {
  const MamlWrapper w(small_mlp(3, 2, 4), {});
  Rng rng(1);
  const Tensor x = random_tensor(rng, {5, 3});
  ag::Tape tape;
  const Clone c = w.clone(tape);
  const Tensor a = c.forward(x), b = w.model().forward(x);
  EXPECT_EQ(max_abs(a.data(), b.data()), 0.0);
  EXPECT_EQ(c.steps_taken(), 0u);
}

TEST(Clone, IsolationOverManyAdaptSequences) {
  for (bool first_order : {false, true}) {
    MamlOptions o;
    o.lr_alpha = 0.5;
    o.first_order = first_order;
    const MamlWrapper w(small_mlp(2, 1, 5), o);
    const ParamSet before = detach_all(w.params());
    Rng rng(2);
    std::uniform_int_distribution<int> steps(1, 3);
    for (int seq = 0; seq < 1000; ++seq) {
      ag::Tape tape;
      Clone c = w.clone(tape);
      const Tensor x = random_tensor(rng, {4, 2}), y = random_tensor(rng, {4, 1});
      const int n = steps(rng);
      for (int s = 0; s < n; ++s) c.adapt(learners::mse(c.forward(x), y));
      EXPECT_EQ(c.steps_taken(), static_cast<std::size_t>(n));
    }
    EXPECT_TRUE(bitwise_equal(before, w.params()));
  }
}

TEST(Clone, MetaModelGradientsLeaveParametersAlone) {
  Rng rng(3);
  for (auto alg : {Algorithm::maml, Algorithm::fomaml, Algorithm::reptile, Algorithm::metasgd,
                   Algorithm::anil, Algorithm::protonet, Algorithm::matchingnet}) {
    LearnerSpec spec;
    spec.algorithm = alg;
    spec.lr_alpha = 0.3;
    const MetaModel m(small_mlp(3, 4, 6), spec);
    const ParamSet before = detach_all(m.params());
    for (int i = 0; i < 20; ++i) {
      const Episode ep = random_episode(rng, 3, 2, 2, 3);
      m.episode_grad(ep, static_cast<std::uint64_t>(i));
      m.predict(ep, 2);
    }
    EXPECT_TRUE(bitwise_equal(before, m.params())) << to_string(alg);
  }
}

TEST(Clone, QuadraticStep) {
  MamlOptions o;
  o.lr_alpha = 0.1;
  const MamlWrapper w(small_mlp(2, 1, 7), o);
  ag::Tape tape;
  Clone c = w.clone(tape);
  c.adapt(half_sq_dist(c.params(), 0.25));
  for (std::size_t i = 0; i < w.params().size(); ++i)
    for (std::size_t j = 0; j < w.params()[i].numel(); ++j) {
      const double t0 = w.params()[i][j];
      EXPECT_NEAR(c.params()[i][j], t0 - 0.1 * (t0 - 0.25), 1e-15);
    }
}

TEST(Clone, ZeroGradientLeavesParameters) {
  const MamlWrapper w(small_mlp(2, 1, 8), {});
  ag::Tape tape;
  Clone c = w.clone(tape);
  Tensor zero = Tensor::scalar(0.0);
  for (const auto& t : c.params().tensors()) zero = ag::add(zero, ag::scale(ag::sum(t), 0.0));
  c.adapt(zero);
  EXPECT_EQ(max_abs(flatten(c.params()), flatten(w.params())), 0.0);
}

TEST(Clone, UnusedParameterIsNamed) {
  MamlWrapper w(small_mlp(2, 1, 9), {});
  ag::Tape tape;
  Clone c = w.clone(tape);
  const Tensor loss = ag::sum(ag::square(c.params().at("head.bias")));
  try {
    c.adapt(loss);
    FAIL() << "expected an error";
  } catch (const ag::GradError& e) {
    EXPECT_NE(std::string(e.what()).find("layer0.weight"), std::string::npos) << e.what();
  }

  MamlOptions o;
  o.allow_unused = true;
  const MamlWrapper lenient(small_mlp(2, 1, 9), o);
  ag::Tape tape2;
  Clone c2 = lenient.clone(tape2);
  c2.adapt(ag::sum(ag::square(c2.params().at("head.bias"))));
  EXPECT_TRUE(bitwise_equal(detach_all(c2.params()), detach_all(lenient.params())));
}

TEST(Clone, NoGradParametersNeedAllowNograd) {
  MamlWrapper w(small_mlp(2, 1, 10), {});
  w.set_requires_grad("layer0.bias", false);
  Rng rng(4);
  const Tensor x = random_tensor(rng, {4, 2}), y = random_tensor(rng, {4, 1});
  {
    ag::Tape tape;
    Clone c = w.clone(tape);
    EXPECT_THROW(c.adapt(learners::mse(c.forward(x), y)), ag::GradError);
  }
  MamlOptions o;
  o.allow_nograd = true;
  MamlWrapper lenient(small_mlp(2, 1, 10), o);
  lenient.set_requires_grad("layer0.bias", false);
  ag::Tape tape;
  Clone c = lenient.clone(tape);
  c.adapt(learners::mse(c.forward(x), y));
  EXPECT_EQ(max_abs(c.params().at("layer0.bias").data(), lenient.params().at("layer0.bias").data()),
            0.0);
  EXPECT_FALSE(c.params().at("layer0.bias").requires_grad());
  EXPECT_THROW(w.set_requires_grad("nope", false), MetaError);
}

TEST(Clone, SecondOrderReachesMetaParameters) {
  MamlOptions o;
  o.lr_alpha = 0.1;
  const MamlWrapper w(small_mlp(2, 1, 11), o);
  ag::Tape tape;
  Clone c = w.clone(tape);
  c.adapt(half_sq_dist(c.params(), 0.5));
  const Tensor lq = half_sq_dist(c.params(), -0.3);
  const auto g = ag::backward(lq, c.lineage().tensors());
  // d/dtheta of 0.5 |(1 - a) theta + a t - c|^2 = (1 - a) (phi - c).
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].numel(); ++j)
      EXPECT_NEAR(g[i][j], 0.9 * (c.params()[i][j] + 0.3), 1e-14);
  EXPECT_GT(tape.generation(), 1);
}

TEST(Clone, FirstOrderMatchesFomamlFormula) {
  MamlOptions o;
  o.lr_alpha = 0.1;
  o.first_order = true;
  const MamlWrapper w(small_mlp(2, 1, 12), o);
  ag::Tape tape;
  Clone c = w.clone(tape);
  c.adapt(half_sq_dist(c.params(), 0.5));
  const auto g = ag::backward(half_sq_dist(c.params(), -0.3), c.lineage().tensors());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g[i].numel(); ++j) {
      const double theta = w.params()[i][j];
      const double phi = theta - 0.1 * (theta - 0.5);
      EXPECT_NEAR(g[i][j], phi + 0.3, 1e-10);
    }
  EXPECT_EQ(tape.generation(), 1);
}

TEST(MetaModel, ZeroInnerStepsGivePlainGradient) {
  Rng rng(5);
  const Episode ep = random_episode(rng, 3, 2, 3, 4);
  ParamSet plain;
  for (bool first_order : {false, true}) {
    LearnerSpec spec;
    spec.inner_steps = 0;
    spec.first_order = first_order;
    const MetaModel m(small_mlp(4, 3, 13), spec);
    const auto p = m.problem(ep, 0);
    const ParamSet g = m.episode_grad(ep, 0).grad;
    EXPECT_LE(max_abs(flatten(g), flatten(strategies::plain_grad(p))), 1e-15);
    if (plain.empty()) {
      plain = g;
    } else {
      EXPECT_TRUE(bitwise_equal(plain, g));
    }
  }
}

TEST(MetaModel, MetaGradientMatchesFiniteDifferences) {
  Rng rng(6);
  const Episode ep = random_episode(rng, 3, 2, 2, 2);
  LearnerSpec spec;
  spec.inner_steps = 2;
  spec.lr_alpha = 0.4;
  const MetaModel m(small_mlp(2, 3, 14, {4}), spec);
  const auto g = flatten(m.episode_grad(ep, 0).grad);
  const auto p = m.problem(ep, 2);
  const std::vector<double> z = flatten(m.params());
  const Tensor fd = ag::finite_diff(
      [&](const Tensor& t) {
        auto q = p;
        q.theta = unflatten(p.theta, t.data());
        return p.query(strategies::adapt(q)).item();
      },
      Tensor({z.size()}, z), 1e-5);
  EXPECT_LE(rel_err(g, fd.data()), 1e-5);
}

TEST(MetaModel, StrategyFlagsAreResolved) {
  LearnerSpec spec;
  spec.algorithm = Algorithm::fomaml;
  EXPECT_EQ(MetaModel(small_mlp(2, 2, 1), spec).effective_strategy(),
            strategies::StrategyKind::first_order);
  spec.algorithm = Algorithm::maml;
  spec.first_order = true;
  EXPECT_EQ(MetaModel(small_mlp(2, 2, 1), spec).effective_strategy(),
            strategies::StrategyKind::first_order);
  spec.strategy.kind = strategies::StrategyKind::implicit;
  EXPECT_THROW(MetaModel(small_mlp(2, 2, 1), spec), CompatibilityError);
  spec = {};
  spec.lr_beta = 0.0;
  EXPECT_THROW(MetaModel(small_mlp(2, 2, 1), spec), MetaError);
  spec = {};
  spec.algorithm = Algorithm::protonet;
  spec.loss = learners::LossKind::mse;
  EXPECT_THROW(MetaModel(small_mlp(2, 2, 1), spec), CompatibilityError);
  spec = {};
  spec.algorithm = Algorithm::reptile;
  spec.inner_steps = 0;
  EXPECT_THROW(MetaModel(small_mlp(2, 2, 1), spec), MetaError);
  EXPECT_EQ(parse_algorithm("matchingnet"), Algorithm::matchingnet);
  EXPECT_THROW(parse_algorithm("snail"), MetaError);
}

TEST(MetaModel, MetaStepAveragesInEpisodeOrder) {
  Rng rng(7);
  std::vector<Episode> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(random_episode(rng, 2, 2, 2, 3));
  LearnerSpec spec;
  spec.optimizer = "sgd";
  spec.lr_beta = 0.1;
  MetaModel serial(small_mlp(3, 2, 15), spec);
  MetaModel threaded(small_mlp(3, 2, 15), spec);

  ParamSet mean = zeros_like(serial.params());
  for (std::size_t i = 0; i < batch.size(); ++i)
    mean = axpy(1.0, serial.episode_grad(batch[i], mix_seed(9, i)).grad, mean);
  mean = scaled(mean, 0.25);
  const ParamSet want = axpy(-0.1, mean, serial.params());

  const auto a = serial.meta_step(batch, 9);
  const auto b = threaded.meta_step(batch, 9, parallel_for);
  EXPECT_TRUE(bitwise_equal(a.grad, mean));
  EXPECT_TRUE(bitwise_equal(serial.params(), want));
  EXPECT_TRUE(bitwise_equal(serial.params(), threaded.params()));
  EXPECT_EQ(a.query_loss, b.query_loss);
}

TEST(Reptile, OneInnerStepIsSgd) {
  Rng rng(8);
  const Backbone net = small_mlp(2, 1, 16);
  std::vector<Episode> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(regression_episode(rng, 5, 2));
  const double lr_inner = 0.05, lr_outer = 0.5;
  ParamSet reptile = net.params(), sgd = net.params();
  for (int step = 0; step < 100; ++step) {
    reptile = reptile_step(net, learners::LossKind::mse, reptile, batch, 1, lr_inner, lr_outer);
    ParamSet g = zeros_like(sgd);
    for (const auto& ep : batch) {
      strategies::Problem p;
      p.theta = sgd;
      p.query = [&](const ParamSet& phi) {
        return learners::mse(net.forward(ep.support_x, phi), ep.support_y);
      };
      p.support = p.query;
      g = axpy(1.0, strategies::plain_grad(p), g);
    }
    sgd = axpy(-lr_outer * lr_inner / 3.0, g, sgd);
  }
  EXPECT_LE(max_abs_diff(reptile, sgd), 1e-12);
  EXPECT_GT(max_abs_diff(reptile, net.params()), 1e-3);
}

TEST(Reptile, OptimalStartDoesNotMove) {
  const Backbone net = small_mlp(1, 1, 17);
  Episode ep;
  ep.n_way = 1;
  ep.support_x = Tensor({3, 1}, {-1.0, 0.0, 2.0});
  ep.support_y = net.forward(ep.support_x).detach();
  ep.query_x = ep.support_x;
  ep.query_y = ep.support_y;
  const std::vector<Episode> batch = {ep, ep};
  const ParamSet out = reptile_step(net, learners::LossKind::mse, net.params(), batch, 3, 0.1, 1.0);
  EXPECT_EQ(max_abs_diff(out, net.params()), 0.0);
}

TEST(Reptile, OpposingTasksCancel) {
  // A single bias parameter pulled toward +1 and -1.
  const Backbone net = small_mlp(1, 1, 18, {1});
  ParamSet zero = zeros_like(net.params());
  const Backbone flat = net.with_params(zero);
  Episode up, down;
  for (Episode* e : {&up, &down}) {
    e->n_way = 1;
    e->support_x = Tensor({2, 1}, {0.3, -0.4});
    e->query_x = e->support_x;
  }
  up.support_y = Tensor({2, 1}, {1.0, 1.0});
  down.support_y = Tensor({2, 1}, {-1.0, -1.0});
  up.query_y = up.support_y;
  down.query_y = down.support_y;
  const std::vector<Episode> batch = {up, down};
  const ParamSet out = reptile_step(flat, learners::LossKind::mse, zero, batch, 2, 0.1, 1.0);
  EXPECT_LE(max_abs_diff(out, zero), 1e-15);
  EXPECT_THROW(reptile_step(flat, learners::LossKind::mse, zero, batch, 0, 0.1, 1.0), MetaError);
}

TEST(Reptile, MetaModelUsesReptileUpdate) {
  Rng rng(9);
  std::vector<Episode> batch;
  for (int i = 0; i < 2; ++i) batch.push_back(regression_episode(rng, 4, 2));
  LearnerSpec spec;
  spec.algorithm = Algorithm::reptile;
  spec.loss = learners::LossKind::mse;
  spec.inner_steps = 3;
  spec.lr_alpha = 0.05;
  spec.lr_beta = 0.7;
  MetaModel m(small_mlp(2, 1, 19), spec);
  const ParamSet want =
      reptile_step(m.backbone(), spec.loss, m.params(), batch, 3, spec.lr_alpha, spec.lr_beta);
  m.meta_step(batch, 0);
  EXPECT_LE(max_abs_diff(m.params(), want), 1e-15);
}

TEST(MetaSgd, ConstantRatesReproduceMaml) {
  Rng rng(10);
  LearnerSpec spec;
  spec.lr_alpha = 0.2;
  spec.inner_steps = 3;
  const MetaModel maml(small_mlp(3, 2, 20), spec);
  spec.algorithm = Algorithm::metasgd;
  const MetaModel msgd(small_mlp(3, 2, 20), spec);
  ASSERT_TRUE(msgd.lrs());
  EXPECT_TRUE(msgd.lrs()->same_layout(msgd.params()));
  for (int i = 0; i < 5; ++i) {
    const Episode ep = random_episode(rng, 2, 3, 2, 3);
    const Tensor a = maml.predict(ep, 3), b = msgd.predict(ep, 3);
    EXPECT_LE(max_abs(a.data(), b.data()), 1e-15);
    EXPECT_LE(max_abs_diff(maml.episode_grad(ep, 0).grad, msgd.episode_grad(ep, 0).grad), 1e-12);
  }
}

TEST(MetaSgd, RateGradientMatchesFiniteDifferences) {
  Rng rng(11);
  const Episode ep = random_episode(rng, 2, 3, 2, 2);
  LearnerSpec spec;
  spec.algorithm = Algorithm::metasgd;
  spec.lr_alpha = 0.3;
  spec.inner_steps = 2;
  const MetaModel m(small_mlp(2, 2, 21, {3}), spec);
  const auto lg = flatten(*m.episode_grad(ep, 0).lr_grad);
  const auto p = m.problem(ep, 2);
  const std::vector<double> z = flatten(*p.lrs);
  const Tensor fd = ag::finite_diff(
      [&](const Tensor& t) {
        auto q = p;
        q.lrs = unflatten(*p.lrs, t.data());
        return p.query(strategies::adapt(q)).item();
      },
      Tensor({z.size()}, z), 1e-5);
  EXPECT_LE(rel_err(lg, fd.data()), 1e-5);
}

TEST(MetaSgd, RatesAreLearnedWithoutClamp) {
  Rng rng(12);
  LearnerSpec spec;
  spec.algorithm = Algorithm::metasgd;
  spec.optimizer = "sgd";
  spec.lr_beta = 50.0;
  spec.lr_alpha = 0.01;
  MetaModel m(small_mlp(2, 2, 22), spec);
  const std::vector<Episode> batch = {random_episode(rng, 2, 3, 3, 2)};
  const ParamSet before = *m.lrs();
  const auto stats = m.meta_step(batch, 0);
  EXPECT_LE(max_abs_diff(*m.lrs(), axpy(-50.0, *stats.lr_grad, before)), 1e-15);
  EXPECT_GT(max_abs_diff(*m.lrs(), before), 0.0);
}

TEST(Anil, MaskValidation) {
  const ParamSet p = small_mlp(2, 1, 23).params();
  const auto mask = PartitionMask::final_layer(p);
  EXPECT_EQ(mask.head, (std::set<std::string>{"head.weight", "head.bias"}));
  EXPECT_NO_THROW(mask.validate(p));
  PartitionMask bad = mask;
  bad.body.insert("head.bias");
  EXPECT_THROW(bad.validate(p), MetaError);
  bad = mask;
  bad.body.erase("layer0.bias");
  EXPECT_THROW(bad.validate(p), MetaError);
  bad = mask;
  bad.head.insert("extra");
  EXPECT_THROW(bad.validate(p), MetaError);
}

TEST(Anil, OnlyHeadAdapts) {
  MamlOptions o;
  o.lr_alpha = 0.3;
  const MamlWrapper w(small_mlp(2, 1, 24), o);
  Rng rng(13);
  const Tensor x = random_tensor(rng, {5, 2}), y = random_tensor(rng, {5, 1});
  const auto mask = PartitionMask::final_layer(w.params());

  ag::Tape t1;
  Clone anil = w.clone(t1);
  anil.adapt(learners::mse(anil.forward(x), y), mask);
  for (std::size_t i = 0; i < w.params().size(); ++i) {
    const double d = max_abs(anil.params()[i].data(), w.params()[i].data());
    if (mask.head.count(w.params().name(i))) {
      EXPECT_GT(d, 0.0) << w.params().name(i);
    } else {
      EXPECT_EQ(d, 0.0) << w.params().name(i);
    }
  }

  ag::Tape t2, t3;
  Clone all = w.clone(t2), plain = w.clone(t3);
  all.adapt(learners::mse(all.forward(x), y), PartitionMask::all_head(w.params()));
  plain.adapt(learners::mse(plain.forward(x), y));
  EXPECT_EQ(max_abs(flatten(all.params()), flatten(plain.params())), 0.0);

  ag::Tape t4;
  Clone none = w.clone(t4);
  PartitionMask empty;
  for (const auto& n : w.params().names()) empty.body.insert(n);
  none.adapt(learners::mse(none.forward(x), y), empty);
  EXPECT_EQ(max_abs(flatten(none.params()), flatten(w.params())), 0.0);
}

TEST(Anil, BodyStaysOuterTrainable) {
  Rng rng(14);
  LearnerSpec spec;
  spec.algorithm = Algorithm::anil;
  spec.inner_steps = 2;
  spec.lr_alpha = 0.3;
  const MetaModel m(small_mlp(3, 2, 25), spec);
  const auto g = m.episode_grad(random_episode(rng, 2, 2, 2, 3), 0).grad;
  double body = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.name(i).rfind("layer", 0) == 0)
      for (double v : g[i].data()) body = std::max(body, std::abs(v));
  EXPECT_GT(body, 0.0);
}

TEST(ProtoNet, NearestPrototype) {
  const Backbone f = identity_embedder(2);
  Episode ep;
  ep.n_way = 2;
  ep.support_x = rows(2, {0, 0, 4, 0});
  ep.support_y = labels(2, 1);
  ep.query_x = rows(2, {1, 0, 2, 0, 3.5, 0});
  ep.query_y = Tensor({3}, {0, 0, 1});
  const Tensor logits = protonet_logits(f, f.params(), ep);
  EXPECT_EQ(argmax_row(logits, 0), 0u);
  EXPECT_DOUBLE_EQ(logits[0], -1.0);
  EXPECT_DOUBLE_EQ(logits[1], -9.0);
  // Equidistant query: the lower class index wins.
  EXPECT_EQ(logits[2], logits[3]);
  EXPECT_EQ(argmax_row(logits, 1), 0u);
  EXPECT_EQ(learners::accuracy(logits, Tensor({3}, {0, 0, 1})), 1.0);
}

TEST(ProtoNet, EmptyClassIsAnError) {
  const Backbone f = identity_embedder(2);
  Episode ep;
  ep.n_way = 3;
  ep.support_x = rows(2, {0, 0, 4, 0});
  ep.support_y = labels(2, 1);
  ep.query_x = rows(2, {1, 0});
  ep.query_y = Tensor({1}, {0});
  EXPECT_THROW(protonet_logits(f, f.params(), ep), MetaError);
}

TEST(ProtoNet, AgreesWithBruteForceNearestPrototype) {
  Rng rng(15);
  const Backbone f = small_mlp(4, 3, 26);
  for (int trial = 0; trial < 500; ++trial) {
    const Episode ep = random_episode(rng, 4, 3, 2, 4);
    const Tensor logits = protonet_logits(f, f.params(), ep);
    const Tensor s = f.forward(ep.support_x), q = f.forward(ep.query_x);
    for (std::size_t i = 0; i < q.dim(0); ++i) {
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t c = 0; c < 4; ++c) {
        double d = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
          double proto = 0.0;
          for (std::size_t k = 0; k < 3; ++k) proto += s[(c * 3 + k) * 3 + j];
          proto /= 3.0;
          d += (q[i * 3 + j] - proto) * (q[i * 3 + j] - proto);
        }
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      ASSERT_EQ(argmax_row(logits, i), best) << trial;
    }
  }
}

TEST(ProtoNet, InvariantUnderOrthogonalTransformAndTranslation) {
  Rng rng(16);
  const Backbone f = small_mlp(3, 3, 27);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(3, 3);
    const Eigen::MatrixXd r = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
    const Eigen::Vector3d t = Eigen::Vector3d::Random() * 5.0;
    // f'(x) = f(x) R + t, folded into the head.
    ParamSet p = f.params();
    const Tensor w = p.at("head.weight"), b = p.at("head.bias");
    const std::size_t h = w.dim(0);
    std::vector<double> w2(h * 3, 0.0), b2(3, 0.0);
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 3; ++k) {
        const double rkj = r(static_cast<int>(k), static_cast<int>(j));
        for (std::size_t i = 0; i < h; ++i) w2[i * 3 + j] += w[i * 3 + k] * rkj;
        b2[j] += b[k] * rkj;
      }
    for (std::size_t j = 0; j < 3; ++j) b2[j] += t(static_cast<int>(j));
    ParamSet moved;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p.name(i) == "head.weight") {
        moved.add(p.name(i), Tensor({h, 3}, w2));
      } else if (p.name(i) == "head.bias") {
        moved.add(p.name(i), Tensor({3}, b2));
      } else {
        moved.add(p.name(i), p[i]);
      }
    }
    const Episode ep = random_episode(rng, 3, 2, 4, 3);
    const Tensor l1 = protonet_logits(f, f.params(), ep);
    const Tensor l2 = protonet_logits(f, moved, ep);
    EXPECT_LE(max_abs(l1.data(), l2.data()), 1e-9);
    for (std::size_t i = 0; i < l1.dim(0); ++i) EXPECT_EQ(argmax_row(l1, i), argmax_row(l2, i));
  }
}

TEST(ProtoNet, TrainingGradientMatchesFiniteDifferences) {
  Rng rng(17);
  const Episode ep = random_episode(rng, 3, 2, 2, 2);
  for (auto alg : {Algorithm::protonet, Algorithm::matchingnet}) {
    LearnerSpec spec;
    spec.algorithm = alg;
    const MetaModel m(small_mlp(2, 3, 28, {4}), spec);
    const auto g = flatten(m.episode_grad(ep, 0).grad);
    const auto p = m.problem(ep, 5);
    EXPECT_EQ(p.inner.steps, 0u);
    const std::vector<double> z = flatten(m.params());
    const Tensor fd = ag::finite_diff(
        [&](const Tensor& t) { return p.query(unflatten(p.theta, t.data())).item(); },
        Tensor({z.size()}, z), 1e-5);
    EXPECT_LE(rel_err(g, fd.data()), 1e-6) << to_string(alg);
  }
}

TEST(MatchingNet, ExactMatchDominates) {
  const Backbone f = identity_embedder(3);
  Episode ep;
  ep.n_way = 3;
  ep.support_x = rows(3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  ep.support_y = labels(3, 1);
  ep.query_x = rows(3, {0, 1, 0});
  ep.query_y = Tensor({1}, {1});
  const Tensor s = matchingnet_scores(f, f.params(), ep);
  EXPECT_GT(s[1], s[0]);
  EXPECT_GT(s[1], s[2]);
}

TEST(MatchingNet, UniformSimilaritiesGiveUniformScores) {
  const Backbone f = identity_embedder(2);
  Episode ep;
  ep.n_way = 4;
  ep.support_x = rows(2, {1, 1, 1, 1, 1, 1, 1, 1});
  ep.support_y = labels(4, 1);
  ep.query_x = rows(2, {0.2, 3.0});
  ep.query_y = Tensor({1}, {0});
  const Tensor s = matchingnet_scores(f, f.params(), ep);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(s[c], 0.25, 1e-15);
}

TEST(MatchingNet, RowsSumToOne) {
  Rng rng(18);
  const Backbone f = small_mlp(3, 4, 29);
  for (int trial = 0; trial < 50; ++trial) {
    const Episode ep = random_episode(rng, 5, 2, 3, 3);
    const Tensor s = matchingnet_scores(f, f.params(), ep);
    for (std::size_t i = 0; i < s.dim(0); ++i) {
      double total = 0.0;
      for (std::size_t c = 0; c < 5; ++c) {
        EXPECT_GT(s[i * 5 + c], 0.0);
        total += s[i * 5 + c];
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(MatchingNet, ZeroNormEmbeddingIsAnError) {
  const Backbone f = identity_embedder(2);
  Episode ep;
  ep.n_way = 2;
  ep.support_x = rows(2, {1, 0, 0, 1});
  ep.support_y = labels(2, 1);
  ep.query_x = rows(2, {0, 0});
  ep.query_y = Tensor({1}, {0});
  EXPECT_THROW(matchingnet_scores(f, f.params(), ep), MetaError);
}

TEST(MetaModel, PredictCurveMatchesPredict) {
  Rng rng(19);
  LearnerSpec spec;
  spec.algorithm = Algorithm::metasgd;
  spec.lr_alpha = 0.2;
  const MetaModel m(small_mlp(3, 2, 30), spec);
  const Episode ep = random_episode(rng, 2, 3, 2, 3);
  const auto curve = m.predict_curve(ep, 4);
  ASSERT_EQ(curve.size(), 5u);
  for (std::size_t s = 0; s <= 4; ++s) {
    const Tensor direct = m.predict(ep, s);
    EXPECT_EQ(max_abs(curve[s].data(), direct.data()), 0.0) << s;
  }
}
