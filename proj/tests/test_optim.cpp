#include "doctest.h"

#include <cmath>

#include "tslab/optim.hpp"
#include "tslab/rng.hpp"

using namespace tslab;

namespace {

struct ScalarParam {
  Params params;
  ModelConfig cfg;
};

// a 1-tensor parameter list for optimizer unit tests
std::vector<ParamView> single_view(Tensor& t) {
  return {{"theta", &t, ParamGroupId::bulk}};
}

Grads single_grad(const Tensor& g) {
  Grads out;
  out.tensors.push_back(g);
  return out;
}

}  // namespace

TEST_CASE("scaled_lr reproduces the table") {
  CHECK(scaled_lr(OptKind::sgd, 0.1, 16, 16, 4, 1.0) == doctest::Approx(102.4).epsilon(1e-12));
  CHECK(scaled_lr(OptKind::sgd, 0.37, 8, 4, 1, 0.77) == doctest::Approx(0.37 * 32).epsilon(1e-12));
  CHECK(scaled_lr(OptKind::adam, 0.001, 64, 8, 16, 1.0) ==
        doctest::Approx(0.001 / (8.0 * std::sqrt(8.0))).epsilon(1e-8));
  // 0.001 * 64^-1/2 * 8^-1/2 = 4.419e-5
  CHECK(scaled_lr(OptKind::adam, 0.001, 64, 8, 16, 1.0) == doctest::Approx(4.4194173824159216e-05));
}

TEST_CASE("scaled_lr is multiplicative in eta0") {
  Rng rng(2);
  for (int i = 0; i < 20; ++i) {
    const double eta = 0.001 + rng.uniform();
    const double c = 0.5 + 3.0 * rng.uniform();
    const double a = scaled_lr(OptKind::sgd, eta, 8, 4, 2, 0.5);
    const double b = scaled_lr(OptKind::sgd, c * eta, 8, 4, 2, 0.5);
    CHECK(b == doctest::Approx(c * a).epsilon(1e-12));
  }
}

TEST_CASE("group multipliers follow the first/last rescale rule") {
  // depth 1, beta0 1: everything is 1
  auto flat = group_multipliers(OptKind::sgd, 1, 1.0, 1.0, 0, 64);
  for (double m : flat) CHECK(m == doctest::Approx(1.0));

  // SGD, L=16, beta0=4: read-in forward multiplier (16/4)^-0.5 = 0.5
  auto sgd = group_multipliers(OptKind::sgd, 16, 4.0, 1.0, 0, 64);
  CHECK(group_multiplier(sgd, ParamGroupId::read_in) == doctest::Approx(0.5));
  CHECK(group_multiplier(sgd, ParamGroupId::positional) == doctest::Approx(0.5));
  CHECK(group_multiplier(sgd, ParamGroupId::read_out) == doctest::Approx(0.5));
  CHECK(group_multiplier(sgd, ParamGroupId::bulk) == doctest::Approx(1.0));

  // Adam style: depth factor 1, width factor sqrt(model_dim)
  auto adam = group_multipliers(OptKind::adam, 37, 4.0, 1.0, 1, 64);
  CHECK(group_multiplier(adam, ParamGroupId::read_in) == doctest::Approx(8.0));
  CHECK(group_multiplier(adam, ParamGroupId::bulk) == doctest::Approx(1.0));

  // matches the forward multipliers the model uses
  ModelConfig cfg;
  cfg.head_dim = 8;
  cfg.n_heads = 8;
  cfg.depth = 16;
  cfg.beta0 = 4.0;
  cfg.adam_scale = 0;
  auto mult = group_multipliers(OptKind::sgd, cfg.depth, cfg.beta0, cfg.alpha_depth,
                                cfg.adam_scale, cfg.model_dim());
  CHECK(rescale_factors(cfg).read_in ==
        doctest::Approx(group_multiplier(mult, ParamGroupId::read_in)));
}

TEST_CASE("sgd_step basics") {
  Tensor theta = Tensor::from_values({1}, {1.0});
  OptState state;
  auto views = single_view(theta);

  // zero gradient leaves parameters unchanged
  sgd_step(views, single_grad(Tensor::from_values({1}, {0.0})), 0.1, 0.0, state);
  CHECK(theta[0] == 1.0);

  // single step: 1 - 0.1*2 = 0.8
  sgd_step(views, single_grad(Tensor::from_values({1}, {2.0})), 0.1, 0.0, state);
  CHECK(theta[0] == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("sgd momentum unrolls as 1 + (1+mu) after two steps") {
  Tensor theta = Tensor::from_values({1}, {0.0});
  OptState state;
  auto views = single_view(theta);
  const double lr = 0.01, g = 3.0, mu = 0.9;
  sgd_step(views, single_grad(Tensor::from_values({1}, {g})), lr, mu, state);
  CHECK(theta[0] == doctest::Approx(-lr * g).epsilon(1e-14));
  sgd_step(views, single_grad(Tensor::from_values({1}, {g})), lr, mu, state);
  // velocity after step 2 is (1 + mu) g, total displacement lr*g*(1 + 1.9)
  CHECK(theta[0] == doctest::Approx(-lr * g * (1.0 + 1.0 + mu)).epsilon(1e-14));
}

TEST_CASE("group multiplier enters the update squared") {
  Tensor theta = Tensor::from_values({1}, {0.0});
  OptState state;
  std::vector<ParamView> views = {{"w0", &theta, ParamGroupId::read_in}};
  std::array<double, 4> mult = {1, 1, 1, 1};
  mult[static_cast<size_t>(ParamGroupId::read_in)] = 2.0;
  sgd_step(views, single_grad(Tensor::from_values({1}, {1.0})), 0.1, 0.0, state, mult);
  CHECK(theta[0] == doctest::Approx(-0.4).epsilon(1e-14));  // lr * c^2 * g
}

TEST_CASE("adam first step has magnitude lr and is scale free") {
  OptimizerConfig cfg;
  cfg.kind = OptKind::adam;
  for (double g0 : {0.01, 0.3, 42.0}) {
    Tensor theta = Tensor::from_values({2}, {1.0, -2.0});
    OptState state;
    auto views = single_view(theta);
    adam_step(views, single_grad(Tensor::from_values({2}, {g0, -g0})), 0.01, cfg, state);
    CHECK(std::abs(std::abs(theta[0] - 1.0) - 0.01) < 1e-6);
    CHECK(std::abs(std::abs(theta[1] + 2.0) - 0.01) < 1e-6);
    CHECK(theta[0] < 1.0);   // moves against the gradient
    CHECK(theta[1] > -2.0);
  }

  // doubling all gradients changes the first step by < 1e-6 relative
  Tensor t1 = Tensor::from_values({1}, {0.0});
  Tensor t2 = Tensor::from_values({1}, {0.0});
  OptState s1, s2;
  auto v1 = single_view(t1), v2 = single_view(t2);
  adam_step(v1, single_grad(Tensor::from_values({1}, {0.7})), 0.01, cfg, s1);
  adam_step(v2, single_grad(Tensor::from_values({1}, {1.4})), 0.01, cfg, s2);
  CHECK(std::abs(t1[0] - t2[0]) / std::abs(t1[0]) < 1e-6);
}

TEST_CASE("adam converges to lr-sized steps under a constant gradient") {
  OptimizerConfig cfg;
  cfg.kind = OptKind::adam;
  Tensor theta = Tensor::from_values({1}, {0.0});
  OptState state;
  auto views = single_view(theta);
  double prev = theta[0];
  double last_step = 0.0;
  for (int i = 0; i < 100; ++i) {
    adam_step(views, single_grad(Tensor::from_values({1}, {2.5})), 0.01, cfg, state);
    last_step = std::abs(theta[0] - prev);
    prev = theta[0];
  }
  CHECK(last_step == doctest::Approx(0.01).epsilon(0.01));
}

TEST_CASE("non-finite gradients are a numeric error") {
  Tensor theta = Tensor::from_values({1}, {0.0});
  OptState state;
  auto views = single_view(theta);
  CHECK_THROWS_AS(
      sgd_step(views, single_grad(Tensor::from_values({1}, {std::nan("")})), 0.1, 0.0, state),
      Error);
}

TEST_CASE("train: zero steps, determinism, monotone full-batch GD") {
  ModelConfig cfg;
  cfg.head_dim = 2;
  cfg.n_heads = 2;
  cfg.depth = 1;
  cfg.seq_len = 2;
  cfg.input_dim = 4;
  cfg.output_dim = 1;
  OptimizerConfig opt;
  opt.kind = OptKind::sgd;
  opt.eta0 = 0.05;
  opt.steps = 0;
  Dataset data = make_regression(3, 6, cfg.seq_len, cfg.input_dim, 1.0);

  Params params = init_params(cfg, 1);
  Params before = params;
  TrainResult r0 = train(params, cfg, opt, data);
  CHECK(r0.log.empty());
  for (size_t i = 0; i < param_views(params).size(); ++i) {
    const Tensor& a = *param_views(params)[i].tensor;
    const Tensor& b = *param_views(before)[i].tensor;
    for (std::int64_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }

  opt.steps = 25;
  Params p1 = init_params(cfg, 1);
  Params p2 = init_params(cfg, 1);
  TrainResult r1 = train(p1, cfg, opt, data);
  TrainResult r2 = train(p2, cfg, opt, data);
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t i = 0; i < r1.log.size(); ++i) CHECK(r1.log[i].loss == r2.log[i].loss);
}

TEST_CASE("full-batch GD on a linear toy is monotone below 2/lambda_max") {
  // quadratic loss 0.5*|Xw - y|^2; the stability threshold comes from the
  // data Gram's top eigenvalue, estimated by power iteration
  Rng rng(19);
  const int n = 12, d = 5;
  Tensor x = rng.normal_tensor({n, d}, 1.0);
  Tensor y = rng.normal_tensor({n, 1}, 1.0);

  Tensor gram({d, d});
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      for (int r = 0; r < n; ++r) gram.at(i, j) += x.at(r, i) * x.at(r, j);
  Tensor vec = rng.normal_tensor({d}, 1.0);
  double lambda_max = 0.0;
  for (int it = 0; it < 200; ++it) {
    Tensor next({d});
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) next[i] += gram.at(i, j) * vec[j];
    lambda_max = std::sqrt(next.squared_norm());
    for (int i = 0; i < d; ++i) vec[i] = next[i] / lambda_max;
  }

  Tensor w({d, 1});
  OptState state;
  std::vector<ParamView> views = {{"w", &w, ParamGroupId::bulk}};
  const double lr = 1.9 / lambda_max;
  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 60; ++step) {
    Tape tape;
    Var wv = tape.param(w);
    Var loss = tape.mse_loss(tape.matmul(tape.constant(x), wv), y);
    tape.backward(loss);
    const double value = tape.value(loss)[0];
    CHECK(value <= prev + 1e-12);
    prev = value;
    Grads g;
    g.tensors.push_back(tape.grad(wv));
    sgd_step(views, g, lr, 0.0, state);
  }
}
