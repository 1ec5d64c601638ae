#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>

#include "oracles.hpp"
#include "sharpopt/format.hpp"
#include "sharpopt/models.hpp"

using namespace sharpopt;

namespace {

Batch classification_batch(Rng& rng, std::size_t n, std::size_t d_in, std::size_t classes) {
  Batch b;
  b.inputs = Tensor(Shape{n, d_in});
  for (double& v : b.inputs.data()) v = rng.normal();
  b.targets = Tensor(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    b.targets[i] = static_cast<double>(rng.below(classes));
    b.instance_ids.push_back(i);
  }
  return b;
}

Mlp seed11_model() { return Mlp({{3, 10, 4}, Activation::tanh, OutputHead::softmax_xent}); }

Batch seed11_batch() {
  Rng rng(11, 99);
  return classification_batch(rng, 6, 3, 4);
}

}  // namespace

TEST_CASE("uniform logits give ln 2 per instance on a 2-class head") {
  Mlp model({{3, 2}, Activation::relu, OutputHead::softmax_xent});
  ParamVector w(model.layout(), 0.0);
  Rng rng(1);
  const Batch b = classification_batch(rng, 4, 3, 2);
  for (double l : per_instance_losses(model, w, b, false).values) {
    CHECK(l == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  }
}

TEST_CASE("mse head is zero when predictions equal targets") {
  Mlp model({{2, 1}, Activation::relu, OutputHead::mse});
  ParamVector w(model.layout(), std::vector<double>{1.0, -1.0, 0.5});
  Batch b{Tensor::matrix(2, 2, {1, 2, 3, 1}), Tensor::matrix(2, 1, {-0.5, 2.5}), {0, 1}};
  for (double l : per_instance_losses(model, w, b, true).values) CHECK(l == 0.0);
}

TEST_CASE("class targets outside the head's range are rejected") {
  Mlp model({{2, 3}, Activation::relu, OutputHead::softmax_xent});
  ParamVector w(model.layout(), 0.0);
  Batch b{Tensor::matrix(1, 2, {0, 0}), Tensor::vector({3.0}), {0}};
  CHECK_THROWS_AS(per_instance_losses(model, w, b, false), ParameterError);
  b.targets = Tensor::vector({-1.0});
  CHECK_THROWS_AS(per_instance_losses(model, w, b, false), ParameterError);
}

TEST_CASE("malformed batches are rejected") {
  Mlp model({{2, 3}, Activation::relu, OutputHead::softmax_xent});
  ParamVector w(model.layout(), 0.0);
  Batch empty{Tensor(Shape{0, 2}), Tensor(Shape{0}), {}};
  CHECK_THROWS_AS(per_instance_losses(model, w, empty, false), DimensionError);
  Batch ragged{Tensor::matrix(2, 2, {0, 0, 1, 1}), Tensor::vector({0.0}), {0, 1}};
  CHECK_THROWS_AS(per_instance_losses(model, w, ragged, false), DimensionError);
}

TEST_CASE("seed-11 MLP losses match the golden snapshot") {
  // The snapshot was written once after the finite-difference suite passed.
  // Set SHARPOPT_REGEN_GOLDEN=1 to rewrite it.
  const Mlp model = seed11_model();
  Rng rng(11);
  const ParamVector w = model.init(rng);
  const LossVector losses = per_instance_losses(model, w, seed11_batch(), false);
  const std::string path = std::string(SHARPOPT_TEST_DATA_DIR) + "/golden_seed11_losses.txt";
  if (std::getenv("SHARPOPT_REGEN_GOLDEN")) {
    std::ofstream out(path);
    for (double v : losses.values) out << format_double(v) << "\n";
  }
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<double> golden;
  std::string line;
  while (std::getline(in, line)) {
    double v = 0.0;
    REQUIRE(parse_double(line, v));
    golden.push_back(v);
  }
  REQUIRE(golden.size() == losses.size());
  for (std::size_t i = 0; i < golden.size(); ++i) {
    CHECK(losses[i] == doctest::Approx(golden[i]).epsilon(1e-12));
  }
}

TEST_CASE("mean of per-instance losses is the batch risk") {
  const Mlp model = seed11_model();
  Rng rng(11);
  const ParamVector w = model.init(rng);
  const Batch b = seed11_batch();
  const double risk = mean_loss_gradient(model, w, b).loss;
  CHECK(std::abs(per_instance_losses(model, w, b, false).mean() - risk) < 1e-12);
}

TEST_CASE("mean gradient of duplicated instances equals the single-instance gradient") {
  Mlp model({{3, 5, 2}, Activation::relu, OutputHead::softmax_xent});
  Rng rng(4);
  const ParamVector w = model.init(rng);
  const Batch one = classification_batch(rng, 1, 3, 2);
  const std::size_t rows[] = {0, 0, 0, 0};
  const Batch dup = one.select(rows);
  const ParamVector single = instance_loss_gradient(model, w, one, 0).gradient;
  CHECK(max_abs_diff(mean_loss_gradient(model, w, dup).gradient, single) < 1e-12);
}

TEST_CASE("N=2 mean gradient is the average of per-instance gradients") {
  Mlp model({{3, 5, 2}, Activation::tanh, OutputHead::softmax_xent});
  Rng rng(8);
  const ParamVector w = model.init(rng);
  const Batch b = classification_batch(rng, 2, 3, 2);
  const ParamVector g0 = instance_loss_gradient(model, w, b, 0).gradient;
  const ParamVector g1 = instance_loss_gradient(model, w, b, 1).gradient;
  CHECK(max_abs_diff(mean_loss_gradient(model, w, b).gradient, 0.5 * (g0 + g1)) < 1e-12);
}

TEST_CASE("zero linear model with zero mse targets has zero gradient") {
  Mlp model({{3, 2}, Activation::relu, OutputHead::mse});
  ParamVector w(model.layout(), 0.0);
  Rng rng(2);
  Batch b = classification_batch(rng, 5, 3, 2);
  b.targets = Tensor(Shape{5, 2}, 0.0);
  const ParamVector g = mean_loss_gradient(model, w, b).gradient;
  CHECK(norm2(g) == 0.0);
}

TEST_CASE("weighted gradient reductions") {
  const Mlp model = seed11_model();
  Rng rng(11);
  const ParamVector w = model.init(rng);
  const Batch b = seed11_batch();
  const std::size_t n = b.size();

  SUBCASE("uniform weights give the mean gradient") {
    const std::vector<double> g(n, 1.0 / static_cast<double>(n));
    CHECK(max_abs_diff(weighted_loss_gradient(model, w, b, g),
                       mean_loss_gradient(model, w, b).gradient) < 1e-12);
  }
  SUBCASE("one-hot weights give that instance's gradient") {
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<double> g(n, 0.0);
      g[k] = 1.0;
      CHECK(max_abs_diff(weighted_loss_gradient(model, w, b, g),
                         instance_loss_gradient(model, w, b, k).gradient) < 1e-12);
    }
  }
  SUBCASE("random weights match the per-instance sum") {
    Rng wr(5);
    std::vector<double> g(n);
    for (double& v : g) v = 3.0 * wr.uniform();
    ParamVector oracle(w.layout_ptr(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      oracle.axpy(g[i], instance_loss_gradient(model, w, b, i).gradient);
    }
    CHECK(max_abs_diff(weighted_loss_gradient(model, w, b, g), oracle) < 1e-10);
  }
  SUBCASE("negative weights are rejected") {
    std::vector<double> g(n, 0.1);
    g[2] = -0.1;
    CHECK_THROWS_AS(weighted_loss_gradient(model, w, b, g), ParameterError);
  }
}

TEST_CASE("weighted gradient is linear in the weights") {
  Mlp model({{4, 6, 3}, Activation::relu, OutputHead::softmax_xent});
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const ParamVector w = model.init(rng);
    const Batch b = classification_batch(rng, 5, 4, 3);
    std::vector<double> g1(5), g2(5), mix(5);
    const double s = rng.uniform(0.1, 2.0), t = rng.uniform(0.1, 2.0);
    for (std::size_t i = 0; i < 5; ++i) {
      g1[i] = rng.uniform();
      g2[i] = rng.uniform();
      mix[i] = s * g1[i] + t * g2[i];
    }
    const ParamVector lhs = weighted_loss_gradient(model, w, b, mix);
    const ParamVector rhs =
        s * weighted_loss_gradient(model, w, b, g1) + t * weighted_loss_gradient(model, w, b, g2);
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
  }
}

TEST_CASE("mean per-instance gradient norm dominates the mean gradient norm") {
  Mlp model({{2, 12, 2}, Activation::tanh, OutputHead::softmax_xent});
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const ParamVector w = model.init(rng);
    const Batch b = classification_batch(rng, 1 + rng.below(10), 2, 2);
    double inst = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      inst += norm2(instance_loss_gradient(model, w, b, i).gradient);
    }
    inst /= static_cast<double>(b.size());
    CHECK(inst >= norm2(mean_loss_gradient(model, w, b).gradient) - 1e-15);
  }
}

TEST_CASE("quadratic loss evaluates its defining formula") {
  QuadraticLoss q(ParamVector::from_values({1.0, -1.0}), {0.5, 0.0},
                  Tensor::matrix(2, 2, {1.0, 2.0, 0.0, -1.0}), {2.0, 1.0});
  const ParamVector w = ParamVector::from_values({1.5, 0.0});  // delta = (0.5, 1)
  const LossVector l = per_instance_losses(q, w, q.full_batch(), false);
  // t_0 = 2.5, t_1 = -1
  CHECK(l[0] == doctest::Approx(0.5 + 2.5 + 0.5 * 2.0 * 6.25));
  CHECK(l[1] == doctest::Approx(0.0 - 1.0 + 0.5 * 1.0 * 1.0));
  const ParamVector g0 = instance_loss_gradient(q, q.anchor(), q.full_batch(), 0).gradient;
  CHECK(g0.values() == std::vector<double>{1.0, 2.0});
}
