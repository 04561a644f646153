#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "temporl/checkpoint.hpp"
#include "temporl/nets.hpp"
#include "test_support.hpp"

using namespace temporl;
using diff::Tensor;

namespace {

net::Mlp make_mlp(int in, std::vector<int> hidden, int out, std::uint64_t seed,
                  net::OutputActivation oact = net::OutputActivation::None) {
  net::MlpSpec spec;
  spec.input_dim = in;
  spec.hidden_sizes = std::move(hidden);
  spec.output_dim = out;
  spec.output_activation = oact;
  RngStream rng(seed, "mlp");
  return net::Mlp(spec, rng);
}

std::string tmp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("mlp with zeroed final layer maps everything to zero") {
  net::Mlp mlp = make_mlp(3, {8}, 2, 1);
  std::fill(mlp.final_weight().data().begin(), mlp.final_weight().data().end(), 0.0);
  std::fill(mlp.final_bias().data().begin(), mlp.final_bias().data().end(), 0.0);
  Tensor x(5, 3);
  RngStream rng(2, "x");
  testing::fill_normal(x, rng);
  const Tensor y = mlp.forward(x);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("single linear layer with identity weights is the identity") {
  net::MlpSpec spec;
  spec.input_dim = 3;
  spec.output_dim = 3;
  RngStream rng(3, "id");
  net::Mlp mlp(spec, rng);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) mlp.final_weight().at(i, j) = i == j ? 1.0 : 0.0;
  std::fill(mlp.final_bias().data().begin(), mlp.final_bias().data().end(), 0.0);
  Tensor x(2, 3);
  testing::fill_normal(x, rng);
  const Tensor y = mlp.forward(x);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) CHECK(y.at(i, j) == x.at(i, j));
}

TEST_CASE("two-layer mlp equals the hand-unrolled matmul/relu chain") {
  net::Mlp mlp = make_mlp(4, {6, 5}, 2, 7);
  Tensor x(3, 4);
  RngStream rng(8, "x");
  testing::fill_normal(x, rng);
  const Tensor y = mlp.forward(x);

  const net::ParamSet p = mlp.params("");
  auto find = [&](const std::string& n) -> const Tensor& {
    for (const auto& [name, t] : p.items)
      if (name == n) return t;
    FAIL("missing param");
    return p.items[0].second;
  };
  Tensor h = x;
  h = diff::relu(diff::add(diff::matmul(h, find("w0")), find("b0")));
  h = diff::relu(diff::add(diff::matmul(h, find("w1")), find("b1")));
  h = diff::add(diff::matmul(h, find("w2")), find("b2"));
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(h.data()[i]).epsilon(1e-15));
}

TEST_CASE("mlp rejects wrong input width") {
  net::Mlp mlp = make_mlp(4, {6}, 2, 9);
  Tensor x(3, 5);
  CHECK_THROWS_AS((void)mlp.forward(x), diff::TensorError);
}

TEST_CASE("policy: zero mean and zero noise give the bound center") {
  RngStream rng(10, "pol");
  net::SquashedGaussianPolicy policy(3, {8, 8}, 2, {1.0, 1.0}, rng);
  net::ParamSet p = policy.params("");
  // zero the mean head
  for (auto& [name, t] : p.items)
    if (name.rfind("mean_", 0) == 0)
      std::fill(t.data().begin(), t.data().end(), 0.0);
  Tensor obs(1, 3, 0.4);
  Tensor noise(1, 2, 0.0);
  const auto s = policy.sample(obs, noise);
  CHECK(s.action.at(0, 0) == 0.0);
  CHECK(s.action.at(0, 1) == 0.0);

  // mean_action agrees with sample at zero noise
  const Tensor m = policy.mean_action(obs);
  CHECK(m.at(0, 0) == s.action.at(0, 0));
  CHECK(m.at(0, 1) == s.action.at(0, 1));
}

TEST_CASE("policy mean action saturates to the upper bound for huge mu") {
  RngStream rng(11, "pol");
  net::SquashedGaussianPolicy policy(2, {4}, 1, {2.5}, rng);
  net::ParamSet p = policy.params("");
  for (auto& [name, t] : p.items) {
    if (name == "mean_b") t.at(0, 0) = 50.0;
    if (name == "mean_w") std::fill(t.data().begin(), t.data().end(), 0.0);
  }
  Tensor obs(1, 2, 0.3);
  CHECK(policy.mean_action(obs).value() == doctest::Approx(2.5).epsilon(1e-10));
}

TEST_CASE("policy 1-D density integrates to one on a fine grid") {
  RngStream rng(12, "pol");
  net::SquashedGaussianPolicy policy(2, {8, 8}, 1, {1.0}, rng);
  Tensor obs(1, 2);
  testing::fill_normal(obs, rng);

  // quadrature over the open interval (-1, 1) via log_prob_of
  const int n = 4000;
  double integral = 0.0;
  const double step = 2.0 / n;
  diff::NoGradGuard guard;
  for (int i = 0; i < n; ++i) {
    const double a = -1.0 + (i + 0.5) * step;
    Tensor act(1, 1, a);
    integral += std::exp(policy.log_prob_of(obs, act).value()) * step;
  }
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("policy log_prob gradient matches central differences") {
  RngStream rng(13, "pol");
  net::SquashedGaussianPolicy policy(2, {6}, 2, {1.0, 1.0}, rng);
  Tensor obs(3, 2), noise(3, 2);
  testing::fill_normal(obs, rng);
  testing::fill_normal(noise, rng);
  const auto report = testing::fd_check(
      [&] { return diff::mean(policy.sample(obs, noise).log_prob); },
      policy.params("").tensors());
  CHECK(report.max_err <= 1e-5);
}

TEST_CASE("sampled actions stay strictly inside the bounds") {
  RngStream rng(14, "pol");
  net::SquashedGaussianPolicy policy(2, {8}, 2, {1.0, 0.5}, rng);
  diff::NoGradGuard guard;
  Tensor obs(200, 2), noise(200, 2);
  bool all_inside = true;
  double closest = 1.0;
  for (int rep = 0; rep < 500; ++rep) {  // 1e5 draws total
    testing::fill_normal(obs, rng);
    testing::fill_normal(noise, rng);
    const auto s = policy.sample(obs, noise);
    for (int i = 0; i < 200; ++i) {
      if (!(std::abs(s.action.at(i, 0)) < 1.0) || !(std::abs(s.action.at(i, 1)) < 0.5))
        all_inside = false;
      closest = std::min(closest, 1.0 - std::abs(s.action.at(i, 0)));
    }
  }
  CHECK(all_inside);
  CHECK(closest > 0.0);
}

TEST_CASE("adam first step moves by about lr in the negative gradient direction") {
  Tensor w(1, 1, 5.0, true);
  net::Adam opt({w}, 0.01);
  w.zero_grad();
  const Tensor loss = diff::scale(w, 3.0);  // grad 3, well above eps
  loss.backward();
  opt.step();
  CHECK(std::abs((5.0 - w.value()) - 0.01) <= 1e-9);
}

TEST_CASE("adam with zero gradient and zero weight decay is the identity") {
  Tensor w(2, 2, 1.5, true);
  net::Adam opt({w}, 0.1);
  w.zero_grad();
  const Tensor loss = diff::sum(diff::scale(w, 0.0));
  loss.backward();
  opt.step();
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(w.data()[i] == 1.5);
}

TEST_CASE("adam on w^2 matches an independent scalar simulation and decreases |w|") {
  Tensor w(1, 1, 1.0, true);
  const double lr = 0.1;
  net::Adam opt({w}, lr);

  // independent plain-double Adam oracle
  double ow = 1.0, m = 0.0, v = 0.0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 10; ++t) {
    const double prev = std::abs(w.value());
    w.zero_grad();
    diff::square(w).backward();
    opt.step();

    const double g = 2.0 * ow;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    ow -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);

    CHECK(w.value() == doctest::Approx(ow).epsilon(1e-14));
    CHECK(std::abs(w.value()) < prev);
  }
}

TEST_CASE("adam aborts on NaN gradients") {
  Tensor w(1, 1, 1.0, true);
  net::Adam opt({w}, 0.1);
  w.zero_grad();
  diff::square(w).backward();
  const_cast<std::vector<double>&>(w.grad())[0] = std::nan("");
  CHECK_THROWS_AS(opt.step(), diff::TensorError);
}

TEST_CASE("polyak endpoints and geometric contraction") {
  auto make_pair = [] {
    Tensor t(2, 2, 1.0, true), o(2, 2, 3.0, true);
    return std::pair<Tensor, Tensor>{t, o};
  };
  {
    auto [t, o] = make_pair();
    std::vector<Tensor> tv{t};
    net::polyak_update(tv, {o}, 1.0);
    CHECK(t.at(0, 0) == 1.0);
  }
  {
    auto [t, o] = make_pair();
    std::vector<Tensor> tv{t};
    net::polyak_update(tv, {o}, 0.0);
    CHECK(t.at(0, 0) == 3.0);
  }
  {
    auto [t, o] = make_pair();
    std::vector<Tensor> tv{t};
    const double d0 = 2.0;  // |1-3| per entry
    double prev = d0;
    for (int k = 1; k <= 20; ++k) {
      net::polyak_update(tv, {o}, 0.995);
      const double d = std::abs(t.at(0, 0) - 3.0);
      CHECK(d == doctest::Approx(d0 * std::pow(0.995, k)).epsilon(1e-12));
      CHECK(d < prev);
      prev = d;
    }
  }
}

TEST_CASE("checkpoint round trip is bitwise") {
  RngStream rng(15, "ckpt");
  net::Mlp mlp = make_mlp(3, {4}, 2, 15);
  net::ParamSet params = mlp.params("net.");
  nlohmann::json spec;
  spec["input_dim"] = 3;
  const std::string path = tmp_file("temporl_ckpt_test.bin");
  net::save_params(params, spec, path);

  const net::LoadedParams loaded = net::load_params(path);
  CHECK(loaded.spec.at("input_dim").get<int>() == 3);
  REQUIRE(loaded.tensors.size() == params.items.size());
  for (std::size_t k = 0; k < params.items.size(); ++k) {
    const auto& [name, t] = params.items[k];
    const auto& [lname, lt] = loaded.tensors[k];
    CHECK(name == lname);
    REQUIRE(t.size() == lt.size());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.data()[i] == lt.data()[i]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint restore rejects mismatched shapes") {
  net::Mlp small = make_mlp(3, {4}, 2, 16);
  net::Mlp wide = make_mlp(5, {4}, 2, 17);
  const std::string path = tmp_file("temporl_ckpt_mismatch.bin");
  net::save_params(small.params(""), nlohmann::json::object(), path);
  const net::LoadedParams loaded = net::load_params(path);
  net::ParamSet target = wide.params("");
  CHECK_THROWS_AS(net::restore_into(loaded, target), net::CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint load rejects an empty file") {
  const std::string path = tmp_file("temporl_ckpt_empty.bin");
  std::ofstream(path).close();
  CHECK_THROWS_AS((void)net::load_params(path), net::CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("freeze guard blocks and restores gradient flow") {
  net::Mlp mlp = make_mlp(2, {4}, 1, 18);
  Tensor x(3, 2);
  RngStream rng(19, "fr");
  testing::fill_normal(x, rng);
  {
    net::FreezeGuard guard(mlp.params("").tensors());
    const Tensor y = diff::sum(mlp.forward(x));
    CHECK_FALSE(y.requires_grad());
  }
  const Tensor y = diff::sum(mlp.forward(x));
  CHECK(y.requires_grad());
}
