#include <doctest.h>

#include <cmath>

#include "ddt/baselines.hpp"

using namespace ddt;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  int i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

double fd_rel_error(MlpPolicy& net, const Vector& x, const Vector& upstream) {
  const Vector g = mlp_backward(net, x, upstream);
  const Vector theta = net.parameters();
  const double h = 1e-5;
  double worst = 0.0;
  for (int i = 0; i < theta.size(); ++i) {
    Vector hi = theta, lo = theta;
    hi(i) += h;
    lo(i) -= h;
    net.set_parameters(hi);
    const double f_hi = upstream.dot(mlp_forward(net, x));
    net.set_parameters(lo);
    const double f_lo = upstream.dot(mlp_forward(net, x));
    const double fd = (f_hi - f_lo) / (2 * h);
    worst = std::max(worst, std::abs(g(i) - fd) / std::max({std::abs(g(i)), std::abs(fd), 1e-6}));
  }
  net.set_parameters(theta);
  return worst;
}

}  // namespace

TEST_CASE("mlp forward") {
  MlpPolicy net(3, 4, 2, 3);
  const Vector p = mlp_forward(net, vec({1.0, -2.0, 0.5}));
  for (int a = 0; a < 4; ++a) CHECK(p(a) == 0.25);
  Rng rng(1);
  net.randomize(rng);
  const Vector q = mlp_forward(net, vec({1.0, -2.0, 0.5}));
  CHECK(std::abs(q.sum() - 1.0) < 1e-12);
  CHECK_THROWS_AS(mlp_forward(net, vec({1.0})), DimensionMismatch);
  CHECK_THROWS_AS(MlpPolicy(3, 2, 3, 3), ConfigError);
}

TEST_CASE("linear softmax gradient has its closed form") {
  Rng rng(2);
  MlpPolicy net(3, 3, 0, 3);
  net.randomize(rng);
  const Vector x = vec({0.3, -1.2, 2.0});
  const Vector u = vec({1.0, -0.5, 2.0});
  const Vector p = mlp_forward(net, x);
  // d<u, softmax(Wx + b)>/dz = p .* (u - <u, p>)
  const Vector dz = p.cwiseProduct((u.array() - u.dot(p)).matrix());
  const Matrix dW = dz * x.transpose();
  Vector expected(dW.size() + dz.size());
  expected << Eigen::Map<const Vector>(dW.data(), dW.size()), dz;
  const Vector g = mlp_backward(net, x, u);
  CHECK((g - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("mlp gradients match finite differences") {
  Rng rng(7);
  std::normal_distribution<double> n(0, 1);
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const int d = 2 + k % 4;
    MlpPolicy net(d, 3, k % 3, d);
    net.randomize(rng);
    // Nonzero biases keep pre-activations off the ReLU kink at 0.
    for (auto& layer : net.layers())
      for (int i = 0; i < layer.bias.size(); ++i) layer.bias(i) = 0.5 * n(rng);
    Vector x(d), u(3);
    for (int i = 0; i < d; ++i) x(i) = n(rng);
    for (int i = 0; i < 3; ++i) u(i) = n(rng);
    worst = std::max(worst, fd_rel_error(net, x, u));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("mlp json round trip") {
  Rng rng(3);
  MlpPolicy net(4, 2, 2, 4);
  net.randomize(rng);
  const auto back = policy_from_json(net.to_json());
  CHECK(back->parameters() == net.parameters());
  CHECK(back->output(vec({1, 2, 3, 4})) == net.output(vec({1, 2, 3, 4})));
}

TEST_CASE("cart examples") {
  SUBCASE("pure data gives one leaf") {
    CartDataset data;
    data.feature_dim = 2;
    for (int k = 0; k < 10; ++k) data.add(vec({k * 1.0, -k * 1.0}), 1);
    const auto tree = cart_fit(data, 3);
    CHECK(tree.nodes.empty());
    CHECK(eval_crisp(tree, vec({0.0, 0.0})) == 1);
  }
  SUBCASE("one split at the midpoint") {
    CartDataset data;
    data.feature_dim = 1;
    data.add(vec({-1.0}), 0);
    data.add(vec({1.0}), 1);
    const auto tree = cart_fit(data, 2);
    REQUIRE(tree.nodes.size() == 1);
    CHECK(tree.nodes[0].feature == 0);
    CHECK(tree.nodes[0].threshold == 0.0);
    CHECK(accuracy(tree, data) == 1.0);
  }
  SUBCASE("labels from a depth-two tree are learnt exactly") {
    CrispPolicy teacher;
    teacher.feature_dim = 3;
    teacher.action_count = 4;
    teacher.nodes = {{2, 0.1, ChildRef::node(1), ChildRef::node(2)},
                     {0, -0.4, ChildRef::leaf(0), ChildRef::leaf(1)},
                     {1, 0.7, ChildRef::leaf(2), ChildRef::leaf(3)}};
    teacher.leaf_actions = {0, 1, 2, 3};
    teacher.root = ChildRef::node(0);
    Rng rng(4);
    std::normal_distribution<double> n(0, 1);
    CartDataset data;
    data.feature_dim = 3;
    for (int k = 0; k < 2000; ++k) {
      const Vector x = vec({n(rng), n(rng), n(rng)});
      data.add(x, eval_crisp(teacher, x));
    }
    const auto tree = cart_fit(data, 4, {2});
    CHECK(accuracy(tree, data) == 1.0);
    CHECK(depth(tree) <= 2);
  }
  SUBCASE("empty data") {
    CartDataset data;
    data.feature_dim = 1;
    CHECK_THROWS_AS(cart_fit(data, 2), ConfigError);
  }
}

TEST_CASE("cart accuracy does not drop with depth") {
  Rng rng(5);
  std::normal_distribution<double> n(0, 1);
  CartDataset data;
  data.feature_dim = 2;
  for (int k = 0; k < 600; ++k) {
    const Vector x = vec({n(rng), n(rng)});
    const int label = (x(0) * x(1) > 0 ? 1 : 0) + (x(0) + x(1) > 1.0 ? 1 : 0);
    data.add(x, label);
  }
  double prev = 0.0;
  for (int d = 0; d <= 8; ++d) {
    const double acc = accuracy(cart_fit(data, 3, {d}), data);
    CHECK(acc >= prev);
    prev = acc;
  }
  CHECK(prev > 0.9);
}

TEST_CASE("dataset csv round trip") {
  CartDataset data;
  data.feature_dim = 2;
  data.add(vec({0.1, -2.5}), 1);
  data.add(vec({1e-17, 3.0}), 0);
  const std::string text = dataset_to_csv(data);
  CHECK(text.rfind("f0,f1,action\n", 0) == 0);
  const auto back = dataset_from_csv(text);
  CHECK(back.states == data.states);
  CHECK(back.actions == data.actions);
}

TEST_CASE("architecture specs") {
  CHECK(ArchSpec::parse("tree:8").kind == ArchSpec::Kind::Tree);
  CHECK(ArchSpec::parse("list:3").size == 3);
  CHECK(ArchSpec::parse("mlp:0").kind == ArchSpec::Kind::Mlp);
  CHECK(ArchSpec::parse("tree:16").to_string() == "tree:16");
  for (const char* bad : {"tree:3", "tree:1", "list:0", "mlp:3", "forest:2", "tree", "tree:x"})
    CHECK_THROWS_AS(ArchSpec::parse(bad), ConfigError);
  Rng rng(1);
  auto tree = make_policy(ArchSpec::parse("tree:4"), 4, 2, rng);
  CHECK(tree->parameters().size() == 3 * (4 + 2) + 4 * 2);
  auto list = make_policy(ArchSpec::parse("list:2"), 4, 2, rng);
  CHECK(list->parameters().size() == 2 * (4 + 2) + 3 * 2);
  auto back = policy_from_json(tree->to_json());
  CHECK(back->parameters() == tree->parameters());
}
