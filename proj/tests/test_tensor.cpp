#include <catch2/catch_amalgamated.hpp>

#include "ipsfuse/tensor.hpp"
#include "test_util.hpp"

using ipsfuse::EwKind;
using ipsfuse::Error;
using ipsfuse::Rng;
using ipsfuse::Shape;
using Tensor = ipsfuse::Tensor<double>;
using Tape = ipsfuse::Tape<double>;

TEST_CASE("elementwise forward examples") {
  Tape tape;
  auto a = Tensor::from_data({2}, {1, 2});
  auto b = Tensor::from_data({2}, {3, 4});
  auto y = tape.add(a, b);
  CHECK(y.data() == std::vector<double>{4, 6});

  auto s = tape.silu(Tensor::from_data({1}, {0.0}));
  CHECK(s.data()[0] == 0.0);

  auto r = tape.relu(Tensor::from_data({3}, {-1, 0, 2}));
  CHECK(r.data() == std::vector<double>{0, 0, 2});

  auto e = tape.exp(Tensor::from_data({1}, {0.0}));
  CHECK(e.data()[0] == 1.0);

  auto rc = tape.reciprocal(Tensor::from_data({2}, {2.0, -4.0}));
  CHECK(rc.data() == std::vector<double>{0.5, -0.25});
}

TEST_CASE("mul gradient follows the product rule") {
  Tape tape;
  auto a = Tensor::from_data({1}, {2.0}, true);
  auto b = Tensor::from_data({1}, {3.0}, true);
  auto y = tape.mul(a, b);
  tape.backward(tape.sum(y));
  CHECK(a.grad()[0] == 3.0);
  CHECK(b.grad()[0] == 2.0);
}

TEST_CASE("trailing-axis broadcasting") {
  Tape tape;
  auto a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto b = Tensor::from_data({3}, {10, 20, 30}, true);
  auto y = tape.add(a, b);
  REQUIRE(y.shape() == Shape{2, 3});
  CHECK(y.data() == std::vector<double>{11, 22, 33, 14, 25, 36});

  tape.backward(tape.sum(y));
  CHECK(b.grad() == std::vector<double>{2, 2, 2});  // reduced over the leading axis

  SECTION("incompatible shapes name both operands") {
    auto c = Tensor::from_data({2}, {1, 2});
    try {
      tape.add(a, c);
      FAIL("expected shape error");
    } catch (const Error& e) {
      std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[2]") != std::string::npos);
    }
  }
}

TEST_CASE("non-finite results are rejected immediately") {
  Tape tape;
  auto a = Tensor::from_data({1}, {1000.0});
  CHECK_THROWS_AS(tape.exp(a), Error);
  auto z = Tensor::from_data({1}, {0.0});
  CHECK_THROWS_AS(tape.reciprocal(z), Error);
}

TEST_CASE("matmul forward examples") {
  Tape tape;
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(tape.matmul(eye, m).data() == std::vector<double>{1, 2, 3, 4});

  auto a = Tensor::from_data({1, 2}, {1, 2});
  auto b = Tensor::from_data({2, 1}, {3, 4});
  CHECK(tape.matmul(a, b).data() == std::vector<double>{11});

  CHECK_THROWS_AS(tape.matmul(a, a), Error);  // inner dimension mismatch
}

TEST_CASE("matmul gradients match central differences") {
  Rng rng(1234);
  std::vector<double> av(12), bv(8), wv(6);
  for (auto& v : av) v = rng.uniform(-1, 1);
  for (auto& v : bv) v = rng.uniform(-1, 1);
  for (auto& v : wv) v = rng.uniform(-1, 1);

  auto loss_fn = [&]() {
    Tape tape;
    auto y = tape.matmul(Tensor::from_data({3, 4}, av), Tensor::from_data({4, 2}, bv));
    return tape.sum(tape.mul(y, Tensor::from_data({3, 2}, wv))).scalar();
  };

  Tape tape;
  auto a = Tensor::from_data({3, 4}, av, true);
  auto b = Tensor::from_data({4, 2}, bv, true);
  auto y = tape.matmul(a, b);
  tape.backward(tape.sum(tape.mul(y, Tensor::from_data({3, 2}, wv))));

  for (std::size_t i = 0; i < av.size(); ++i)
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, av, i), a.grad()[i]) < 1e-6);
  for (std::size_t i = 0; i < bv.size(); ++i)
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, bv, i), b.grad()[i]) < 1e-6);
}

TEST_CASE("conv2d identity and constant-image examples") {
  Tape tape;
  Rng rng(7);
  std::vector<double> xv(2 * 4 * 5);
  for (auto& v : xv) v = rng.uniform();

  SECTION("1x1 unit kernel is the identity") {
    auto x = Tensor::from_data({1, 4, 5}, std::vector<double>(xv.begin(), xv.begin() + 20));
    auto w = Tensor::from_data({1, 1, 1, 1}, {1.0});
    auto y = tape.conv2d(x, w, Tensor::from_data({1}, {0.0}));
    CHECK(y.data() == x.data());
  }

  SECTION("3x3 all-ones kernel on a constant image gives 9c under reflect padding") {
    auto x = Tensor::from_data({1, 6, 6}, std::vector<double>(36, 0.3));
    auto w = Tensor::from_data({1, 1, 3, 3}, std::vector<double>(9, 1.0));
    auto y = tape.conv2d(x, w, Tensor::from_data({1}, {0.0}), ipsfuse::Padding::reflect);
    for (double v : y.data()) CHECK(v == Catch::Approx(9 * 0.3).margin(1e-12));
  }

  SECTION("even kernels and channel mismatches are rejected") {
    auto x = Tensor::from_data({1, 4, 4}, std::vector<double>(16, 0.0));
    CHECK_THROWS_AS(
        tape.conv2d(x, Tensor::from_data({1, 1, 2, 2}, std::vector<double>(4, 0.0)), {}), Error);
    CHECK_THROWS_AS(
        tape.conv2d(x, Tensor::from_data({1, 2, 3, 3}, std::vector<double>(18, 0.0)), {}), Error);
  }
}

TEST_CASE("conv2d weight gradient matches central differences") {
  Rng rng(42);
  std::vector<double> xv(2 * 5 * 5), wv(2 * 2 * 3 * 3), bv(2), pv(2 * 5 * 5);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  for (auto& v : wv) v = rng.uniform(-0.5, 0.5);
  for (auto& v : bv) v = rng.uniform(-0.5, 0.5);
  for (auto& v : pv) v = rng.uniform(-1, 1);

  for (auto padding : {ipsfuse::Padding::reflect, ipsfuse::Padding::zero}) {
    auto loss_fn = [&]() {
      Tape tape;
      auto y = tape.conv2d(Tensor::from_data({2, 5, 5}, xv), Tensor::from_data({2, 2, 3, 3}, wv),
                           Tensor::from_data({2}, bv), padding);
      return tape.sum(tape.mul(y, Tensor::from_data({2, 5, 5}, pv))).scalar();
    };
    Tape tape;
    auto x = Tensor::from_data({2, 5, 5}, xv, true);
    auto w = Tensor::from_data({2, 2, 3, 3}, wv, true);
    auto b = Tensor::from_data({2}, bv, true);
    auto y = tape.conv2d(x, w, b, padding);
    tape.backward(tape.sum(tape.mul(y, Tensor::from_data({2, 5, 5}, pv))));

    for (std::size_t i = 0; i < wv.size(); ++i)
      CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, wv, i), w.grad()[i]) < 1e-6);
    for (std::size_t i = 0; i < xv.size(); ++i)
      CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, xv, i), x.grad()[i]) < 1e-6);
    for (std::size_t i = 0; i < bv.size(); ++i)
      CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, bv, i), b.grad()[i]) < 1e-6);
  }
}

TEST_CASE("layernorm forward examples") {
  Tape tape;
  auto gain = Tensor::from_data({2}, {1, 1});
  auto offset = Tensor::from_data({2}, {0, 0});

  auto c = tape.layernorm(Tensor::from_data({1, 2}, {0.7, 0.7}), gain, offset);
  CHECK(c.data()[0] == 0.0);  // zero-variance row maps to 0 via the epsilon floor
  CHECK(c.data()[1] == 0.0);

  auto s = tape.layernorm(Tensor::from_data({1, 2}, {1.0, -1.0}), gain, offset);
  CHECK(s.data()[0] == Catch::Approx(1.0).epsilon(1e-4));
  CHECK(s.data()[1] == Catch::Approx(-1.0).epsilon(1e-4));

  CHECK_THROWS_AS(tape.layernorm(Tensor::from_data({2, 0}, {}), gain, offset), Error);
}

TEST_CASE("layernorm gradients match central differences") {
  Rng rng(99);
  std::vector<double> xv(3 * 4), gv(4), ov(4), pv(3 * 4);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  for (auto& v : gv) v = rng.uniform(0.5, 1.5);
  for (auto& v : ov) v = rng.uniform(-0.5, 0.5);
  for (auto& v : pv) v = rng.uniform(-1, 1);

  auto loss_fn = [&]() {
    Tape tape;
    auto y = tape.layernorm(Tensor::from_data({3, 4}, xv), Tensor::from_data({4}, gv),
                            Tensor::from_data({4}, ov));
    return tape.sum(tape.mul(y, Tensor::from_data({3, 4}, pv))).scalar();
  };
  Tape tape;
  auto x = Tensor::from_data({3, 4}, xv, true);
  auto g = Tensor::from_data({4}, gv, true);
  auto o = Tensor::from_data({4}, ov, true);
  tape.backward(tape.sum(tape.mul(tape.layernorm(x, g, o), Tensor::from_data({3, 4}, pv))));

  for (std::size_t i = 0; i < xv.size(); ++i)
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, xv, i), x.grad()[i]) < 1e-5);
  for (std::size_t i = 0; i < gv.size(); ++i)
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, gv, i), g.grad()[i]) < 1e-5);
  for (std::size_t i = 0; i < ov.size(); ++i)
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, ov, i), o.grad()[i]) < 1e-5);
}

TEST_CASE("backward basics") {
  SECTION("sum gradient is all ones") {
    Tape tape;
    auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    tape.backward(tape.sum(x));
    CHECK(x.grad() == std::vector<double>(6, 1.0));
  }

  SECTION("sum of squares at [1,2] gives [2,4]") {
    Tape tape;
    auto x = Tensor::from_data({2}, {1, 2}, true);
    tape.backward(tape.sum(tape.mul(x, x)));
    CHECK(x.grad() == std::vector<double>{2, 4});
  }

  SECTION("a tensor consumed twice accumulates both branch gradients") {
    // loss = sum(x*x + x); hand-expanded gradient is 2x + 1
    Tape tape;
    auto x = Tensor::from_data({3}, {0.5, -1.0, 2.0}, true);
    tape.backward(tape.sum(tape.add(tape.mul(x, x), x)));
    CHECK(x.grad() == std::vector<double>{2.0, -1.0, 5.0});
  }

  SECTION("non-scalar and detached losses are rejected") {
    Tape tape;
    auto x = Tensor::from_data({2}, {1, 2}, true);
    auto y = tape.mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), Error);               // non-scalar
    CHECK_THROWS_AS(tape.backward(Tensor::scalar_of(1.0)), Error);  // leaf, not on tape
    Tape other;
    auto z = other.sum(x);
    CHECK_THROWS_AS(tape.backward(z), Error);  // produced by a different tape
  }
}

TEST_CASE("gradient soundness across ops and seeds") {
  // randomized central-difference sweep, >= 10 seeds per op family
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(seed);
    std::vector<double> av(12), bv(12), pv(12);
    for (auto& v : av) v = rng.uniform(0.3, 1.7);  // positive, away from kinks
    for (auto& v : bv) v = rng.uniform(0.3, 1.7);
    for (auto& v : pv) v = rng.uniform(-1, 1);

    auto check_unary = [&](EwKind kind) {
      auto loss_fn = [&]() {
        Tape tape;
        auto y = tape.elementwise(kind, Tensor::from_data({3, 4}, av));
        return tape.sum(tape.mul(y, Tensor::from_data({3, 4}, pv))).scalar();
      };
      Tape tape;
      auto a = Tensor::from_data({3, 4}, av, true);
      tape.backward(tape.sum(tape.mul(tape.elementwise(kind, a), Tensor::from_data({3, 4}, pv))));
      for (std::size_t i = 0; i < av.size(); i += 3)
        CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, av, i), a.grad()[i]) < 1e-4);
    };
    check_unary(EwKind::silu);
    check_unary(EwKind::sigmoid);
    check_unary(EwKind::relu);
    check_unary(EwKind::exp);
    check_unary(EwKind::reciprocal);
    check_unary(EwKind::abs);

    auto check_binary = [&](EwKind kind, Shape sb) {
      std::vector<double> bb(ipsfuse::shape_numel(sb));
      for (auto& v : bb) v = rng.uniform(0.3, 1.7);
      auto loss2 = [&]() {
        Tape tape;
        auto bt = Tensor::from_data(sb, bb);
        auto at = Tensor::from_data({3, 4}, av);
        auto y = tape.elementwise(kind, at, &bt);
        return tape.sum(tape.mul(y, Tensor::from_data({3, 4}, pv))).scalar();
      };
      Tape tape;
      auto at = Tensor::from_data({3, 4}, av, true);
      auto bt = Tensor::from_data(sb, bb, true);
      auto y = tape.elementwise(kind, at, &bt);
      tape.backward(tape.sum(tape.mul(y, Tensor::from_data({3, 4}, pv))));
      for (std::size_t i = 0; i < av.size(); i += 3)
        CHECK(testutil::rel_err(testutil::fd_grad(loss2, av, i), at.grad()[i]) < 1e-4);
      for (std::size_t i = 0; i < bb.size(); ++i)
        CHECK(testutil::rel_err(testutil::fd_grad(loss2, bb, i), bt.grad()[i]) < 1e-4);
    };
    check_binary(EwKind::add, {3, 4});
    check_binary(EwKind::sub, {4});
    check_binary(EwKind::mul, {4});

    // softplus and structural ops
    auto loss_soft = [&]() {
      Tape tape;
      auto y = tape.softplus(Tensor::from_data({3, 4}, av));
      return tape.sum(tape.mul(y, Tensor::from_data({3, 4}, pv))).scalar();
    };
    Tape tape;
    auto a = Tensor::from_data({3, 4}, av, true);
    tape.backward(tape.sum(tape.mul(tape.softplus(a), Tensor::from_data({3, 4}, pv))));
    for (std::size_t i = 0; i < av.size(); i += 4)
      CHECK(testutil::rel_err(testutil::fd_grad(loss_soft, av, i), a.grad()[i]) < 1e-4);
  }
}

TEST_CASE("structural ops carry gradients") {
  Rng rng(5);
  std::vector<double> av(6), bv(6), pv(12);
  for (auto& v : av) v = rng.uniform(-1, 1);
  for (auto& v : bv) v = rng.uniform(-1, 1);
  for (auto& v : pv) v = rng.uniform(-1, 1);

  auto loss_fn = [&]() {
    Tape tape;
    auto cat = tape.concat(Tensor::from_data({2, 3}, av), Tensor::from_data({2, 3}, bv), 0);
    auto t = tape.transpose2d(cat);            // [3,4]
    auto r = tape.reverse_rows(t);             // [3,4]
    auto rs = tape.reshape(r, {4, 3});
    return tape.sum(tape.mul(rs, Tensor::from_data({4, 3}, pv))).scalar();
  };
  Tape tape;
  auto a = Tensor::from_data({2, 3}, av, true);
  auto b = Tensor::from_data({2, 3}, bv, true);
  auto cat = tape.concat(a, b, 0);
  auto rs = tape.reshape(tape.reverse_rows(tape.transpose2d(cat)), {4, 3});
  tape.backward(tape.sum(tape.mul(rs, Tensor::from_data({4, 3}, pv))));
  for (std::size_t i = 0; i < av.size(); ++i) {
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, av, i), a.grad()[i]) < 1e-6);
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, bv, i), b.grad()[i]) < 1e-6);
  }
}

TEST_CASE("conv1d depthwise matches finite differences") {
  Rng rng(31);
  std::vector<double> xv(6 * 3), wv(3 * 3), bv(3), pv(6 * 3);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  for (auto& v : wv) v = rng.uniform(-1, 1);
  for (auto& v : bv) v = rng.uniform(-1, 1);
  for (auto& v : pv) v = rng.uniform(-1, 1);

  auto loss_fn = [&]() {
    Tape tape;
    auto y = tape.conv1d_depthwise(Tensor::from_data({6, 3}, xv), Tensor::from_data({3, 3}, wv),
                                   Tensor::from_data({3}, bv));
    return tape.sum(tape.mul(y, Tensor::from_data({6, 3}, pv))).scalar();
  };
  Tape tape;
  auto x = Tensor::from_data({6, 3}, xv, true);
  auto w = Tensor::from_data({3, 3}, wv, true);
  auto b = Tensor::from_data({3}, bv, true);
  tape.backward(
      tape.sum(tape.mul(tape.conv1d_depthwise(x, w, b), Tensor::from_data({6, 3}, pv))));
  for (std::size_t i = 0; i < xv.size(); ++i)
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, xv, i), x.grad()[i]) < 1e-6);
  for (std::size_t i = 0; i < wv.size(); ++i)
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, wv, i), w.grad()[i]) < 1e-6);
  for (std::size_t i = 0; i < bv.size(); ++i)
    CHECK(testutil::rel_err(testutil::fd_grad(loss_fn, bv, i), b.grad()[i]) < 1e-6);
}

TEST_CASE("forward evaluation is deterministic") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> xv(64);
    for (auto& v : xv) v = rng.uniform(-1, 1);
    Tape tape;
    auto x = Tensor::from_data({8, 8}, xv);
    auto y = tape.matmul(tape.silu(x), tape.sigmoid(x));
    return y.data();
  };
  CHECK(run(3) == run(3));
  CHECK(run(3) != run(4));
}
