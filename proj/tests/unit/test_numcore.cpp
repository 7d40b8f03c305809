#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "irs/autograd.hpp"
#include "irs/checkpoint.hpp"
#include "irs/optim.hpp"
#include "support/fd.hpp"

using namespace irs;
using namespace irs::nn;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = scale * (2.0 * uniform_real(rng) - 1.0);
  return t;
}

}  // namespace

TEST_CASE("matmul matches hand arithmetic and a naive loop") {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>::matrix(2, 2, {1, 2, 3, 4}));
  auto b = tape.constant(Tensor<double>::matrix(2, 2, {5, 6, 7, 8}));
  auto c = matmul(a, b);
  CHECK(c.value().storage() == std::vector<double>{19, 22, 43, 50});

  auto eye = tape.constant(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  CHECK(matmul(eye, b).value().storage() == b.value().storage());

  auto rng = derive_stream(7, "matmul");
  auto x = random_tensor({5, 7}, rng);
  auto y = random_tensor({7, 3}, rng);
  auto z = matmul(tape.constant(x), tape.constant(y)).value();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += x.at(i, k) * y.at(k, j);
      CHECK(z.at(i, j) == doctest::Approx(s).epsilon(1e-12));
    }

  // Transposed operands agree with the plain product.
  Tensor<double> xtv({7, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t k = 0; k < 7; ++k) xtv.at(k, i) = x.at(i, k);
  auto zt = matmul(tape.constant(xtv), tape.constant(y), true, false).value();
  for (std::size_t i = 0; i < zt.size(); ++i) CHECK(zt[i] == doctest::Approx(z[i]).epsilon(1e-12));

  CHECK_THROWS_AS(matmul(a, tape.constant(Tensor<double>({3, 2}))), ShapeError);
}

TEST_CASE("softmax rows") {
  Tape<double> tape;
  auto p = softmax_rows(tape.constant(Tensor<double>::matrix(1, 3, {0, 0, 0}))).value();
  for (auto v : p.storage()) CHECK(v == doctest::Approx(1.0 / 3.0));

  auto q = softmax_rows(tape.constant(Tensor<double>::matrix(1, 2, {2.5, -kInf}))).value();
  CHECK(q[0] == 1.0);
  CHECK(q[1] == 0.0);

  CHECK_THROWS_AS(softmax_rows(tape.constant(Tensor<double>::matrix(1, 2, {-kInf, -kInf}))), NumericError);

  Tape<float> ftape;
  auto rng = derive_stream(3, "softmax");
  auto x = random_tensor({4, 9}, rng, 5.0);
  auto f = softmax_rows(ftape.constant(x.cast<float>())).value();
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 9; ++c) z += std::exp(x.at(r, c));
    double row_sum = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      CHECK(std::abs(f.at(r, c) - std::exp(x.at(r, c)) / z) < 1e-6);
      row_sum += f.at(r, c);
    }
    CHECK(std::abs(row_sum - 1.0) < 1e-6);
  }
}

TEST_CASE("scaled dot attention") {
  Tape<double> tape;
  auto rng = derive_stream(11, "attn");
  const std::size_t heads = 2, m = 3, d = 4;
  auto q = tape.constant(random_tensor({heads, m, d}, rng));
  auto k = tape.constant(random_tensor({heads, m, d}, rng));
  auto vv = random_tensor({heads, m, d}, rng);
  auto v = tape.constant(vv);

  SUBCASE("diagonal-only mask returns V") {
    Tensor<double> bias({m, m}, -kInf);
    for (std::size_t i = 0; i < m; ++i) bias.at(i, i) = 0;
    auto out = scaled_dot_attention(q, k, v, tape.constant(bias)).value();
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(vv[i]));
  }
  SUBCASE("identical keys average V") {
    Tensor<double> kk({heads, m, d}, 0.3);
    auto out = scaled_dot_attention(q, tape.constant(kk), v, tape.constant(Tensor<double>({m, m}))).value();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < d; ++c) {
          double mean = 0;
          for (std::size_t j = 0; j < m; ++j) mean += vv[(h * m + j) * d + c];
          CHECK(out[(h * m + i) * d + c] == doctest::Approx(mean / m));
        }
  }
  SUBCASE("single head m=2 hand case") {
    auto q1 = tape.constant(Tensor<double>({1, 2, 2}, {1, 0, 0, 1}));
    auto k1 = tape.constant(Tensor<double>({1, 2, 2}, {1, 1, 0, 2}));
    auto v1 = tape.constant(Tensor<double>({1, 2, 1}, {10, 20}));
    auto bias = tape.constant(Tensor<double>({2, 2}, {0, -kInf, 0.5, 0}));
    auto out = scaled_dot_attention(q1, k1, v1, bias).value();
    // Row 0 only sees key 0. Row 1 scores: (1/sqrt2 + 0.5, 2/sqrt2).
    const double s0 = 1 / std::sqrt(2.0) + 0.5, s1 = 2 / std::sqrt(2.0);
    const double p0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
    CHECK(out[0] == doctest::Approx(10.0));
    CHECK(out[1] == doctest::Approx(10 * p0 + 20 * (1 - p0)).epsilon(1e-12));
  }
  SUBCASE("fully masked row is an error") {
    Tensor<double> bias({m, m}, -kInf);
    CHECK_THROWS_AS(scaled_dot_attention(q, k, v, tape.constant(bias)), NumericError);
  }
}

TEST_CASE("cross entropy") {
  Tape<double> tape;
  std::vector<std::int64_t> t{2, -1, 0};
  auto loss = cross_entropy(tape.constant(Tensor<double>({3, 5}, 0.7)), t, -1).value();
  CHECK(loss.item() == doctest::Approx(std::log(5.0)));

  auto big = tape.constant(Tensor<double>::matrix(1, 3, {0, 500, 0}));
  std::vector<std::int64_t> one{1};
  CHECK(cross_entropy(big, one, -1).value().item() < 1e-12);

  std::vector<std::int64_t> none{-1, -1};
  CHECK_THROWS(cross_entropy(tape.constant(Tensor<double>({2, 3})), none, -1));

  auto rng = derive_stream(5, "ce");
  auto logits = random_tensor({6, 8}, rng, 3.0);
  std::vector<std::int64_t> targets{1, 7, -1, 0, 3, -1};
  Tape<float> ftape;
  const double got = cross_entropy(ftape.constant(logits.cast<float>()), targets, -1).value().item();
  double want = 0;
  int n = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    if (targets[r] < 0) continue;
    double z = 0;
    for (std::size_t c = 0; c < 8; ++c) z += std::exp(logits.at(r, c));
    want += -(logits.at(r, static_cast<std::size_t>(targets[r])) - std::log(z));
    ++n;
  }
  CHECK(std::abs(got - want / n) < 1e-5);

  // Ignored rows get exactly zero gradient.
  Parameter<double> p("logits", logits);
  Tape<double> gt;
  gt.backward(cross_entropy(gt.parameter(p), targets, -1));
  for (std::size_t c = 0; c < 8; ++c) {
    CHECK(p.grad.at(2, c) == 0.0);
    CHECK(p.grad.at(5, c) == 0.0);
  }
}

TEST_CASE("backward basics") {
  auto rng = derive_stream(1, "bw");
  Parameter<double> w("w", random_tensor({3, 4}, rng));
  {
    Tape<double> tape;
    auto loss = sum(tape.parameter(w));
    tape.backward(loss);
    for (auto g : w.grad.storage()) CHECK(g == 1.0);
    CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
  }
  w.zero_grad();
  {
    Tape<double> tape;
    tape.backward(square_sum(tape.parameter(w)));
    for (std::size_t i = 0; i < w.value.size(); ++i) CHECK(w.grad[i] == doctest::Approx(2 * w.value[i]));
  }
  Tape<double> tape;
  CHECK_THROWS_AS(tape.backward(tape.parameter(w)), ShapeError);
  Tape<double> detached;
  CHECK_THROWS(detached.backward(detached.constant(Tensor<double>({1}, 1.0))));
}

TEST_CASE("three-layer network matches finite differences at h=1e-3") {
  auto rng = derive_stream(8, "mlp");
  Parameter<double> w1("w1", random_tensor({5, 8}, rng, 0.4));
  Parameter<double> b1("b1", random_tensor({8}, rng, 0.1));
  Parameter<double> w2("w2", random_tensor({8, 8}, rng, 0.4));
  Parameter<double> b2("b2", random_tensor({8}, rng, 0.1));
  Parameter<double> w3("w3", random_tensor({8, 4}, rng, 0.4));
  auto x = random_tensor({6, 5}, rng);
  std::vector<std::int64_t> targets{0, 3, 1, -1, 2, 2};
  std::vector<Parameter<double>*> params{&w1, &b1, &w2, &b2, &w3};
  auto forward = [&](Tape<double>& tape) {
    auto h1 = tanh(add_bias(matmul(tape.constant(x), tape.parameter(w1)), tape.parameter(b1)));
    auto h2 = tanh(add_bias(matmul(h1, tape.parameter(w2)), tape.parameter(b2)));
    return cross_entropy(matmul(h2, tape.parameter(w3)), targets, -1);
  };
  auto res = testing::check_gradients(
      params,
      [&] {
        Tape<double> t;
        t.set_grad_enabled(false);
        return forward(t).value().item();
      },
      [&] {
        Tape<double> t;
        t.backward(forward(t));
      },
      40, 8, 1e-3);
  CHECK(res.checked >= 100);
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("attention composite matches finite differences") {
  auto rng = derive_stream(2, "composite");
  const std::size_t batch = 2, m = 3, d = 4, heads = 2, vocab = 6;
  Parameter<double> table("table", random_tensor({vocab, d}, rng));
  Parameter<double> w1("w1", random_tensor({d, d}, rng, 0.7));
  Parameter<double> b1("b1", random_tensor({d}, rng, 0.1));
  Parameter<double> wq("wq", random_tensor({d, d}, rng, 0.7));
  Parameter<double> wk("wk", random_tensor({d, d}, rng, 0.7));
  Parameter<double> wv("wv", random_tensor({d, d}, rng, 0.7));
  Parameter<double> gamma("gamma", random_tensor({d}, rng, 0.3));
  Parameter<double> beta("beta", random_tensor({d}, rng, 0.3));
  Parameter<double> pos("pos", random_tensor({m, d}, rng, 0.5));
  Parameter<double> w2("w2", random_tensor({vocab, d}, rng, 0.7));
  Parameter<double> bias_w("bias_w", Tensor<double>({batch, m, m}));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) bias_w.value[(b * m + i) * m + j] = j > i ? -kInf : 0.3 * (i + j + b);
  for (auto& g : gamma.value.storage()) g += 1.0;

  std::vector<std::int64_t> ids{1, 4, 2, 5, 0, 3};
  std::vector<std::int64_t> targets{4, 2, -1, 0, 3, 1};
  std::vector<Parameter<double>*> params{&table, &w1, &b1, &wq, &wk, &wv, &gamma, &beta, &pos, &w2};

  auto forward = [&](Tape<double>& tape) {
    auto x = add_tiled(gather_rows(tape.parameter(table), ids), tape.parameter(pos));
    auto h = tanh(add_bias(matmul(x, tape.parameter(w1)), tape.parameter(b1)));
    auto q = matmul(h, tape.parameter(wq));
    auto k = matmul(h, tape.parameter(wk));
    auto v = matmul(h, tape.parameter(wv));
    auto a = attention(q, k, v, tape.constant(bias_w.value), heads);
    auto y = relu(layer_norm(add(a, h), tape.parameter(gamma), tape.parameter(beta)));
    auto sq = scale(square_sum(sub(y, mul(h, h))), 0.01);
    auto logits = matmul(y, tape.parameter(w2), false, true);
    return add(cross_entropy(logits, targets, -1), sq);
  };
  auto loss_value = [&] {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    return forward(tape).value().item();
  };
  auto analytic = [&] {
    Tape<double> tape;
    tape.backward(forward(tape));
  };
  auto res = testing::check_gradients(params, loss_value, analytic, 16, 9, 1e-5);
  CHECK(res.checked >= 100);
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("attention bias gradient and head helpers") {
  auto rng = derive_stream(4, "bias");
  Parameter<double> q("q", random_tensor({2, 3, 2}, rng));
  Parameter<double> k("k", random_tensor({2, 3, 2}, rng));
  Parameter<double> v("v", random_tensor({2, 3, 3}, rng));
  Parameter<double> bias("bias", random_tensor({3, 3}, rng));
  std::vector<Parameter<double>*> params{&q, &k, &v, &bias};
  auto forward = [&](Tape<double>& tape) {
    auto out = scaled_dot_attention(tape.parameter(q), tape.parameter(k), tape.parameter(v), tape.parameter(bias));
    return square_sum(out);
  };
  auto res = testing::check_gradients(
      params,
      [&] {
        Tape<double> t;
        return forward(t).value().item();
      },
      [&] {
        Tape<double> t;
        t.backward(forward(t));
      },
      50, 4, 1e-5);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves params unchanged") {
    Parameter<double> w("w", Tensor<double>({3}, 1.5));
    std::vector<Parameter<double>*> ps{&w};
    auto st = make_adam(ps, {.lr = 0.1});
    adam_step(ps, st);
    CHECK(st.step_count == 1);
    for (auto v : w.value.storage()) CHECK(v == 1.5);
  }
  SUBCASE("one step matches the textbook formula") {
    Parameter<double> w("w", Tensor<double>({2}, std::vector<double>{0.5, -2.0}));
    w.grad = Tensor<double>({2}, std::vector<double>{0.3, -4.0});
    std::vector<Parameter<double>*> ps{&w};
    auto st = make_adam(ps, {.lr = 0.01});
    adam_step(ps, st);
    for (int i = 0; i < 2; ++i) {
      const double g = i == 0 ? 0.3 : -4.0;
      const double start = i == 0 ? 0.5 : -2.0;
      const double mhat = (0.1 * g) / 0.1;
      const double vhat = (0.001 * g * g) / 0.001;
      CHECK(w.value[i] == doctest::Approx(start - 0.01 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-12));
    }
  }
  SUBCASE("quadratic converges") {
    Parameter<double> w("w", Tensor<double>({1}, 1.0));
    std::vector<Parameter<double>*> ps{&w};
    auto st = make_adam(ps, {.lr = 0.1});
    for (int i = 0; i < 200; ++i) {
      w.grad[0] = 2 * w.value[0];
      adam_step(ps, st);
    }
    CHECK(std::abs(w.value[0]) < 1e-2);
  }
  SUBCASE("checked mode rejects NaN") {
    Parameter<double> w("w", Tensor<double>({1}, 1.0));
    w.grad[0] = std::nan("");
    std::vector<Parameter<double>*> ps{&w};
    auto st = make_adam(ps);
    CHECK_THROWS_AS(adam_step(ps, st), NumericError);
  }
}

TEST_CASE("plateau scheduler") {
  PlateauScheduler improving(1.0, 0.5, 2);
  for (double m = 10; m > 1; m -= 1) CHECK(improving.step(m) == 1.0);

  PlateauScheduler flat(1.0, 0.5, 2, 0.2);
  std::vector<double> lrs;
  for (int i = 0; i < 9; ++i) lrs.push_back(flat.step(5.0));
  // First call sets the best; then halves every two stale calls, floored at 0.2.
  CHECK(lrs == std::vector<double>{1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.2, 0.2, 0.2});

  // Hand-simulated mixed sequence, patience 3, threshold 1e-4.
  PlateauScheduler mixed(0.8, 0.5, 3);
  std::vector<double> metrics{5.0, 4.0, 3.9999, 4.1, 4.0, 3.0, 3.0, 3.0, 3.0, 2.9999};
  std::vector<double> want{0.8, 0.8, 0.8, 0.8, 0.4, 0.4, 0.4, 0.4, 0.2, 0.2};
  for (std::size_t i = 0; i < metrics.size(); ++i) CHECK(mixed.step(metrics[i]) == doctest::Approx(want[i]));
}

TEST_CASE("checkpoint round trip") {
  Checkpoint c;
  c.meta = {{"kind", "test"}, {"d", 4}};
  c.tensors.emplace("b", Tensor<float>({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6}));
  c.tensors.emplace("a", Tensor<float>({1}, 0.25f));
  auto path = std::filesystem::temp_directory_path() / "irs_ckpt_test.bin";
  save_checkpoint(path, c);
  auto back = load_checkpoint(path);
  CHECK(back.meta == c.meta);
  CHECK(back.at("b").storage() == c.at("b").storage());
  CHECK(back.at("b").shape() == Shape{2, 3});
  CHECK(back.at("a").item() == 0.25f);
  const auto bytes = read_file(path);
  save_checkpoint(path, back);
  CHECK(read_file(path) == bytes);
  write_file_atomic(path, "garbage");
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::filesystem::remove(path);
}
