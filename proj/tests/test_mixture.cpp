#include "mixar/mixture.hpp"
#include "mixar/nn/ops.hpp"

#include <doctest.h>

#include <cmath>

using namespace mixar;

namespace {

// Continuous tokens map to (x, 0), discrete index k to (0, 100 + k), so the
// source of every mixed row is visible from its value.
Embedders tagging_embedders() {
  Embedders e;
  e.continuous = [](nn::Tape& t, const Matrix& x) {
    Matrix out = Matrix::Zero(x.rows(), 2);
    out.col(0) = x.col(0);
    return t.constant(out);
  };
  e.discrete = [](nn::Tape& t, std::span<const int> idx) {
    Matrix out = Matrix::Zero(static_cast<Index>(idx.size()), 2);
    for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Index>(i), 1) = 100 + idx[i];
    return t.constant(out);
  };
  return e;
}

}  // namespace

TEST_CASE("dc_mix substitutes discrete embeddings at masked positions") {
  nn::Tape t(false);
  Matrix xc(4, 1);
  xc << 1, 2, 3, 4;
  const std::vector<int> xd{10, 20, 30, 40};
  const auto m = dc_mix(t, xc, xd, std::vector<std::uint8_t>{0, 1, 1, 0}, tagging_embedders());
  Matrix expect(4, 2);
  expect << 1, 0, 0, 120, 0, 130, 4, 0;
  CHECK(m.embeddings.value() == expect);
  CHECK(m.provenance == std::vector<Provenance>{Provenance::Continuous, Provenance::DiscreteGt,
                                                Provenance::DiscreteGt, Provenance::Continuous});
}

TEST_CASE("dc_mix boundary masks") {
  nn::Tape t(false);
  Matrix xc(3, 1);
  xc << 7, 8, 9;
  const std::vector<int> xd{1, 2, 3};
  const auto none = dc_mix(t, xc, xd, std::vector<std::uint8_t>{0, 0, 0}, tagging_embedders());
  CHECK(none.embeddings.value().col(1).isZero(0.0));
  CHECK(none.embeddings.value().col(0) == xc.col(0));
  const auto all = dc_mix(t, xc, xd, std::vector<std::uint8_t>{1, 1, 1}, tagging_embedders());
  CHECK(all.embeddings.value().col(0).isZero(0.0));
  for (auto p : all.provenance) CHECK(p == Provenance::DiscreteGt);
}

TEST_CASE("dc_mix records generated provenance and checks lengths") {
  nn::Tape t(false);
  Matrix xc = Matrix::Zero(2, 1);
  const std::vector<int> xd{1, 2};
  const std::vector<Provenance> src{Provenance::DiscreteGt, Provenance::DiscreteGen};
  const auto m = dc_mix(t, xc, xd, std::vector<std::uint8_t>{1, 1}, tagging_embedders(), src);
  CHECK(m.provenance == src);
  CHECK_THROWS_AS(dc_mix(t, xc, std::vector<int>{1}, std::vector<std::uint8_t>{1, 1}, tagging_embedders()),
                  ContractError);
}

TEST_CASE("dc_mix routes gradients only to the selected embedder rows") {
  Matrix xc(3, 1);
  xc << 1, 2, 3;
  nn::Parameter wc(Matrix::Ones(1, 2));
  nn::Parameter table(Matrix::Ones(4, 2));
  Embedders e;
  e.continuous = [&](nn::Tape& t, const Matrix& x) { return nn::matmul(t.constant(x), t.param(wc)); };
  e.discrete = [&](nn::Tape& t, std::span<const int> idx) { return nn::gather_rows(t.param(table), idx); };
  nn::Tape t;
  const auto m = dc_mix(t, xc, std::vector<int>{0, 1, 2}, std::vector<std::uint8_t>{1, 0, 0}, e);
  t.backward(nn::sum(m.embeddings));
  CHECK(table.grad.row(0).sum() == 2.0);
  CHECK(table.grad.bottomRows(3).isZero(0.0));
  CHECK(wc.grad.sum() == doctest::Approx(2.0 * (2 + 3)));
}

TEST_CASE("ti_mix boundary ratios") {
  const std::vector<int> truth{1, 2, 3, 4, 5};
  const std::vector<int> gen{1, 9, 9, 4, 9};
  const std::vector<std::uint8_t> mask{0, 1, 1, 0, 1};
  Rng rng(1);
  CHECK(ti_mix(truth, gen, mask, 1.0, rng).tokens == truth);
  const auto zero = ti_mix(truth, gen, mask, 0.0, rng);
  CHECK(zero.tokens == gen);
  CHECK(zero.source[0] == Provenance::DiscreteGt);
  CHECK(zero.source[1] == Provenance::DiscreteGen);
}

TEST_CASE("ti_mix ground-truth fraction at lambda one half") {
  const int n = 10000;
  std::vector<int> truth(n, 0), gen(n, 1);
  std::vector<std::uint8_t> mask(n, 1);
  Rng rng(42);
  const auto out = ti_mix(truth, gen, mask, 0.5, rng);
  int gt = 0;
  for (int v : out.tokens) gt += v == 0;
  CHECK(std::abs(gt / static_cast<double>(n) - 0.5) < 0.02);
}

TEST_CASE("ti_mix rejects generated tokens that disagree off the mask") {
  Rng rng(1);
  CHECK_THROWS_AS(ti_mix(std::vector<int>{1, 2}, std::vector<int>{3, 2}, std::vector<std::uint8_t>{0, 1}, 0.5, rng),
                  ContractError);
  CHECK_THROWS_AS(ti_mix(std::vector<int>{1}, std::vector<int>{1}, std::vector<std::uint8_t>{1}, 1.5, rng),
                  ContractError);
}

TEST_CASE("lambda schedule examples") {
  TiMixConfig cfg;
  CHECK(lambda_schedule(0, 200, cfg) == 1.0);
  CHECK(lambda_schedule(200, 200, cfg) == 0.0);
  cfg.start_epoch = 100;
  CHECK(lambda_schedule(150, 200, cfg) == doctest::Approx(0.5));
  CHECK(lambda_schedule(99, 200, cfg) == 1.0);
  cfg.lambda_end = 0.2;
  CHECK(lambda_schedule(200, 200, cfg) == doctest::Approx(0.2));
  cfg.decay = LambdaDecay::Cosine;
  CHECK(lambda_schedule(150, 200, cfg) == doctest::Approx(0.6));
}

TEST_CASE("lambda schedule is monotone non-increasing") {
  for (auto decay : {LambdaDecay::Linear, LambdaDecay::Cosine}) {
    for (int start : {0, 3, 10}) {
      TiMixConfig cfg{0.9, 0.1, decay, start};
      double prev = 2.0;
      for (int e = 0; e <= 20; ++e) {
        const double l = lambda_schedule(e, 20, cfg);
        CHECK(l <= prev);
        CHECK(l >= 0.1 - 1e-12);
        prev = l;
      }
    }
  }
}

TEST_CASE("lambda configuration errors") {
  CHECK_THROWS_AS((TiMixConfig{0.5, 0.6, LambdaDecay::Linear, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((TiMixConfig{1.5, 0.0, LambdaDecay::Linear, 0}.validate()), ConfigError);
  CHECK_THROWS_AS(parse_lambda_decay("step"), ConfigError);
  CHECK(TiMixConfig{1.0, 1.0, LambdaDecay::Linear, 0}.always_ground_truth());
}
