#include "gradcheck.hpp"

#include "mixar/diffusion_head.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace mixar;

namespace {

Matrix gaussian(Index r, Index c, Rng& rng) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

DenoiserConfig small_head(int token_width, int cond_width) {
  DenoiserConfig c;
  c.token_width = token_width;
  c.cond_width = cond_width;
  c.width = 32;
  c.blocks = 2;
  c.freq_dim = 16;
  return c;
}

}  // namespace

TEST_CASE("cosine schedule endpoints and monotonicity") {
  const auto s = DiffusionSchedule::cosine(1000, 100);
  REQUIRE(s.alpha_bar.size() == 1001u);
  CHECK(s.alpha_bar[0] == 1.0);
  for (std::size_t t = 1; t < s.alpha_bar.size(); ++t) {
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    CHECK(s.alpha_bar[t] > 0.0);
  }
  CHECK(s.alpha_bar[1000] < 1e-4);
  // Unclipped closed form in the interior: f(t) / f(0), f = cos^2((t/T + s)/(1 + s) pi/2).
  auto f = [](double t) {
    const double c = std::cos((t / 1000.0 + 0.008) / 1.008 * std::numbers::pi / 2.0);
    return c * c;
  };
  CHECK(s.alpha_bar[500] == doctest::Approx(f(500) / f(0)).epsilon(1e-12));
}

TEST_CASE("respaced timesteps are evenly spaced and end at T") {
  const auto s = DiffusionSchedule::cosine(1000, 50);
  const auto taus = s.sampling_timesteps();
  CHECK(taus.size() == 50u);
  CHECK(taus.front() == 20);
  CHECK(taus.back() == 1000);
  for (std::size_t i = 1; i < taus.size(); ++i) CHECK(taus[i] - taus[i - 1] == 20);
  CHECK_THROWS_AS(DiffusionSchedule::cosine(10, 20), ConfigError);
}

TEST_CASE("schedule json round-trip") {
  const auto s = DiffusionSchedule::cosine(200, 20);
  const auto back = DiffusionSchedule::from_json(s.to_json());
  CHECK(back.alpha_bar == s.alpha_bar);
  CHECK(back.sample_steps == 20);
}

TEST_CASE("noising at t zero returns the clean token and at T is nearly the noise") {
  const auto s = DiffusionSchedule::cosine(1000, 10);
  Rng rng(1);
  const Matrix x0 = gaussian(3, 4, rng), eps = gaussian(3, 4, rng);
  CHECK(forward_noising(x0, std::vector<int>{0, 0, 0}, eps, s) == x0);
  const Matrix late = forward_noising(x0, std::vector<int>{1000, 1000, 1000}, eps, s);
  CHECK((late - eps).cwiseAbs().maxCoeff() < 1e-3);
  CHECK_THROWS_AS(forward_noising(x0, std::vector<int>{0, 1, 1001}, eps, s), ContractError);
}

TEST_CASE("noising preserves unit variance") {
  const auto s = DiffusionSchedule::cosine(1000, 10);
  Rng rng(7);
  const Index n = 100000;
  for (int t : {1, 100, 500, 900, 1000}) {
    const Matrix x0 = gaussian(n, 1, rng), eps = gaussian(n, 1, rng);
    const Matrix xt = forward_noising(x0, std::vector<int>(static_cast<std::size_t>(n), t), eps, s);
    const double mean = xt.mean();
    const double var = (xt.array() - mean).square().sum() / static_cast<double>(n - 1);
    INFO("t = " << t);
    CHECK(std::abs(var - 1.0) < 0.02);
  }
}

TEST_CASE("clean estimate inverts the noising map") {
  const auto s = DiffusionSchedule::cosine(1000, 10);
  Rng rng(2);
  const Matrix x0 = gaussian(5, 3, rng), eps = gaussian(5, 3, rng);
  const std::vector<int> t{1, 10, 300, 700, 999};
  const Matrix xt = forward_noising(x0, t, eps, s);
  for (Index r = 0; r < 5; ++r) {
    const int k = t[static_cast<std::size_t>(r)];
    const RowVector back = (xt.row(r) - s.noise(k) * eps.row(r)) / s.signal(k);
    CHECK(back.isApprox(x0.row(r), 1e-9));
  }
}

TEST_CASE("timestep embedding layout") {
  const Matrix e = timestep_embedding(std::vector<int>{0, 3}, 8);
  CHECK(e.row(0).head(4).isApprox(RowVector::Ones(4)));
  CHECK(e.row(0).tail(4).isZero(0.0));
  CHECK(e(1, 0) == doctest::Approx(std::cos(3.0)));
  CHECK(e(1, 4) == doctest::Approx(std::sin(3.0)));
  CHECK(e(1, 1) == doctest::Approx(std::cos(3.0 * std::exp(-std::log(10000.0) / 4.0))));
}

TEST_CASE("a zero predictor has expected loss equal to the token width") {
  DenoiserHead head(small_head(8, 4), 1);
  for (auto& [name, p] : head.parameters()) {
    if (name.rfind("output.", 0) == 0) p->value.setZero();
  }
  const auto s = DiffusionSchedule::cosine(1000, 10);
  Rng rng(3);
  const Index n = 100000;
  nn::Tape t(false);
  const Matrix x0 = gaussian(n, 8, rng);
  const double loss = denoise_loss(t, head, t.constant(gaussian(n, 4, rng)), x0, s, rng).scalar();
  CHECK(std::abs(loss / 8.0 - 1.0) < 0.02);
}

TEST_CASE("freshly built head predicts zero noise") {
  DenoiserHead head(small_head(3, 4), 2);
  Rng rng(1);
  nn::Tape t(false);
  const Matrix out = head.predict(t, t.constant(gaussian(5, 3, rng)), std::vector<int>{1, 2, 3, 4, 5},
                                  t.constant(gaussian(5, 4, rng))).value();
  CHECK(out.isZero(0.0));
}

TEST_CASE("head gradients match central differences") {
  DenoiserConfig cfg = small_head(3, 5);
  cfg.width = 8;
  DenoiserHead head(cfg, 3);
  testing::jitter_zeros(head.parameters(), 4, 0.2);
  const auto s = DiffusionSchedule::cosine(100, 10);
  Rng data(5);
  const Matrix x0 = gaussian(4, 3, data);
  nn::Parameter z(gaussian(4, 5, data));
  nn::NamedParameters params = head.parameters();
  params.emplace_back("z", &z);
  const auto r = testing::check_gradients(params, [&](nn::Tape& t) {
    Rng rng(6);
    return denoise_loss(t, head, t.param(z), x0, s, rng, 2);
  }, 8);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("sampling is deterministic and counts head evaluations") {
  DenoiserHead head(small_head(3, 4), 4);
  testing::jitter_zeros(head.parameters(), 1);
  const auto s = DiffusionSchedule::cosine(1000, 25);
  Rng data(2);
  const Matrix zc = gaussian(6, 4, data), zn = gaussian(6, 4, data);
  Rng a(9), b(9);
  const auto before = head.evaluations();
  const Matrix x1 = sample_tokens(head, zc, nullptr, s, {}, a);
  CHECK(head.evaluations() - before == 25);
  CHECK(x1 == sample_tokens(head, zc, nullptr, s, {}, b));

  Rng c(9), d(9);
  const Matrix with_null = sample_tokens(head, zc, &zn, s, {.guidance_scale = 1.0}, c);
  CHECK(with_null == x1);
  const auto mid = head.evaluations();
  sample_tokens(head, zc, &zn, s, {.guidance_scale = 2.0}, d);
  CHECK(head.evaluations() - mid == 50);
  Rng e(1);
  CHECK_THROWS_AS(sample_tokens(head, zc, nullptr, s, {.guidance_scale = 2.0}, e), ContractError);
}

TEST_CASE("classifier-free guidance extrapolates the noise estimate") {
  // With x0 clipping off and a single step, the output is linear in eps_hat,
  // so guided samples equal null + s (cond - null) for a shared rng.
  DenoiserHead head(small_head(2, 3), 5);
  testing::jitter_zeros(head.parameters(), 2);
  const auto s = DiffusionSchedule::cosine(100, 1);
  Rng data(3);
  const Matrix zc = gaussian(4, 3, data), zn = gaussian(4, 3, data);
  Rng r1(5), r2(5), r3(5);
  const Matrix cond = sample_tokens(head, zc, nullptr, s, {}, r1);
  const Matrix null = sample_tokens(head, zn, nullptr, s, {}, r2);
  const Matrix guided = sample_tokens(head, zc, &zn, s, {.guidance_scale = 3.0}, r3);
  CHECK(guided.isApprox(null + 3.0 * (cond - null), 1e-9));
}

TEST_CASE("trained head recovers the mode selected by its conditioning") {
  const auto s = DiffusionSchedule::cosine(1000, 50);
  DenoiserHead head(small_head(1, 2), 6);
  nn::Adam opt(head.parameters(), {.lr = 3e-3});
  Rng rng(7);
  const Index batch = 256;
  Matrix z(batch, 2), x0(batch, 1);
  for (int step = 0; step < 2500; ++step) {
    for (Index r = 0; r < batch; ++r) {
      const bool upper = r % 2 == 0;
      z.row(r) << (upper ? 1.0 : 0.0), (upper ? 0.0 : 1.0);
      x0(r, 0) = (upper ? 1.0 : -1.0) + 0.05 * rng.normal();
    }
    nn::Tape t;
    nn::Var loss = denoise_loss(t, head, t.constant(z), x0, s, rng);
    opt.zero_grad();
    t.backward(loss);
    opt.step(nn::warmup_cosine_lr(3e-3, step, 2500, 0.02));
  }
  for (int mode = 0; mode < 2; ++mode) {
    Matrix zq(1000, 2);
    for (Index r = 0; r < zq.rows(); ++r) zq.row(r) << (mode == 0 ? 1.0 : 0.0), (mode == 0 ? 0.0 : 1.0);
    Rng srng(8 + static_cast<std::uint64_t>(mode));
    const Matrix x = sample_tokens(head, zq, nullptr, s, {.x0_clip = 5.0}, srng);
    const double target = mode == 0 ? 1.0 : -1.0;
    INFO("mode " << mode << " mean " << x.mean());
    CHECK(std::abs(x.mean() - target) < 0.05);
  }
}
