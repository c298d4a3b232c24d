#include "gradcheck.hpp"

#include "mixar/cli.hpp"
#include "mixar/discrete_generator.hpp"
#include "mixar/evaluation.hpp"
#include "mixar/mixture.hpp"
#include "mixar/training.hpp"

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

using namespace mixar;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradTolerance = 1e-4;
constexpr double kMonteCarloRel = 0.02;
constexpr double kFrechetExact = 1e-6;
constexpr double kFrechetSampled = 0.05;
constexpr double kFrechetOracle = 1e-8;
constexpr double kSigmas = 3.0;
constexpr double kProbeAccuracy = 0.7;

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& title, const std::function<Verdict()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!v.pass) ++failures;
  std::printf("%s  %2d. %s [%.1f s]\n      %s\n", v.pass ? "PASS" : "FAIL", id, title.c_str(), secs, v.detail.c_str());
  std::fflush(stdout);
}

Matrix gaussian(Index r, Index c, Rng& rng) {
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// ---------------------------------------------------------------- 1-3: costs

BackboneConfig profile_dims(GuidanceVariant v, Index n, Index cls) {
  BackboneConfig c;
  c.variant = v;
  c.n_tokens = n;
  c.n_cls_tokens = cls;
  c.width = 64;
  c.depth = 2;
  c.heads = 4;
  return c;
}

ProfileOptions static_profile() {
  ProfileOptions o;
  o.measure_time = false;
  o.head_width = 16;
  o.head_blocks = 1;
  return o;
}

Verdict token_accounting() {
  const fs::path root = fs::temp_directory_path() / "mixar_acceptance_profile";
  fs::remove_all(root);
  const int code = cli::run({"profile", "--time", "false", "--N", "256", "--cls", "64", "--runs-root", root.string()});
  if (code != cli::kOk) return {false, "profile exited with " + std::to_string(code)};
  const io::Json reports = io::Json::parse(io::read_text(root / "profile" / "cost_report.json"));
  std::map<std::string, io::Json> by;
  for (const auto& r : reports) by[r.at("variant")] = r;
  const Index sa = by.at("dc-sa").at("sequence_tokens");
  const Index ca = by.at("dc-ca").at("sequence_tokens");
  const Index mix = by.at("dc-mix").at("tokens_with_cls");
  const double reduction = dc_mix_token_reduction(256, 64);
  const double from_counts = static_cast<double>(sa - mix) / static_cast<double>(sa);
  std::ostringstream os;
  os << "DC-SA " << sa << ", DC-CA " << ca << ", DC-Mix " << mix << " tokens; reduction " << reduction * 100.0
     << "% (from counts " << from_counts * 100.0 << "%)";
  fs::remove_all(root);
  return {sa == 512 && ca == 512 && mix == 320 && reduction == 0.375 && from_counts == 0.375, os.str()};
}

Verdict complexity_ratio() {
  bool ok = true;
  std::ostringstream os;
  for (Index n : {16, 64, 256}) {
    const auto sa = profile_variant(profile_dims(GuidanceVariant::DcSa, n, 0), static_profile());
    const auto mix = profile_variant(profile_dims(GuidanceVariant::DcMix, n, 0), static_profile());
    const bool exact = sa.attention_pairs_measured == 4 * mix.attention_pairs_measured &&
                       sa.attention_pairs_analytic == sa.attention_pairs_measured &&
                       mix.attention_pairs_analytic == mix.attention_pairs_measured;
    ok = ok && exact;
    os << "N=" << n << ": " << sa.attention_pairs_measured << " : " << mix.attention_pairs_measured << "  ";
  }
  return {ok, os.str()};
}

Verdict parameter_ordering() {
  std::map<GuidanceVariant, Index> count;
  for (auto v : {GuidanceVariant::DcMix, GuidanceVariant::DcSa, GuidanceVariant::DcCa, GuidanceVariant::MarBaseline}) {
    const auto r = profile_variant(profile_dims(v, 16, 4), static_profile());
    if (!r.exact()) return {false, "analytic and measured counts disagree for " + r.variant};
    count[v] = r.parameters_measured;
  }
  const BackboneConfig d = profile_dims(GuidanceVariant::DcMix, 16, 4);
  // projection weights + bias, minus the mask token the baseline carries
  const Index extra = d.code_width * d.width + d.width - d.width;
  std::ostringstream os;
  os << "DC-CA " << count[GuidanceVariant::DcCa] << " > DC-SA " << count[GuidanceVariant::DcSa] << " > DC-Mix "
     << count[GuidanceVariant::DcMix] << " = MAR " << count[GuidanceVariant::MarBaseline] << " + " << extra;
  return {count[GuidanceVariant::DcCa] > count[GuidanceVariant::DcSa] &&
              count[GuidanceVariant::DcSa] > count[GuidanceVariant::DcMix] &&
              count[GuidanceVariant::DcMix] == count[GuidanceVariant::MarBaseline] + extra,
          os.str()};
}

// ----------------------------------------------------------- 4: mixing laws

Verdict mixing_properties() {
  constexpr int kCases = 10000;
  constexpr int kVocab = 64;
  Rng meta(2024);
  const Matrix table = gaussian(kVocab, 3, meta);
  const Matrix proj = gaussian(2, 3, meta);
  Embedders embed;
  embed.continuous = [&](nn::Tape& t, const Matrix& x) { return t.constant(x * proj); };
  embed.discrete = [&](nn::Tape& t, std::span<const int> idx) {
    Matrix out(static_cast<Index>(idx.size()), 3);
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = table.row(idx[i]);
    return t.constant(out);
  };
  int popcount_bad = 0, compose_bad = 0, boundary_bad = 0;
  double gt = 0.0, expected = 0.0, variance = 0.0;
  for (int c = 0; c < kCases; ++c) {
    const Index n = 1 + static_cast<Index>(meta.below(256));
    const double r = 1.0 - meta.uniform();  // (0, 1]
    const double lambda = meta.uniform();
    Rng rng(meta.next_u64());

    const MaskSpec m = build_mask(n, r, rng);
    const Index want = static_cast<Index>(std::ceil(r * static_cast<double>(n)));
    Index pop = 0;
    for (auto f : m.mask) pop += f;
    if (pop != want) ++popcount_bad;

    std::vector<int> truth(static_cast<std::size_t>(n)), generated(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      truth[k] = static_cast<int>(rng.below(kVocab));
      generated[k] = m.mask[k] ? (truth[k] + 1 + static_cast<int>(rng.below(kVocab - 1))) % kVocab : truth[k];
    }

    nn::Tape t(false);
    const Matrix xc = gaussian(n, 2, rng);
    const auto mixed = dc_mix(t, xc, truth, m.mask, embed);
    const Matrix cont = xc * proj;
    for (Index i = 0; i < n; ++i) {
      const RowVector expect = m.mask[static_cast<std::size_t>(i)] ? RowVector(table.row(truth[static_cast<std::size_t>(i)]))
                                                                    : RowVector(cont.row(i));
      if (mixed.embeddings.value().row(i) != expect) {
        ++compose_bad;
        break;
      }
    }

    const auto none = ti_mix(truth, generated, m.mask, 0.0, rng);
    const auto all = ti_mix(truth, generated, m.mask, 1.0, rng);
    if (none.tokens != generated || all.tokens != truth) ++boundary_bad;

    const auto blend = ti_mix(truth, generated, m.mask, lambda, rng);
    for (Index i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (!m.mask[k]) {
        if (blend.tokens[k] != truth[k]) ++boundary_bad;
        continue;
      }
      const bool kept = blend.tokens[k] == truth[k];
      if (kept != (blend.source[k] == Provenance::DiscreteGt)) ++boundary_bad;
      gt += kept ? 1.0 : 0.0;
      expected += lambda;
      variance += lambda * (1.0 - lambda);
    }
  }
  const double z = std::abs(gt - expected) / std::sqrt(variance);
  std::ostringstream os;
  os << kCases << " cases: popcount mismatches " << popcount_bad << ", composition mismatches " << compose_bad
     << ", boundary/provenance mismatches " << boundary_bad << "; ground-truth count " << gt << " vs expected "
     << expected << " (" << z << " sigma)";
  return {popcount_bad == 0 && compose_bad == 0 && boundary_bad == 0 && z < kSigmas, os.str()};
}

// ------------------------------------------------------ 5: gradient checks

Verdict gradient_checks() {
  std::ostringstream os;
  double worst = 0.0;

  DiscreteGeneratorConfig gcfg;
  gcfg.vocab = 6;
  gcfg.n_tokens = 4;
  gcfg.n_classes = 3;
  gcfg.n_cls_tokens = 2;
  gcfg.width = 8;
  gcfg.depth = 2;
  gcfg.heads = 2;
  gcfg.mlp_ratio = 2;
  DiscreteGenerator g(gcfg, 3);
  testing::perturb_all(g.parameters(), 9);
  const std::vector<int> tokens{0, 1, 2, 3, 5, 4, 3, 2};
  const std::vector<int> gclasses{0, 2};
  const auto rg = testing::check_gradients(g.parameters(), [&](nn::Tape& t) {
    Rng rng(5);
    return discrete_loss(t, g, tokens, gclasses, {0.4, 1.0}, rng).loss;
  });
  os << "generator " << rg.max_rel_error << " (" << rg.checked << ")";
  worst = std::max(worst, rg.max_rel_error);

  for (auto v : {GuidanceVariant::DcMix, GuidanceVariant::DcSa, GuidanceVariant::DcCa, GuidanceVariant::MarBaseline}) {
    BackboneConfig c;
    c.variant = v;
    c.n_tokens = 4;
    c.token_width = 3;
    c.code_width = 2;
    c.vocab = 5;
    c.n_classes = 3;
    c.n_cls_tokens = 2;
    c.width = 8;
    c.depth = 2;
    c.heads = 2;
    c.mlp_ratio = 2;
    Rng rng(7);
    Backbone b(c, gaussian(c.vocab, c.code_width, rng), 8);
    testing::perturb_all(b.parameters(), 10);
    const Matrix cont = gaussian(2 * c.n_tokens, c.token_width, rng);
    std::vector<std::uint8_t> mask;
    std::vector<int> guidance;
    for (Index i = 0; i < 2 * c.n_tokens; ++i) {
      mask.push_back(static_cast<std::uint8_t>(i % 3 != 0));
      guidance.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c.vocab))));
    }
    const std::vector<int> classes{0, 3};
    BackboneInput in;
    in.batch = 2;
    in.continuous = &cont;
    in.mask = mask;
    if (uses_guidance(v)) in.guidance = guidance;
    in.classes = classes;
    const Matrix probe = gaussian(2 * c.n_tokens, c.width, rng);
    const auto r = testing::check_gradients(b.parameters(), [&](nn::Tape& t) {
      const auto out = b.forward(t, in);
      return nn::add(nn::sum(nn::mul(out.z, t.constant(probe))), nn::scale(nn::sum(nn::square(out.z)), 0.1));
    }, 4);
    os << ", " << variant_name(v) << " " << r.max_rel_error << " (" << r.checked << ")";
    worst = std::max(worst, r.max_rel_error);
  }

  DenoiserConfig hc;
  hc.token_width = 3;
  hc.cond_width = 5;
  hc.width = 8;
  hc.blocks = 2;
  hc.freq_dim = 16;
  DenoiserHead head(hc, 3);
  testing::jitter_zeros(head.parameters(), 4, 0.2);
  const auto s = DiffusionSchedule::cosine(100, 10);
  Rng data(5);
  const Matrix x0 = gaussian(4, 3, data);
  nn::Parameter z(gaussian(4, 5, data));
  nn::NamedParameters params = head.parameters();
  params.emplace_back("z", &z);
  const auto rh = testing::check_gradients(params, [&](nn::Tape& t) {
    Rng rng(6);
    return denoise_loss(t, head, t.param(z), x0, s, rng, 2);
  }, 8);
  os << ", head " << rh.max_rel_error << " (" << rh.checked << ")";
  worst = std::max(worst, rh.max_rel_error);
  os << "; worst " << worst;
  return {worst < kGradTolerance, os.str()};
}

// ------------------------------------------------------ 6: diffusion sanity

Verdict diffusion_sanity() {
  std::ostringstream os;
  bool ok = true;
  const auto s = DiffusionSchedule::cosine(1000, 10);
  Rng rng(7);
  const Index n = 100000;
  double worst_var = 0.0;
  for (int t : {1, 100, 500, 900, 1000}) {
    const Matrix x0 = gaussian(n, 1, rng), eps = gaussian(n, 1, rng);
    const Matrix xt = forward_noising(x0, std::vector<int>(static_cast<std::size_t>(n), t), eps, s);
    const double mean = xt.mean();
    const double var = (xt.array() - mean).square().sum() / static_cast<double>(n - 1);
    worst_var = std::max(worst_var, std::abs(var - 1.0));
  }
  ok = ok && worst_var < kMonteCarloRel;
  os << "noising variance max |var-1| " << worst_var;

  DiscreteGeneratorConfig gcfg;
  gcfg.width = 16;
  gcfg.depth = 1;
  DiscreteGenerator g(gcfg, 1);
  for (auto& [name, p] : g.parameters()) {
    if (name.rfind("head.", 0) == 0) p->value.setZero();
  }
  std::vector<int> tokens(2 * 16);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>(i * 7 % 64);
  const std::vector<int> classes{0, 5};
  nn::Tape t(false);
  const double ce = discrete_loss(t, g, tokens, classes, {0.5, 1.0}, rng).loss.scalar();
  ok = ok && std::abs(ce - std::log(64.0)) < 1e-12;
  os << "; uniform-logit CE " << ce << " vs ln 64 = " << std::log(64.0);

  DenoiserConfig hc;
  hc.token_width = 8;
  hc.cond_width = 4;
  hc.width = 32;
  hc.blocks = 2;
  DenoiserHead head(hc, 1);
  for (auto& [name, p] : head.parameters()) {
    if (name.rfind("output.", 0) == 0) p->value.setZero();
  }
  const Matrix x0 = gaussian(n, 8, rng);
  const double loss = denoise_loss(t, head, t.constant(gaussian(n, 4, rng)), x0, s, rng).scalar();
  ok = ok && std::abs(loss / 8.0 - 1.0) < kMonteCarloRel;
  os << "; zero-predictor loss " << loss << " vs token width 8";
  return {ok, os.str()};
}

// --------------------------------------------------------- 7: Fréchet oracle

Matrix samples_with_moments(const RowVector& mu, const Matrix& cov, Index n, Rng& rng) {
  Matrix x = gaussian(n, mu.size(), rng);
  x.rowwise() -= x.colwise().mean();
  const Matrix c = x.transpose() * x / static_cast<double>(n - 1);
  const Matrix lc = c.llt().matrixL();
  const Matrix white = lc.triangularView<Eigen::Lower>().solve(x.transpose()).transpose();
  const Matrix ls = cov.llt().matrixL();
  Matrix y = white * ls.transpose();
  y.rowwise() += mu;
  return y;
}

double eigen_closed_form(const RowVector& mu1, const Matrix& s1, const RowVector& mu2, const Matrix& s2) {
  Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(s1 * s2));
  double root_trace = 0.0;
  for (Index i = 0; i < es.eigenvalues().size(); ++i) root_trace += std::sqrt(es.eigenvalues()(i)).real();
  return (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * root_trace;
}

Verdict frechet_oracle() {
  std::ostringstream os;
  Rng rng(11);
  // diagonal covariances: sum of (sqrt a - sqrt b)^2 plus the mean gap
  RowVector mu1(4), mu2(4), a(4), b(4);
  mu1 << 0, 1, 2, 3;
  mu2 << 1, 1, 0, 3;
  a << 1, 4, 0.25, 2;
  b << 4, 1, 1, 2;
  const Matrix x = samples_with_moments(mu1, a.asDiagonal(), 50, rng);
  const Matrix y = samples_with_moments(mu2, b.asDiagonal(), 70, rng);
  const double exact = (mu1 - mu2).squaredNorm() + (a.array().sqrt() - b.array().sqrt()).square().sum();
  const double diag_err = std::abs(frechet_surrogate(x, y) - exact);
  const double self = frechet_surrogate(x, x);

  Matrix p = gaussian(10000, 4, rng), q = gaussian(10000, 4, rng);
  q.col(0).array() += 1.0;
  const double shifted = frechet_surrogate(p, q);

  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto spd = [&] {
      const Matrix m = gaussian(3, 3, rng);
      return Matrix(m * m.transpose() + 0.1 * Matrix::Identity(3, 3));
    };
    const Matrix s1 = spd(), s2 = spd();
    const RowVector m1 = gaussian(1, 3, rng), m2 = gaussian(1, 3, rng);
    const Matrix u = samples_with_moments(m1, s1, 40, rng);
    const Matrix v = samples_with_moments(m2, s2, 60, rng);
    worst = std::max(worst, std::abs(frechet_surrogate(u, v) - eigen_closed_form(m1, s1, m2, s2)));
  }
  os << "diagonal closed form error " << diag_err << ", self-distance " << self << ", unit mean shift " << shifted
     << ", worst 3x3 SPD disagreement " << worst;
  return {diag_err < kFrechetExact && self < kFrechetExact && std::abs(shifted - 1.0) < kFrechetSampled &&
              worst < kFrechetOracle,
          os.str()};
}

// ------------------------------------------------ 8-9: toy reproductions

// Shared toy setup: tokenizers, the discrete generator, a probe, and the
// reference features. Seeds of this stage are fixed; the per-seed runs vary
// only the MixAR seeds.
struct Bench {
  DatasetSplit split;
  ImageBatch reference;
  std::optional<TrainedTokenizers> tok;
  std::optional<DiscreteGenerator> gen;
  std::optional<ProbeClassifier> probe;
  TokenizedDataset train, val;
  Matrix reference_features;
  std::vector<int> classes;
};

constexpr int kImagesPerClass = 64;
constexpr int kTokenizerEpochs = 30;
constexpr int kGeneratorEpochs = 60;
constexpr int kMixarEpochs = 200;
constexpr int kContinueEpochs = 40;
constexpr int kGeneratedImages = 512;
constexpr std::uint64_t kSampleSeed = 3;

Bench& bench() {
  static std::optional<Bench> b;
  if (b) return *b;
  b.emplace();
  DatasetSpec spec;
  spec.images_per_class = kImagesPerClass;
  b->split = split_dataset(generate_dataset(spec));
  DatasetSpec ref = spec;
  ref.seed = 77;
  b->reference = generate_dataset(ref);
  TokenizerTrainConfig tt;
  tt.epochs = kTokenizerEpochs;
  b->tok = train_tokenizers(b->split.train, TokenizerConfig{}, tt);
  b->train = tokenize_dataset(b->split.train, b->tok->continuous, b->tok->vq);
  b->val = tokenize_dataset(b->reference, b->tok->continuous, b->tok->vq);
  DiscreteGeneratorConfig gc;
  gc.width = 64;
  gc.depth = 2;
  b->gen.emplace(gc, 1);
  DiscreteTrainConfig dt;
  dt.epochs = kGeneratorEpochs;
  train_discrete(*b->gen, b->train.discrete, b->train.labels, dt);
  b->probe.emplace(b->split.train.pixels_per_image(), spec.n_classes, ProbeConfig{});
  b->probe->fit(b->split.train);
  b->reference_features = b->probe->features(b->reference);
  for (int i = 0; i < kGeneratedImages; ++i) b->classes.push_back(i % spec.n_classes);
  return *b;
}

MixarConfig bench_model(GuidanceVariant v) {
  MixarConfig mc;
  mc.backbone.variant = v;
  mc.backbone.width = 64;
  mc.backbone.depth = 2;
  mc.head.width = 64;
  mc.head.blocks = 2;
  mc.sample_steps = 50;
  return mc;
}

TrainConfig ground_truth_training(std::uint64_t seed) {
  TrainConfig c;
  c.epochs = kMixarEpochs;
  c.ema_decay = 0.99;
  c.ti_mix.lambda_end = 1.0;
  c.seeds = {seed * 11, seed * 13, seed * 17, seed * 19};
  return c;
}

double frechet_of(MixarModel& m) {
  Bench& b = bench();
  const GeneratedBatch out = generate_images(m.variant() == GuidanceVariant::MarBaseline ? nullptr : &*b.gen, m,
                                             b.tok->continuous, b.classes, GenerationConfig{}, kSampleSeed);
  return frechet_surrogate(b.reference_features, b.probe->features(out.images));
}

// DC-Mix checkpoints trained on ground-truth guidance, reused by criterion 9.
std::map<std::uint64_t, io::Checkpoint> dc_mix_checkpoints;

Verdict table_direction() {
  Bench& b = bench();
  HeldOutConfig hc;
  const auto masks = evaluation_masks(b.val.size(), b.val.n_tokens, hc);
  int wins = 0;
  std::ostringstream os;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    double loss[2], fd[2];
    int k = 0;
    for (auto v : {GuidanceVariant::DcMix, GuidanceVariant::MarBaseline}) {
      MixarModel m(bench_model(v), b.tok->vq.codebook(), seed);
      train_mixar(m, b.train, nullptr, ground_truth_training(seed));
      loss[k] = held_out_loss(m, b.val, v == GuidanceVariant::MarBaseline ? std::span<const int>{} : b.val.discrete,
                              masks, hc);
      fd[k] = frechet_of(m);
      if (v == GuidanceVariant::DcMix) dc_mix_checkpoints[seed] = m.to_checkpoint();
      ++k;
    }
    const bool win = loss[0] < loss[1] && fd[0] < fd[1];
    wins += win ? 1 : 0;
    os << "seed " << seed << ": loss " << loss[0] << " vs " << loss[1] << ", frechet " << fd[0] << " vs " << fd[1]
       << (win ? "" : " (lost)") << "; ";
  }
  os << wins << "/3 seeds";
  return {wins == 3, os.str()};
}

Verdict ti_mix_direction() {
  Bench& b = bench();
  HeldOutConfig hc;
  int wins = 0;
  std::ostringstream os;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    if (!dc_mix_checkpoints.count(seed)) {
      MixarModel m(bench_model(GuidanceVariant::DcMix), b.tok->vq.codebook(), seed);
      train_mixar(m, b.train, nullptr, ground_truth_training(seed));
      dc_mix_checkpoints[seed] = m.to_checkpoint();
    }
    double gap[2], fd[2];
    for (int arm = 0; arm < 2; ++arm) {
      MixarModel m = MixarModel::from_checkpoint(dc_mix_checkpoints[seed]);
      TrainConfig c;
      c.epochs = kContinueEpochs;
      c.ema_decay = 0.99;
      c.warmup = 0.0;
      c.lr = 5e-4;
      c.ti_mix.lambda_end = arm == 0 ? 1.0 : 0.0;
      c.seeds = {seed * 23, seed * 29, seed * 31, seed * 37};
      train_mixar(m, b.train, &*b.gen, c);
      gap[arm] = train_eval_gap(m, b.val, *b.gen, hc).gap();
      fd[arm] = frechet_of(m);
    }
    const bool win = gap[1] < gap[0] && fd[1] <= fd[0];
    wins += win ? 1 : 0;
    os << "seed " << seed << ": gap " << gap[1] << " vs " << gap[0] << ", frechet " << fd[1] << " vs " << fd[0]
       << (win ? "" : " (lost)") << "; ";
  }
  os << wins << "/3 seeds";
  return {wins == 3, os.str()};
}

// ------------------------------------------------------ 10: CLI pipeline

io::Json last_metrics(const fs::path& run) {
  const auto rows = io::read_jsonl(run / "metrics.jsonl");
  if (rows.empty()) throw IoError("no metrics in " + run.string());
  return rows.back();
}

Verdict end_to_end() {
  const fs::path root = fs::temp_directory_path() / "mixar_acceptance_pipeline";
  fs::remove_all(root);
  auto step = [&](std::vector<std::string> args) {
    args.push_back("--runs-root");
    args.push_back(root.string());
    const int code = cli::run(args);
    if (code != cli::kOk) throw std::runtime_error(args.front() + " exited with " + std::to_string(code));
  };
  step({"tokenizer-train"});
  step({"dar-train"});
  step({"mixar-train"});
  step({"sample", "--name", "sample-a", "--seed", "5", "--per-class", "256"});
  step({"sample", "--name", "sample-b", "--seed", "5", "--per-class", "256"});
  step({"eval", "--seed", "5", "--per-class", "256"});
  const io::Json a = last_metrics(root / "sample-a"), b = last_metrics(root / "sample-b");
  const io::Json report = io::Json::parse(io::read_text(root / "eval" / "report.json"));
  const std::int64_t images = a.at("images");
  const std::int64_t covered = a.at("provenance_continuous");
  const double accuracy = report.at("probe_accuracy_generated");
  std::ostringstream os;
  os << images << " images, continuous provenance " << covered << "/" << images * 16 << ", checksums "
     << a.at("checksum").get<std::string>() << " / " << b.at("checksum").get<std::string>() << ", probe accuracy "
     << accuracy << ", frechet " << report.at("frechet_generated").get<double>();
  const bool ok = images == 8 * 256 && covered == images * 16 && a.at("checksum") == b.at("checksum") &&
                  accuracy >= kProbeAccuracy;
  fs::remove_all(root);
  return {ok, os.str()};
}

}  // namespace

int main() {
  cli::tune_allocator();
  criterion(1, "token accounting at N=256, 64 class tokens", token_accounting);
  criterion(2, "attention pairs DC-SA : DC-Mix = 4 : 1 without class tokens", complexity_ratio);
  criterion(3, "parameter ordering DC-CA > DC-SA > DC-Mix = MAR + projection", parameter_ordering);
  criterion(4, "mixing laws over 10^4 random cases", mixing_properties);
  criterion(5, "analytic gradients match central differences", gradient_checks);
  criterion(6, "diffusion and cross-entropy sanity", diffusion_sanity);
  criterion(7, "Frechet surrogate oracles", frechet_oracle);
  criterion(8, "DC-Mix beats the unguided baseline (3 seeds)", table_direction);
  criterion(9, "mixed-guidance continuation narrows the gap without hurting Frechet (3 seeds)", ti_mix_direction);
  criterion(10, "end-to-end CLI pipeline", end_to_end);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
