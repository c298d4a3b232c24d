#include "mixar/evaluation.hpp"

#include "mixar/io.hpp"
#include "mixar/nn/ops.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mixar {

ProbeClassifier::ProbeClassifier(Index input_dim, int n_classes, const ProbeConfig& cfg)
    : cfg_(cfg), n_classes_(n_classes) {
  if (input_dim <= 0 || n_classes <= 1 || cfg.hidden <= 0) throw ConfigError("probe: invalid dimensions");
  Rng rng(mix_seed(cfg.seed, 0x9B));
  fc1_ = nn::Linear(input_dim, cfg.hidden, rng);
  fc2_ = nn::Linear(cfg.hidden, n_classes, rng);
}

nn::Var ProbeClassifier::hidden(nn::Tape& t, const Matrix& pixels) { return nn::gelu(fc1_(t, t.constant(pixels))); }

std::vector<double> ProbeClassifier::fit(const ImageBatch& images) {
  const Index count = images.size();
  require(count > 0, "probe: no training images");
  if (cfg_.epochs <= 0 || cfg_.batch_size <= 0 || cfg_.lr <= 0.0) throw ConfigError("probe: invalid schedule");
  Rng rng(mix_seed(cfg_.seed, 0x9C));
  nn::Adam opt(parameters(), {.lr = cfg_.lr});
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  const Index per_epoch = (count + cfg_.batch_size - 1) / cfg_.batch_size;
  const std::int64_t total = per_epoch * cfg_.epochs;
  std::int64_t step = 0;
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    rng.shuffle(std::span<int>(order));
    double sum = 0.0;
    for (Index begin = 0; begin < count; begin += cfg_.batch_size) {
      const Index end = std::min<Index>(count, begin + cfg_.batch_size);
      const ImageBatch b = images.rows(std::span<const int>(order).subspan(static_cast<std::size_t>(begin),
                                                                           static_cast<std::size_t>(end - begin)));
      nn::Tape t;
      const std::vector<double> w(static_cast<std::size_t>(end - begin), 1.0);
      nn::Var loss = nn::cross_entropy(fc2_(t, hidden(t, b.pixels)), b.labels, w);
      require_finite(loss.scalar(), "probe loss");
      opt.zero_grad();
      t.backward(loss);
      opt.step(nn::warmup_cosine_lr(cfg_.lr, step++, total, 0.0));
      sum += loss.scalar() * static_cast<double>(end - begin);
    }
    history.push_back(sum / static_cast<double>(count));
  }
  return history;
}

Matrix ProbeClassifier::features(const ImageBatch& images) {
  nn::Tape t(false);
  return hidden(t, images.pixels).value();
}

std::vector<int> ProbeClassifier::predict(const ImageBatch& images) {
  nn::Tape t(false);
  const Matrix logits = fc2_(t, hidden(t, images.pixels)).value();
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    logits.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

double ProbeClassifier::accuracy(const ImageBatch& images) {
  require(images.size() > 0 && static_cast<Index>(images.labels.size()) == images.size(), "probe: labelled images required");
  const auto pred = predict(images);
  Index hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == images.labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

nn::NamedParameters ProbeClassifier::parameters() {
  nn::NamedParameters out;
  fc1_.collect(out, "fc1.");
  fc2_.collect(out, "fc2.");
  return out;
}

namespace {

void moments(const Matrix& x, RowVector& mu, Matrix& cov) {
  mu = x.colwise().mean();
  const Matrix c = x.rowwise() - mu;
  cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
}

// Symmetric square root; eigenvalues below -tol are rejected.
Matrix psd_sqrt(const Matrix& a, double tol) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(0.5 * (a + a.transpose())));
  if (es.info() != Eigen::Success) throw NumericalError("frechet: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  if (ev.minCoeff() < -tol) throw NumericalError("frechet: covariance is not positive semi-definite");
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_surrogate(const Matrix& real, const Matrix& generated) {
  require(real.rows() >= 2 && generated.rows() >= 2, "frechet: need at least two samples per side");
  require(real.cols() == generated.cols(), "frechet: feature widths differ");
  RowVector mu1, mu2;
  Matrix s1, s2;
  moments(real, mu1, s1);
  moments(generated, mu2, s2);
  const double tol = 1e-9 * std::max(1.0, s1.trace() + s2.trace());
  // (S1 S2)^{1/2} has the same trace as (S1^{1/2} S2 S1^{1/2})^{1/2}, which is symmetric.
  const Matrix r1 = psd_sqrt(s1, tol);
  const Matrix inner = r1 * s2 * r1;
  const double cross = psd_sqrt(inner, tol).trace();
  const double d = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
  require_finite(d, "frechet distance");
  return std::max(d, 0.0);
}

io::Json CostReport::to_json() const {
  return {{"variant", variant},
          {"n_tokens", n_tokens},
          {"n_cls_tokens", n_cls_tokens},
          {"continuous_tokens", continuous_tokens},
          {"guidance_tokens", guidance_tokens},
          {"sequence_tokens", sequence_tokens},
          {"tokens_with_cls", tokens_with_cls},
          {"self_attention_length", self_attention_length},
          {"attention_pairs_analytic", attention_pairs_analytic},
          {"attention_pairs_measured", attention_pairs_measured},
          {"parameters_analytic", parameters_analytic},
          {"parameters_measured", parameters_measured},
          {"seconds_per_train_step", seconds_per_train_step},
          {"seconds_per_image", seconds_per_image},
          {"peak_tape_bytes", peak_tape_bytes}};
}

std::string CostReport::to_text() const {
  std::ostringstream os;
  os << "variant                 " << variant << "\n"
     << "tokens (N, cls)         " << n_tokens << ", " << n_cls_tokens << "\n"
     << "sequence tokens         " << sequence_tokens << "  (continuous " << continuous_tokens << " + discrete "
     << guidance_tokens << ")\n"
     << "tokens with cls         " << tokens_with_cls << "\n"
     << "self-attention length   " << self_attention_length << "\n"
     << "attention pairs         " << attention_pairs_analytic << " analytic, " << attention_pairs_measured
     << " measured\n"
     << "parameters              " << parameters_analytic << " analytic, " << parameters_measured << " measured\n"
     << "train step (s)          " << seconds_per_train_step << "\n"
     << "sample (s/img)          " << seconds_per_image << "\n"
     << "peak tape bytes         " << peak_tape_bytes << "\n";
  return os.str();
}

double dc_mix_token_reduction(Index n_tokens, Index n_cls_tokens) {
  require(n_tokens > 0 && n_cls_tokens >= 0, "token reduction: invalid counts");
  const double prefix = 2.0 * static_cast<double>(n_tokens);
  return (prefix - static_cast<double>(n_tokens + n_cls_tokens)) / prefix;
}

CostReport profile_variant(const BackboneConfig& dims, const ProfileOptions& opts) {
  dims.validate();
  CostReport r;
  r.variant = variant_name(dims.variant);
  r.n_tokens = dims.n_tokens;
  r.n_cls_tokens = dims.n_cls_tokens;
  r.continuous_tokens = dims.n_tokens;
  const bool extra = dims.variant == GuidanceVariant::DcSa || dims.variant == GuidanceVariant::DcCa;
  r.guidance_tokens = extra ? dims.n_tokens : 0;
  r.sequence_tokens = r.continuous_tokens + r.guidance_tokens;
  r.tokens_with_cls = r.sequence_tokens + dims.n_cls_tokens;
  r.self_attention_length = self_attention_length(dims);
  r.attention_pairs_analytic = expected_attention_pairs(dims);
  r.parameters_analytic = count_parameters(dims);

  Rng rng(mix_seed(opts.seed, 0x9F));
  Matrix codebook = nn::normal_init(dims.vocab, dims.code_width, 1.0, rng);
  Backbone model(dims, codebook, opts.seed);
  r.parameters_measured = model.parameter_count();

  const Index n = dims.n_tokens;
  Matrix tokens = nn::normal_init(n, dims.token_width, 1.0, rng);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; i += 2) mask[static_cast<std::size_t>(i)] = 1;
  std::vector<int> guidance(static_cast<std::size_t>(n));
  for (auto& g : guidance) g = static_cast<int>(rng.below(static_cast<std::uint64_t>(dims.vocab)));
  const std::vector<int> classes{0};
  BackboneInput in{1, &tokens, mask, {}, {}, classes};
  if (uses_guidance(dims.variant)) in.guidance = guidance;

  DenoiserConfig hc;
  hc.token_width = dims.token_width;
  hc.cond_width = dims.width;
  hc.width = opts.head_width;
  hc.blocks = opts.head_blocks;
  DenoiserHead head(hc, opts.seed);
  const DiffusionSchedule sched = DiffusionSchedule::cosine(1000, opts.sample_steps);

  using clock = std::chrono::steady_clock;
  {
    const auto t0 = clock::now();
    nn::Tape t;
    BackboneOutput out = model.forward(t, in);
    r.attention_pairs_measured = out.attention_pairs();
    Rng drng(opts.seed);
    nn::Var loss = denoise_loss(t, head, out.z, tokens, sched, drng, 1);
    t.backward(loss);
    r.seconds_per_train_step = std::chrono::duration<double>(clock::now() - t0).count();
    r.peak_tape_bytes = t.bytes();
  }
  if (r.attention_pairs_measured != r.attention_pairs_analytic || r.parameters_measured != r.parameters_analytic) {
    throw ContractError("profile: analytic and instrumented counts disagree for " + r.variant);
  }
  if (opts.measure_time) {
    const auto t0 = clock::now();
    const DecodeSchedule ds = build_decode_schedule(static_cast<int>(n), opts.decode_steps, ScheduleShape::Cosine);
    Rng srng(opts.seed);
    for (int c : ds.counts) {
      nn::Tape t(false);
      const Matrix z = model.forward(t, in).z.value();
      sample_tokens(head, z.topRows(c), nullptr, sched, {}, srng);
    }
    r.seconds_per_image = std::chrono::duration<double>(clock::now() - t0).count();
  }
  return r;
}

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 6> kPalette{{
    {31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}, {23, 190, 207}}};

struct Canvas {
  int w, h;
  std::vector<double> chw;
  Canvas(int width, int height) : w(width), h(height), chw(static_cast<std::size_t>(3 * width * height), 1.0) {}
  void set(int x, int y, const std::array<std::uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    for (int ch = 0; ch < 3; ++ch) chw[static_cast<std::size_t>((ch * h + y) * w + x)] = c[static_cast<std::size_t>(ch)] / 255.0;
  }
  void line(int x0, int y0, int x1, int y1, const std::array<std::uint8_t, 3>& c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) { err += dy; x0 += sx; }
      if (e2 <= dx) { err += dx; y0 += sy; }
    }
  }
};

}  // namespace

void write_line_plot(const std::filesystem::path& path, const std::vector<std::vector<double>>& series, int width,
                     int height) {
  require(width > 20 && height > 20, "plot: canvas too small");
  double lo = INFINITY, hi = -INFINITY;
  std::size_t len = 0;
  for (const auto& s : series) {
    for (double v : s) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    len = std::max(len, s.size());
  }
  Canvas cv(width, height);
  const int m = 10;
  const std::array<std::uint8_t, 3> axis{0, 0, 0};
  cv.line(m, height - m, width - m, height - m, axis);
  cv.line(m, m, m, height - m, axis);
  if (len > 0 && std::isfinite(lo)) {
    if (hi - lo < 1e-12) hi = lo + 1.0;
    auto px = [&](std::size_t i) {
      return m + static_cast<int>(std::lround(len > 1 ? static_cast<double>(i) / (len - 1) * (width - 2 * m) : 0.0));
    };
    auto py = [&](double v) { return height - m - static_cast<int>(std::lround((v - lo) / (hi - lo) * (height - 2 * m))); };
    for (std::size_t k = 0; k < series.size(); ++k) {
      const auto& col = kPalette[k % kPalette.size()];
      const auto& s = series[k];
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        if (std::isfinite(s[i]) && std::isfinite(s[i + 1])) cv.line(px(i), py(s[i]), px(i + 1), py(s[i + 1]), col);
      }
      if (s.size() == 1 && std::isfinite(s[0])) cv.set(px(0), py(s[0]), col);
    }
  }
  io::write_ppm(path, cv.chw, 3, height, width);
}

void write_image_grid(const std::filesystem::path& path, const ImageBatch& images, int cols, int zoom) {
  require(images.size() > 0 && cols > 0 && zoom > 0, "image grid: nothing to draw");
  const int n = static_cast<int>(images.size());
  const int rows = (n + cols - 1) / cols;
  const int pad = 1;
  const int cw = images.width * zoom + pad, ch = images.height * zoom + pad;
  const int w = cols * cw + pad, h = rows * ch + pad;
  const int c = images.channels;
  std::vector<double> out(static_cast<std::size_t>(3 * w * h), 1.0);
  for (int k = 0; k < n; ++k) {
    const int ox = pad + (k % cols) * cw, oy = pad + (k / cols) * ch;
    for (int y = 0; y < images.height * zoom; ++y) {
      for (int x = 0; x < images.width * zoom; ++x) {
        for (int p = 0; p < 3; ++p) {
          const int src = std::min(p, c - 1);
          const double v = images.pixels(k, (src * images.height + y / zoom) * images.width + x / zoom);
          out[static_cast<std::size_t>((p * h + oy + y) * w + ox + x)] = v;
        }
      }
    }
  }
  io::write_ppm(path, out, 3, h, w);
}

}  // namespace mixar
