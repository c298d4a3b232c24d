#include "mixar/training.hpp"

#include "mixar/nn/ops.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace mixar {

TokenizedDataset TokenizedDataset::rows(std::span<const int> which) const {
  TokenizedDataset out;
  out.n_tokens = n_tokens;
  out.continuous.resize(static_cast<Index>(which.size()) * n_tokens, continuous.cols());
  for (std::size_t k = 0; k < which.size(); ++k) {
    const Index src = which[k];
    require(src >= 0 && src < size(), "TokenizedDataset::rows: index out of range");
    out.continuous.middleRows(static_cast<Index>(k) * n_tokens, n_tokens) = continuous.middleRows(src * n_tokens, n_tokens);
    out.discrete.insert(out.discrete.end(), discrete.begin() + src * n_tokens, discrete.begin() + (src + 1) * n_tokens);
    out.labels.push_back(labels[static_cast<std::size_t>(src)]);
  }
  return out;
}

TokenizedDataset tokenize_dataset(const ImageBatch& images, const ContinuousTokenizer& continuous,
                                  const VqTokenizer& vq) {
  TokenizedDataset out;
  ContinuousSequence c = continuous.encode(images);
  DiscreteSequence d = vq.encode(images);
  require(c.n_tokens() == d.n_tokens(), "tokenizers disagree on the token grid");
  out.n_tokens = c.n_tokens();
  out.continuous = std::move(c.tokens);
  out.discrete = std::move(d.indices);
  out.labels = images.labels;
  return out;
}

LatentNormalization LatentNormalization::fit(const Matrix& tokens) {
  require(tokens.rows() > 1, "latent normalization needs at least two rows");
  LatentNormalization n;
  n.mean = tokens.colwise().mean();
  const Matrix centered = tokens.rowwise() - n.mean;
  n.scale = (centered.colwise().squaredNorm() / static_cast<double>(tokens.rows() - 1)).cwiseSqrt();
  n.scale = n.scale.cwiseMax(1e-6);
  return n;
}

Matrix LatentNormalization::apply(const Matrix& tokens) const {
  if (mean.size() == 0) return tokens;
  Matrix out = tokens.rowwise() - mean;
  return out.array().rowwise() / scale.array();
}

Matrix LatentNormalization::invert(const Matrix& normalized) const {
  if (mean.size() == 0) return normalized;
  Matrix out = normalized.array().rowwise() * scale.array();
  return out.rowwise() + mean;
}

void MixarConfig::sync() {
  head.token_width = backbone.token_width;
  head.cond_width = backbone.width;
}

void MixarConfig::validate() const {
  backbone.validate();
  head.validate();
  if (head.token_width != backbone.token_width || head.cond_width != backbone.width) {
    throw ConfigError("mixar: head widths must match the backbone (d_c, d_b)");
  }
  if (train_steps < 1 || sample_steps < 1 || sample_steps > train_steps) {
    throw ConfigError("mixar: need 1 <= sample_steps <= train_steps");
  }
}

io::Json MixarConfig::to_json() const {
  return {{"backbone", backbone.to_json()},
          {"head", head.to_json()},
          {"train_steps", train_steps},
          {"sample_steps", sample_steps}};
}

MixarConfig MixarConfig::from_json(const io::Json& j) {
  MixarConfig c;
  c.backbone = BackboneConfig::from_json(j.at("backbone"));
  c.head = DenoiserConfig::from_json(j.at("head"));
  c.train_steps = j.at("train_steps");
  c.sample_steps = j.at("sample_steps");
  return c;
}

namespace {

MixarConfig synced(MixarConfig c) {
  c.sync();
  c.validate();
  return c;
}

}  // namespace

MixarModel::MixarModel(const MixarConfig& cfg, const Matrix& codebook, std::uint64_t seed)
    : cfg_(synced(cfg)),
      backbone_(cfg_.backbone, codebook, seed),
      head_(cfg_.head, mix_seed(seed, 0x4EAD)),
      schedule_(DiffusionSchedule::cosine(cfg_.train_steps, cfg_.sample_steps)) {}

void MixarModel::set_sample_steps(int steps) {
  cfg_.sample_steps = steps;
  schedule_ = DiffusionSchedule::cosine(cfg_.train_steps, steps);
}

nn::NamedParameters MixarModel::parameters() {
  nn::NamedParameters out;
  for (auto& [name, p] : backbone_.parameters()) out.emplace_back("backbone." + name, p);
  for (auto& [name, p] : head_.parameters()) out.emplace_back("head." + name, p);
  return out;
}

nn::NamedParameters MixarModel::trainable_parameters() {
  nn::NamedParameters out;
  for (auto& entry : parameters()) {
    if (entry.second->trainable) out.push_back(entry);
  }
  return out;
}

void MixarModel::swap_ema() {
  auto params = trainable_parameters();
  require(ema_.size() == params.size(), "EMA state does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) std::swap(ema_[i], params[i].second->value);
}

io::Checkpoint MixarModel::to_checkpoint(const io::Json& extra) {
  io::Checkpoint c;
  c.manifest = extra;
  c.manifest["kind"] = "mixar";
  c.manifest["config"] = cfg_.to_json();
  c.manifest["schedule"] = schedule_.to_json();
  c.manifest["has_ema"] = has_ema();
  c.arrays = io::export_parameters(parameters());
  if (norm_.mean.size() > 0) {
    c.arrays["norm.mean"] = norm_.mean;
    c.arrays["norm.scale"] = norm_.scale;
  }
  auto params = trainable_parameters();
  for (std::size_t i = 0; i < ema_.size(); ++i) c.arrays["ema." + params[i].first] = ema_[i];
  return c;
}

MixarModel MixarModel::from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.manifest.value("kind", "") != "mixar") throw IoError("not a mixar checkpoint");
  MixarConfig cfg = MixarConfig::from_json(ckpt.manifest.at("config"));
  const Matrix placeholder = Matrix::Zero(cfg.backbone.vocab, cfg.backbone.code_width);
  MixarModel m(cfg, placeholder);
  io::import_parameters(m.parameters(), ckpt.arrays);
  if (ckpt.arrays.count("norm.mean") != 0) {
    m.norm_.mean = ckpt.arrays.at("norm.mean");
    m.norm_.scale = ckpt.arrays.at("norm.scale");
  }
  if (ckpt.manifest.value("has_ema", false)) {
    for (auto& [name, p] : m.trainable_parameters()) {
      auto it = ckpt.arrays.find("ema." + name);
      if (it == ckpt.arrays.end()) throw IoError("checkpoint is missing EMA array '" + name + "'");
      m.ema_.push_back(it->second);
    }
  }
  return m;
}

void TrainConfig::validate() const {
  if (epochs <= 0 || batch_size <= 0 || !(lr > 0.0)) throw ConfigError("train: epochs, batch size and lr must be positive");
  if (warmup < 0.0 || warmup >= 1.0) throw ConfigError("train: warmup fraction must lie in [0, 1)");
  if (ema_decay < 0.0 || ema_decay >= 1.0) throw ConfigError("train: ema decay must lie in [0, 1)");
  if (class_dropout < 0.0 || class_dropout >= 1.0) throw ConfigError("train: class dropout must lie in [0, 1)");
  if (diffusion_repeats < 1 || eval_every < 1) throw ConfigError("train: repeats and eval interval must be positive");
  if (weight_decay < 0.0 || grad_clip < 0.0) throw ConfigError("train: weight decay and clip must be non-negative");
  mask.validate();
  ti_mix.validate();
}

io::Json ti_mix_to_json(const TiMixConfig& c) {
  return {{"lambda_start", c.lambda_start},
          {"lambda_end", c.lambda_end},
          {"decay", c.decay == LambdaDecay::Linear ? "linear" : "cosine"},
          {"start_epoch", c.start_epoch}};
}

TiMixConfig ti_mix_from_json(const io::Json& j) {
  TiMixConfig c;
  c.lambda_start = j.at("lambda_start");
  c.lambda_end = j.at("lambda_end");
  c.decay = parse_lambda_decay(j.at("decay"));
  c.start_epoch = j.at("start_epoch");
  return c;
}

io::Json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"warmup", warmup},
          {"ema_decay", ema_decay},
          {"weight_decay", weight_decay},
          {"grad_clip", grad_clip},
          {"mask_min", mask.min},
          {"mask_max", mask.max},
          {"ti_mix", ti_mix_to_json(ti_mix)},
          {"class_dropout", class_dropout},
          {"diffusion_repeats", diffusion_repeats},
          {"generator_temperature", generator_temperature},
          {"eval_every", eval_every},
          {"seeds",
           {{"data", seeds.data}, {"masking", seeds.masking}, {"diffusion", seeds.diffusion}, {"ti_mix", seeds.ti_mix}}}};
}

TrainConfig TrainConfig::from_json(const io::Json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.lr = j.at("lr");
  c.warmup = j.at("warmup");
  c.ema_decay = j.at("ema_decay");
  c.weight_decay = j.at("weight_decay");
  c.grad_clip = j.at("grad_clip");
  c.mask.min = j.at("mask_min");
  c.mask.max = j.at("mask_max");
  c.ti_mix = ti_mix_from_json(j.at("ti_mix"));
  c.class_dropout = j.at("class_dropout");
  c.diffusion_repeats = j.at("diffusion_repeats");
  c.generator_temperature = j.at("generator_temperature");
  c.eval_every = j.at("eval_every");
  const auto& s = j.at("seeds");
  c.seeds.data = s.at("data");
  c.seeds.masking = s.at("masking");
  c.seeds.diffusion = s.at("diffusion");
  c.seeds.ti_mix = s.at("ti_mix");
  return c;
}

nn::Var masked_diffusion_loss(nn::Tape& t, DenoiserHead& head, nn::Var z, const Matrix& targets,
                              std::span<const std::uint8_t> mask, const DiffusionSchedule& s, Rng& rng, int repeats) {
  require(static_cast<Index>(mask.size()) == z.rows() && targets.rows() == z.rows(),
          "masked_diffusion_loss: one mask flag and target per row");
  std::vector<int> rows;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0) rows.push_back(static_cast<int>(i));
  }
  require(!rows.empty(), "masked_diffusion_loss: no masked positions");
  Matrix x0(static_cast<Index>(rows.size()), targets.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) x0.row(static_cast<Index>(k)) = targets.row(rows[k]);
  return denoise_loss(t, head, nn::gather_rows(z, rows), x0, s, rng, repeats);
}

namespace {

struct Batch {
  std::vector<int> ids;
  Matrix continuous;  // normalized
  std::vector<int> discrete;
  std::vector<int> labels;
};

Batch gather_batch(const TokenizedDataset& data, const Matrix& normalized, std::span<const int> ids) {
  Batch b;
  const Index n = data.n_tokens;
  b.ids.assign(ids.begin(), ids.end());
  b.continuous.resize(static_cast<Index>(ids.size()) * n, normalized.cols());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const Index s = ids[k];
    b.continuous.middleRows(static_cast<Index>(k) * n, n) = normalized.middleRows(s * n, n);
    b.discrete.insert(b.discrete.end(), data.discrete.begin() + s * n, data.discrete.begin() + (s + 1) * n);
    b.labels.push_back(data.labels[static_cast<std::size_t>(s)]);
  }
  return b;
}

std::vector<std::uint8_t> draw_masks(Index batch, Index n, const MaskRatioConfig& cfg, Rng& rng) {
  std::vector<std::uint8_t> flags;
  flags.reserve(static_cast<std::size_t>(batch * n));
  for (Index b = 0; b < batch; ++b) {
    MaskSpec m = build_mask(n, sample_mask_ratio(rng, cfg), rng);
    flags.insert(flags.end(), m.mask.begin(), m.mask.end());
  }
  return flags;
}

void check_dataset(const MixarModel& model, const TokenizedDataset& data) {
  const auto& bc = model.config().backbone;
  require(data.size() > 0, "empty dataset");
  require(data.n_tokens == bc.n_tokens, "dataset token count does not match the backbone");
  require(data.continuous.cols() == bc.token_width, "dataset token width does not match the backbone");
  require(static_cast<Index>(data.discrete.size()) == data.size() * data.n_tokens, "dataset discrete view is inconsistent");
}

}  // namespace

TrainResult train_mixar(MixarModel& model, const TokenizedDataset& data, DiscreteGenerator* generator,
                        const TrainConfig& cfg, const EpochHook& hook) {
  cfg.validate();
  check_dataset(model, data);
  const GuidanceVariant variant = model.variant();
  const bool guided = uses_guidance(variant);
  if (guided && !cfg.ti_mix.always_ground_truth() && generator == nullptr) {
    throw ConfigError("ti-mix with lambda < 1 needs a trained discrete generator");
  }
  if (model.normalization().mean.size() == 0) model.set_normalization(LatentNormalization::fit(data.continuous));
  const Matrix normalized = model.normalization().apply(data.continuous);
  const Index n = data.n_tokens;
  const int null_class = model.config().backbone.n_classes;

  auto params = model.trainable_parameters();
  nn::Adam opt(params, {.lr = cfg.lr, .weight_decay = cfg.weight_decay, .grad_clip = cfg.grad_clip});
  nn::Ema ema(params, cfg.ema_decay);
  if (model.has_ema()) ema.load_shadow(model.ema_values());

  Rng data_rng(mix_seed(cfg.seeds.data, 0xD0));
  Rng mask_rng(mix_seed(cfg.seeds.masking, 0x3A));
  Rng diff_rng(mix_seed(cfg.seeds.diffusion, 0xD1));
  Rng mix_rng(mix_seed(cfg.seeds.ti_mix, 0x71));

  std::vector<int> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), 0);
  const Index per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total = per_epoch * cfg.epochs;

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lambda = guided ? lambda_schedule(epoch, cfg.epochs, cfg.ti_mix) : 1.0;
    data_rng.shuffle(std::span<int>(order));
    double sum = 0.0;
    double lr = 0.0;
    for (Index begin = 0; begin < data.size(); begin += cfg.batch_size) {
      const Index end = std::min<Index>(data.size(), begin + cfg.batch_size);
      const Index bsz = end - begin;
      Batch b = gather_batch(data, normalized, std::span<const int>(order).subspan(static_cast<std::size_t>(begin),
                                                                                    static_cast<std::size_t>(bsz)));
      const std::vector<std::uint8_t> mask = draw_masks(bsz, n, cfg.mask, mask_rng);

      std::vector<int> guidance;
      std::vector<Provenance> source;
      if (guided) {
        if (lambda >= 1.0) {
          guidance = b.discrete;
          source.assign(guidance.size(), Provenance::DiscreteGt);
        } else {
          const auto masked = mask_discrete_sequence(b.discrete, mask, generator->mask_token());
          const auto infilled = infill_discrete(*generator, masked, b.labels, cfg.generator_temperature, mix_rng);
          ++result.generator_calls;
          TiMixResult mixed = ti_mix(b.discrete, infilled, mask, lambda, mix_rng);
          guidance = std::move(mixed.tokens);
          source = std::move(mixed.source);
        }
      }
      std::vector<int> classes = b.labels;
      if (cfg.class_dropout > 0.0) {
        for (int& c : classes) {
          if (data_rng.uniform() < cfg.class_dropout) c = null_class;
        }
      }

      nn::Tape t;
      BackboneInput in{bsz, &b.continuous, mask, guidance, source, classes};
      BackboneOutput out = model.backbone().forward(t, in);
      nn::Var loss = masked_diffusion_loss(t, model.head(), out.z, b.continuous, mask, model.schedule(), diff_rng,
                                           cfg.diffusion_repeats);
      if (!std::isfinite(loss.scalar())) {
        throw NumericalError("mixar loss is non-finite at epoch " + std::to_string(epoch + 1));
      }
      opt.zero_grad();
      t.backward(loss);
      lr = nn::warmup_cosine_lr(cfg.lr, result.steps++, total, cfg.warmup);
      opt.step(lr);
      ema.update();
      sum += loss.scalar() * static_cast<double>(bsz);
    }
    EpochRecord rec{epoch + 1, sum / static_cast<double>(data.size()), lambda, lr};
    result.epochs.push_back(rec);
    if (hook && (rec.epoch % cfg.eval_every == 0 || rec.epoch == cfg.epochs)) {
      model.set_ema_values(ema.shadow());
      hook(rec, model);
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.seconds_per_step = result.steps > 0 ? seconds / static_cast<double>(result.steps) : 0.0;
  model.set_ema_values(ema.shadow());
  return result;
}

std::vector<std::uint8_t> evaluation_masks(Index n, Index n_tokens, const HeldOutConfig& cfg) {
  cfg.mask.validate();
  Rng rng(mix_seed(cfg.seed, 0xE3));
  return draw_masks(n, n_tokens, cfg.mask, rng);
}

std::vector<int> generated_guidance(DiscreteGenerator& generator, const TokenizedDataset& data,
                                    std::span<const std::uint8_t> masks, const HeldOutConfig& cfg) {
  const Index n = data.n_tokens;
  require(static_cast<Index>(masks.size()) == data.size() * n, "generated_guidance: mask size mismatch");
  Rng rng(mix_seed(cfg.seed, 0x6E));
  std::vector<int> out;
  out.reserve(data.discrete.size());
  for (Index begin = 0; begin < data.size(); begin += cfg.batch_size) {
    const Index end = std::min<Index>(data.size(), begin + cfg.batch_size);
    const auto tok = std::span<const int>(data.discrete).subspan(static_cast<std::size_t>(begin * n),
                                                                 static_cast<std::size_t>((end - begin) * n));
    const auto msk = masks.subspan(static_cast<std::size_t>(begin * n), static_cast<std::size_t>((end - begin) * n));
    const auto cls = std::span<const int>(data.labels).subspan(static_cast<std::size_t>(begin),
                                                               static_cast<std::size_t>(end - begin));
    const auto masked = mask_discrete_sequence(tok, msk, generator.mask_token());
    const auto filled = infill_discrete(generator, masked, cls, cfg.generator_temperature, rng);
    out.insert(out.end(), filled.begin(), filled.end());
  }
  return out;
}

double held_out_loss(MixarModel& model, const TokenizedDataset& data, std::span<const int> guidance,
                     std::span<const std::uint8_t> masks, const HeldOutConfig& cfg) {
  check_dataset(model, data);
  const Index n = data.n_tokens;
  require(static_cast<Index>(masks.size()) == data.size() * n, "held_out_loss: mask size mismatch");
  const bool guided = uses_guidance(model.variant());
  require(!guided || static_cast<Index>(guidance.size()) == data.size() * n, "held_out_loss: guidance size mismatch");
  EmaScope scope(model, cfg.use_ema);
  const Matrix normalized = model.normalization().apply(data.continuous);
  double sum = 0.0;
  Index rows = 0;
  for (Index begin = 0, chunk = 0; begin < data.size(); begin += cfg.batch_size, ++chunk) {
    const Index end = std::min<Index>(data.size(), begin + cfg.batch_size);
    const Index bsz = end - begin;
    const auto off = static_cast<std::size_t>(begin * n);
    const auto len = static_cast<std::size_t>(bsz * n);
    const Matrix cont = normalized.middleRows(begin * n, bsz * n);
    const auto msk = masks.subspan(off, len);
    const auto cls = std::span<const int>(data.labels).subspan(static_cast<std::size_t>(begin), static_cast<std::size_t>(bsz));
    std::span<const int> guide;
    if (guided) guide = guidance.subspan(off, len);
    nn::Tape t(false);
    BackboneInput in{bsz, &cont, msk, guide, {}, cls};
    BackboneOutput out = model.backbone().forward(t, in);
    Rng rng(mix_seed(cfg.seed, 0x10000 + static_cast<std::uint64_t>(chunk)));
    nn::Var loss = masked_diffusion_loss(t, model.head(), out.z, cont, msk, model.schedule(), rng, cfg.repeats);
    const auto masked = static_cast<Index>(std::count_if(msk.begin(), msk.end(), [](std::uint8_t f) { return f != 0; }));
    sum += loss.scalar() * static_cast<double>(masked);
    rows += masked;
  }
  return sum / static_cast<double>(rows);
}

GapResult train_eval_gap(MixarModel& model, const TokenizedDataset& data, DiscreteGenerator& generator,
                         const HeldOutConfig& cfg) {
  require(uses_guidance(model.variant()), "train_eval_gap: the baseline has no guidance");
  const auto masks = evaluation_masks(data.size(), data.n_tokens, cfg);
  const auto generated = generated_guidance(generator, data, masks, cfg);
  GapResult r;
  r.loss_ground_truth = held_out_loss(model, data, data.discrete, masks, cfg);
  r.loss_generated = held_out_loss(model, data, generated, masks, cfg);
  return r;
}

io::Json GenerationConfig::to_json() const {
  return {{"discrete_steps", discrete.steps},
          {"discrete_temperature", discrete.temperature},
          {"discrete_schedule", discrete.shape == ScheduleShape::Cosine ? "cosine" : "linear"},
          {"steps", steps},
          {"schedule", shape == ScheduleShape::Cosine ? "cosine" : "linear"},
          {"temperature", temperature},
          {"guidance_scale", guidance_scale},
          {"x0_clip", x0_clip},
          {"batch_size", batch_size},
          {"use_ema", use_ema}};
}

GenerationConfig GenerationConfig::from_json(const io::Json& j) {
  GenerationConfig c;
  c.discrete.steps = j.at("discrete_steps");
  c.discrete.temperature = j.at("discrete_temperature");
  c.discrete.shape = parse_schedule_shape(j.at("discrete_schedule"));
  c.steps = j.at("steps");
  c.shape = parse_schedule_shape(j.at("schedule"));
  c.temperature = j.at("temperature");
  c.guidance_scale = j.at("guidance_scale");
  c.x0_clip = j.at("x0_clip");
  c.batch_size = j.at("batch_size");
  c.use_ema = j.at("use_ema");
  return c;
}

GeneratedBatch generate_images(DiscreteGenerator* generator, MixarModel& model, const ContinuousTokenizer& decoder,
                               std::span<const int> classes, const GenerationConfig& cfg, std::uint64_t seed) {
  const auto& bc = model.config().backbone;
  const bool guided = uses_guidance(model.variant());
  require(!guided || generator != nullptr, "generate_images: guided variants need a discrete generator");
  require(cfg.batch_size > 0 && cfg.steps > 0, "generate_images: batch size and steps must be positive");
  for (int c : classes) require(c >= 0 && c <= bc.n_classes, "generate_images: class id out of range");
  const Index n = bc.n_tokens;
  const auto total = static_cast<Index>(classes.size());
  EmaScope scope(model, cfg.use_ema);

  GeneratedBatch out;
  out.tokens.resize(total * n, bc.token_width);
  out.provenance.assign(static_cast<std::size_t>(total * n), Provenance::DiscreteGen);
  const std::int64_t head_before = model.head().evaluations();
  const DecodeSchedule schedule = build_decode_schedule(static_cast<int>(n), cfg.steps, cfg.shape);
  const SampleOptions sopts{cfg.guidance_scale, cfg.temperature, cfg.x0_clip};
  const bool cfg_guided = cfg.guidance_scale != 1.0;

  for (Index begin = 0, chunk = 0; begin < total; begin += cfg.batch_size, ++chunk) {
    const Index end = std::min<Index>(total, begin + cfg.batch_size);
    const Index bsz = end - begin;
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(chunk)));
    const auto cls = classes.subspan(static_cast<std::size_t>(begin), static_cast<std::size_t>(bsz));
    const std::vector<int> null_cls(static_cast<std::size_t>(bsz), bc.n_classes);

    std::vector<int> guidance;
    std::vector<Provenance> source;
    if (guided) {
      Rng drng = rng.fork(0xDA);
      guidance = generate_discrete(*generator, cls, cfg.discrete, drng);
      source.assign(guidance.size(), Provenance::DiscreteGen);
    }
    Matrix state = Matrix::Zero(bsz * n, bc.token_width);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(bsz * n), 1);

    for (int step = 0; step < schedule.steps(); ++step) {
      nn::Tape t(false);
      BackboneInput in{bsz, &state, mask, guidance, source, cls};
      const Matrix z = model.backbone().forward(t, in).z.value();
      Matrix z_null;
      if (cfg_guided) {
        BackboneInput nin{bsz, &state, mask, guidance, source, null_cls};
        z_null = model.backbone().forward(t, nin).z.value();
      }
      std::vector<int> rows;
      for (Index b = 0; b < bsz; ++b) {
        std::vector<int> open;
        for (Index i = 0; i < n; ++i) {
          if (mask[static_cast<std::size_t>(b * n + i)] != 0) open.push_back(static_cast<int>(b * n + i));
        }
        rng.shuffle(std::span<int>(open));
        const auto take = std::min<std::size_t>(open.size(), static_cast<std::size_t>(schedule.counts[static_cast<std::size_t>(step)]));
        rows.insert(rows.end(), open.begin(), open.begin() + static_cast<std::ptrdiff_t>(take));
      }
      if (rows.empty()) continue;
      Matrix zc(static_cast<Index>(rows.size()), z.cols());
      Matrix zn;
      if (cfg_guided) zn.resize(zc.rows(), zc.cols());
      for (std::size_t k = 0; k < rows.size(); ++k) {
        zc.row(static_cast<Index>(k)) = z.row(rows[k]);
        if (cfg_guided) zn.row(static_cast<Index>(k)) = z_null.row(rows[k]);
      }
      const Matrix sampled = sample_tokens(model.head(), zc, cfg_guided ? &zn : nullptr, model.schedule(), sopts, rng);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        state.row(rows[k]) = sampled.row(static_cast<Index>(k));
        mask[static_cast<std::size_t>(rows[k])] = 0;
        out.provenance[static_cast<std::size_t>(begin * n + rows[k])] = Provenance::Continuous;
      }
    }
    out.tokens.middleRows(begin * n, bsz * n) = model.normalization().invert(state);
    out.guidance.insert(out.guidance.end(), guidance.begin(), guidance.end());
  }

  const auto& tc = decoder.config();
  ContinuousSequence seq{tc.grid(), tc.grid(), out.tokens};
  out.images = decoder.decode(seq);
  out.images.labels.assign(classes.begin(), classes.end());
  out.head_evaluations = model.head().evaluations() - head_before;
  return out;
}

}  // namespace mixar
