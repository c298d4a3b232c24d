#include "mixar/discrete_generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mixar {

void DiscreteGeneratorConfig::validate() const {
  if (vocab <= 0 || n_tokens <= 0 || n_classes <= 0 || n_cls_tokens < 0 || width <= 0 || depth < 0 || heads <= 0 ||
      mlp_ratio <= 0) {
    throw ConfigError("discrete generator: dimensions must be positive");
  }
  if (width % heads != 0) throw ConfigError("discrete generator: heads must divide width");
}

io::Json DiscreteGeneratorConfig::to_json() const {
  return {{"vocab", vocab},   {"n_tokens", n_tokens}, {"n_classes", n_classes}, {"n_cls_tokens", n_cls_tokens},
          {"width", width},   {"depth", depth},       {"heads", heads},         {"mlp_ratio", mlp_ratio}};
}

DiscreteGeneratorConfig DiscreteGeneratorConfig::from_json(const io::Json& j) {
  DiscreteGeneratorConfig c;
  c.vocab = j.at("vocab");
  c.n_tokens = j.at("n_tokens");
  c.n_classes = j.at("n_classes");
  c.n_cls_tokens = j.at("n_cls_tokens");
  c.width = j.at("width");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.mlp_ratio = j.at("mlp_ratio");
  return c;
}

DiscreteGenerator::DiscreteGenerator(const DiscreteGeneratorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xA5));
  token_embed_ = nn::Parameter(nn::normal_init(cfg_.vocab + 1, cfg_.width, 0.02, rng));
  class_embed_ = nn::Parameter(nn::normal_init(cfg_.n_classes, cfg_.width, 0.02, rng));
  cls_pos_ = nn::Parameter(nn::normal_init(std::max(1, cfg_.n_cls_tokens), cfg_.width, 0.02, rng));
  pos_ = nn::Parameter(nn::normal_init(cfg_.n_tokens, cfg_.width, 0.02, rng));
  for (int l = 0; l < cfg_.depth; ++l) blocks_.emplace_back(cfg_.width, cfg_.heads, cfg_.mlp_ratio, false, rng);
  final_norm_ = nn::LayerNorm(cfg_.width);
  head_ = nn::Linear(cfg_.width, cfg_.vocab, rng);
}

nn::Var DiscreteGenerator::logits(nn::Tape& t, std::span<const int> tokens, std::span<const int> classes) {
  const Index batch = static_cast<Index>(classes.size());
  const Index n = cfg_.n_tokens;
  require(batch > 0 && static_cast<Index>(tokens.size()) == batch * n, "discrete generator: token/class count mismatch");
  for (int tok : tokens) require(tok >= 0 && tok <= cfg_.vocab, "discrete generator: token index out of range");
  ++forward_calls_;

  nn::Var tok = nn::add_tiled(nn::gather_rows(t.param(token_embed_), tokens), t.param(pos_));
  std::vector<nn::Var> parts;
  if (cfg_.n_cls_tokens > 0) {
    std::vector<int> cls_rows;
    for (int c : classes) {
      require(c >= 0 && c < cfg_.n_classes, "discrete generator: class id out of range");
      cls_rows.insert(cls_rows.end(), static_cast<std::size_t>(cfg_.n_cls_tokens), c);
    }
    parts.push_back(nn::add_tiled(nn::gather_rows(t.param(class_embed_), cls_rows), t.param(cls_pos_)));
  }
  parts.push_back(tok);
  nn::Var x = nn::stack_segments(parts, batch);
  for (auto& block : blocks_) x = block(t, x, batch, {}, nullptr, nullptr);
  const Index seq = cfg_.n_cls_tokens + n;
  x = nn::select_segment(x, batch, seq, cfg_.n_cls_tokens, n);
  return head_(t, final_norm_(t, x));
}

nn::NamedParameters DiscreteGenerator::parameters() {
  nn::NamedParameters out;
  out.emplace_back("token_embed", &token_embed_);
  out.emplace_back("class_embed", &class_embed_);
  out.emplace_back("cls_pos", &cls_pos_);
  out.emplace_back("pos", &pos_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(out, "blocks." + std::to_string(l) + ".");
  final_norm_.collect(out, "final_norm.");
  head_.collect(out, "head.");
  return out;
}

io::Checkpoint DiscreteGenerator::to_checkpoint(const io::Json& extra) {
  io::Checkpoint c;
  c.manifest = extra;
  c.manifest["kind"] = "discrete_generator";
  c.manifest["config"] = cfg_.to_json();
  c.arrays = io::export_parameters(parameters());
  return c;
}

DiscreteGenerator DiscreteGenerator::from_checkpoint(const io::Checkpoint& ckpt) {
  if (ckpt.manifest.value("kind", "") != "discrete_generator") throw IoError("not a discrete generator checkpoint");
  DiscreteGenerator g(DiscreteGeneratorConfig::from_json(ckpt.manifest.at("config")));
  io::import_parameters(g.parameters(), ckpt.arrays);
  return g;
}

std::vector<int> mask_discrete_sequence(std::span<const int> tokens, std::span<const std::uint8_t> mask,
                                        int mask_token) {
  require(tokens.size() == mask.size(), "mask_discrete_sequence: length mismatch");
  std::vector<int> out(tokens.begin(), tokens.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i] != 0) out[i] = mask_token;
  }
  return out;
}

DiscreteStepResult discrete_loss(nn::Tape& t, DiscreteGenerator& model, std::span<const int> tokens,
                                 std::span<const int> classes, const MaskRatioConfig& ratio, Rng& rng) {
  const Index n = model.config().n_tokens;
  const Index batch = static_cast<Index>(classes.size());
  require(batch > 0, "discrete_loss: empty batch");
  DiscreteStepResult out;
  out.mask.reserve(tokens.size());
  for (Index b = 0; b < batch; ++b) {
    const MaskSpec m = build_mask(n, sample_mask_ratio(rng, ratio), rng);
    out.mask.insert(out.mask.end(), m.mask.begin(), m.mask.end());
  }
  const auto input = mask_discrete_sequence(tokens, out.mask, model.mask_token());
  nn::Var logits = model.logits(t, input, classes);
  std::vector<double> weights(out.mask.begin(), out.mask.end());
  out.loss = nn::cross_entropy(logits, tokens, weights);
  return out;
}

int sample_categorical(const Eigen::Ref<const RowVector>& logits, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<int>(best);
  }
  const double m = logits.maxCoeff();
  RowVector p = ((logits.array() - m) / temperature).exp();
  const double total = p.sum();
  double u = rng.uniform() * total;
  for (Index k = 0; k < p.size(); ++k) {
    u -= p(k);
    if (u < 0.0) return static_cast<int>(k);
  }
  return static_cast<int>(p.size() - 1);
}

std::vector<int> generate_discrete(DiscreteGenerator& model, std::span<const int> classes,
                                   const GenerateOptions& opts, Rng& rng, DecodeTrace* trace) {
  const int n = model.config().n_tokens;
  const auto batch = static_cast<Index>(classes.size());
  const DecodeSchedule schedule = build_decode_schedule(n, opts.steps, opts.shape);
  std::vector<int> tokens(static_cast<std::size_t>(batch * n), model.mask_token());
  // still-masked positions per sequence
  std::vector<std::vector<int>> pending(static_cast<std::size_t>(batch));
  for (auto& p : pending) {
    p.resize(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
  }
  if (trace != nullptr) trace->committed.clear();

  for (int step = 0; step < schedule.steps(); ++step) {
    nn::Tape t(false);
    const Matrix logits = model.logits(t, tokens, classes).value();
    std::vector<int> proposal = tokens;
    for (Index b = 0; b < batch; ++b) {
      for (int i : pending[static_cast<std::size_t>(b)]) {
        const Index row = b * n + i;
        proposal[static_cast<std::size_t>(row)] = sample_categorical(logits.row(row), opts.temperature, rng);
      }
    }
    std::vector<int> committed;
    const int count = schedule.counts[static_cast<std::size_t>(step)];
    for (Index b = 0; b < batch; ++b) {
      auto& p = pending[static_cast<std::size_t>(b)];
      for (int k = 0; k < count; ++k) {
        const auto j = k + static_cast<std::size_t>(rng.below(p.size() - static_cast<std::size_t>(k)));
        std::swap(p[static_cast<std::size_t>(k)], p[j]);
        const Index row = b * n + p[static_cast<std::size_t>(k)];
        tokens[static_cast<std::size_t>(row)] = proposal[static_cast<std::size_t>(row)];
        committed.push_back(static_cast<int>(row));
      }
      p.erase(p.begin(), p.begin() + count);
    }
    if (trace != nullptr) trace->committed.push_back(std::move(committed));
  }
  return tokens;
}

std::vector<int> infill_discrete(DiscreteGenerator& model, std::span<const int> masked_tokens,
                                 std::span<const int> classes, double temperature, Rng& rng) {
  const int n = model.config().n_tokens;
  const auto batch = static_cast<Index>(classes.size());
  require(static_cast<Index>(masked_tokens.size()) == batch * n, "infill_discrete: length mismatch");
  for (Index b = 0; b < batch; ++b) {
    const auto first = masked_tokens.begin() + b * n;
    require(std::find(first, first + n, model.mask_token()) != first + n,
            "infill_discrete: every sequence needs at least one masked position");
  }
  nn::Tape t(false);
  const Matrix logits = model.logits(t, masked_tokens, classes).value();
  std::vector<int> out(masked_tokens.begin(), masked_tokens.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == model.mask_token()) out[i] = sample_categorical(logits.row(static_cast<Index>(i)), temperature, rng);
  }
  return out;
}

std::vector<double> train_discrete(DiscreteGenerator& model, std::span<const int> tokens, std::span<const int> labels,
                                   const DiscreteTrainConfig& cfg) {
  const Index n = model.config().n_tokens;
  const auto count = static_cast<Index>(labels.size());
  require(count > 0 && static_cast<Index>(tokens.size()) == count * n, "train_discrete: data shape mismatch");
  if (cfg.epochs <= 0 || cfg.batch_size <= 0 || cfg.lr <= 0.0) throw ConfigError("dar training: invalid schedule");
  cfg.ratio.validate();
  Rng rng(mix_seed(cfg.seed, 0xDA));
  nn::Adam opt(model.parameters(), {.lr = cfg.lr, .grad_clip = 1.0});
  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  const Index per_epoch = (count + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total = per_epoch * cfg.epochs;
  std::int64_t step = 0;
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<int>(order));
    double sum = 0.0;
    for (Index start = 0; start < count; start += cfg.batch_size) {
      const Index end = std::min<Index>(count, start + cfg.batch_size);
      std::vector<int> batch_tokens, batch_labels;
      for (Index i = start; i < end; ++i) {
        const int s = order[static_cast<std::size_t>(i)];
        batch_tokens.insert(batch_tokens.end(), tokens.begin() + s * n, tokens.begin() + (s + 1) * n);
        batch_labels.push_back(labels[static_cast<std::size_t>(s)]);
      }
      nn::Tape t;
      auto res = discrete_loss(t, model, batch_tokens, batch_labels, cfg.ratio, rng);
      if (!std::isfinite(res.loss.scalar())) {
        throw NumericalError("discrete generator loss is non-finite at epoch " + std::to_string(epoch));
      }
      opt.zero_grad();
      t.backward(res.loss);
      opt.step(nn::warmup_cosine_lr(cfg.lr, step++, total, cfg.warmup));
      sum += res.loss.scalar() * static_cast<double>(end - start);
    }
    history.push_back(sum / static_cast<double>(count));
  }
  return history;
}

}  // namespace mixar
