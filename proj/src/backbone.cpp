#include "mixar/backbone.hpp"

#include "mixar/nn/ops.hpp"

namespace mixar {

std::string variant_name(GuidanceVariant v) {
  switch (v) {
    case GuidanceVariant::DcMix: return "dc-mix";
    case GuidanceVariant::DcSa: return "dc-sa";
    case GuidanceVariant::DcCa: return "dc-ca";
    case GuidanceVariant::MarBaseline: return "mar";
  }
  return "unknown";
}

GuidanceVariant parse_variant(const std::string& name) {
  if (name == "dc-mix") return GuidanceVariant::DcMix;
  if (name == "dc-sa") return GuidanceVariant::DcSa;
  if (name == "dc-ca") return GuidanceVariant::DcCa;
  if (name == "mar") return GuidanceVariant::MarBaseline;
  throw ConfigError("unknown variant '" + name + "' (expected dc-mix|dc-sa|dc-ca|mar)");
}

void BackboneConfig::validate() const {
  if (n_tokens <= 0 || token_width <= 0 || code_width <= 0 || vocab <= 0 || n_classes <= 0 || n_cls_tokens < 0 ||
      width <= 0 || depth < 0 || heads <= 0 || mlp_ratio <= 0) {
    throw ConfigError("backbone: dimensions must be positive");
  }
  if (width % heads != 0) throw ConfigError("backbone: heads must divide width");
}

io::Json BackboneConfig::to_json() const {
  return {{"variant", variant_name(variant)},
          {"n_tokens", n_tokens},
          {"d_c", token_width},
          {"d_d", code_width},
          {"vocab", vocab},
          {"n_classes", n_classes},
          {"n_cls_tokens", n_cls_tokens},
          {"width", width},
          {"depth", depth},
          {"heads", heads},
          {"mlp_ratio", mlp_ratio}};
}

BackboneConfig BackboneConfig::from_json(const io::Json& j) {
  BackboneConfig c;
  c.variant = parse_variant(j.at("variant"));
  c.n_tokens = j.at("n_tokens");
  c.token_width = j.at("d_c");
  c.code_width = j.at("d_d");
  c.vocab = j.at("vocab");
  c.n_classes = j.at("n_classes");
  c.n_cls_tokens = j.at("n_cls_tokens");
  c.width = j.at("width");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.mlp_ratio = j.at("mlp_ratio");
  return c;
}

Index count_parameters(const BackboneConfig& cfg) {
  const Index d = cfg.width;
  const Index n = cfg.n_tokens;
  const Index attn = 4 * (d * d + d);
  const Index norm = 2 * d;
  const Index mlp = d * (cfg.mlp_ratio * d) + cfg.mlp_ratio * d + (cfg.mlp_ratio * d) * d + d;
  const Index block = 2 * norm + attn + mlp;

  Index total = cfg.token_width * d + d  // continuous projection
                + n * d                  // positions
                + (cfg.n_classes + 1) * d + cfg.n_cls_tokens * d  // class tokens (+ null class)
                + cfg.depth * block + norm;
  switch (cfg.variant) {
    case GuidanceVariant::MarBaseline: total += d; break;
    case GuidanceVariant::DcMix: total += cfg.code_width * d + d; break;
    case GuidanceVariant::DcSa: total += d + cfg.vocab * d + n * d; break;
    case GuidanceVariant::DcCa: total += d + cfg.vocab * d + n * d + cfg.depth * (norm + attn); break;
  }
  return total;
}

Index self_attention_length(const BackboneConfig& cfg) {
  return (cfg.variant == GuidanceVariant::DcSa ? 2 * cfg.n_tokens : cfg.n_tokens) + cfg.n_cls_tokens;
}

std::int64_t expected_attention_pairs(const BackboneConfig& cfg) {
  const std::int64_t n = cfg.n_tokens, c = cfg.n_cls_tokens, l = cfg.depth;
  switch (cfg.variant) {
    case GuidanceVariant::DcMix:
    case GuidanceVariant::MarBaseline: return (n + c) * (n + c) * l;
    case GuidanceVariant::DcSa: return (2 * n + c) * (2 * n + c) * l;
    case GuidanceVariant::DcCa: return ((n + c) * (n + c) + (n + c) * n) * l;
  }
  return 0;
}

Backbone::Backbone(const BackboneConfig& cfg, const Matrix& codebook, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix_seed(seed, 0xBB));
  const Index d = cfg_.width;
  cont_proj_ = nn::Linear(cfg_.token_width, d, rng);
  pos_ = nn::Parameter(nn::normal_init(cfg_.n_tokens, d, 0.02, rng));
  class_embed_ = nn::Parameter(nn::normal_init(cfg_.n_classes + 1, d, 0.02, rng));
  cls_pos_ = nn::Parameter(nn::normal_init(cfg_.n_cls_tokens, d, 0.02, rng));
  switch (cfg_.variant) {
    case GuidanceVariant::DcMix:
      require(codebook.rows() == cfg_.vocab && codebook.cols() == cfg_.code_width,
              "DC-Mix backbone needs a V×d_d codebook");
      codebook_ = nn::Parameter(codebook);
      codebook_.trainable = false;
      disc_proj_ = nn::Linear(cfg_.code_width, d, rng);
      break;
    case GuidanceVariant::DcSa:
    case GuidanceVariant::DcCa:
      disc_table_ = nn::Parameter(nn::normal_init(cfg_.vocab, d, 0.02, rng));
      disc_pos_ = nn::Parameter(nn::normal_init(cfg_.n_tokens, d, 0.02, rng));
      [[fallthrough]];
    case GuidanceVariant::MarBaseline:
      mask_token_ = nn::Parameter(nn::normal_init(1, d, 0.02, rng));
      break;
  }
  const bool cross = cfg_.variant == GuidanceVariant::DcCa;
  for (int l = 0; l < cfg_.depth; ++l) blocks_.emplace_back(d, cfg_.heads, cfg_.mlp_ratio, cross, rng);
  final_norm_ = nn::LayerNorm(d);
}

nn::Var Backbone::embed_continuous(nn::Tape& t, const Matrix& tokens) {
  require(tokens.cols() == cfg_.token_width, "backbone: continuous token width mismatch");
  return cont_proj_(t, t.constant(tokens));
}

nn::Var Backbone::embed_discrete(nn::Tape& t, std::span<const int> indices) {
  for (int i : indices) require(i >= 0 && i < cfg_.vocab, "backbone: discrete index out of range");
  switch (cfg_.variant) {
    case GuidanceVariant::DcMix: return disc_proj_(t, nn::gather_rows(t.param(codebook_), indices));
    case GuidanceVariant::DcSa:
    case GuidanceVariant::DcCa: return nn::gather_rows(t.param(disc_table_), indices);
    case GuidanceVariant::MarBaseline: break;
  }
  throw ContractError("MAR baseline has no discrete embedder");
}

nn::Var Backbone::embed_tokens(nn::Tape& t, const Matrix& tokens) {
  return nn::add_tiled(embed_continuous(t, tokens), t.param(pos_));
}

nn::Var Backbone::embed_tokens(nn::Tape& t, std::span<const int> indices) {
  nn::Var e = embed_discrete(t, indices);
  return nn::add_tiled(e, cfg_.variant == GuidanceVariant::DcMix ? t.param(pos_) : t.param(disc_pos_));
}

Embedders Backbone::embedders() {
  Embedders e;
  e.continuous = [this](nn::Tape& t, const Matrix& m) { return embed_continuous(t, m); };
  if (cfg_.variant == GuidanceVariant::DcMix) {
    e.discrete = [this](nn::Tape& t, std::span<const int> idx) { return embed_discrete(t, idx); };
  } else {
    // Every masked slot gets the same learned mask token.
    e.discrete = [this](nn::Tape& t, std::span<const int> idx) {
      const std::vector<int> zeros(idx.size(), 0);
      return nn::gather_rows(t.param(mask_token_), zeros);
    };
  }
  return e;
}

BackboneOutput Backbone::forward(nn::Tape& t, const BackboneInput& in) {
  const Index batch = in.batch;
  const Index n = cfg_.n_tokens;
  require(batch > 0 && in.continuous != nullptr, "backbone: empty input");
  require(in.continuous->rows() == batch * n && static_cast<Index>(in.mask.size()) == batch * n,
          "backbone: continuous/mask length mismatch");
  require(static_cast<Index>(in.classes.size()) == batch, "backbone: one class id per sequence");
  for (int c : in.classes) require(c >= 0 && c <= cfg_.n_classes, "backbone: class id out of range");
  if (uses_guidance(cfg_.variant)) {
    require(static_cast<Index>(in.guidance.size()) == batch * n, "backbone: variant needs discrete guidance");
  } else {
    require(in.guidance.empty(), "backbone: MAR baseline takes no discrete guidance");
  }

  BackboneOutput out;
  std::vector<int> placeholder;
  std::span<const int> slots = in.guidance;
  if (slots.empty()) {
    placeholder.assign(static_cast<std::size_t>(batch * n), 0);
    slots = placeholder;
  }
  // DC-Mix substitutes guidance at masked slots; the others use the mask token.
  MixedSequence mixed = dc_mix(t, *in.continuous, slots, in.mask, embedders(),
                               cfg_.variant == GuidanceVariant::DcMix ? in.guidance_source : std::span<const Provenance>{});
  if (cfg_.variant == GuidanceVariant::DcMix) out.provenance = std::move(mixed.provenance);
  nn::Var x = nn::add_tiled(mixed.embeddings, t.param(pos_));

  std::vector<nn::Var> parts;
  if (cfg_.n_cls_tokens > 0) {
    std::vector<int> rows;
    for (int c : in.classes) rows.insert(rows.end(), static_cast<std::size_t>(cfg_.n_cls_tokens), c);
    parts.push_back(nn::add_tiled(nn::gather_rows(t.param(class_embed_), rows), t.param(cls_pos_)));
  }
  nn::Var memory;
  if (cfg_.variant == GuidanceVariant::DcSa || cfg_.variant == GuidanceVariant::DcCa) {
    memory = embed_tokens(t, in.guidance);
    if (cfg_.variant == GuidanceVariant::DcSa) parts.push_back(memory);
  }
  parts.push_back(x);
  nn::Var seq = nn::stack_segments(parts, batch);

  std::int64_t self_pairs = 0, cross_pairs = 0;
  for (auto& block : blocks_) {
    seq = block(t, seq, batch, cfg_.variant == GuidanceVariant::DcCa ? memory : nn::Var{}, &self_pairs, &cross_pairs);
  }
  const Index len = self_attention_length(cfg_);
  out.z = final_norm_(t, nn::select_segment(seq, batch, len, len - n, n));
  out.self_pairs = self_pairs / batch;
  out.cross_pairs = cross_pairs / batch;
  return out;
}

nn::NamedParameters Backbone::parameters() {
  nn::NamedParameters out;
  cont_proj_.collect(out, "cont_proj.");
  out.emplace_back("pos", &pos_);
  out.emplace_back("class_embed", &class_embed_);
  out.emplace_back("cls_pos", &cls_pos_);
  switch (cfg_.variant) {
    case GuidanceVariant::DcMix:
      out.emplace_back("codebook", &codebook_);
      disc_proj_.collect(out, "disc_proj.");
      break;
    case GuidanceVariant::DcSa:
    case GuidanceVariant::DcCa:
      out.emplace_back("disc_table", &disc_table_);
      out.emplace_back("disc_pos", &disc_pos_);
      [[fallthrough]];
    case GuidanceVariant::MarBaseline:
      out.emplace_back("mask_token", &mask_token_);
      break;
  }
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(out, "blocks." + std::to_string(l) + ".");
  final_norm_.collect(out, "final_norm.");
  return out;
}

Index Backbone::parameter_count() { return nn::count_scalars(parameters(), true); }

io::ArrayMap Backbone::export_arrays() { return io::export_parameters(parameters(), "backbone."); }

void Backbone::import_arrays(const io::ArrayMap& arrays) { io::import_parameters(parameters(), arrays, "backbone."); }

}  // namespace mixar
