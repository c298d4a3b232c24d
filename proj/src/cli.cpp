#include "mixar/cli.hpp"

#include "mixar/evaluation.hpp"
#include "mixar/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mixar::cli {

namespace fs = std::filesystem;
using io::Json;

io::Json default_config(const std::string& command) {
  const Json data = {{"classes", 8}, {"images-per-class", 64}, {"image-size", 16}, {"seed", 1}, {"noise", 0.02}};
  const Json generation = {{"steps", 8},
                           {"schedule", "cosine"},
                           {"temperature", 1.0},
                           {"guidance-scale", 1.0},
                           {"x0-clip", 5.0},
                           {"discrete-steps", 8},
                           {"discrete-temperature", 1.0},
                           {"discrete-schedule", "cosine"},
                           {"batch-size", 64},
                           {"ema", true}};
  const Json probe = {{"hidden", 64}, {"epochs", 40}, {"lr", 2e-3}, {"seed", 0}};
  if (command == "tokenizer-train") {
    return {{"name", "tokenizer"},
            {"data", data},
            {"tokenizer",
             {{"patch", 4},
              {"hidden", 128},
              {"d-c", 8},
              {"d-d", 8},
              {"vocab", 64},
              {"beta-kl", 1e-4},
              {"beta-commit", 0.25}}},
            {"train", {{"epochs", 30}, {"batch-size", 32}, {"lr", 2e-3}, {"seed", 0}, {"sample-posterior", true}}}};
  }
  if (command == "dar-train") {
    return {{"name", "dar"},
            {"tokenizer-run", "tokenizer"},
            {"model", {{"width", 64}, {"depth", 2}, {"heads", 4}, {"mlp-ratio", 4}, {"cls-tokens", 4}, {"seed", 0}}},
            {"train",
             {{"epochs", 60},
              {"batch-size", 32},
              {"lr", 1e-3},
              {"warmup", 0.05},
              {"mask-min", 0.1},
              {"mask-max", 1.0},
              {"seed", 0}}}};
  }
  if (command == "mixar-train") {
    return {{"name", "mixar"},
            {"tokenizer-run", "tokenizer"},
            {"dar-run", "dar"},
            {"resume", ""},
            {"variant", "dc-mix"},
            {"model", {{"width", 64}, {"depth", 2}, {"heads", 4}, {"mlp-ratio", 4}, {"cls-tokens", 4}, {"seed", 0}}},
            {"head", {{"width", 64}, {"blocks", 2}}},
            {"diffusion", {{"train-steps", 1000}, {"sample-steps", 50}}},
            {"train",
             {{"epochs", 100},
              {"batch-size", 32},
              {"lr", 1e-3},
              {"warmup", 0.05},
              {"ema", 0.99},
              {"weight-decay", 0.0},
              {"grad-clip", 1.0},
              {"mask-min", 0.7},
              {"mask-max", 1.0},
              {"class-dropout", 0.0},
              {"repeats", 4},
              {"generator-temperature", 1.0}}},
            {"ti-mix", {{"lambda-start", 1.0}, {"lambda-end", 0.0}, {"decay", "linear"}, {"start-epoch", 0}}},
            {"seeds", {{"data", 1}, {"masking", 2}, {"diffusion", 3}, {"ti-mix", 4}}},
            {"eval", {{"every", 10}, {"frechet-samples", 512}, {"reference-per-class", 64}, {"seed", 99}}},
            {"generation", generation},
            {"probe", probe}};
  }
  if (command == "sample") {
    return {{"name", "samples"},
            {"tokenizer-run", "tokenizer"},
            {"dar-run", "dar"},
            {"mixar-run", "mixar"},
            {"seed", 0},
            {"per-class", 8},
            {"write-images", true},
            {"generation", generation}};
  }
  if (command == "eval") {
    return {{"name", "eval"},
            {"tokenizer-run", "tokenizer"},
            {"dar-run", "dar"},
            {"mixar-run", "mixar"},
            {"seed", 0},
            {"per-class", 64},
            {"reference-per-class", 64},
            {"gap-seed", 99},
            {"generation", generation},
            {"probe", probe}};
  }
  if (command == "profile") {
    return {{"name", "profile"},
            {"variant", "all"},
            {"N", 256},
            {"cls", 64},
            {"L", 2},
            {"d-b", 64},
            {"V", 64},
            {"d-c", 8},
            {"d-d", 8},
            {"heads", 4},
            {"classes", 8},
            {"time", true},
            {"decode-steps", 8},
            {"sample-steps", 100},
            {"head-width", 256},
            {"head-blocks", 3}};
  }
  throw ConfigError("unknown subcommand '" + command + "'");
}

namespace {

bool compatible(const Json& def, const Json& val) {
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_number_integer()) return val.is_number_integer();
  if (def.is_number()) return val.is_number();
  if (def.is_string()) return val.is_string();
  if (def.is_object()) return val.is_object();
  return false;
}

}  // namespace

void merge_config(io::Json& base, const io::Json& overlay, const std::string& where) {
  if (!overlay.is_object()) throw ConfigError("config" + (where.empty() ? "" : " section '" + where + "'") + " must be an object");
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    Json& slot = base[it.key()];
    if (!compatible(slot, it.value())) throw ConfigError("config key '" + key + "' has the wrong type");
    if (slot.is_object()) {
      merge_config(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

void set_config_value(io::Json& cfg, const std::string& dotted, const std::string& text) {
  Json* node = &cfg;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + dotted + "'");
    node = &(*node)[part];
  }
  try {
    std::size_t used = 0;
    if (node->is_boolean()) {
      if (text == "true" || text == "1") {
        *node = true;
      } else if (text == "false" || text == "0") {
        *node = false;
      } else {
        throw std::invalid_argument("bool");
      }
      return;
    }
    if (node->is_number_integer()) {
      const long long v = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument("int");
      *node = v;
    } else if (node->is_number()) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("float");
      *node = v;
    } else if (node->is_string()) {
      *node = text;
    } else {
      throw ConfigError("config key '" + dotted + "' is a section, not a value");
    }
  } catch (const std::logic_error&) {
    throw ConfigError("invalid value '" + text + "' for '" + dotted + "'");
  }
}

fs::path runs_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("MIXAR_RUNS_ROOT"); env != nullptr && *env != '\0') return env;
  return "runs";
}

namespace {

void collect_keys(const Json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object()) {
      collect_keys(it.value(), key, out);
    } else {
      out.push_back(key);
    }
  }
}

std::string fnv1a_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string combine_checksums(const std::vector<std::string>& parts) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& s : parts) {
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

struct RunDir {
  fs::path dir;
  fs::path checkpoints() const { return dir / "checkpoints"; }
  fs::path samples() const { return dir / "samples"; }
  fs::path plots() const { return dir / "plots"; }
  fs::path metrics() const { return dir / "metrics.jsonl"; }
};

RunDir open_run(const fs::path& root, const Json& cfg, const std::string& command) {
  const std::string name = cfg.at("name");
  if (name.empty() || name.find('/') != std::string::npos) throw ConfigError("run name must be a plain directory name");
  RunDir r{root / name};
  fs::create_directories(r.checkpoints());
  fs::create_directories(r.samples());
  fs::create_directories(r.plots());
  fs::remove(r.metrics());
  io::write_text(r.metrics(), "");
  Json resolved = cfg;
  io::write_text(r.dir / "config.resolved", resolved.dump(2) + "\n");
  (void)command;
  return r;
}

void write_manifest(const RunDir& r, const std::string& command, const Json& cfg, Json extra) {
  extra["command"] = command;
  extra["name"] = cfg.at("name");
  extra["format"] = 1;
  io::write_text(r.dir / "manifest", extra.dump(2) + "\n");
}

fs::path upstream(const fs::path& root, const Json& cfg, const std::string& key) {
  const std::string name = cfg.at(key);
  if (name.empty()) throw DependencyError("'" + key + "' is empty");
  const fs::path dir = root / name;
  if (!fs::exists(dir / "config.resolved")) {
    throw DependencyError("upstream run '" + name + "' not found under " + root.string());
  }
  return dir;
}

Json read_resolved(const fs::path& run) { return Json::parse(io::read_text(run / "config.resolved")); }

DatasetSpec data_spec(const Json& d) {
  DatasetSpec s;
  s.n_classes = d.at("classes");
  s.images_per_class = d.at("images-per-class");
  s.image_size = d.at("image-size");
  s.seed = d.at("seed");
  s.noise_std = d.at("noise");
  s.validate();
  return s;
}

/// Held-out reference images rendered from an independent stream.
ImageBatch reference_images(const DatasetSpec& spec, int per_class) {
  DatasetSpec r = spec;
  r.seed = mix_seed(spec.seed, 0x5EF);
  r.images_per_class = per_class;
  return generate_dataset(r);
}

GenerationConfig generation_config(const Json& g) {
  GenerationConfig c;
  c.steps = g.at("steps");
  c.shape = parse_schedule_shape(g.at("schedule"));
  c.temperature = g.at("temperature");
  c.guidance_scale = g.at("guidance-scale");
  c.x0_clip = g.at("x0-clip");
  c.discrete.steps = g.at("discrete-steps");
  c.discrete.temperature = g.at("discrete-temperature");
  c.discrete.shape = parse_schedule_shape(g.at("discrete-schedule"));
  c.batch_size = g.at("batch-size");
  c.use_ema = g.at("ema");
  if (c.steps < 1 || c.discrete.steps < 1 || c.batch_size < 1) throw ConfigError("generation: steps and batch size must be positive");
  return c;
}

ProbeConfig probe_config(const Json& p) {
  ProbeConfig c;
  c.hidden = p.at("hidden");
  c.epochs = p.at("epochs");
  c.lr = p.at("lr");
  c.seed = p.at("seed");
  return c;
}

std::vector<int> class_list(int n_classes, int per_class) {
  if (per_class < 1) throw ConfigError("per-class must be positive");
  std::vector<int> out;
  for (int c = 0; c < n_classes; ++c) {
    for (int k = 0; k < per_class; ++k) out.push_back(c);
  }
  return out;
}

struct Tokenizers {
  Json config;
  DatasetSpec spec;
  ContinuousTokenizer continuous;
  VqTokenizer vq;
};

Tokenizers load_tokenizers(const fs::path& run) {
  Json cfg = read_resolved(run);
  return {cfg, data_spec(cfg.at("data")), ContinuousTokenizer::from_checkpoint(io::load_checkpoint(run / "checkpoints" / "continuous")),
          VqTokenizer::from_checkpoint(io::load_checkpoint(run / "checkpoints" / "vq"))};
}

int cmd_tokenizer_train(const fs::path& root, const Json& cfg) {
  const DatasetSpec spec = data_spec(cfg.at("data"));
  const Json& t = cfg.at("tokenizer");
  TokenizerConfig tc;
  tc.image_size = spec.image_size;
  tc.patch = t.at("patch");
  tc.hidden = t.at("hidden");
  tc.continuous_width = t.at("d-c");
  tc.code_width = t.at("d-d");
  tc.vocab = t.at("vocab");
  tc.beta_kl = t.at("beta-kl");
  tc.beta_commit = t.at("beta-commit");
  tc.validate();
  const Json& tr = cfg.at("train");
  TokenizerTrainConfig ttc;
  ttc.epochs = tr.at("epochs");
  ttc.batch_size = tr.at("batch-size");
  ttc.lr = tr.at("lr");
  ttc.seed = tr.at("seed");
  ttc.sample_posterior = tr.at("sample-posterior");

  RunDir run = open_run(root, cfg, "tokenizer-train");
  const DatasetSplit split = split_dataset(generate_dataset(spec));
  TrainedTokenizers tok = train_tokenizers(split.train, tc, ttc);
  const Json seeds = {{"data", spec.seed}, {"train", ttc.seed}};
  io::save_checkpoint(run.checkpoints() / "continuous", tok.continuous.to_checkpoint({{"seeds", seeds}}));
  io::save_checkpoint(run.checkpoints() / "vq", tok.vq.to_checkpoint({{"seeds", seeds}}));
  for (std::size_t e = 0; e < tok.history.continuous_loss.size(); ++e) {
    io::append_jsonl(run.metrics(), {{"epoch", e + 1},
                                     {"continuous_loss", tok.history.continuous_loss[e]},
                                     {"vq_loss", tok.history.vq_loss[e]},
                                     {"codebook_usage", tok.history.codebook_usage[e]}});
  }
  // Reconstruction quality on held-out images.
  const ImageBatch& val = split.val;
  const ImageBatch rc = tok.continuous.decode(tok.continuous.encode(val));
  const ImageBatch rv = tok.vq.decode(tok.vq.encode(val));
  const double mse_c = (rc.pixels - val.pixels).squaredNorm() / static_cast<double>(val.pixels.size());
  const double mse_v = (rv.pixels - val.pixels).squaredNorm() / static_cast<double>(val.pixels.size());
  io::append_jsonl(run.metrics(), {{"split", "val"}, {"continuous_mse", mse_c}, {"vq_mse", mse_v}});
  const int show = static_cast<int>(std::min<Index>(val.size(), 8));
  std::vector<int> rows(static_cast<std::size_t>(show));
  std::iota(rows.begin(), rows.end(), 0);
  ImageBatch grid = val.rows(rows);
  const ImageBatch a = rc.rows(rows), b = rv.rows(rows);
  grid.pixels.conservativeResize(3 * show, Eigen::NoChange);
  grid.pixels.middleRows(show, show) = a.pixels;
  grid.pixels.middleRows(2 * show, show) = b.pixels;
  write_image_grid(run.samples() / "reconstructions.ppm", grid, show, 3);
  write_line_plot(run.plots() / "loss.ppm", {tok.history.continuous_loss, tok.history.vq_loss});
  write_manifest(run, "tokenizer-train", cfg,
                 {{"seeds", seeds},
                  {"checkpoints", {"checkpoints/continuous", "checkpoints/vq"}},
                  {"val_mse", {{"continuous", mse_c}, {"vq", mse_v}}},
                  {"codebook_usage", tok.history.codebook_usage.back()}});
  std::cout << "tokenizers trained: val mse continuous " << mse_c << ", vq " << mse_v << ", codebook usage "
            << tok.history.codebook_usage.back() << "\n";
  return kOk;
}

int cmd_dar_train(const fs::path& root, const Json& cfg) {
  const fs::path tok_dir = upstream(root, cfg, "tokenizer-run");
  Tokenizers tok = load_tokenizers(tok_dir);
  const Json& m = cfg.at("model");
  DiscreteGeneratorConfig gc;
  gc.vocab = tok.vq.config().vocab;
  gc.n_tokens = tok.vq.config().grid() * tok.vq.config().grid();
  gc.n_classes = tok.spec.n_classes;
  gc.n_cls_tokens = m.at("cls-tokens");
  gc.width = m.at("width");
  gc.depth = m.at("depth");
  gc.heads = m.at("heads");
  gc.mlp_ratio = m.at("mlp-ratio");
  gc.validate();
  const Json& tr = cfg.at("train");
  DiscreteTrainConfig dt;
  dt.epochs = tr.at("epochs");
  dt.batch_size = tr.at("batch-size");
  dt.lr = tr.at("lr");
  dt.warmup = tr.at("warmup");
  dt.ratio = {tr.at("mask-min"), tr.at("mask-max")};
  dt.seed = tr.at("seed");

  RunDir run = open_run(root, cfg, "dar-train");
  const DatasetSplit split = split_dataset(generate_dataset(tok.spec));
  const DiscreteSequence tokens = tok.vq.encode(split.train);
  DiscreteGenerator gen(gc, m.at("seed").get<std::uint64_t>());
  const auto history = train_discrete(gen, tokens.indices, split.train.labels, dt);
  const Json seeds = {{"init", m.at("seed")}, {"train", dt.seed}, {"data", tok.spec.seed}};
  io::save_checkpoint(run.checkpoints() / "dar", gen.to_checkpoint({{"seeds", seeds}, {"tokenizer_run", tok_dir.filename().string()}}));
  for (std::size_t e = 0; e < history.size(); ++e) io::append_jsonl(run.metrics(), {{"epoch", e + 1}, {"loss", history[e]}});
  Rng rng(mix_seed(dt.seed, 0x5A));
  const auto classes = class_list(tok.spec.n_classes, 2);
  const auto sampled = generate_discrete(gen, classes, {}, rng);
  ImageBatch decoded = tok.vq.decode({tok.vq.config().grid(), tok.vq.config().grid(), sampled});
  write_image_grid(run.samples() / "discrete_samples.ppm", decoded, 8, 3);
  write_line_plot(run.plots() / "loss.ppm", {history});
  write_manifest(run, "dar-train", cfg,
                 {{"seeds", seeds}, {"checkpoints", {"checkpoints/dar"}}, {"final_loss", history.back()}});
  std::cout << "discrete generator trained: final loss " << history.back() << "\n";
  return kOk;
}

TrainConfig train_config(const Json& cfg) {
  const Json& tr = cfg.at("train");
  TrainConfig c;
  c.epochs = tr.at("epochs");
  c.batch_size = tr.at("batch-size");
  c.lr = tr.at("lr");
  c.warmup = tr.at("warmup");
  c.ema_decay = tr.at("ema");
  c.weight_decay = tr.at("weight-decay");
  c.grad_clip = tr.at("grad-clip");
  c.mask = {tr.at("mask-min"), tr.at("mask-max")};
  c.class_dropout = tr.at("class-dropout");
  c.diffusion_repeats = tr.at("repeats");
  c.generator_temperature = tr.at("generator-temperature");
  c.eval_every = cfg.at("eval").at("every");
  const Json& tm = cfg.at("ti-mix");
  c.ti_mix.lambda_start = tm.at("lambda-start");
  c.ti_mix.lambda_end = tm.at("lambda-end");
  c.ti_mix.decay = parse_lambda_decay(tm.at("decay"));
  c.ti_mix.start_epoch = tm.at("start-epoch");
  const Json& s = cfg.at("seeds");
  c.seeds = {s.at("data"), s.at("masking"), s.at("diffusion"), s.at("ti-mix")};
  c.validate();
  return c;
}

int cmd_mixar_train(const fs::path& root, const Json& cfg) {
  const fs::path tok_dir = upstream(root, cfg, "tokenizer-run");
  Tokenizers tok = load_tokenizers(tok_dir);
  const TrainConfig tc = train_config(cfg);
  const GuidanceVariant variant = parse_variant(cfg.at("variant"));
  const bool needs_generator = uses_guidance(variant) && !tc.ti_mix.always_ground_truth();
  std::optional<DiscreteGenerator> gen;
  std::string dar_name;
  if (needs_generator) {
    const fs::path dar_dir = upstream(root, cfg, "dar-run");
    gen = DiscreteGenerator::from_checkpoint(io::load_checkpoint(dar_dir / "checkpoints" / "dar"));
    dar_name = dar_dir.filename().string();
  } else if (!cfg.at("dar-run").get<std::string>().empty() && fs::exists(root / cfg.at("dar-run").get<std::string>() / "checkpoints" / "dar")) {
    // Optional: enables generated-guidance validation metrics.
    gen = DiscreteGenerator::from_checkpoint(io::load_checkpoint(root / cfg.at("dar-run").get<std::string>() / "checkpoints" / "dar"));
    dar_name = cfg.at("dar-run").get<std::string>();
  }

  const Json& m = cfg.at("model");
  MixarConfig mc;
  mc.backbone.variant = variant;
  mc.backbone.n_tokens = tok.vq.config().grid() * tok.vq.config().grid();
  mc.backbone.token_width = tok.continuous.config().continuous_width;
  mc.backbone.code_width = tok.vq.config().code_width;
  mc.backbone.vocab = tok.vq.config().vocab;
  mc.backbone.n_classes = tok.spec.n_classes;
  mc.backbone.n_cls_tokens = m.at("cls-tokens");
  mc.backbone.width = m.at("width");
  mc.backbone.depth = m.at("depth");
  mc.backbone.heads = m.at("heads");
  mc.backbone.mlp_ratio = m.at("mlp-ratio");
  mc.head.width = cfg.at("head").at("width");
  mc.head.blocks = cfg.at("head").at("blocks");
  mc.train_steps = cfg.at("diffusion").at("train-steps");
  mc.sample_steps = cfg.at("diffusion").at("sample-steps");
  mc.sync();
  mc.validate();

  const std::string resume = cfg.at("resume");
  std::optional<MixarModel> model;
  if (!resume.empty()) {
    const fs::path src = root / resume / "checkpoints" / "mixar";
    if (!fs::exists(src / "manifest.json")) throw DependencyError("resume run '" + resume + "' has no mixar checkpoint");
    model = MixarModel::from_checkpoint(io::load_checkpoint(src));
    if (model->config().to_json() != mc.to_json()) {
      throw ConfigError("resume: model configuration differs from run '" + resume + "'");
    }
  } else {
    model.emplace(mc, tok.vq.codebook(), m.at("seed").get<std::uint64_t>());
  }

  const GenerationConfig gcfg = generation_config(cfg.at("generation"));
  const Json& ev = cfg.at("eval");
  const int frechet_samples = ev.at("frechet-samples");
  RunDir run = open_run(root, cfg, "mixar-train");
  const DatasetSplit split = split_dataset(generate_dataset(tok.spec));
  const TokenizedDataset train = tokenize_dataset(split.train, tok.continuous, tok.vq);
  const TokenizedDataset val = tokenize_dataset(split.val, tok.continuous, tok.vq);

  std::optional<ProbeClassifier> probe;
  Matrix reference_features;
  if (frechet_samples > 0) {
    probe.emplace(split.train.pixels_per_image(), tok.spec.n_classes, probe_config(cfg.at("probe")));
    probe->fit(split.train);
    reference_features = probe->features(reference_images(tok.spec, ev.at("reference-per-class")));
  }
  HeldOutConfig hc;
  hc.mask = tc.mask;
  hc.seed = ev.at("seed");
  hc.generator_temperature = tc.generator_temperature;
  const auto val_masks = evaluation_masks(val.size(), val.n_tokens, hc);
  std::vector<int> val_generated;
  if (gen && uses_guidance(variant)) val_generated = generated_guidance(*gen, val, val_masks, hc);

  std::vector<double> train_curve, gt_curve, gen_curve, lambda_curve;
  auto hook = [&](const EpochRecord& rec, MixarModel& mm) {
    Json r = {{"epoch", rec.epoch}, {"train_loss", rec.train_loss}, {"lambda", rec.lambda}, {"lr", rec.lr}};
    const double gt = held_out_loss(mm, val, val.discrete, val_masks, hc);
    r["val_loss_gt"] = gt;
    gt_curve.push_back(gt);
    if (!val_generated.empty()) {
      const double g = held_out_loss(mm, val, val_generated, val_masks, hc);
      r["val_loss_generated"] = g;
      gen_curve.push_back(g);
    } else {
      r["val_loss_generated"] = nullptr;
    }
    const bool can_sample = !uses_guidance(variant) || gen.has_value();
    if (can_sample) {
      const int per_class = std::max(1, frechet_samples / tok.spec.n_classes);
      const auto classes = class_list(tok.spec.n_classes, frechet_samples > 0 ? per_class : 2);
      const GeneratedBatch out = generate_images(gen ? &*gen : nullptr, mm, tok.continuous, classes, gcfg, hc.seed + rec.epoch);
      if (probe) r["frechet"] = frechet_surrogate(reference_features, probe->features(out.images));
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << rec.epoch << ".ppm";
      std::vector<int> show;
      for (int c = 0; c < tok.spec.n_classes; ++c) {
        const int per = static_cast<int>(out.images.size()) / tok.spec.n_classes;
        for (int k = 0; k < std::min(per, 2); ++k) show.push_back(c * per + k);
      }
      write_image_grid(run.samples() / name.str(), out.images.rows(show), 8, 3);
      r["sample_grid"] = "samples/" + name.str();
    }
    io::append_jsonl(run.metrics(), r);
  };
  const TrainResult result = train_mixar(*model, train, gen ? &*gen : nullptr, tc, hook);
  for (const auto& e : result.epochs) {
    train_curve.push_back(e.train_loss);
    lambda_curve.push_back(e.lambda);
  }
  const Json seeds = {{"init", m.at("seed")}, {"data", tc.seeds.data}, {"masking", tc.seeds.masking},
                      {"diffusion", tc.seeds.diffusion}, {"ti_mix", tc.seeds.ti_mix}};
  io::save_checkpoint(run.checkpoints() / "mixar",
                      model->to_checkpoint({{"seeds", seeds}, {"train", tc.to_json()}, {"resumed_from", resume}}));
  write_line_plot(run.plots() / "loss.ppm", {train_curve});
  write_line_plot(run.plots() / "guidance_balance.ppm", {gt_curve, gen_curve});
  write_line_plot(run.plots() / "lambda.ppm", {lambda_curve});
  write_manifest(run, "mixar-train", cfg,
                 {{"seeds", seeds},
                  {"variant", variant_name(variant)},
                  {"checkpoints", {"checkpoints/mixar"}},
                  {"upstream", {{"tokenizer", tok_dir.filename().string()}, {"dar", dar_name}, {"resume", resume}}},
                  {"generator_calls", result.generator_calls},
                  {"steps", result.steps},
                  {"seconds_per_step", result.seconds_per_step},
                  {"parameters", model->backbone().parameter_count()}});
  std::cout << "mixar trained (" << variant_name(variant) << "): final loss " << result.epochs.back().train_loss
            << ", generator calls " << result.generator_calls << "\n";
  return kOk;
}

struct Pipeline {
  Tokenizers tok;
  std::optional<DiscreteGenerator> gen;
  std::optional<MixarModel> model;
};

Pipeline load_pipeline(const fs::path& root, const Json& cfg) {
  Pipeline p{load_tokenizers(upstream(root, cfg, "tokenizer-run")), std::nullopt, std::nullopt};
  const fs::path mixar_dir = upstream(root, cfg, "mixar-run");
  p.model = MixarModel::from_checkpoint(io::load_checkpoint(mixar_dir / "checkpoints" / "mixar"));
  if (uses_guidance(p.model->variant())) {
    const fs::path dar_dir = upstream(root, cfg, "dar-run");
    p.gen = DiscreteGenerator::from_checkpoint(io::load_checkpoint(dar_dir / "checkpoints" / "dar"));
  }
  return p;
}

int cmd_sample(const fs::path& root, const Json& cfg) {
  Pipeline p = load_pipeline(root, cfg);
  const GenerationConfig gcfg = generation_config(cfg.at("generation"));
  const auto classes = class_list(p.tok.spec.n_classes, cfg.at("per-class"));
  RunDir run = open_run(root, cfg, "sample");
  const std::uint64_t seed = cfg.at("seed");
  const GeneratedBatch out = generate_images(p.gen ? &*p.gen : nullptr, *p.model, p.tok.continuous, classes, gcfg, seed);
  const auto covered = std::count(out.provenance.begin(), out.provenance.end(), Provenance::Continuous);
  if (covered != static_cast<std::ptrdiff_t>(out.provenance.size())) {
    throw ContractError("decoding left positions without a continuous token");
  }
  std::vector<std::string> sums;
  Json files = Json::array();
  if (cfg.at("write-images").get<bool>()) {
    for (Index i = 0; i < out.images.size(); ++i) {
      std::ostringstream name;
      name << "class" << classes[static_cast<std::size_t>(i)] << "_" << std::setw(5) << std::setfill('0') << i << ".ppm";
      const fs::path path = run.samples() / name.str();
      const RowVector row = out.images.pixels.row(i);
      io::write_ppm(path, std::span<const double>(row.data(), static_cast<std::size_t>(row.size())), out.images.channels,
                    out.images.height, out.images.width);
      sums.push_back(fnv1a_file(path));
      files.push_back("samples/" + name.str());
    }
  }
  io::write_arrays(run.samples() / "tokens.bin", {{"tokens", out.tokens}});
  sums.push_back(fnv1a_file(run.samples() / "tokens.bin"));
  const int per = cfg.at("per-class");
  std::vector<int> show;
  for (int c = 0; c < p.tok.spec.n_classes; ++c) {
    for (int k = 0; k < std::min(per, 8); ++k) show.push_back(c * per + k);
  }
  write_image_grid(run.samples() / "grid.ppm", out.images.rows(show), std::min(per, 8), 3);
  const std::string checksum = combine_checksums(sums);
  io::append_jsonl(run.metrics(), {{"images", out.images.size()},
                                   {"head_evaluations", out.head_evaluations},
                                   {"provenance_continuous", covered},
                                   {"checksum", checksum}});
  write_manifest(run, "sample", cfg,
                 {{"seeds", {{"sample", seed}}},
                  {"upstream", {{"tokenizer", cfg.at("tokenizer-run")}, {"dar", cfg.at("dar-run")}, {"mixar", cfg.at("mixar-run")}}},
                  {"files", files},
                  {"checkpoints", Json::array()},
                  {"checksum", checksum}});
  std::cout << "sampled " << out.images.size() << " images, provenance coverage " << covered << "/"
            << out.provenance.size() << ", checksum " << checksum << "\n";
  return kOk;
}

int cmd_eval(const fs::path& root, const Json& cfg) {
  Pipeline p = load_pipeline(root, cfg);
  const GenerationConfig gcfg = generation_config(cfg.at("generation"));
  RunDir run = open_run(root, cfg, "eval");
  const DatasetSplit split = split_dataset(generate_dataset(p.tok.spec));
  ProbeClassifier probe(split.train.pixels_per_image(), p.tok.spec.n_classes, probe_config(cfg.at("probe")));
  probe.fit(split.train);
  const ImageBatch reference = reference_images(p.tok.spec, cfg.at("reference-per-class"));
  const Matrix ref_features = probe.features(reference);
  const auto classes = class_list(p.tok.spec.n_classes, cfg.at("per-class"));
  const GeneratedBatch out = generate_images(p.gen ? &*p.gen : nullptr, *p.model, p.tok.continuous, classes, gcfg,
                                             cfg.at("seed").get<std::uint64_t>());
  Json report = {{"variant", variant_name(p.model->variant())},
                 {"probe_accuracy_reference", probe.accuracy(reference)},
                 {"probe_accuracy_generated", probe.accuracy(out.images)},
                 {"frechet_generated", frechet_surrogate(ref_features, probe.features(out.images))}};
  ImageBatch roundtrip = p.tok.continuous.decode(p.tok.continuous.encode(reference));
  report["frechet_tokenizer_roundtrip"] = frechet_surrogate(ref_features, probe.features(roundtrip));
  const TokenizedDataset val = tokenize_dataset(split.val, p.tok.continuous, p.tok.vq);
  HeldOutConfig hc;
  hc.seed = cfg.at("gap-seed");
  if (p.gen) {
    const GapResult gap = train_eval_gap(*p.model, val, *p.gen, hc);
    report["val_loss_gt"] = gap.loss_ground_truth;
    report["val_loss_generated"] = gap.loss_generated;
    report["train_eval_gap"] = gap.gap();
  } else {
    const auto masks = evaluation_masks(val.size(), val.n_tokens, hc);
    report["val_loss_gt"] = held_out_loss(*p.model, val, {}, masks, hc);
  }
  io::append_jsonl(run.metrics(), report);
  io::write_text(run.dir / "report.json", report.dump(2) + "\n");
  write_image_grid(run.samples() / "generated.ppm", out.images.rows(std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}), 8, 3);
  write_manifest(run, "eval", cfg,
                 {{"seeds", {{"sample", cfg.at("seed")}, {"gap", hc.seed}}},
                  {"upstream", {{"tokenizer", cfg.at("tokenizer-run")}, {"dar", cfg.at("dar-run")}, {"mixar", cfg.at("mixar-run")}}},
                  {"checkpoints", Json::array()}});
  std::cout << report.dump(2) << "\n";
  return kOk;
}

int cmd_profile(const fs::path& root, const Json& cfg) {
  BackboneConfig dims;
  dims.n_tokens = cfg.at("N");
  dims.n_cls_tokens = cfg.at("cls");
  dims.depth = cfg.at("L");
  dims.width = cfg.at("d-b");
  dims.vocab = cfg.at("V");
  dims.token_width = cfg.at("d-c");
  dims.code_width = cfg.at("d-d");
  dims.heads = cfg.at("heads");
  dims.n_classes = cfg.at("classes");
  ProfileOptions opts;
  opts.measure_time = cfg.at("time");
  opts.decode_steps = cfg.at("decode-steps");
  opts.sample_steps = cfg.at("sample-steps");
  opts.head_width = cfg.at("head-width");
  opts.head_blocks = cfg.at("head-blocks");
  const std::string which = cfg.at("variant");
  std::vector<GuidanceVariant> variants;
  if (which == "all") {
    variants = {GuidanceVariant::MarBaseline, GuidanceVariant::DcMix, GuidanceVariant::DcSa, GuidanceVariant::DcCa};
  } else {
    variants = {parse_variant(which)};
  }
  RunDir run = open_run(root, cfg, "profile");
  std::string text;
  Json reports = Json::array();
  for (GuidanceVariant v : variants) {
    dims.variant = v;
    const CostReport r = profile_variant(dims, opts);
    text += r.to_text();
    if (v == GuidanceVariant::DcMix) {
      std::ostringstream os;
      os << "token reduction vs dc-sa  " << std::setprecision(4) << 100.0 * dc_mix_token_reduction(dims.n_tokens, dims.n_cls_tokens)
         << "%  ((2N - (N + cls)) / 2N)\n";
      text += os.str();
    }
    text += "\n";
    reports.push_back(r.to_json());
    io::append_jsonl(run.metrics(), r.to_json());
  }
  io::write_text(run.dir / "cost_report.txt", text);
  io::write_text(run.dir / "cost_report.json", reports.dump(2) + "\n");
  write_manifest(run, "profile", cfg, {{"checkpoints", Json::array()}, {"seeds", {{"profile", 0}}}});
  std::cout << text;
  return kOk;
}

const std::vector<std::pair<std::string, std::string>> kCommands{
    {"tokenizer-train", "Train the continuous and vector-quantized tokenizers on the toy images"},
    {"dar-train", "Train the masked discrete token generator"},
    {"mixar-train", "Train (or resume) a guided continuous generator"},
    {"sample", "Generate images from trained runs"},
    {"eval", "Score generated images and the train-inference gap"},
    {"profile", "Report token, attention and parameter costs of each variant"}};

int dispatch(const std::string& command, const fs::path& root, const Json& cfg) {
  if (command == "tokenizer-train") return cmd_tokenizer_train(root, cfg);
  if (command == "dar-train") return cmd_dar_train(root, cfg);
  if (command == "mixar-train") return cmd_mixar_train(root, cfg);
  if (command == "sample") return cmd_sample(root, cfg);
  if (command == "eval") return cmd_eval(root, cfg);
  return cmd_profile(root, cfg);
}

int report(const char* category, const std::string& msg, int code) {
  std::string line = msg;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "error[" << category << "]: " << line << "\n";
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Toy discrete-guided continuous masked autoregressive image generation"};
  app.name("mixar");
  app.require_subcommand(1);
  std::string runs_flag;
  std::string config_path;
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, Json> defaults;
  for (const auto& [cmd, description] : kCommands) {
    CLI::App* sub = app.add_subcommand(cmd, description);
    sub->add_option("--config", config_path, "JSON file with config overrides");
    sub->add_option("--runs-root", runs_flag, "Directory holding run directories (default $MIXAR_RUNS_ROOT or ./runs)");
    defaults[cmd] = default_config(cmd);
    std::vector<std::string> keys;
    collect_keys(defaults[cmd], "", keys);
    for (const auto& key : keys) sub->add_option("--" + key, values[cmd][key], "default: " + [&] {
      Json node = defaults[cmd];
      std::stringstream ss(key);
      std::string part;
      while (std::getline(ss, part, '.')) node = node.at(part);
      return node.dump();
    }());
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::cout << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
      return kOk;
    }
    return report("usage", e.what(), kUsage);
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    Json cfg = defaults[command];
    if (!config_path.empty()) {
      Json file;
      try {
        file = Json::parse(io::read_text(config_path));
      } catch (const Json::parse_error& e) {
        throw ConfigError("cannot parse config file " + config_path + ": " + e.what());
      }
      merge_config(cfg, file);
    }
    CLI::App* sub = app.get_subcommands().front();
    for (const auto& [key, text] : values[command]) {
      if (sub->count("--" + key) > 0) set_config_value(cfg, key, text);
    }
    return dispatch(command, runs_root(runs_flag), cfg);
  } catch (const ConfigError& e) {
    return report("usage", e.what(), kUsage);
  } catch (const DependencyError& e) {
    return report("dependency", e.what(), kDependency);
  } catch (const NumericalError& e) {
    return report("numerical", e.what(), kNumerical);
  } catch (const IoError& e) {
    return report("io", e.what(), kFailure);
  } catch (const ContractError& e) {
    return report("contract", e.what(), kFailure);
  } catch (const std::exception& e) {
    return report("internal", e.what(), kFailure);
  }
}

void tune_allocator() {
#if defined(__GLIBC__)
  // Training allocates and frees many mid-sized buffers per step; keeping
  // them on the heap instead of fresh mappings avoids page-fault churn.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace mixar::cli
