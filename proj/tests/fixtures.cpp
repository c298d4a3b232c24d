#include "fixtures.hpp"

namespace mixar::testing {

const DatasetSplit& toy_split() {
  static const DatasetSplit split = split_dataset(generate_dataset(DatasetSpec{}));
  return split;
}

TrainedTokenizers& trained_tokenizers() {
  static TrainedTokenizers tok = [] {
    TokenizerTrainConfig train;
    train.epochs = 30;
    return train_tokenizers(toy_split().train, TokenizerConfig{}, train);
  }();
  return tok;
}

const TokenizedDataset& tokenized_train() {
  static const TokenizedDataset data =
      tokenize_dataset(toy_split().train, trained_tokenizers().continuous, trained_tokenizers().vq);
  return data;
}

const TokenizedDataset& tokenized_val() {
  static const TokenizedDataset data =
      tokenize_dataset(toy_split().val, trained_tokenizers().continuous, trained_tokenizers().vq);
  return data;
}

DiscreteGenerator& trained_generator() {
  static DiscreteGenerator gen = [] {
    DiscreteGeneratorConfig cfg;
    cfg.width = 64;
    cfg.depth = 2;
    DiscreteGenerator g(cfg, 1);
    DiscreteTrainConfig train;
    train.epochs = 60;
    const auto& data = tokenized_train();
    train_discrete(g, data.discrete, data.labels, train);
    return g;
  }();
  return gen;
}

MixarConfig small_mixar_config(GuidanceVariant v) {
  MixarConfig cfg;
  cfg.backbone.variant = v;
  cfg.backbone.width = 32;
  cfg.backbone.depth = 2;
  cfg.head.width = 32;
  cfg.head.blocks = 2;
  cfg.sample_steps = 20;
  return cfg;
}

MixarModel& trained_mixar() {
  static MixarModel model = [] {
    MixarModel m(small_mixar_config(GuidanceVariant::DcMix), trained_tokenizers().vq.codebook(), 1);
    TrainConfig train;
    train.epochs = 20;
    train.ema_decay = 0.9;
    train.ti_mix.lambda_end = 1.0;
    train_mixar(m, tokenized_train(), nullptr, train);
    return m;
  }();
  return model;
}

}  // namespace mixar::testing
