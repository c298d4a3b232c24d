#pragma once

#include "mixar/discrete_generator.hpp"
#include "mixar/tokenizers.hpp"
#include "mixar/training.hpp"

namespace mixar::testing {

// Trained once per test binary and shared by the cases that need a
// realistic model. The recipe matches the toy defaults of the tool.
const DatasetSplit& toy_split();
TrainedTokenizers& trained_tokenizers();
const TokenizedDataset& tokenized_train();
const TokenizedDataset& tokenized_val();
DiscreteGenerator& trained_generator();
/// Small DC-Mix model trained briefly with ground-truth guidance.
MixarModel& trained_mixar();
MixarConfig small_mixar_config(GuidanceVariant v);

}  // namespace mixar::testing
