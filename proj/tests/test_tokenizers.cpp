#include "fixtures.hpp"
#include "gradcheck.hpp"

#include "mixar/tokenizers.hpp"

#include <doctest.h>

#include <filesystem>

using namespace mixar;

namespace {

double roundtrip_mse(const ImageBatch& images, const ImageBatch& back) {
  return (images.pixels - back.pixels).squaredNorm() / static_cast<double>(images.pixels.size());
}

ImageBatch toy_images(int per_class, std::uint64_t seed = 1) {
  DatasetSpec spec;
  spec.images_per_class = per_class;
  spec.seed = seed;
  return generate_dataset(spec);
}

TrainedTokenizers& trained() { return testing::trained_tokenizers(); }

}  // namespace

TEST_CASE("nearest codeword examples") {
  Matrix codebook(2, 2);
  codebook << 1, 0, 0, 1;
  Matrix x(1, 2);
  x << 0.9, 0.1;
  CHECK(quantize(x, codebook) == std::vector<int>{0});

  Matrix cb(4, 2);
  cb << 0, 0, 1, 0, 5, 5, -1, 0;
  CHECK(quantize(cb, cb) == std::vector<int>{0, 1, 2, 3});
  Matrix tie13(1, 2);
  tie13 << 0, 3;  // equidistant from codewords 1 and 3
  Matrix cb13(4, 2);
  cb13 << 9, 9, 1, 0, 9, -9, -1, 0;
  CHECK(quantize(tie13, cb13) == std::vector<int>{1});
}

TEST_CASE("codebook usage counts distinct codewords") {
  const std::vector<int> idx{0, 0, 3, 5};
  CHECK(codebook_usage(idx, 8) == doctest::Approx(3.0 / 8.0));
}

TEST_CASE("patch layout round-trips") {
  const ImageBatch images = toy_images(1);
  const Matrix patches = images_to_patches(images, 4);
  CHECK(patches.rows() == 8 * 16);
  CHECK(patches.cols() == 48);
  CHECK(patches_to_images(patches, 3, 16, 4) == images.pixels);
}

TEST_CASE("token shapes for a 16 pixel image at stride 4") {
  ContinuousTokenizer cont(TokenizerConfig{}, 1);
  VqTokenizer vq(TokenizerConfig{}, 1);
  const ImageBatch images = toy_images(1);
  const ContinuousSequence c = cont.encode(images);
  CHECK(c.grid_h == 4);
  CHECK(c.grid_w == 4);
  CHECK(c.n_tokens() == 16);
  CHECK(c.tokens.cols() == 8);
  CHECK(c.batch() == 8);
  const DiscreteSequence d = vq.encode(images);
  CHECK(d.indices.size() == 8u * 16u);
  const ImageBatch back = cont.decode(c);
  CHECK(back.pixels.rows() == images.pixels.rows());
  CHECK(back.pixels.cols() == images.pixels.cols());
  CHECK(vq.decode(d).pixels.cols() == images.pixels.cols());
}

TEST_CASE("identical images give identical tokens") {
  ContinuousTokenizer cont(TokenizerConfig{}, 2);
  ImageBatch images = toy_images(1);
  images = images.rows(std::vector<int>{3, 3});
  const Matrix tokens = cont.encode(images).tokens;
  CHECK(tokens.topRows(16) == tokens.bottomRows(16));
}

TEST_CASE("all-zero latents decode to a valid image") {
  ContinuousTokenizer cont(TokenizerConfig{}, 3);
  ContinuousSequence seq{4, 4, Matrix::Zero(16, 8)};
  const ImageBatch img = cont.decode(seq);
  CHECK(img.pixels.allFinite());
  CHECK(img.pixels.minCoeff() >= 0.0);
  CHECK(img.pixels.maxCoeff() <= 1.0);
}

TEST_CASE("zero KL weight leaves only the reconstruction term") {
  TokenizerConfig cfg;
  cfg.beta_kl = 0.0;
  ContinuousTokenizer cont(cfg, 4);
  Rng rng(1);
  nn::Tape t;
  const auto l = cont.loss(t, images_to_patches(toy_images(1), 4), false, rng);
  CHECK(l.total.scalar() == l.reconstruction);
}

TEST_CASE("straight-through gradient equals the gradient at the quantized point") {
  TokenizerConfig cfg;
  cfg.hidden = 16;
  VqTokenizer vq(cfg, 5);
  const Matrix patches = images_to_patches(toy_images(1).rows(std::vector<int>{0}), 4);
  nn::Parameter encoded(vq.encode_patches(patches));
  const Matrix codes = vq.lookup(quantize(encoded.value, vq.codebook()));
  {
    nn::Tape t;
    nn::Var q = nn::straight_through(t.param(encoded), t.constant(codes));
    t.backward(vq.reconstruction_from(t, q, patches));
  }
  nn::Parameter at(codes);
  const auto r = testing::check_gradients({{"q", &at}}, [&](nn::Tape& t) {
    return vq.reconstruction_from(t, t.param(at), patches);
  }, 40);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
  CHECK(encoded.grad.isApprox(at.grad, 1e-12));
}

TEST_CASE("continuous tokenizer loss gradients") {
  TokenizerConfig cfg;
  cfg.hidden = 8;
  cfg.beta_kl = 0.1;
  ContinuousTokenizer cont(cfg, 6);
  const Matrix patches = images_to_patches(toy_images(1).rows(std::vector<int>{1}), 4);
  const auto r = testing::check_gradients(cont.parameters(), [&](nn::Tape& t) {
    Rng rng(3);
    return cont.loss(t, patches, true, rng).total;
  });
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("single image is overfit by both tokenizers") {
  const ImageBatch one = toy_images(1).rows(std::vector<int>{2});
  TokenizerTrainConfig train;
  train.epochs = 600;
  train.batch_size = 1;
  train.sample_posterior = false;
  auto tok = train_tokenizers(one, TokenizerConfig{}, train);
  CHECK(roundtrip_mse(one, tok.continuous.decode(tok.continuous.encode(one))) < 1e-3);
}

TEST_CASE("small training set is reconstructed closely") {
  const ImageBatch images = toy_images(8);
  TokenizerTrainConfig train;
  train.epochs = 150;
  auto tok = train_tokenizers(images, TokenizerConfig{}, train);
  CHECK(roundtrip_mse(images, tok.continuous.decode(tok.continuous.encode(images))) < 0.01);
}

TEST_CASE("trained tokenizers generalize and use the codebook") {
  auto& tok = trained();
  const ImageBatch& held = testing::toy_split().val;
  CHECK(roundtrip_mse(held, tok.continuous.decode(tok.continuous.encode(held))) < 0.02);
  CHECK(roundtrip_mse(held, tok.vq.decode(tok.vq.encode(held))) < 0.02);
  CHECK(tok.history.codebook_usage.back() > 0.5);
}

TEST_CASE("quantize is idempotent on trained codewords") {
  const Matrix& cb = trained().vq.codebook();
  std::vector<int> expect(static_cast<std::size_t>(cb.rows()));
  for (int k = 0; k < cb.rows(); ++k) expect[static_cast<std::size_t>(k)] = k;
  CHECK(quantize(cb, cb) == expect);
}

TEST_CASE("tokenizer checkpoints round-trip") {
  auto& tok = trained();
  const auto dir = std::filesystem::temp_directory_path() / "mixar_test_tok";
  std::filesystem::remove_all(dir);
  io::save_checkpoint(dir / "cont", tok.continuous.to_checkpoint());
  io::save_checkpoint(dir / "vq", tok.vq.to_checkpoint());
  const auto cont = ContinuousTokenizer::from_checkpoint(io::load_checkpoint(dir / "cont"));
  const auto vq = VqTokenizer::from_checkpoint(io::load_checkpoint(dir / "vq"));
  const ImageBatch images = toy_images(1);
  CHECK(cont.encode(images).tokens == tok.continuous.encode(images).tokens);
  CHECK(vq.encode(images).indices == tok.vq.encode(images).indices);
  CHECK_THROWS_AS(VqTokenizer::from_checkpoint(io::load_checkpoint(dir / "cont")), IoError);
  std::filesystem::remove_all(dir);
}
