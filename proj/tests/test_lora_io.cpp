#include <gtest/gtest.h>

#include <filesystem>

#include "nullfuse/lora_io.hpp"
#include "nullfuse/random.hpp"

using namespace nullfuse;
using Bytes = std::vector<std::uint8_t>;

namespace {

safetensors::Tensor tensor(std::vector<std::size_t> shape, std::vector<double> values,
                           DType dtype = DType::f32) {
  return {dtype, std::move(shape), std::move(values)};
}

std::vector<double> iota(std::size_t n, double start = 1.0) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = start + static_cast<double>(i) * 0.5;
  return v;
}

// Up 4x2, down 2x3 under "layer", optional alpha.
safetensors::Container minimal(std::optional<double> alpha) {
  safetensors::Container c;
  c.tensors["layer.lora_up.weight"] = tensor({4, 2}, iota(8));
  c.tensors["layer.lora_down.weight"] = tensor({2, 3}, iota(6, -1.0));
  if (alpha) c.tensors["layer.alpha"] = tensor({}, {*alpha});
  return c;
}

// Rounds through f32 so values survive an f32 write exactly.
Matrix f32_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Eigen::MatrixXd m = random_matrix(rows, cols, seed).eigen();
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
  return Matrix(m);
}

FormatStage stage_of(const safetensors::Container& c) {
  try {
    decode_checkpoint(c);
  } catch (const FormatError& e) {
    return e.stage();
  }
  ADD_FAILURE() << "expected FormatError";
  return FormatStage::data;
}

}  // namespace

TEST(ReadCheckpoint, MinimalFixtureFoldsAlpha) {
  const AdapterCheckpoint ckpt = read_checkpoint(safetensors::serialize(minimal(2.0)));
  ASSERT_EQ(ckpt.layers.size(), 1u);
  const LowRankUpdate& layer = ckpt.layers.at("layer");
  EXPECT_EQ(layer.rank(), 2u);
  EXPECT_EQ(layer.scale(), 1.0);
  EXPECT_EQ(layer.up()(3, 1), 4.5);
  EXPECT_EQ(layer.down()(1, 2), 1.5);
  EXPECT_TRUE(ckpt.warnings.empty());
  EXPECT_EQ(ckpt.source_dtype, DType::f32);
}

TEST(ReadCheckpoint, AlphaFoldingExactAtF64) {
  const AdapterCheckpoint ckpt = decode_checkpoint(minimal(3.0));
  const LowRankUpdate& layer = ckpt.layers.at("layer");
  EXPECT_EQ(layer.scale(), 1.5);
  const Matrix d = dense(layer);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 2; ++k) s += layer.up()(i, k) * layer.down()(k, j);
      EXPECT_EQ(d(i, j), 1.5 * s);
    }
}

TEST(ReadCheckpoint, MissingAlphaDefaultsToUnitScale) {
  EXPECT_EQ(decode_checkpoint(minimal(std::nullopt)).layers.at("layer").scale(), 1.0);
}

TEST(ReadCheckpoint, AlternateSuffixConvention) {
  safetensors::Container c;
  c.tensors["blk.lora_B.weight"] = tensor({3, 1}, iota(3));
  c.tensors["blk.lora_A.weight"] = tensor({1, 5}, iota(5));
  const AdapterCheckpoint ckpt = decode_checkpoint(c);
  EXPECT_EQ(ckpt.layers.at("blk").rank(), 1u);
  EXPECT_EQ(ckpt.naming.up, "lora_B.weight");
  EXPECT_EQ(ckpt.naming.down, "lora_A.weight");
}

TEST(ReadCheckpoint, PairingErrorsNameTheStem) {
  safetensors::Container c = minimal(1.0);
  c.tensors.erase("layer.lora_down.weight");
  try {
    decode_checkpoint(c);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.stage(), FormatStage::pairing);
    EXPECT_NE(std::string(e.what()).find("'layer'"), std::string::npos);
  }

  c = minimal(1.0);
  c.tensors.erase("layer.lora_up.weight");
  EXPECT_EQ(stage_of(c), FormatStage::pairing);

  c = minimal(1.0);
  c.tensors["layer.lora_B.weight"] = tensor({4, 2}, iota(8));
  EXPECT_EQ(stage_of(c), FormatStage::pairing);

  c = minimal(1.0);
  c.tensors["layer.lora_down.weight"] = tensor({3, 3}, iota(9));
  EXPECT_EQ(stage_of(c), FormatStage::pairing);
}

TEST(ReadCheckpoint, MalformedFactors) {
  safetensors::Container c = minimal(1.0);
  c.tensors["layer.lora_up.weight"] = tensor({8}, iota(8));
  EXPECT_THROW(decode_checkpoint(c), FormatError);
  c = minimal(-1.0);
  EXPECT_EQ(stage_of(c), FormatStage::data);
  c = minimal(1.0);
  c.tensors["layer.alpha"] = tensor({2}, {1.0, 2.0});
  EXPECT_EQ(stage_of(c), FormatStage::pairing);
  c = minimal(1.0);
  c.tensors["layer.lora_up.weight"] = tensor({4, 2}, {1, 2, 3, NAN, 5, 6, 7, 8});
  EXPECT_THROW(decode_checkpoint(c), Error);
}

TEST(ReadCheckpoint, UnknownTensorsBecomeWarnings) {
  safetensors::Container c = minimal(1.0);
  c.tensors["text_encoder.position_ids"] = tensor({3}, iota(3));
  c.tensors["orphan.alpha"] = tensor({}, {4.0});
  const AdapterCheckpoint ckpt = decode_checkpoint(c);
  EXPECT_EQ(ckpt.layers.size(), 1u);
  EXPECT_EQ(ckpt.warnings.size(), 2u);
}

TEST(ReadCheckpoint, F16StoredValuesWidenExactly) {
  safetensors::Container c;
  c.tensors["l.lora_up.weight"] = tensor({2, 1}, {0.333251953125, -2.5}, DType::f16);
  c.tensors["l.lora_down.weight"] = tensor({1, 2}, {1.0 / 1024, 65504.0}, DType::f16);
  const AdapterCheckpoint ckpt = read_checkpoint(safetensors::serialize(c));
  EXPECT_EQ(ckpt.source_dtype, DType::f16);
  EXPECT_EQ(ckpt.layers.at("l").up()(0, 0), 0.333251953125);
  EXPECT_EQ(ckpt.layers.at("l").down()(0, 1), 65504.0);
}

TEST(WriteCheckpoint, RoundTripByteIdentical) {
  AdapterCheckpoint ckpt;
  ckpt.layers.emplace("b.attn", LowRankUpdate(f32_matrix(6, 4, 1), f32_matrix(4, 5, 2), 0.5));
  ckpt.layers.emplace("a.mlp", LowRankUpdate(f32_matrix(3, 2, 3), f32_matrix(2, 7, 4)));
  ckpt.metadata["note"] = "fixture";
  const Bytes first = write_checkpoint(ckpt, DType::f32);
  const AdapterCheckpoint back = read_checkpoint(first);
  ASSERT_EQ(back.layers.size(), 2u);
  EXPECT_EQ(back.layers.at("b.attn").up(), ckpt.layers.at("b.attn").up());
  EXPECT_EQ(back.layers.at("b.attn").scale(), 0.5);
  EXPECT_EQ(back.metadata.at("nullfuse.tool"), "nullfuse");
  EXPECT_EQ(write_checkpoint(back, DType::f32), first);
}

TEST(WriteCheckpoint, RankSixteenShapesPreserved) {
  AdapterCheckpoint ckpt;
  ckpt.layers.emplace("merged", LowRankUpdate(f32_matrix(32, 16, 5), f32_matrix(16, 24, 6)));
  const auto path = std::filesystem::temp_directory_path() / "nullfuse_rank16.safetensors";
  write_checkpoint(ckpt, path, DType::f32);
  const AdapterCheckpoint back = read_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.layers.at("merged").up().shape(), "32x16");
  EXPECT_EQ(back.layers.at("merged").down().shape(), "16x24");
}

TEST(WriteCheckpoint, EmptyCheckpointIsMetadataOnly) {
  const Bytes bytes = write_checkpoint(AdapterCheckpoint{}, DType::f32);
  const auto c = safetensors::parse(bytes);
  EXPECT_TRUE(c.tensors.empty());
  EXPECT_EQ(c.metadata.at("nullfuse.version"), kVersion);
}

TEST(WriteCheckpoint, Refusals) {
  AdapterCheckpoint ckpt;
  ckpt.layers.emplace("x", LowRankUpdate(Matrix::from_rows({{1e300}}), Matrix::from_rows({{1}})));
  EXPECT_THROW(write_checkpoint(ckpt, DType::f32), ValidationError);
  EXPECT_THROW(write_checkpoint(AdapterCheckpoint{}, DType::bf16), ValidationError);
  EXPECT_THROW(read_checkpoint(std::filesystem::path("/nonexistent/file.safetensors")), IoError);
}

TEST(PairLayers, Cases) {
  AdapterCheckpoint a, b;
  for (const char* k : {"x", "y"}) {
    a.layers.emplace(k, random_update(4, 4, 1, 1));
    b.layers.emplace(k, random_update(4, 4, 1, 2));
  }
  PairingResult r = pair_layers(a, b);
  EXPECT_EQ(r.paired.size(), 2u);
  EXPECT_TRUE(r.unpaired_content.empty());
  EXPECT_TRUE(r.unpaired_style.empty());

  AdapterCheckpoint c;
  c.layers.emplace("z", random_update(4, 4, 1, 3));
  r = pair_layers(a, c);
  EXPECT_TRUE(r.paired.empty());
  EXPECT_EQ(r.unpaired_content, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(r.unpaired_style, (std::vector<std::string>{"z"}));
}

TEST(PairLayers, StemRewriteAlignsConventions) {
  AdapterCheckpoint kohya, diffusers;
  kohya.layers.emplace("lora_unet_down_blocks_0_attn1_to_q", random_update(4, 4, 1, 1));
  diffusers.layers.emplace("unet.down_blocks_0_attn1_to_q", random_update(4, 4, 1, 2));
  EXPECT_TRUE(pair_layers(kohya, diffusers).paired.empty());

  KeyPairing pairing;
  pairing.stem_rewrites = {{"^lora_unet_", "unet."}};
  const PairingResult r = pair_layers(kohya, diffusers, pairing);
  ASSERT_EQ(r.paired.size(), 1u);
  EXPECT_EQ(r.paired[0].content_key, "lora_unet_down_blocks_0_attn1_to_q");
  EXPECT_EQ(r.paired[0].style_key, "unet.down_blocks_0_attn1_to_q");

  pairing.stem_rewrites = {{"(", ""}};
  EXPECT_THROW(pair_layers(kohya, diffusers, pairing), ValidationError);
}

TEST(KeyPairing, Validation) {
  KeyPairing p;
  p.down_suffixes.pop_back();
  EXPECT_THROW(p.validate(), ValidationError);
}
