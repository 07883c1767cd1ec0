#include <gtest/gtest.h>

#include "json.hpp"

#include "nullfuse/fusion.hpp"
#include "nullfuse/random.hpp"
#include "oracles.hpp"

using namespace nullfuse;

namespace {

AdapterCheckpoint checkpoint_of(std::initializer_list<std::pair<std::string, LowRankUpdate>> layers) {
  AdapterCheckpoint ckpt;
  for (const auto& [key, layer] : layers) ckpt.layers.emplace(key, layer);
  return ckpt;
}

ProjectionConfig hard_cfg() {
  ProjectionConfig cfg;
  cfg.mode = MergeMode::hard;
  return cfg;
}

ProjectionConfig soft_cfg(double mu) {
  ProjectionConfig cfg;
  cfg.mode = MergeMode::soft;
  cfg.mu = mu;
  return cfg;
}

}  // namespace

TEST(MergeDirect, WeightsMatchDenseSum) {
  const LowRankUpdate c = random_update(40, 30, 4, 1, 0.5);
  const LowRankUpdate s = random_update(40, 30, 6, 2, 2.0);
  const MergedUpdate m = merge_direct(c, s, 0.3, 0.7);
  EXPECT_EQ(m.provenance, MergeMode::direct);
  EXPECT_FALSE(m.mu_used.has_value());
  EXPECT_EQ(m.update.rank(), 10u);
  EXPECT_EQ(m.update.scale(), 1.0);
  const oracle::Dense expected =
      oracle::add(oracle::dense_update(c), oracle::dense_update(s), 0.3, 0.7);
  EXPECT_LE(oracle::frob_diff(dense(m), expected), 1e-12 * oracle::frob(expected));
}

TEST(MergeDirect, ZeroStyleWeightReproducesContent) {
  const LowRankUpdate c = random_update(16, 12, 3, 3);
  const LowRankUpdate s = random_update(16, 12, 3, 4);
  const MergedUpdate m = merge_direct(c, s, 1.0, 0.0);
  EXPECT_EQ(dense(m), dense(c));
}

TEST(MergeDirect, ShapeMismatch) {
  EXPECT_THROW(merge_direct(random_update(8, 8, 2, 1), random_update(8, 9, 2, 2)), ShapeError);
  EXPECT_THROW(merge_direct(random_update(8, 8, 2, 1), random_update(8, 8, 2, 2), NAN, 1.0),
               ValidationError);
}

TEST(MergeNp, StyleBlockPassesThroughBitIdentical) {
  const LowRankUpdate c = random_update(24, 20, 4, 5);
  const LowRankUpdate s = random_update(24, 20, 3, 6);
  for (const auto& cfg : {hard_cfg(), soft_cfg(0.5)}) {
    const MergedUpdate m = merge_np(c, s, cfg);
    EXPECT_EQ(m.update.rank(), 7u);
    EXPECT_EQ(m.style_rank, 3u);
    EXPECT_EQ(m.content_rank, 4u);
    EXPECT_EQ(m.k_used, 3u);
    EXPECT_EQ(Matrix(m.update.up().eigen().leftCols(3)), s.up());
    EXPECT_EQ(Matrix(m.update.down().eigen().topRows(3)), s.down());
  }
}

TEST(MergeNp, MuZeroEqualsDirect) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const LowRankUpdate c = random_update(32, 48, 8, 2 * seed, 0.75);
    const LowRankUpdate s = random_update(32, 48, 8, 2 * seed + 1, 1.25);
    const Matrix soft = dense(merge_np(c, s, soft_cfg(0.0)));
    const Matrix direct = dense(merge_direct(c, s));
    EXPECT_LE((soft.eigen() - direct.eigen()).norm(), 1e-12 * frob_norm(direct));
  }
}

TEST(MergeNp, HardSelfMergeGivesStyle) {
  const LowRankUpdate s = random_update(30, 30, 8, 9);
  const Matrix merged = dense(merge_np(s, s, hard_cfg()));
  const Matrix style = dense(s);
  EXPECT_LE((merged.eigen() - style.eigen()).norm(), 1e-10 * frob_norm(style));
}

TEST(MergeNp, SoftHalfAttenuatesContentEnergy) {
  const LowRankUpdate c = random_update(64, 64, 8, 21);
  const LowRankUpdate s = random_update(64, 64, 8, 22);
  const MergedUpdate m = merge_np(c, s, soft_cfg(0.5));
  const StyleSubspace sub = subspace_svd(s, RankSelection::full());
  // merged - style, via the dense oracle.
  const oracle::Dense residual = oracle::add(oracle::from(dense(m)), oracle::dense_update(s), 1.0, -1.0);
  const oracle::Dense inside = oracle::multiply(residual, oracle::projector(sub.basis()));
  const double after = oracle::frob(inside) * oracle::frob(inside);
  const double before = interference_energy(c, sub);
  EXPECT_NEAR(after, before / 2.25, 1e-9 * before);
  EXPECT_EQ(m.update.rank(), 16u);
  EXPECT_EQ(m.mu_used.value(), 0.5);
}

TEST(MergeNp, FactoredMatchesDensePathAllModes) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const std::size_t m = 32 + 16 * seed, n = 48 + 8 * seed;
    const LowRankUpdate c = random_update(m, n, 8, 100 + seed, 0.5);
    const LowRankUpdate s = random_update(m, n, 8, 200 + seed, 2.0);
    const StyleSubspace sub = subspace_svd(s, RankSelection::full());
    const oracle::Dense dc = oracle::dense_update(c), ds = oracle::dense_update(s);
    const double tol = 1e-10 * (oracle::frob(dc) + oracle::frob(ds));
    const std::vector<std::pair<ProjectionConfig, double>> cases{
        {hard_cfg(), 1.0}, {soft_cfg(0.5), 0.5 / 1.5}, {soft_cfg(10.0), 10.0 / 11.0}};
    for (const auto& [cfg, f] : cases) {
      const oracle::Dense expected = oracle::add(ds, oracle::right_shrink(dc, sub.basis(), f));
      EXPECT_LE(oracle::frob_diff(dense(merge(c, s, cfg)), expected), tol) << seed;
    }
    ProjectionConfig direct;
    direct.mode = MergeMode::direct;
    EXPECT_LE(oracle::frob_diff(dense(merge(c, s, direct)), oracle::add(dc, ds)), tol);
  }
}

TEST(MergeNp, HardModeProbeExclusivity) {
  const LowRankUpdate c = random_update(40, 40, 8, 31);
  const LowRankUpdate s = random_update(40, 40, 8, 32);
  const StyleSubspace sub = subspace_svd(s, RankSelection::full());
  const Eigen::MatrixXd merged = dense(merge(c, s, hard_cfg())).eigen();
  const Eigen::MatrixXd style = dense(s).eigen();
  const auto& v = sub.basis().eigen();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Eigen::VectorXd x = random_matrix(40, 1, seed).eigen();
    const Eigen::VectorXd xin = v * (v.transpose() * x);
    EXPECT_LE((merged * xin - style * xin).norm(), 1e-9 * (style * xin).norm());
  }
}

TEST(MergeNp, RejectsDirectModeAndBadConfig) {
  const LowRankUpdate c = random_update(8, 8, 2, 1);
  ProjectionConfig cfg;
  cfg.mode = MergeMode::direct;
  EXPECT_THROW(merge_np(c, c, cfg), ValidationError);
  EXPECT_THROW(merge_np(c, c, soft_cfg(-1.0)), ValidationError);
  EXPECT_THROW(merge_np(c, random_update(9, 8, 2, 2), hard_cfg()), ShapeError);
}

TEST(ApplyToBase, Cases) {
  const Matrix base = random_matrix(12, 10, 1);
  const MergedUpdate zero = merge_direct(random_update(12, 10, 2, 2), random_update(12, 10, 2, 3), 0.0, 0.0);
  EXPECT_EQ(apply_to_base(base, zero), base);

  const MergedUpdate m = merge_direct(random_update(12, 10, 2, 4), random_update(12, 10, 2, 5));
  const Matrix zero_base(Eigen::MatrixXd::Zero(12, 10));
  EXPECT_EQ(apply_to_base(zero_base, m), dense(m));

  const Matrix out = apply_to_base(base, m);
  const Matrix d = dense(m);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(out(i, j), base(i, j) + d(i, j));

  EXPECT_THROW(apply_to_base(random_matrix(10, 12, 1), m), ShapeError);
}

TEST(MergeCheckpoint, IdenticalSingleLayerHard) {
  const LowRankUpdate s = random_update(16, 16, 4, 1);
  const AdapterCheckpoint ckpt = checkpoint_of({{"unet.a", s}});
  const AdapterCheckpoint out = merge_checkpoint(ckpt, ckpt, hard_cfg());
  ASSERT_EQ(out.layers.size(), 1u);
  const Matrix merged = dense(out.layers.at("unet.a"));
  EXPECT_LE((merged.eigen() - dense(s).eigen()).norm(), 1e-10 * frob_norm(dense(s)));
}

TEST(MergeCheckpoint, KeepStyleOnlyPolicy) {
  const LowRankUpdate extra = random_update(6, 6, 2, 9);
  const AdapterCheckpoint content =
      checkpoint_of({{"shared", random_update(8, 8, 2, 1)}, {"content_only", random_update(8, 8, 2, 2)}});
  const AdapterCheckpoint style =
      checkpoint_of({{"shared", random_update(8, 8, 2, 3)}, {"style_only", extra}});
  MergeOptions opts;
  opts.unpaired = UnpairedPolicy::keep_style_only;
  const AdapterCheckpoint out = merge_checkpoint(content, style, soft_cfg(0.5), opts);
  ASSERT_EQ(out.layers.size(), 2u);
  EXPECT_EQ(out.layers.at("shared").rank(), 4u);
  EXPECT_EQ(out.layers.at("style_only").up(), extra.up());
  EXPECT_EQ(out.layers.at("style_only").down(), extra.down());
  EXPECT_EQ(out.layers.at("style_only").scale(), extra.scale());

  opts.unpaired = UnpairedPolicy::keep_both_passthrough;
  EXPECT_EQ(merge_checkpoint(content, style, soft_cfg(0.5), opts).layers.size(), 3u);
  opts.unpaired = UnpairedPolicy::error;
  EXPECT_THROW(merge_checkpoint(content, style, soft_cfg(0.5), opts), ValidationError);
}

TEST(MergeCheckpoint, RankEightPairGivesRankSixteen) {
  const AdapterCheckpoint c = checkpoint_of({{"l1", random_update(32, 32, 8, 1)}, {"l2", random_update(32, 32, 8, 2)}});
  const AdapterCheckpoint s = checkpoint_of({{"l1", random_update(32, 32, 8, 3)}, {"l2", random_update(32, 32, 8, 4)}});
  const AdapterCheckpoint out = merge_checkpoint(c, s, soft_cfg(0.5));
  for (const auto& [key, layer] : out.layers) EXPECT_EQ(layer.rank(), 16u) << key;
}

TEST(MergeCheckpoint, MetadataRecordsConfigAndProvenance) {
  const AdapterCheckpoint c = checkpoint_of({{"l1", random_update(8, 8, 2, 1)}});
  const AdapterCheckpoint s = checkpoint_of({{"l1", random_update(8, 8, 2, 2)}});
  const AdapterCheckpoint out = merge_checkpoint(c, s, soft_cfg(0.5));
  const auto cfg = nlohmann::json::parse(out.metadata.at("nullfuse.config"));
  EXPECT_EQ(cfg.at("mode"), "soft");
  EXPECT_EQ(cfg.at("mu"), 0.5);
  const auto layers = nlohmann::json::parse(out.metadata.at("nullfuse.layers"));
  EXPECT_EQ(layers.at("l1").at("provenance"), "soft");
  EXPECT_EQ(layers.at("l1").at("rank"), 4);
  EXPECT_TRUE(out.metadata.contains("nullfuse.version"));
  EXPECT_EQ(out.metadata.at("nullfuse.unpaired_policy"), "keep-both-passthrough");
}

TEST(MergeCheckpoint, EmptyIntersectionListsNearestMisses) {
  const AdapterCheckpoint c = checkpoint_of({{"unet.down.attn1.to_q", random_update(8, 8, 2, 1)}});
  const AdapterCheckpoint s = checkpoint_of({{"unet.down.attn1.to_k", random_update(8, 8, 2, 2)}});
  try {
    merge_checkpoint(c, s, soft_cfg(0.5));
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("unet.down.attn1.to_q"), std::string::npos);
    EXPECT_NE(msg.find("unet.down.attn1.to_k"), std::string::npos);
  }
}

TEST(MergeCheckpoint, ThreadCountDoesNotChangeResult) {
  AdapterCheckpoint c, s;
  for (int i = 0; i < 12; ++i) {
    c.layers.emplace("layer" + std::to_string(i), random_update(24, 24, 4, 10 + i));
    s.layers.emplace("layer" + std::to_string(i), random_update(24, 24, 4, 50 + i));
  }
  MergeOptions one, many;
  one.threads = 1;
  many.threads = 4;
  const AdapterCheckpoint a = merge_checkpoint(c, s, soft_cfg(0.5), one);
  const AdapterCheckpoint b = merge_checkpoint(c, s, soft_cfg(0.5), many);
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (const auto& [key, layer] : a.layers) {
    EXPECT_EQ(layer.up(), b.layers.at(key).up());
    EXPECT_EQ(layer.down(), b.layers.at(key).down());
  }
  EXPECT_EQ(a.metadata, b.metadata);
}

TEST(MergeCheckpoint, LayerErrorNamesKey) {
  const AdapterCheckpoint c = checkpoint_of({{"bad", random_update(8, 8, 2, 1)}});
  const AdapterCheckpoint s = checkpoint_of({{"bad", random_update(8, 9, 2, 2)}});
  try {
    merge_checkpoint(c, s, hard_cfg());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
    EXPECT_NE(std::string(e.what()).find("'bad'"), std::string::npos);
  }
}

TEST(UnpairedPolicy, ParseRoundTrip) {
  for (auto p : {UnpairedPolicy::error, UnpairedPolicy::keep_style_only, UnpairedPolicy::keep_both_passthrough}) {
    EXPECT_EQ(parse_unpaired_policy(to_string(p)), p);
  }
  EXPECT_THROW(parse_unpaired_policy("drop"), ValidationError);
}
