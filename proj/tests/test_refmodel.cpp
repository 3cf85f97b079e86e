#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "glotran/refmodel.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace glotran;
using namespace glotran::refmodel;

namespace {

RefModelConfig small_config() {
  RefModelConfig cfg;
  cfg.d_v = 8;
  cfg.d_t = 8;
  cfg.enc_layers = 1;
  cfg.dec_layers = 2;
  cfg.cross_layers = {0};
  return cfg;
}

std::vector<std::vector<double>> rows_of(const Matrix& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r].push_back(m(r, c));
  }
  return out;
}

Matrix random_matrix(std::mt19937_64& rng, int rows, int cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

double log_sum_exp(const Eigen::RowVectorXd& row) {
  const double mx = row.maxCoeff();
  double z = 0;
  for (Eigen::Index k = 0; k < row.size(); ++k) z += std::exp(row(k) - mx);
  return mx + std::log(z);
}

std::vector<std::vector<int>> last(const std::vector<std::vector<int>>& items, std::size_t n) {
  const std::size_t keep = std::min(items.size(), n);
  return {items.end() - static_cast<std::ptrdiff_t>(keep), items.end()};
}

}  // namespace

TEST(RefConfig, ParseRoundTripAndErrors) {
  RefModelConfig cfg;
  cfg.cross_layers = {1, 3};
  cfg.local_keys = true;
  cfg.lr = 1e-3;
  const RefModelConfig back = parse_config(to_text(cfg));
  EXPECT_EQ(back.cross_layers, cfg.cross_layers);
  EXPECT_TRUE(back.local_keys);
  EXPECT_DOUBLE_EQ(back.lr, 1e-3);
  EXPECT_EQ(to_text(back), to_text(cfg));
  EXPECT_THROW(parse_config("bogus=1"), ConfigError);
  EXPECT_THROW(parse_config("heads"), ConfigError);
  EXPECT_THROW(parse_config("cross_layers=9"), ConfigError);
  EXPECT_THROW(parse_config("d_t=15\nheads=2"), ConfigError);
  EXPECT_EQ(parse_config("# only a comment\n\nreplay = 2  # trailing\n").replay, 2);
}

TEST(RefViews, PatchifyRasterOrder) {
  ImageTensor img{4, 2, {}};
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) img.data.push_back(100 * y + 10 * x + c);
  const Matrix p = patchify(img, 2);
  ASSERT_EQ(p.rows(), 2);
  ASSERT_EQ(p.cols(), 12);
  // second patch starts at (x=2, y=0), then (3,0), (2,1), (3,1)
  EXPECT_DOUBLE_EQ(p(1, 0), 20);
  EXPECT_DOUBLE_EQ(p(1, 3), 30);
  EXPECT_DOUBLE_EQ(p(1, 6), 120);
  EXPECT_DOUBLE_EQ(p(1, 11), 132);
  EXPECT_THROW(patchify(img, 3), std::invalid_argument);
}

TEST(RefViews, SharedEncoderGivesSameFeaturesForSameImage) {
  const RefModelConfig cfg = small_config();
  const Parameters theta = init_parameters(cfg);
  const ToyDataset ds = make_toy_dataset(1, cfg, 3);
  const auto g = encode_view(ds[0].global, cfg, theta);
  EXPECT_EQ(g.grid.count(), 4);
  EXPECT_EQ(g.raw.rows(), 4);
  EXPECT_EQ(g.raw.cols(), cfg.d_v);
  const auto l = encode_view(ds[0].global, cfg, theta, ViewSource::kLocal, BoundingBox{0, 0, 64, 64});
  EXPECT_EQ((g.raw - l.raw).norm(), 0.0);
  EXPECT_THROW(encode_view(ds[0].global, cfg, theta, ViewSource::kLocal), std::invalid_argument);
}

TEST(RefViews, ProjectorMatchesTripleLoop) {
  std::mt19937_64 rng(1);
  const RefModelConfig cfg = small_config();
  Parameters theta = init_parameters(cfg);
  theta["proj.b"] = random_matrix(rng, 1, cfg.d_t);
  const Matrix raw = random_matrix(rng, 5, cfg.d_v);
  const Matrix out = project(raw, theta);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < cfg.d_t; ++j) {
      double acc = theta["proj.b"](0, j);
      for (int k = 0; k < cfg.d_v; ++k) acc += raw(i, k) * theta["proj.w"](k, j);
      EXPECT_NEAR(out(i, j), acc, 1e-12);
    }
  }
  const Matrix zero = project(Matrix::Zero(3, cfg.d_v), theta);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(zero.row(i), theta["proj.b"].row(0));
  EXPECT_THROW(project(Matrix::Zero(1, cfg.d_v + 1), theta), std::invalid_argument);
}

TEST(RefGeometry, BucketEndpointsAndFormula) {
  EXPECT_EQ(proximity_bucket(0.3, 0.3, 0.3, 0.3, 8), 0);
  EXPECT_EQ(proximity_bucket(0.0, 0.0, 1.0, 1.0, 8), 7);
  EXPECT_EQ(proximity_bucket(-3.0, 5.0, 1.0, 0.0, 8), 7);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const double ax = u(rng), ay = u(rng), bx = u(rng), by = u(rng);
    const int k = 1 + trial % 12;
    const double d = std::hypot(ax - bx, ay - by);
    const int want = std::min(k - 1, static_cast<int>(std::floor(k * d / std::sqrt(2.0))));
    ASSERT_EQ(proximity_bucket(ax, ay, bx, by, k), want);
  }
}

TEST(RefGeometry, SliceTokensMapIntoSourceCoordinates) {
  const auto local = imaging::patch_grid(32, 32, 16);
  const auto global = imaging::patch_grid(32, 32, 16);
  // slice covering the top-left quadrant of a 64x64 source: local (0,0) sits at (8,8)/64
  const BoundingBox box{0, 0, 32, 32};
  const double lx = 8.0 / 64, ly = 8.0 / 64, gx = 0.25, gy = 0.25;
  EXPECT_EQ(proximity_bucket(0, 0, local, box, 0, 0, global, 64, 64, 8), proximity_bucket(lx, ly, gx, gy, 8));
  const CrossGeometry g = build_geometry(local, box, global, 64, 64, 8, false);
  ASSERT_EQ(g.bucket.rows(), 4);
  ASSERT_EQ(g.bucket.cols(), 4);
  EXPECT_EQ(g.source.maxCoeff(), 0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      EXPECT_EQ(g.bucket(i, j), proximity_bucket(i / 2, i % 2, local, box, j / 2, j % 2, global, 64, 64, 8));
  const CrossGeometry with_local = build_geometry(local, box, global, 64, 64, 8, true);
  ASSERT_EQ(with_local.source.cols(), 8);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(with_local.source(i, 4 + i), 1);
    EXPECT_EQ(with_local.bucket(i, 4 + i), 0);
  }
}

TEST(RefCrossAttention, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int heads = 1 + trial % 4;
    const int d = heads * (1 + trial % 3);
    const int n_s = 1 + trial % 5;
    const int n_g = 1 + (trial * 7) % 6;
    const bool local_keys = trial % 2 == 1;
    const Matrix local = random_matrix(rng, n_s, d);
    const Matrix global = random_matrix(rng, n_g, d);
    const Matrix bias = random_matrix(rng, 2, 8, 0.5);
    const int n_k = n_g + (local_keys ? n_s : 0);
    CrossGeometry geom{IndexMatrix::Zero(n_s, n_k), IndexMatrix::Zero(n_s, n_k)};
    for (int i = 0; i < n_s; ++i) {
      for (int j = 0; j < n_k; ++j) {
        geom.source(i, j) = j >= n_g ? 1 : 0;
        geom.bucket(i, j) = static_cast<int>(rng() % 8);
      }
    }
    auto kv = rows_of(global);
    if (local_keys) {
      for (auto& r : rows_of(local)) kv.push_back(r);
    }
    std::vector<std::vector<std::vector<double>>> probs;
    const auto want = oracle::attention(
        rows_of(local), kv, heads, [&](std::size_t i, std::size_t j) { return bias(geom.source(i, j), geom.bucket(i, j)); },
        &probs);
    const CrossAttention got = cross_attend(local, global, bias, geom, heads);
    ASSERT_EQ(got.probabilities.size(), static_cast<std::size_t>(heads));
    for (int i = 0; i < n_s; ++i) {
      for (int c = 0; c < d; ++c) ASSERT_NEAR(got.output(i, c), want[i][c], 1e-12);
      for (int h = 0; h < heads; ++h) {
        for (int j = 0; j < n_k; ++j) ASSERT_NEAR(got.probabilities[h](i, j), probs[h][i][j], 1e-12);
      }
    }
  }
}

TEST(RefCrossAttention, ZeroBiasIsPlainAttentionAndRowsSumToOne) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int heads = 1 + trial % 2;
    const int d = 2 * heads;
    const int n_s = 1 + trial % 4;
    const int n_g = 1 + trial % 5;
    const Matrix local = random_matrix(rng, n_s, d);
    const Matrix global = random_matrix(rng, n_g, d);
    CrossGeometry geom{IndexMatrix::Zero(n_s, n_g), IndexMatrix::Zero(n_s, n_g)};
    for (int i = 0; i < n_s; ++i)
      for (int j = 0; j < n_g; ++j) geom.bucket(i, j) = static_cast<int>(rng() % 8);
    const auto got = cross_attend(local, global, Matrix::Zero(2, 8), geom, heads);
    const auto want = oracle::attention(rows_of(local), rows_of(global), heads, [](std::size_t, std::size_t) { return 0.0; });
    for (int i = 0; i < n_s; ++i) {
      for (int c = 0; c < d; ++c) ASSERT_NEAR(got.output(i, c), want[i][c], 1e-12);
      for (const auto& p : got.probabilities) ASSERT_NEAR(p.row(i).sum(), 1.0, 1e-12);
    }
  }
}

TEST(RefCrossAttention, SingleKeyGetsFullWeight) {
  std::mt19937_64 rng(5);
  const Matrix local = random_matrix(rng, 3, 4);
  const Matrix global = random_matrix(rng, 1, 4);
  const CrossGeometry geom{IndexMatrix::Zero(3, 1), IndexMatrix::Zero(3, 1)};
  const auto got = cross_attend(local, global, random_matrix(rng, 2, 8), geom, 2);
  for (const auto& p : got.probabilities) EXPECT_EQ(p, Matrix::Ones(3, 1));
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(got.output(i, c), local(i, c) + global(0, c), 1e-12);
  }
  EXPECT_THROW(cross_attend(local, global, Matrix::Zero(2, 8), geom, 3), std::invalid_argument);
  EXPECT_THROW(cross_attend(local, Matrix::Zero(1, 5), Matrix::Zero(2, 8), geom, 1), std::invalid_argument);
}

TEST(RefDecoder, LayoutShapeAndDeterminism) {
  const RefModelConfig cfg = small_config();
  const Parameters theta = init_parameters(cfg);
  const ToyDataset ds = make_toy_dataset(1, cfg, 6);
  const auto inputs = teacher_forced_inputs(ds[0], cfg);
  ASSERT_EQ(inputs.size(), 2u);
  const auto& in = inputs[1];
  EXPECT_EQ(in.n_global, 4);
  EXPECT_EQ(in.n_local, 4);
  const std::size_t replay_len = ds[0].slices[0].target.size() + 1;
  EXPECT_EQ(in.text.size(), replay_len + 1 + ds[0].slices[1].target.size());
  EXPECT_EQ(in.length(), 2 + 4 + 4 + static_cast<int>(in.text.size()));
  EXPECT_EQ(in.text[replay_len - 1], kSep);
  EXPECT_EQ(in.text[replay_len], kBos);
  EXPECT_EQ(in.targets.back(), kEos);
  const Matrix a = decode_step(ds[0], in, cfg, theta);
  EXPECT_EQ(a.rows(), in.length());
  EXPECT_EQ(a.cols(), cfg.vocab);
  EXPECT_EQ(a, decode_step(ds[0], in, cfg, theta));
}

TEST(RefDecoder, Causality) {
  const RefModelConfig cfg = small_config();
  const Parameters theta = init_parameters(cfg);
  const ToyDataset ds = make_toy_dataset(1, cfg, 7);
  DecoderInput in = teacher_forced_inputs(ds[0], cfg)[1];
  const Matrix before = decode_step(ds[0], in, cfg, theta);
  const int k = static_cast<int>(in.text.size()) - 2;
  in.text[static_cast<std::size_t>(k)] = in.text[static_cast<std::size_t>(k)] == 5 ? 6 : 5;
  const Matrix after = decode_step(ds[0], in, cfg, theta);
  const int pos = in.text_offset() + k;
  EXPECT_EQ(before.topRows(pos), after.topRows(pos));
  EXPECT_GT((before.bottomRows(before.rows() - pos) - after.bottomRows(after.rows() - pos)).norm(), 0.0);
}

TEST(RefDecoder, NoCrossLayersIgnoresBiasTable) {
  RefModelConfig cfg = small_config();
  cfg.cross_layers = {};
  Parameters theta = init_parameters(cfg);
  const ToyDataset ds = make_toy_dataset(2, cfg, 8);
  const auto in = teacher_forced_inputs(ds[0], cfg)[0];
  const Matrix a = decode_step(ds[0], in, cfg, theta);
  theta["bias_table"].setConstant(5.0);
  EXPECT_EQ(a, decode_step(ds[0], in, cfg, theta));
  Parameters grad;
  loss_and_grad(ds, cfg, theta, grad);
  EXPECT_EQ(grad["bias_table"].norm(), 0.0);
}

TEST(RefDecoder, TeacherForcingUsesTruthAndInferenceUsesOutputs) {
  RefModelConfig cfg = small_config();
  cfg.replay = 2;
  const Parameters theta = init_parameters(cfg);
  const ToyDataset ds = make_toy_dataset(2, cfg, 9, 64, 32, 4);
  for (const auto& rec : ds) {
    std::vector<std::vector<int>> truth;
    for (const auto& s : rec.slices) truth.push_back(s.target);
    const auto tf = teacher_forced_inputs(rec, cfg);
    const Generation gen = generate(rec, cfg, theta, 3);
    ASSERT_EQ(gen.outputs.size(), rec.slices.size());
    for (std::size_t i = 0; i < rec.slices.size(); ++i) {
      const std::vector<std::vector<int>> truth_prefix(truth.begin(), truth.begin() + static_cast<std::ptrdiff_t>(i));
      const std::vector<std::vector<int>> out_prefix(gen.outputs.begin(),
                                                     gen.outputs.begin() + static_cast<std::ptrdiff_t>(i));
      EXPECT_EQ(tf[i].replay_source, ReplaySource::kGroundTruth);
      EXPECT_EQ(tf[i].replay, last(truth_prefix, 2));
      EXPECT_EQ(gen.inputs[i].replay_source, ReplaySource::kModel);
      EXPECT_EQ(gen.inputs[i].replay, last(out_prefix, 2));
      EXPECT_LE(gen.outputs[i].size(), 3u);
    }
  }
}

TEST(RefLoss, UniformLogitsGiveLogVocab) {
  const RefModelConfig cfg = small_config();
  Parameters theta = init_parameters(cfg);
  theta["head.w"].setZero();
  theta["head.b"].setZero();
  const ToyDataset ds = make_toy_dataset(3, cfg, 10);
  const LossValue lv = loss(ds, cfg, theta);
  EXPECT_NEAR(lv.per_token, std::log(32.0), 1e-12);
  EXPECT_NEAR(lv.objective, 2 * std::log(32.0), 1e-12);
}

TEST(RefLoss, MatchesPerTokenCrossEntropyOracle) {
  const RefModelConfig cfg = small_config();
  const Parameters theta = init_parameters(cfg);
  const ToyDataset ds = make_toy_dataset(3, cfg, 11);
  double objective = 0;
  double token_sum = 0;
  long long tokens = 0;
  for (const auto& rec : ds) {
    for (const auto& in : teacher_forced_inputs(rec, cfg)) {
      const Matrix logits = decode_step(rec, in, cfg, theta);
      double slice_sum = 0;
      int slice_tokens = 0;
      for (std::size_t k = 0; k < in.text.size(); ++k) {
        if (!in.mask[k]) continue;
        const auto row = logits.row(in.text_offset() + static_cast<int>(k));
        slice_sum += log_sum_exp(row) - row(in.targets[k]);
        ++slice_tokens;
      }
      objective += slice_sum / slice_tokens / static_cast<double>(ds.size());
      token_sum += slice_sum;
      tokens += slice_tokens;
    }
  }
  const LossValue lv = loss(ds, cfg, theta);
  EXPECT_EQ(lv.masked_tokens, tokens);
  EXPECT_NEAR(lv.objective, objective, 1e-10);
  EXPECT_NEAR(lv.per_token, token_sum / static_cast<double>(tokens), 1e-10);
}

TEST(RefLoss, EmptyMaskAndZeroMask) {
  const RefModelConfig cfg = small_config();
  const Parameters theta = init_parameters(cfg);
  ToyDataset ds = make_toy_dataset(2, cfg, 12);
  Parameters grad;
  LossOptions zero;
  zero.zero_mask = true;
  const LossValue lv = loss_and_grad(ds, cfg, theta, grad, zero);
  EXPECT_EQ(lv.objective, 0.0);
  for (const auto& g : grad.values()) EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0);
  LossOptions no_tf;
  no_tf.teacher_forcing = false;
  EXPECT_THROW(loss(ds, cfg, theta, no_tf), std::invalid_argument);
  EXPECT_THROW(loss({}, cfg, theta), std::invalid_argument);
}

TEST(RefLoss, BiasGradientOnlyAtHitBuckets) {
  RefModelConfig cfg = small_config();
  cfg.buckets = 16;
  const Parameters theta = init_parameters(cfg);
  const ToyDataset ds = make_toy_dataset(2, cfg, 13);
  std::set<int> hit;
  for (const auto& rec : ds) {
    for (const auto& s : rec.slices) {
      const auto g = build_geometry(imaging::patch_grid(s.image.width, s.image.height, cfg.patch), s.box,
                                    imaging::patch_grid(rec.global.width, rec.global.height, cfg.patch),
                                    rec.source_width, rec.source_height, cfg.buckets, false);
      for (Eigen::Index i = 0; i < g.bucket.size(); ++i) hit.insert(g.bucket.data()[i]);
    }
  }
  ASSERT_LT(hit.size(), 16u);
  Parameters grad;
  loss_and_grad(ds, cfg, theta, grad);
  const Matrix& gb = grad["bias_table"];
  for (int b = 0; b < cfg.buckets; ++b) {
    EXPECT_EQ(gb(1, b), 0.0) << "local-key row unused without local keys";
    if (!hit.count(b)) EXPECT_EQ(gb(0, b), 0.0) << "bucket " << b;
  }
  EXPECT_GT(gb.row(0).cwiseAbs().maxCoeff(), 0.0);
}

TEST(RefLoss, GradCheckOnTinyModel) {
  RefModelConfig cfg = small_config();
  cfg.local_keys = true;
  const Parameters theta = init_parameters(cfg);
  const ToyDataset probe = make_toy_dataset(1, cfg, 14);
  GradCheckOptions opts;
  opts.max_entries_per_group = 8;
  const GradCheckReport r = grad_check(cfg, theta, probe, opts);
  EXPECT_EQ(r.groups.size(), theta.names().size());
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(RefTrain, ZeroStepsAndZeroRate) {
  RefModelConfig cfg = small_config();
  const ToyDataset ds = make_toy_dataset(2, cfg, 15);
  const Parameters theta = init_parameters(cfg);
  const TrainResult none = train(ds, cfg, 0);
  ASSERT_EQ(none.curve.size(), 1u);
  for (std::size_t i = 0; i < theta.values().size(); ++i) EXPECT_EQ(none.state.theta.values()[i], theta.values()[i]);
  cfg.lr = 0.0;
  const TrainResult frozen = train(ds, cfg, 5);
  ASSERT_EQ(frozen.curve.size(), 6u);
  for (const auto& p : frozen.curve) EXPECT_EQ(p.objective, frozen.curve.front().objective);
}

TEST(RefTrain, LossFallsOverWindows) {
  const RefModelConfig cfg = small_config();
  const ToyDataset ds = make_toy_dataset(4, cfg, 16);
  const TrainResult r = train(ds, cfg, 150);
  int rises = 0;
  for (std::size_t k = 1; k < r.curve.size(); ++k) rises += r.curve[k].objective > r.curve[k - 1].objective;
  EXPECT_LE(rises, static_cast<int>(0.05 * static_cast<double>(r.curve.size())));
  for (std::size_t k = 0; k + 50 < r.curve.size(); k += 50) EXPECT_LT(r.curve[k + 50].objective, r.curve[k].objective);
  EXPECT_LT(r.curve.back().objective, 0.5 * r.curve.front().objective);
}

TEST(RefCheckpoint, RoundTripIsExact) {
  testing_support::TempDir dir;
  const Parameters theta = init_parameters(small_config());
  save_checkpoint(dir / "ck.bin", theta);
  const Parameters back = load_checkpoint(dir / "ck.bin");
  ASSERT_EQ(back.names(), theta.names());
  for (std::size_t i = 0; i < theta.values().size(); ++i) EXPECT_EQ(back.values()[i], theta.values()[i]);
  std::ofstream(dir / "junk.bin") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir / "junk.bin"), std::runtime_error);
  EXPECT_THROW(load_checkpoint(dir / "missing.bin"), std::runtime_error);
}
