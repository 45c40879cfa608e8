#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "hyperfl/checkpoint.hpp"
#include "hyperfl/data.hpp"
#include "hyperfl/metrics.hpp"
#include "hyperfl/optim.hpp"
#include "hyperfl/partition.hpp"
#include "test_support.hpp"

namespace hyperfl {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("hyperfl_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

TEST(SynthDataset, DeterministicAndScaled) {
  SynthSpec spec{3, 8, 50, 3.0, 11};
  Dataset a = synth_dataset(spec);
  Dataset b = synth_dataset(spec);
  EXPECT_EQ(serialize({{"x", a.x}}), serialize({{"x", b.x}}));
  EXPECT_EQ(a.y, b.y);
  EXPECT_EQ(a.size(), 150u);
  auto [lo, hi] = std::minmax_element(a.x.values().begin(), a.x.values().end());
  EXPECT_EQ(*lo, 0.0);
  EXPECT_EQ(*hi, 1.0);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(std::count(a.y.begin(), a.y.end(), c), 50);
  spec.seed = 12;
  EXPECT_NE(synth_dataset(spec).x, a.x);
}

// Closed-form linear discriminant: class means plus pooled covariance, solved
// by Gauss-Jordan elimination. Independent of the training code.
double lda_accuracy(const Dataset& train, const Dataset& test) {
  const std::size_t d = train.dim(), k = train.num_classes;
  std::vector<std::vector<double>> mean(k, std::vector<double>(d, 0.0));
  std::vector<double> count(k, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    count[train.y[i]] += 1;
    for (std::size_t j = 0; j < d; ++j) mean[train.y[i]][j] += train.x.at(i, j);
  }
  for (std::size_t c = 0; c < k; ++c)
    for (double& v : mean[c]) v /= count[c];
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = 0; q < d; ++q)
        cov[p * d + q] += (train.x.at(i, p) - mean[train.y[i]][p]) * (train.x.at(i, q) - mean[train.y[i]][q]);
  for (double& v : cov) v /= static_cast<double>(train.size() - k);
  // Solve cov * W = M^T for the discriminant directions.
  std::vector<double> aug(d * (d + k));
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t q = 0; q < d; ++q) aug[p * (d + k) + q] = cov[p * d + q] + (p == q ? 1e-9 : 0.0);
    for (std::size_t c = 0; c < k; ++c) aug[p * (d + k) + d + c] = mean[c][p];
  }
  for (std::size_t col = 0; col < d; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < d; ++r)
      if (std::fabs(aug[r * (d + k) + col]) > std::fabs(aug[piv * (d + k) + col])) piv = r;
    for (std::size_t j = 0; j < d + k; ++j) std::swap(aug[col * (d + k) + j], aug[piv * (d + k) + j]);
    const double pv = aug[col * (d + k) + col];
    for (std::size_t j = 0; j < d + k; ++j) aug[col * (d + k) + j] /= pv;
    for (std::size_t r = 0; r < d; ++r) {
      if (r == col) continue;
      const double f = aug[r * (d + k) + col];
      for (std::size_t j = 0; j < d + k; ++j) aug[r * (d + k) + j] -= f * aug[col * (d + k) + j];
    }
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    double best = -INFINITY;
    std::size_t arg = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0, bias = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        const double w = aug[p * (d + k) + d + c];
        s += w * test.x.at(i, p);
        bias += w * mean[c][p];
      }
      s -= 0.5 * bias;
      if (s > best) best = s, arg = c;
    }
    hits += arg == test.y[i];
  }
  return static_cast<double>(hits) / static_cast<double>(test.size());
}

TEST(SynthDataset, LargeSeparationIsLinearlyLearnable) {
  Dataset ds = synth_dataset({3, 16, 300, 8.0, 3});
  auto split = split_train_test(ds, 5.0, 3);
  EXPECT_GT(lda_accuracy(split.train, split.test), 0.95);

  NetSpec spec = make_mlp("lin", {16, 3}, LayerKind::relu, false, true);
  ParamSet p = init_params(spec, 3);
  MomentumState st;
  for (int epoch = 0; epoch < 5; ++epoch) {
    for (std::size_t start = 0; start < split.train.size(); start += 25) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(start + 25, split.train.size()); ++i) idx.push_back(i);
      auto r = sgd_step(p, grad_params(p, spec, split.train.batch(idx)), {0.5, 0.5, 0.0}, st);
      p = std::move(r.params);
      st = std::move(r.state);
    }
  }
  EXPECT_GT(accuracy(p, spec, split.test), 0.95);
}

TEST(SynthDataset, ZeroSeparationIsChance) {
  Dataset ds = synth_dataset({4, 8, 400, 0.0, 5});
  auto split = split_train_test(ds, 5.0, 5);
  const double acc = lda_accuracy(split.train, split.test);
  EXPECT_LT(std::fabs(acc - 0.25), 0.08);
}

TEST(SynthGlyphs, ImageLikeAndDeterministic) {
  GlyphSpec spec;
  spec.num_classes = 4;
  spec.per_class = 5;
  Dataset a = synth_glyphs(spec);
  EXPECT_EQ(a.x, synth_glyphs(spec).x);
  EXPECT_EQ(a.dim(), 256u);
  double mean = 0.0;
  for (double v : a.x.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    mean += v;
  }
  mean /= static_cast<double>(a.x.size());
  EXPECT_LT(mean, 0.4);  // mostly dark background
  EXPECT_GT(mean, 0.02);
}

TEST(LoadIdx, TinyImageScaling) {
  fs::path dir = temp_dir("idx_tiny");
  write_file(dir / "img", be32(0x803) + be32(1) + be32(2) + be32(2) + std::string("\x00\x80\xff\x40", 4));
  write_file(dir / "lab", be32(0x801) + be32(1) + std::string("\x07", 1));
  Dataset ds = load_idx(dir / "img", dir / "lab");
  ASSERT_EQ(ds.x.shape(), (Shape{1, 4}));
  EXPECT_EQ(ds.x[0], 0.0);
  EXPECT_NEAR(ds.x[1], 0.50196078431372548, 1e-15);
  EXPECT_EQ(ds.x[2], 1.0);
  EXPECT_NEAR(ds.x[3], 0.25098039215686274, 1e-15);
  EXPECT_EQ(ds.y, std::vector<std::size_t>{7});
  EXPECT_EQ(ds.num_classes, 8u);
}

TEST(LoadIdx, Errors) {
  fs::path dir = temp_dir("idx_err");
  write_file(dir / "lab1", be32(0x801) + be32(1) + std::string("\x01", 1));
  write_file(dir / "empty_img", be32(0x803) + be32(0) + be32(2) + be32(2));
  write_file(dir / "empty_lab", be32(0x801) + be32(0));
  EXPECT_THROW(load_idx(dir / "empty_img", dir / "empty_lab"), ConsistencyError);

  write_file(dir / "trunc", be32(0x803) + be32(1) + be32(2) + be32(2) + std::string("\x01\x02", 2));
  EXPECT_THROW(load_idx(dir / "trunc", dir / "lab1"), FormatError);
  write_file(dir / "short_header", be32(0x803) + be32(1));
  EXPECT_THROW(load_idx(dir / "short_header", dir / "lab1"), FormatError);
  write_file(dir / "badmagic", be32(0x804) + be32(1) + be32(1) + be32(1) + std::string("\x01", 1));
  EXPECT_THROW(load_idx(dir / "badmagic", dir / "lab1"), FormatError);

  write_file(dir / "two", be32(0x803) + be32(2) + be32(1) + be32(1) + std::string("\x01\x02", 2));
  EXPECT_THROW(load_idx(dir / "two", dir / "lab1"), ConsistencyError);
  EXPECT_THROW(load_idx(dir / "missing", dir / "lab1"), IoError);
}

TEST(LoadIdx, EncodeRoundTrip) {
  GlyphSpec spec;
  spec.num_classes = 3;
  spec.per_class = 4;
  Dataset ds = synth_glyphs(spec);
  fs::path dir = temp_dir("idx_rt");
  auto [img, lab] = encode_idx(ds, 16, 16);
  write_file(dir / "img", img);
  write_file(dir / "lab", lab);
  Dataset back = load_idx(dir / "img", dir / "lab");
  EXPECT_EQ(back.y, ds.y);
  EXPECT_LT(testing::max_abs_diff(back.x, ds.x), 0.5 / 255.0 + 1e-12);
}

Dataset ten_class_pool(std::size_t per_class, std::uint64_t seed) {
  return synth_dataset({10, 4, per_class, 1.0, seed});
}

TEST(Partition, DominantCountsAreExact) {
  Dataset ds = ten_class_pool(400, 1);
  PartitionSpec spec{20.0, consecutive_dominant_sets(5, 3, 2, 10), 600};
  auto shards = partition_indices(ds, spec, 10, 7);
  for (const ClientShard& s : shards) {
    EXPECT_EQ(s.uniform_indices.size(), 120u);
    EXPECT_EQ(s.dominant_indices.size(), 480u);
    const auto& dom = spec.dominant_sets[s.group];
    for (std::size_t i : s.dominant_indices) EXPECT_NE(std::find(dom.begin(), dom.end(), ds.y[i]), dom.end());
    std::set<std::size_t> uniq(s.uniform_indices.begin(), s.uniform_indices.end());
    uniq.insert(s.dominant_indices.begin(), s.dominant_indices.end());
    EXPECT_EQ(uniq.size(), 600u);  // no repeats within a client
    std::size_t in_dominant = 0;
    for (std::size_t i : s.indices()) in_dominant += std::find(dom.begin(), dom.end(), ds.y[i]) != dom.end();
    EXPECT_GE(in_dominant, 480u);
  }
}

TEST(Partition, GroupsStartAtEvenClassesAndWrap) {
  auto sets = consecutive_dominant_sets(5, 3, 2, 10);
  EXPECT_EQ(sets[0], (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(sets[1], (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(sets[4], (std::vector<std::size_t>{8, 9, 0}));
  EXPECT_EQ(group_of(0, 20, 5), 0u);
  EXPECT_EQ(group_of(3, 20, 5), 0u);
  EXPECT_EQ(group_of(4, 20, 5), 1u);
  EXPECT_EQ(group_of(19, 20, 5), 4u);
}

TEST(Partition, FullyUniformAndDeterministic) {
  Dataset ds = ten_class_pool(50, 2);
  PartitionSpec spec{100.0, {}, 100};
  auto a = partition_indices(ds, spec, 4, 9);
  auto b = partition_indices(ds, spec, 4, 9);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(a[c].indices(), b[c].indices());
    EXPECT_EQ(a[c].uniform_indices.size(), 100u);
    EXPECT_TRUE(a[c].dominant_indices.empty());
  }
  EXPECT_NE(a[0].indices(), partition_indices(ds, spec, 4, 10)[0].indices());
}

TEST(Partition, CapacityAndConfigErrors) {
  Dataset ds = ten_class_pool(30, 3);
  PartitionSpec too_many{20.0, consecutive_dominant_sets(5, 3, 2, 10), 600};
  EXPECT_THROW(partition_indices(ds, too_many, 5, 1), CapacityError);
  PartitionSpec no_groups{20.0, {}, 10};
  EXPECT_THROW(partition_indices(ds, no_groups, 5, 1), ConfigError);
  PartitionSpec bad_class{20.0, {{11}}, 10};
  EXPECT_THROW(partition_indices(ds, bad_class, 5, 1), ConfigError);
}

TEST(Partition, ManifestListsEveryDraw) {
  Dataset ds = ten_class_pool(100, 4);
  PartitionSpec spec{20.0, consecutive_dominant_sets(5, 3, 2, 10), 50};
  auto shards = partition_indices(ds, spec, 5, 3);
  auto m = partition_manifest(shards, spec, 3);
  ASSERT_EQ(m["clients"].size(), 5u);
  EXPECT_EQ(m["clients"][2]["dominant_classes"], nlohmann::json({4, 5, 6}));
  EXPECT_EQ(m["clients"][2]["uniform_indices"].get<std::vector<std::size_t>>(), shards[2].uniform_indices);
}

TEST(SplitTrainTest, FiveToOne) {
  Dataset ds = ten_class_pool(60, 5);
  auto split = split_train_test(ds, 5.0, 1);
  EXPECT_EQ(split.train.size(), 500u);
  EXPECT_EQ(split.test.size(), 100u);
}

}  // namespace
}  // namespace hyperfl
