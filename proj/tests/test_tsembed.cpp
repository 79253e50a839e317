#include <gtest/gtest.h>

#include <random>

#include "ctxalign/tsembed.hpp"

using namespace ctxalign;

TEST(Patchify, Counts) {
  EXPECT_EQ(patch_count(512, 16, 8), 63);
  EXPECT_EQ(patch_count(16, 16, 8), 1);
  EXPECT_EQ(patch_count(96, 16, 8), 11);
  EXPECT_THROW(patch_count(17, 16, 8), ContractError);
  EXPECT_THROW(patch_count(8, 16, 8), ContractError);
}

TEST(Patchify, PatchesCoverSlidingWindows) {
  std::vector<double> v(40);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const auto patches = patchify(v, 16, 8);
  ASSERT_EQ(patches.size(), 4u);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    ASSERT_EQ(patches[i].size(), 16u);
    for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(patches[i][k], static_cast<double>(i * 8 + k));
  }
  const auto m = patch_matrix(v, 16, 8);
  EXPECT_EQ(m.shape(), (Shape{4, 16}));
  EXPECT_EQ(m.at(2, 3), 19.0);
}

TEST(Normalize, ConstantWindow) {
  auto w = instance_normalize({{5, 5, 5, 5}, 0, std::nullopt});
  ASSERT_TRUE(w.norm_stats);
  for (double v : w.values) EXPECT_EQ(v, 0.0);
  const auto back = denormalize(w.values, *w.norm_stats);
  for (double v : back) EXPECT_DOUBLE_EQ(v, 5.0);
}

TEST(Normalize, PopulationStd) {
  auto w = instance_normalize({{0, 2}, 0, std::nullopt});
  EXPECT_DOUBLE_EQ(w.norm_stats->mean, 1.0);
  EXPECT_NEAR(w.values[0], -1.0, 1e-4);
  EXPECT_NEAR(w.values[1], 1.0, 1e-4);
  EXPECT_DOUBLE_EQ(w.norm_stats->std, 1.0 + 1e-5);
}

TEST(Normalize, RoundTrip) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(3.0, 7.0);
  std::vector<double> v(50);
  for (auto& x : v) x = nd(rng);
  auto w = instance_normalize({v, 2, std::nullopt});
  const auto back = denormalize(w.values, *w.norm_stats);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(back[i], v[i], 1e-9);
  const auto t = denormalize(Tensor::vector(w.values), *w.norm_stats);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(t[i], v[i], 1e-9);
}

TEST(SplitParts, Examples) {
  EXPECT_EQ(split_parts(8, 2), (std::vector<int>{4, 4}));
  EXPECT_EQ(split_parts(63, 2), (std::vector<int>{31, 32}));
  EXPECT_EQ(split_parts(5, 1), (std::vector<int>{5}));
  EXPECT_EQ(split_parts(10, 4), (std::vector<int>{2, 2, 3, 3}));
  EXPECT_THROW(split_parts(2, 3), ContractError);
  EXPECT_THROW(split_parts(2, 0), ContractError);
}

TEST(SplitParts, SumAndBalance) {
  for (int n = 1; n <= 40; ++n) {
    for (int parts = 1; parts <= n; ++parts) {
      const auto l = split_parts(n, parts);
      int s = 0;
      for (int x : l) s += x;
      EXPECT_EQ(s, n);
      EXPECT_LE(*std::max_element(l.begin(), l.end()) - *std::min_element(l.begin(), l.end()), 1);
      EXPECT_TRUE(std::is_sorted(l.begin(), l.end()));
    }
  }
}

TEST(Tokenize, Bytes) {
  EXPECT_EQ(tokenize_prompt("ab"), (std::vector<int>{97, 98}));
  EXPECT_EQ(tokenize_prompt("same"), tokenize_prompt("same"));
  EXPECT_THROW(tokenize_prompt(""), ContractError);
  EXPECT_EQ(kDefaultForecastPrompt, "Predict future sequences using previous data:");
  EXPECT_EQ(classification_prompt(2), "Predict category (2 in total) using previous data:");
}

TEST(Layout, VcaRoles) {
  const auto l = make_vca_layout(2, 2);
  EXPECT_EQ(l.total_len(), 4u);
  ASSERT_EQ(l.roles.size(), 4u);
  EXPECT_EQ(l.roles[0].kind, RoleKind::ts_patch);
  EXPECT_EQ(l.roles[1].kind, RoleKind::ts_patch);
  EXPECT_EQ(l.roles[2].kind, RoleKind::prompt);
  EXPECT_EQ(l.roles[3].kind, RoleKind::prompt);
}

TEST(Layout, FscaForecastLength) {
  const auto l = make_fsca_forecast_layout({4, 4}, 3);
  EXPECT_EQ(l.total_len(), 14u);
  EXPECT_EQ(l.block_start(1), 7);
  EXPECT_EQ(l.prompt_start(1), 11);
  EXPECT_EQ(l.prompt_copies(), 2);
  EXPECT_EQ(l.patch_count(), 8);
}

TEST(Layout, FscaClassLength) {
  const auto l = make_fsca_class_layout(4, 3, 2);
  EXPECT_EQ(l.total_len(), 23u);
  EXPECT_EQ(l.label_position(0), 7);
  EXPECT_EQ(l.label_position(1), 15);
  EXPECT_EQ(l.block_start(2), 16);
  EXPECT_THROW(make_fsca_class_layout(4, 3, 0), ContractError);
}

TEST(Layout, FscaWithOnePartMatchesVca) {
  for (int n = 1; n <= 6; ++n)
    for (int m = 1; m <= 4; ++m)
      EXPECT_TRUE(make_fsca_forecast_layout({n}, m).same_structure(make_vca_layout(n, m)));
}

TEST(Layout, DeterministicAndPartSumsMatch) {
  const auto a = make_fsca_forecast_layout(split_parts(11, 3), 5);
  const auto b = make_fsca_forecast_layout(split_parts(11, 3), 5);
  EXPECT_EQ(a.roles, b.roles);
  EXPECT_EQ(a.patch_count(), 11);
}

TEST(BuildSequence, PacksInLayoutOrder) {
  const auto layout = make_fsca_class_layout(2, 1, 1);
  // rows: ex(2), prompt(1), label(1), query(2), prompt(1)
  auto ex = Tensor::matrix(2, 1, {1, 2});
  auto query = Tensor::matrix(2, 1, {3, 4});
  auto prompt = Tensor::matrix(1, 1, {9});
  auto label = Tensor::matrix(1, 1, {7});
  const auto seq = build_sequence(layout, {ex, query}, prompt, {label});
  const std::vector<double> expect{1, 2, 9, 7, 3, 4, 9};
  EXPECT_EQ(std::vector<double>(seq.values().begin(), seq.values().end()), expect);
}

TEST(BuildSequence, InconsistentPartsThrow) {
  const auto layout = make_fsca_forecast_layout({2, 2}, 1);
  auto prompt = Tensor::matrix(1, 1, {0});
  EXPECT_THROW(build_sequence(layout, {Tensor::zeros({2, 1}), Tensor::zeros({3, 1})}, prompt),
               ContractError);
  EXPECT_THROW(build_sequence(layout, {Tensor::zeros({2, 1})}, prompt), ContractError);
}

TEST(PatchEmbedder, OutputShape) {
  std::mt19937_64 rng(3);
  auto pe = PatchEmbedder::init(16, 8, rng);
  std::vector<double> v(96, 0.5);
  const auto out = pe.embed(patch_matrix(v, 16, 8));
  EXPECT_EQ(out.shape(), (Shape{11, 8}));
}
