#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ctxalign/backbone.hpp"
#include "support/finite_difference.hpp"

using namespace ctxalign;

namespace {

std::vector<double> as_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

std::vector<double> wave(int n, double phase = 0.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = std::sin(0.3 * i + phase) + 0.01 * i;
  return v;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> v(r * c);
  for (auto& x : v) x = nd(rng);
  return Tensor::matrix(r, c, std::move(v));
}

// L=1, M=8, n=4 patches, m=2 prompt tokens, N=2 parts.
ModelConfig micro_config() {
  ModelConfig c;
  c.backbone.layers = 1;
  c.backbone.width = 8;
  c.backbone.heads = 2;
  c.backbone.ff_multiple = 2;
  c.backbone.insertion_positions = {0, 1};
  c.backbone.freeze = FreezePolicy::none;
  c.backbone.max_seq_len = 16;
  c.input_len = 40;
  c.horizon = 3;
  c.patch_len = 16;
  c.patch_stride = 8;
  c.parts = 2;
  c.prompt = "ab";
  c.differentiable_edge_weights = true;
  return c;
}

void zero_matching(Model& model, const std::vector<std::string>& needles) {
  for (auto& p : model.parameters())
    for (const auto& n : needles)
      if (p.name.find(n) != std::string::npos)
        for (auto& x : p.tensor.mutable_values()) x = 0.0;
}

Tensor& param(Model& model, const std::string& name) {
  for (auto& p : model.parameters())
    if (p.name == name) return p.tensor;
  throw std::runtime_error("no parameter " + name);
}

}  // namespace

TEST(BackboneConfig, Validation) {
  BackboneConfig c;
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = BackboneConfig{};
  c.insertion_positions = {0, 5};
  EXPECT_THROW(c.validate(), ConfigError);
  c.insertion_positions = {2, 2};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Forward, EmptyStackIsIdentity) {
  auto cfg = micro_config();
  cfg.backbone.layers = 0;
  cfg.backbone.insertion_positions = {};
  Model model(cfg, 1);
  const auto x = random_matrix(model.layout().total_len(), 8, 2);
  EXPECT_EQ(as_vector(model.forward(x).fine), as_vector(x));
  EXPECT_EQ(model.dsca_block_count(), 0u);
}

TEST(Forward, ZeroAttentionAndFfnIsIdentity) {
  auto cfg = micro_config();
  cfg.backbone.layers = 3;
  cfg.backbone.insertion_positions = {};
  Model model(cfg, 1);
  zero_matching(model, {".attn.", ".ffn."});
  const auto x = random_matrix(model.layout().total_len(), 8, 3);
  EXPECT_EQ(as_vector(model.forward(x).fine), as_vector(x));
}

TEST(Forward, SingleInsertionBuildsOneBlock) {
  auto cfg = micro_config();
  cfg.backbone.insertion_positions = {0};
  Model model(cfg, 1);
  EXPECT_EQ(model.dsca_block_count(), 1u);
  model.forecast(wave(40));
  EXPECT_EQ(model.projector_invocations(), 1);
}

TEST(Forward, ProjectorRunsOncePerPass) {
  Model model(micro_config(), 1);
  ASSERT_EQ(model.dsca_block_count(), 2u);
  model.forecast(wave(40));
  EXPECT_EQ(model.projector_invocations(), 1);
}

TEST(Forward, SequenceTooLongThrows) {
  auto cfg = micro_config();
  cfg.backbone.max_seq_len = 8;  // packed length 4 + 2·3 = 10
  cfg.prompt = "abc";
  EXPECT_THROW(Model(cfg, 1), ConfigError);
  Model model(micro_config(), 1);
  EXPECT_THROW(model.forward(Tensor::zeros({17, 8})), ContractError);
}

TEST(Forward, CausalWithoutDsca) {
  auto cfg = micro_config();
  cfg.backbone.layers = 2;
  cfg.variant = Variant::no_dsca;
  Model model(cfg, 4);
  const auto len = model.layout().total_len();
  const auto x = random_matrix(len, 8, 5);
  const auto base = model.forward(x).fine;
  for (std::size_t t = 0; t < len; ++t) {
    auto v = as_vector(x);
    v[t * 8 + 3] += 0.5;
    const auto out = model.forward(Tensor::matrix(len, 8, v)).fine;
    for (std::size_t r = 0; r < len; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        if (r < t) {
          EXPECT_EQ(out.at(r, c), base.at(r, c)) << "t=" << t << " r=" << r;
        }
      }
    bool changed = false;
    for (std::size_t c = 0; c < 8; ++c) changed |= out.at(t, c) != base.at(t, c);
    EXPECT_TRUE(changed);
  }
}

TEST(Forward, LaterPartDoesNotReachEarlierBlock) {
  // With DSCA the coarse node of a part is shared by its patches, so
  // causality holds between parts.
  Model model(micro_config(), 6);
  const auto& layout = model.layout();
  const auto len = layout.total_len();
  const auto x = random_matrix(len, 8, 7);
  const auto base = model.forward(x).fine;
  const auto second = static_cast<std::size_t>(layout.block_start(1));
  for (std::size_t t = second; t < len; ++t) {
    auto v = as_vector(x);
    v[t * 8] += 0.5;
    const auto out = model.forward(Tensor::matrix(len, 8, v)).fine;
    for (std::size_t r = 0; r < second; ++r)
      for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.at(r, c), base.at(r, c));
  }
}

TEST(Forward, Deterministic) {
  Model a(micro_config(), 9), b(micro_config(), 9);
  const auto series = wave(43);
  const std::vector<double> target(series.begin() + 40, series.end());
  const auto la = compute_loss(a.forecast(std::span(series).first(40)), target, LossKind::mse).item();
  const auto lb = compute_loss(b.forecast(std::span(series).first(40)), target, LossKind::mse).item();
  EXPECT_EQ(la, lb);
  Model c(micro_config(), 10);
  EXPECT_NE(la, compute_loss(c.forecast(std::span(series).first(40)), target, LossKind::mse).item());
}

TEST(Forward, FreezeMarksAttentionAndFfnOnly) {
  auto cfg = micro_config();
  cfg.backbone.freeze = FreezePolicy::freeze_attention_and_ffn;
  cfg.differentiable_edge_weights = false;
  Model model(cfg, 1);
  const auto series = wave(43);
  backward(compute_loss(model.forecast(std::span(series).first(40)),
                        std::span(series).subspan(40), LossKind::mse));
  for (const auto& p : model.parameters()) {
    const bool core = p.name.find(".attn.") != std::string::npos ||
                      p.name.find(".ffn.") != std::string::npos;
    EXPECT_EQ(p.tensor.requires_grad(), !core) << p.name;
    if (core) {
      EXPECT_TRUE(p.tensor.grad().empty()) << p.name;
    }
  }
  double ln_grad = 0.0;
  for (double g : param(model, "block0.ln1.gain").grad()) ln_grad += std::abs(g);
  EXPECT_GT(ln_grad, 0.0);
}

TEST(Forward, NoCoarseVariantHasZeroInteraction) {
  auto cfg = micro_config();
  cfg.variant = Variant::no_coarse;
  Model model(cfg, 1);
  for (std::size_t k = 0; k < 2; ++k)
    for (double v : model.interaction_weight(k).values()) EXPECT_EQ(v, 0.0);
  model.forecast(wave(40));
  EXPECT_EQ(model.projector_invocations(), 0);
}

TEST(Forward, InitOrderIndependentOfMethod) {
  // Shared parameters draw the same values whatever graph is attached.
  auto fsca = micro_config();
  auto vca = micro_config();
  vca.method = Method::vca;
  Model a(fsca, 3), b(vca, 3);
  EXPECT_EQ(as_vector(param(a, "block0.attn.qkv.weight")), as_vector(param(b, "block0.attn.qkv.weight")));
  EXPECT_EQ(as_vector(param(a, "patch.weight")), as_vector(param(b, "patch.weight")));
}

TEST(Head, ZeroWeightGivesBias) {
  auto cfg = micro_config();
  cfg.normalize = false;
  Model model(cfg, 1);
  zero_matching(model, {"head.weight"});
  const auto pred = model.forecast(wave(40));
  EXPECT_EQ(as_vector(pred), as_vector(param(model, "head.bias")));
}

TEST(Head, ZeroWeightDenormalizesBias) {
  Model model(micro_config(), 1);
  zero_matching(model, {"head.weight"});
  const auto series = wave(40, 1.0);
  const auto stats = *instance_normalize({series, 0, std::nullopt}).norm_stats;
  const auto pred = model.forecast(series);
  const auto bias = param(model, "head.bias");
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(pred[i], bias[i] * stats.std + stats.mean, 1e-12);
}

TEST(Head, OutputLengthMatchesHorizon) {
  for (int h : {4, 24, 96}) {
    auto cfg = micro_config();
    cfg.horizon = h;
    Model model(cfg, 1);
    EXPECT_EQ(model.forecast(wave(40)).shape(), (Shape{1, static_cast<std::size_t>(h)}));
  }
}

TEST(Head, LayoutDriftThrows) {
  Model model(micro_config(), 1);
  EXPECT_THROW(model.forecast_head(Tensor::zeros({model.layout().total_len() + 1, 8})), ContractError);
  EXPECT_THROW(model.forecast(wave(48)), ContractError);
  EXPECT_THROW(model.classify_head(Tensor::zeros({model.layout().total_len(), 8})), ContractError);
}

TEST(Classify, ZeroWeightsTieAllClasses) {
  auto cfg = micro_config();
  cfg.task = TaskKind::classify;
  cfg.classes = 3;
  cfg.method = Method::vca;
  cfg.backbone.max_seq_len = 64;
  Model model(cfg, 1);
  zero_matching(model, {"head."});
  const auto logits = model.classify(wave(40));
  ASSERT_EQ(logits.shape(), (Shape{1, 3}));
  EXPECT_EQ(logits[0], logits[1]);
  EXPECT_EQ(logits[1], logits[2]);
}

TEST(Classify, FscaNeedsExamples) {
  auto cfg = micro_config();
  cfg.task = TaskKind::classify;
  cfg.backbone.max_seq_len = 128;
  Model model(cfg, 1);
  EXPECT_THROW(model.classify(wave(40)), ContractError);
  EXPECT_THROW(model.set_class_examples({wave(40)}), ContractError);
  model.set_class_examples({wave(40, 0.5), wave(40, 1.5)});
  EXPECT_EQ(model.classify(wave(40)).shape(), (Shape{1, 2}));
  EXPECT_EQ(model.layout().examples, 2);
}

TEST(Loss, Examples) {
  const std::vector<double> a{1, 2}, b{2, 4};
  EXPECT_EQ(compute_loss(Tensor::matrix(1, 2, {1, 2}), a, LossKind::mse).item(), 0.0);
  EXPECT_DOUBLE_EQ(compute_loss(Tensor::matrix(1, 2, {1, 2}), b, LossKind::mse).item(), 2.5);
  const std::vector<double> one{1};
  EXPECT_NEAR(compute_loss(Tensor::matrix(1, 1, {3}), one, LossKind::smape).item(), 100.0, 1e-9);
  EXPECT_NEAR(compute_loss(Tensor::matrix(1, 2, {0, 0}), 1).item(), std::log(2.0), 1e-15);
  EXPECT_THROW(compute_loss(Tensor::matrix(1, 2, {0, 0}), a, LossKind::ce), ContractError);
}

TEST(Loss, ArgmaxShiftInvariant) {
  const auto logits = Tensor::matrix(1, 4, {0.3, 2.0, -1.0, 1.9});
  const auto shifted = affine(logits, 1.0, 7.5);
  auto argmax = [](const Tensor& t) {
    return std::max_element(t.values().begin(), t.values().end()) - t.values().begin();
  };
  EXPECT_EQ(argmax(logits), 1);
  EXPECT_EQ(argmax(shifted), 1);
  EXPECT_NEAR(compute_loss(logits, 2).item(), compute_loss(shifted, 2).item(), 1e-12);
}

TEST(Gradient, MicroModelMatchesFiniteDifferences) {
  Model model(micro_config(), 11);
  ASSERT_EQ(model.patch_count(), 4);
  ASSERT_EQ(model.layout().prompt_len, 2);
  ASSERT_EQ(model.layout().part_lengths.size(), 2u);
  const auto series = wave(43, 0.2);
  const std::vector<double> target(series.begin() + 40, series.end());
  std::vector<Tensor> leaves;
  for (auto& p : model.parameters()) {
    // the token table only matters on the prompt rows; skip its 256 rows
    if (p.name == "token_table" || p.name == "position_table") continue;
    leaves.push_back(p.tensor);
  }
  auto loss = [&] {
    return compute_loss(model.forecast(std::span(series).first(40)), target, LossKind::mse);
  };
  auto r = fd::check(leaves, loss, 1e-3, 1e-5);
  EXPECT_TRUE(r.ok) << r.detail << " worst " << r.worst_rel;
}

TEST(Gradient, EmbeddingTablesMatchFiniteDifferences) {
  Model model(micro_config(), 12);
  const auto series = wave(43, 0.7);
  const std::vector<double> target(series.begin() + 40, series.end());
  auto& tokens = param(model, "token_table");
  auto& positions = param(model, "position_table");
  auto loss = [&] {
    return compute_loss(model.forecast(std::span(series).first(40)), target, LossKind::smape);
  };
  tokens.zero_grad();
  positions.zero_grad();
  backward(loss());
  const std::vector<double> tg(tokens.grad().begin(), tokens.grad().end());
  const std::vector<double> pg(positions.grad().begin(), positions.grad().end());
  const double h = 1e-5;
  auto probe = [&](Tensor& t, std::size_t i, double analytic) {
    auto v = t.mutable_values();
    const double saved = v[i];
    v[i] = saved + h;
    const double up = loss().item();
    v[i] = saved - h;
    const double down = loss().item();
    v[i] = saved;
    const double num = (up - down) / (2 * h);
    EXPECT_LE(std::abs(num - analytic), std::max(1e-3 * std::max(std::abs(num), std::abs(analytic)), 1e-8))
        << t.name() << "[" << i << "]";
  };
  for (int id : model.prompt_ids())
    for (std::size_t c = 0; c < 8; ++c) probe(tokens, static_cast<std::size_t>(id) * 8 + c, tg[static_cast<std::size_t>(id) * 8 + c]);
  for (std::size_t i = 0; i < pg.size(); ++i) probe(positions, i, pg[i]);
  // unused vocabulary rows get exactly zero
  EXPECT_EQ(tg[0], 0.0);
}

TEST(Checkpoint, RoundTripRestoresPredictions) {
  Model a(micro_config(), 13), b(micro_config(), 14);
  const auto series = wave(40);
  const auto before = as_vector(a.forecast(series));
  EXPECT_NE(before, as_vector(b.forecast(series)));
  Checkpoint ckpt{a.config().digest(), a.state_tensors()};
  const auto path = std::filesystem::temp_directory_path() / "ctxalign_backbone_ckpt.bin";
  write_checkpoint(path, ckpt);
  const auto loaded = read_checkpoint(path);
  std::filesystem::remove(path);
  EXPECT_EQ(loaded.config_digest, b.config().digest());
  b.load_state(loaded.tensors);
  EXPECT_EQ(as_vector(b.forecast(series)), before);
}

TEST(Checkpoint, CorruptionIsParseError) {
  Model a(micro_config(), 13);
  auto bytes = encode_checkpoint({a.config().digest(), a.state_tensors()});
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), ParseError);
  EXPECT_THROW(decode_checkpoint("NOTMAGIC" + bytes.substr(8)), ParseError);
  auto tensors = a.state_tensors();
  tensors.pop_back();
  Model b(micro_config(), 13);
  EXPECT_THROW(b.load_state(tensors), ParseError);
}

TEST(Checkpoint, DigestTracksConfig) {
  auto a = micro_config(), b = micro_config();
  EXPECT_EQ(a.digest(), b.digest());
  b.parts = 1;
  EXPECT_NE(a.digest(), b.digest());
}
