#pragma once

// Small GPT-style causal transformer with dual-scale insertion hooks.
//
// Fine and coarse sequences run through the same pre-norm blocks as two
// separate sequences. Insertion position k applies a DSCA block before
// transformer block k (position L = after the last block).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ctxalign/checkpoint.hpp"
#include "ctxalign/dscagnn.hpp"
#include "ctxalign/error.hpp"
#include "ctxalign/graphspec.hpp"
#include "ctxalign/io.hpp"
#include "ctxalign/numerics.hpp"
#include "ctxalign/tsembed.hpp"

namespace ctxalign {

enum class FreezePolicy { none, freeze_attention_and_ffn };

struct BackboneConfig {
  int layers = 4;
  int width = 64;
  int heads = 4;
  int ff_multiple = 4;
  std::vector<int> insertion_positions{0, 4};
  FreezePolicy freeze = FreezePolicy::freeze_attention_and_ffn;
  int max_seq_len = 1024;

  void validate() const {
    if (layers < 0) throw ConfigError("backbone: layers must be >= 0");
    if (width < 1 || heads < 1 || width % heads != 0) {
      throw ConfigError("backbone: width must be a positive multiple of heads");
    }
    if (ff_multiple < 1) throw ConfigError("backbone: ff_multiple must be >= 1");
    if (max_seq_len < 1) throw ConfigError("backbone: max_seq_len must be >= 1");
    for (std::size_t i = 0; i < insertion_positions.size(); ++i) {
      const int p = insertion_positions[i];
      if (p < 0 || p > layers) {
        throw ConfigError("backbone: insertion position " + std::to_string(p) +
                          " outside [0, " + std::to_string(layers) + "]");
      }
      if (i > 0 && p <= insertion_positions[i - 1]) {
        throw ConfigError("backbone: insertion positions must be sorted and unique");
      }
    }
  }
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline Tensor normal_matrix(std::size_t rows, std::size_t cols, double stddev,
                            std::mt19937_64& rng, bool trainable) {
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = nd(rng);
  return Tensor::matrix(rows, cols, std::move(v), trainable);
}

}  // namespace detail

// Pre-norm residual block: x + attn(ln1(x)), then h + mlp(ln2(h)).
struct TransformerBlock {
  Tensor ln1_gain, ln1_bias;
  Tensor qkv_weight, qkv_bias;    // [M × 3M], [3M]
  Tensor proj_weight, proj_bias;  // [M × M], [M]
  Tensor ln2_gain, ln2_bias;
  Tensor fc_weight, fc_bias;      // [M × F], [F]
  Tensor out_weight, out_bias;    // [F × M], [M]
  int heads = 1;

  static TransformerBlock init(const BackboneConfig& cfg, std::mt19937_64& rng) {
    const bool train_core = cfg.freeze == FreezePolicy::none;
    const auto m = static_cast<std::size_t>(cfg.width);
    const auto f = m * static_cast<std::size_t>(cfg.ff_multiple);
    const double stddev = 0.02;
    TransformerBlock b;
    b.heads = cfg.heads;
    b.ln1_gain = Tensor(Shape{m}, std::vector<double>(m, 1.0), true);
    b.ln1_bias = Tensor(Shape{m}, std::vector<double>(m, 0.0), true);
    b.qkv_weight = detail::normal_matrix(m, 3 * m, stddev, rng, train_core);
    b.qkv_bias = Tensor(Shape{3 * m}, std::vector<double>(3 * m, 0.0), train_core);
    b.proj_weight = detail::normal_matrix(m, m, stddev, rng, train_core);
    b.proj_bias = Tensor(Shape{m}, std::vector<double>(m, 0.0), train_core);
    b.ln2_gain = Tensor(Shape{m}, std::vector<double>(m, 1.0), true);
    b.ln2_bias = Tensor(Shape{m}, std::vector<double>(m, 0.0), true);
    b.fc_weight = detail::normal_matrix(m, f, stddev, rng, train_core);
    b.fc_bias = Tensor(Shape{f}, std::vector<double>(f, 0.0), train_core);
    b.out_weight = detail::normal_matrix(f, m, stddev, rng, train_core);
    b.out_bias = Tensor(Shape{m}, std::vector<double>(m, 0.0), train_core);
    return b;
  }

  Tensor attention(const Tensor& x) const {
    const auto m = x.cols();
    const auto d = m / static_cast<std::size_t>(heads);
    const auto qkv = add_rowwise(matmul(x, qkv_weight), qkv_bias);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor> outs;
    for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
      auto q = slice_cols(qkv, h * d, d);
      auto k = slice_cols(qkv, m + h * d, d);
      auto v = slice_cols(qkv, 2 * m + h * d, d);
      auto att = softmax_rows(affine(matmul(q, transpose(k)), scale), Masking::causal);
      outs.push_back(matmul(att, v));
    }
    const auto merged = heads == 1 ? outs.front() : concat_cols(outs);
    return add_rowwise(matmul(merged, proj_weight), proj_bias);
  }

  Tensor forward(const Tensor& x) const {
    auto h = add(x, attention(layer_norm(x, ln1_gain, ln1_bias)));
    auto ff = add_rowwise(matmul(layer_norm(h, ln2_gain, ln2_bias), fc_weight), fc_bias);
    ff = add_rowwise(matmul(gelu(ff), out_weight), out_bias);
    return add(h, ff);
  }

  void collect(const std::string& prefix, std::vector<NamedParameter>& out) const {
    out.push_back({prefix + ".ln1.gain", ln1_gain});
    out.push_back({prefix + ".ln1.bias", ln1_bias});
    out.push_back({prefix + ".attn.qkv.weight", qkv_weight});
    out.push_back({prefix + ".attn.qkv.bias", qkv_bias});
    out.push_back({prefix + ".attn.proj.weight", proj_weight});
    out.push_back({prefix + ".attn.proj.bias", proj_bias});
    out.push_back({prefix + ".ln2.gain", ln2_gain});
    out.push_back({prefix + ".ln2.bias", ln2_bias});
    out.push_back({prefix + ".ffn.fc.weight", fc_weight});
    out.push_back({prefix + ".ffn.fc.bias", fc_bias});
    out.push_back({prefix + ".ffn.out.weight", out_weight});
    out.push_back({prefix + ".ffn.out.bias", out_bias});
  }
};

// ---------------------------------------------------------------------------

enum class TaskKind { forecast, classify };
enum class Method { vca, fsca };

// Table-7 style structural variants.
enum class Variant {
  full,
  no_dsca,           // skip every DSCA block, keep the packed layout
  random_adjacency,  // frozen uniform fine weights re-normalized per group
  no_coarse,         // W_cf = 0 and no coarse GCN
};

struct ModelConfig {
  BackboneConfig backbone;
  TaskKind task = TaskKind::forecast;
  Method method = Method::fsca;
  int input_len = 96;
  int horizon = 24;
  int classes = 2;
  int patch_len = 16;
  int patch_stride = 8;
  int parts = 2;  // N; FSCA with N = 1 has the VCA structure
  bool pruned = true;
  std::string prompt;  // empty: the task's default prompt
  bool normalize = true;
  Variant variant = Variant::full;
  bool differentiable_edge_weights = false;

  std::string effective_prompt() const {
    if (!prompt.empty()) return prompt;
    return task == TaskKind::forecast ? std::string(kDefaultForecastPrompt)
                                      : classification_prompt(classes);
  }

  // Stable text form; its hash is the checkpoint digest.
  std::string canonical() const {
    std::ostringstream out;
    out << "layers=" << backbone.layers << ";width=" << backbone.width
        << ";heads=" << backbone.heads << ";ff=" << backbone.ff_multiple << ";insert=";
    for (int p : backbone.insertion_positions) out << p << ',';
    out << ";freeze=" << static_cast<int>(backbone.freeze) << ";max_seq=" << backbone.max_seq_len
        << ";task=" << static_cast<int>(task) << ";method=" << static_cast<int>(method)
        << ";input=" << input_len << ";horizon=" << horizon << ";classes=" << classes
        << ";patch=" << patch_len << '/' << patch_stride << ";parts=" << parts
        << ";pruned=" << pruned << ";prompt=" << effective_prompt()
        << ";normalize=" << normalize << ";variant=" << static_cast<int>(variant)
        << ";diffw=" << differentiable_edge_weights;
    return out.str();
  }
  std::uint64_t digest() const { return fnv1a64(canonical()); }
};

// Losses over one prediction.
enum class LossKind { mse, smape, ce };

inline Tensor compute_loss(const Tensor& pred, std::span<const double> target, LossKind kind) {
  switch (kind) {
    case LossKind::mse:
      return mse_loss(pred, target);
    case LossKind::smape:
      return smape_loss(pred, target);
    case LossKind::ce:
      throw ContractError("compute_loss: cross entropy takes a class label");
  }
  throw ContractError("compute_loss: unknown kind");
}

inline Tensor compute_loss(const Tensor& logits, int label) {
  return cross_entropy(logits, std::span<const int>(&label, 1));
}

// ---------------------------------------------------------------------------

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), rng_(seed) {
    auto& bb = config_.backbone;
    bb.validate();
    prompt_ids_ = tokenize_prompt(config_.effective_prompt());
    n_patches_ = ctxalign::patch_count(config_.input_len, config_.patch_len, config_.patch_stride);
    const int m = static_cast<int>(prompt_ids_.size());

    SequenceLayout layout;
    if (config_.task == TaskKind::forecast) {
      if (config_.horizon < 1) throw ConfigError("model: horizon must be >= 1");
      layout = config_.method == Method::vca
                   ? make_vca_layout(n_patches_, m)
                   : make_fsca_forecast_layout(split_parts(n_patches_, config_.parts), m);
    } else {
      if (config_.classes < 2) throw ConfigError("model: classification needs >= 2 classes");
      layout = config_.method == Method::vca
                   ? make_vca_layout(n_patches_, m)
                   : make_fsca_class_layout(n_patches_, m, config_.classes);
    }
    if (static_cast<int>(layout.total_len()) > bb.max_seq_len) {
      throw ConfigError("model: packed sequence of " + std::to_string(layout.total_len()) +
                        " tokens exceeds max_seq_len " + std::to_string(bb.max_seq_len));
    }
    auto spec = build_graph_spec(layout, config_.pruned);
    graph_ = std::make_unique<GraphContext>(std::move(layout), std::move(spec));

    const auto width = static_cast<std::size_t>(bb.width);
    token_table_ = detail::normal_matrix(kVocabularySize, width, 0.02, rng_, true);
    position_table_ = detail::normal_matrix(static_cast<std::size_t>(bb.max_seq_len), width, 0.01, rng_, true);
    patch_ = PatchEmbedder::init(config_.patch_len, bb.width, rng_);
    for (int i = 0; i < bb.layers; ++i) blocks_.push_back(TransformerBlock::init(bb, rng_));
    projector_ = CoarseProjector::init(graph_->layout.max_part_len(), m, bb.width, rng_);
    for (std::size_t k = 0; k < bb.insertion_positions.size(); ++k) {
      dsca_.push_back(DscaParams::init(bb.width, rng_));
    }
    const auto flat = graph_->layout.total_len() * width;
    const auto outputs = static_cast<std::size_t>(
        config_.task == TaskKind::forecast ? config_.horizon : config_.classes);
    const double bound = 1.0 / std::sqrt(static_cast<double>(flat));
    head_weight_ = detail::uniform_matrix(flat, outputs, bound, rng_);
    head_bias_ = detail::uniform_vector(outputs, bound, rng_);
    if (config_.task == TaskKind::classify) {
      label_table_ = detail::normal_matrix(static_cast<std::size_t>(config_.classes), width, 0.02, rng_, true);
    }
    if (config_.variant == Variant::random_adjacency) {
      graph_->frozen_fine_weights = random_edge_weights(graph_->spec, rng_);
    }
    if (config_.variant == Variant::no_coarse) {
      for (auto& p : dsca_) {
        p.interaction_weight = Tensor::zeros(p.interaction_weight.shape());
        p.coarse_weight.set_requires_grad(false);
      }
    }
    collect_parameters();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  const SequenceLayout& layout() const { return graph_->layout; }
  const GraphSpec& spec() const { return graph_->spec; }
  const GraphContext& graph() const { return *graph_; }
  int patch_count() const { return n_patches_; }
  const std::vector<int>& prompt_ids() const { return prompt_ids_; }
  int projector_invocations() const { return projector_.invocations; }
  std::size_t dsca_block_count() const {
    return config_.variant == Variant::no_dsca ? 0 : dsca_.size();
  }
  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }

  // Fixed labelled series (one per class, in class order) for FSCA
  // classification.
  void set_class_examples(std::vector<std::vector<double>> examples) {
    if (graph_->layout.mode != LayoutMode::fsca_class) {
      throw ContractError("set_class_examples: model is not in FSCA classification mode");
    }
    if (static_cast<int>(examples.size()) != config_.classes) {
      throw ContractError("set_class_examples: need exactly one example per class");
    }
    for (const auto& e : examples) {
      if (static_cast<int>(e.size()) != config_.input_len) {
        throw ContractError("set_class_examples: example length differs from input_len");
      }
    }
    class_examples_ = std::move(examples);
  }
  const std::vector<std::vector<double>>& class_examples() const { return class_examples_; }

  // Normalized window (or raw when normalization is off) -> [n × M].
  Tensor embed_series(std::span<const double> values) const {
    return patch_.embed(patch_matrix(values, config_.patch_len, config_.patch_stride));
  }

  Tensor embed_prompt() const { return gather_rows(token_table_, prompt_ids_); }

  // Packed fine input including positional embeddings.
  Tensor pack_input(const Tensor& query_patches) const {
    const auto& layout = graph_->layout;
    std::vector<Tensor> blocks;
    std::vector<Tensor> labels;
    if (layout.mode == LayoutMode::fsca_class) {
      if (class_examples_.empty()) {
        throw ContractError("model: FSCA classification examples not set");
      }
      for (int k = 0; k < layout.examples; ++k) {
        blocks.push_back(embed_series(prepare(class_examples_[static_cast<std::size_t>(k)]).values));
        const int id = k;
        labels.push_back(gather_rows(label_table_, std::span<const int>(&id, 1)));
      }
      blocks.push_back(query_patches);
    } else {
      blocks = split_rows(query_patches, layout.part_lengths);
    }
    return add_positions(build_sequence(layout, blocks, embed_prompt(), labels), position_table_);
  }

  // DSCA insertions interleaved with the transformer blocks.
  DualScaleState forward(const Tensor& fine_input) {
    const auto& bb = config_.backbone;
    if (static_cast<int>(fine_input.rows()) > bb.max_seq_len) {
      throw ContractError("forward: sequence of " + std::to_string(fine_input.rows()) +
                          " tokens exceeds max_seq_len " + std::to_string(bb.max_seq_len));
    }
    DualScaleState state{fine_input, {}};
    DscaOptions options;
    options.coarse_branch = config_.variant != Variant::no_coarse;
    options.differentiable_weights = config_.differentiable_edge_weights;
    options.coarse_positions = position_table_;
    const bool use_dsca = config_.variant != Variant::no_dsca;
    std::size_t next = 0;
    for (int depth = 0; depth <= bb.layers; ++depth) {
      if (use_dsca && next < bb.insertion_positions.size() &&
          bb.insertion_positions[next] == depth) {
        state = dsca_block(std::move(state), *graph_, dsca_[next], &projector_, options);
        ++next;
      }
      if (depth < bb.layers) {
        const auto& block = blocks_[static_cast<std::size_t>(depth)];
        state.fine = block.forward(state.fine);
        if (state.coarse.defined()) state.coarse = block.forward(state.coarse);
      }
    }
    return state;
  }

  // Flatten all fine positions -> affine map.
  Tensor head(const Tensor& fine_out) const {
    if (fine_out.rows() != graph_->layout.total_len()) {
      throw ContractError("head: fine sequence length " + std::to_string(fine_out.rows()) +
                          " differs from configured layout " +
                          std::to_string(graph_->layout.total_len()));
    }
    return add_rowwise(matmul(reshape(fine_out, {1, fine_out.size()}), head_weight_), head_bias_);
  }

  Tensor forecast_head(const Tensor& fine_out) const {
    if (config_.task != TaskKind::forecast) throw ContractError("forecast_head: classification model");
    return head(fine_out);
  }
  Tensor classify_head(const Tensor& fine_out) const {
    if (config_.task != TaskKind::classify) throw ContractError("classify_head: forecasting model");
    return head(fine_out);
  }

  // [1 × T'] prediction in the window's original scale.
  Tensor forecast(std::span<const double> window) {
    if (config_.task != TaskKind::forecast) throw ContractError("forecast: classification model");
    if (static_cast<int>(window.size()) != config_.input_len) {
      throw ContractError("forecast: window length " + std::to_string(window.size()) +
                          " differs from input_len " + std::to_string(config_.input_len));
    }
    const auto prepared = prepare(window);
    const auto state = forward(pack_input(embed_series(prepared.values)));
    auto pred = forecast_head(state.fine);
    if (prepared.norm_stats) pred = denormalize(pred, *prepared.norm_stats);
    return pred;
  }

  // [1 × C] logits.
  Tensor classify(std::span<const double> series) {
    if (config_.task != TaskKind::classify) throw ContractError("classify: forecasting model");
    if (static_cast<int>(series.size()) != config_.input_len) {
      throw ContractError("classify: series length differs from input_len");
    }
    const auto state = forward(pack_input(embed_series(prepare(series).values)));
    return classify_head(state.fine);
  }

  // Named values of every parameter (frozen ones included).
  std::vector<CheckpointTensor> state_tensors() const {
    std::vector<CheckpointTensor> out;
    for (const auto& p : params_) {
      out.push_back({p.name, p.tensor.shape(),
                     std::vector<double>(p.tensor.values().begin(), p.tensor.values().end())});
    }
    return out;
  }

  void load_state(const std::vector<CheckpointTensor>& tensors) {
    for (auto& p : params_) {
      const CheckpointTensor* found = nullptr;
      for (const auto& t : tensors)
        if (t.name == p.name) found = &t;
      if (!found) throw ParseError("checkpoint: missing tensor " + p.name);
      if (found->shape != p.tensor.shape()) {
        throw ParseError("checkpoint: shape mismatch for " + p.name);
      }
      std::copy(found->values.begin(), found->values.end(), p.tensor.mutable_values().begin());
    }
  }

  const Tensor& interaction_weight(std::size_t k) const { return dsca_.at(k).interaction_weight; }

 private:
  SeriesWindow prepare(std::span<const double> values) const {
    SeriesWindow w{std::vector<double>(values.begin(), values.end()), 0, std::nullopt};
    return config_.normalize ? instance_normalize(std::move(w)) : w;
  }

  void collect_parameters() {
    params_.clear();
    params_.push_back({"token_table", token_table_});
    params_.push_back({"position_table", position_table_});
    params_.push_back({"patch.weight", patch_.weight});
    params_.push_back({"patch.bias", patch_.bias});
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect("block" + std::to_string(i), params_);
    }
    params_.push_back({"coarse.fe.weight", projector_.fe_weight});
    params_.push_back({"coarse.fe.bias", projector_.fe_bias});
    params_.push_back({"coarse.fz.weight", projector_.fz_weight});
    params_.push_back({"coarse.fz.bias", projector_.fz_bias});
    for (std::size_t k = 0; k < dsca_.size(); ++k) {
      const auto prefix = "dsca" + std::to_string(k);
      params_.push_back({prefix + ".fine_weight", dsca_[k].fine_weight});
      params_.push_back({prefix + ".coarse_weight", dsca_[k].coarse_weight});
      params_.push_back({prefix + ".interaction_weight", dsca_[k].interaction_weight});
    }
    if (label_table_.defined()) params_.push_back({"label_table", label_table_});
    params_.push_back({"head.weight", head_weight_});
    params_.push_back({"head.bias", head_bias_});
    for (auto& p : params_) p.tensor.set_name(p.name);
  }

  ModelConfig config_;
  std::mt19937_64 rng_;
  std::vector<int> prompt_ids_;
  int n_patches_ = 0;
  std::unique_ptr<GraphContext> graph_;
  Tensor token_table_;
  Tensor position_table_;
  PatchEmbedder patch_;
  std::vector<TransformerBlock> blocks_;
  CoarseProjector projector_;
  std::vector<DscaParams> dsca_;
  Tensor head_weight_;
  Tensor head_bias_;
  Tensor label_table_;
  std::vector<std::vector<double>> class_examples_;
  std::vector<NamedParameter> params_;
};

}  // namespace ctxalign
