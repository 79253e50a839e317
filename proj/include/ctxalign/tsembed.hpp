#pragma once

// Series windows -> patches -> packed token sequences.
//
// Packed layouts (rows of the fine-grained node matrix):
//   vca            [e_1..e_n, z_1..z_m]
//   fsca_forecast  [part_1, prompt, part_2, prompt, ..., part_N, prompt]
//   fsca_class     [ex_1, prompt, y_1, ..., ex_l, prompt, y_l, query, prompt]

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ctxalign/error.hpp"
#include "ctxalign/numerics.hpp"

namespace ctxalign {

inline constexpr std::string_view kDefaultForecastPrompt =
    "Predict future sequences using previous data:";

inline std::string classification_prompt(int classes) {
  return "Predict category (" + std::to_string(classes) +
         " in total) using previous data:";
}

struct NormStats {
  double mean = 0.0;
  double std = 1.0;
};

struct SeriesWindow {
  std::vector<double> values;
  int channel_id = 0;
  std::optional<NormStats> norm_stats;
};

// ---------------------------------------------------------------------------
// Patching

inline int patch_count(int length, int patch_len, int stride) {
  if (patch_len < 1 || stride < 1) {
    throw ContractError("patchify: patch length and stride must be >= 1");
  }
  if (length < patch_len) {
    throw ContractError("patchify: series of length " + std::to_string(length) +
                        " is shorter than one patch (" +
                        std::to_string(patch_len) + ")");
  }
  if ((length - patch_len) % stride != 0) {
    throw ContractError("patchify: (T - p) = " +
                        std::to_string(length - patch_len) +
                        " is not divisible by stride " + std::to_string(stride) +
                        "; pad or trim the window first");
  }
  return (length - patch_len + stride) / stride;
}

// Patch i covers [i*stride, i*stride + patch_len).
inline std::vector<std::vector<double>> patchify(std::span<const double> values,
                                                 int patch_len, int stride) {
  const int n = patch_count(static_cast<int>(values.size()), patch_len, stride);
  std::vector<std::vector<double>> patches(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto first = values.begin() + i * stride;
    patches[static_cast<std::size_t>(i)].assign(first, first + patch_len);
  }
  return patches;
}

inline std::vector<std::vector<double>> patchify(const SeriesWindow& w,
                                                 int patch_len, int stride) {
  return patchify(w.values, patch_len, stride);
}

// Patches stacked into an [n × p] matrix.
inline Tensor patch_matrix(std::span<const double> values, int patch_len,
                           int stride) {
  auto patches = patchify(values, patch_len, stride);
  std::vector<double> flat;
  flat.reserve(patches.size() * static_cast<std::size_t>(patch_len));
  for (const auto& p : patches) flat.insert(flat.end(), p.begin(), p.end());
  return Tensor::matrix(patches.size(), static_cast<std::size_t>(patch_len),
                        std::move(flat));
}

// ---------------------------------------------------------------------------
// Per-window z-score

inline constexpr double kNormStdFloor = 1e-5;

// Population statistics; the stored std carries a +1e-5 floor.
inline SeriesWindow instance_normalize(SeriesWindow w) {
  if (w.values.empty()) throw ContractError("instance_normalize: empty window");
  const double n = static_cast<double>(w.values.size());
  double mean = 0.0;
  for (double v : w.values) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : w.values) var += (v - mean) * (v - mean);
  var /= n;
  NormStats stats{mean, std::sqrt(var) + kNormStdFloor};
  for (double& v : w.values) v = (v - stats.mean) / stats.std;
  w.norm_stats = stats;
  return w;
}

inline std::vector<double> denormalize(std::span<const double> pred,
                                       const NormStats& stats) {
  std::vector<double> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = pred[i] * stats.std + stats.mean;
  return out;
}

inline Tensor denormalize(const Tensor& pred, const NormStats& stats) {
  return affine(pred, stats.std, stats.mean);
}

// ---------------------------------------------------------------------------
// Parts and prompts

// Ordered split of n patches into N parts; lengths differ by at most one and
// the remainder goes to the last parts.
inline std::vector<int> split_parts(int n, int parts) {
  if (parts < 1) throw ContractError("split_parts: need at least one part");
  if (parts > n) {
    throw ContractError("split_parts: " + std::to_string(parts) +
                        " parts requested for " + std::to_string(n) + " patches");
  }
  const int base = n / parts;
  const int extra = n % parts;
  std::vector<int> lengths(static_cast<std::size_t>(parts), base);
  for (int j = parts - extra; j < parts; ++j) ++lengths[static_cast<std::size_t>(j)];
  return lengths;
}

// Byte-level: one token per byte, id = byte value.
inline constexpr int kVocabularySize = 256;

inline std::vector<int> tokenize_prompt(std::string_view text) {
  if (text.empty()) throw ContractError("tokenize_prompt: prompt must be non-empty");
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c));
  return ids;
}

// ---------------------------------------------------------------------------
// Layouts

enum class LayoutMode { vca, fsca_forecast, fsca_class };
enum class RoleKind { ts_patch, prompt, label };

// `group`: TS part / example index, prompt copy index, or label's example.
// `index`: position inside that group.
struct TokenRole {
  RoleKind kind;
  int group;
  int index;
  friend bool operator==(const TokenRole&, const TokenRole&) = default;
};

struct SequenceLayout {
  LayoutMode mode = LayoutMode::vca;
  std::vector<TokenRole> roles;
  // One entry per TS block in order (parts for forecasting; examples then
  // the query for classification).
  std::vector<int> part_lengths;
  int prompt_len = 0;
  int examples = 0;  // labelled examples (fsca_class only)

  std::size_t total_len() const { return roles.size(); }
  int patch_count() const {
    int n = 0;
    for (int l : part_lengths) n += l;
    return n;
  }
  int max_part_len() const {
    int mx = 0;
    for (int l : part_lengths) mx = std::max(mx, l);
    return mx;
  }
  // First row of TS block j and of prompt copy i.
  int block_start(int j) const { return find_first(RoleKind::ts_patch, j); }
  int prompt_start(int i) const { return find_first(RoleKind::prompt, i); }
  int label_position(int k) const { return find_first(RoleKind::label, k); }
  int prompt_copies() const {
    int c = 0;
    for (const auto& r : roles) c = std::max(c, r.kind == RoleKind::prompt ? r.group + 1 : 0);
    return c;
  }

  // Same token structure regardless of the mode tag.
  bool same_structure(const SequenceLayout& other) const {
    return roles == other.roles && part_lengths == other.part_lengths &&
           prompt_len == other.prompt_len;
  }

 private:
  int find_first(RoleKind kind, int group) const {
    for (std::size_t p = 0; p < roles.size(); ++p) {
      if (roles[p].kind == kind && roles[p].group == group) return static_cast<int>(p);
    }
    throw ContractError("layout: no such block");
  }
};

namespace detail {

inline void append_block(SequenceLayout& layout, RoleKind kind, int group, int count) {
  for (int t = 0; t < count; ++t) layout.roles.push_back({kind, group, t});
}

inline void require_prompt(int m) {
  if (m < 1) throw ContractError("layout: prompt length must be >= 1");
}

}  // namespace detail

inline SequenceLayout make_vca_layout(int n, int m) {
  if (n < 1) throw ContractError("layout: need at least one patch");
  detail::require_prompt(m);
  SequenceLayout layout;
  layout.mode = LayoutMode::vca;
  layout.part_lengths = {n};
  layout.prompt_len = m;
  detail::append_block(layout, RoleKind::ts_patch, 0, n);
  detail::append_block(layout, RoleKind::prompt, 0, m);
  return layout;
}

inline SequenceLayout make_fsca_forecast_layout(std::vector<int> part_lengths, int m) {
  if (part_lengths.empty()) throw ContractError("layout: FSCA needs N >= 1 parts");
  detail::require_prompt(m);
  SequenceLayout layout;
  layout.mode = LayoutMode::fsca_forecast;
  layout.prompt_len = m;
  for (std::size_t j = 0; j < part_lengths.size(); ++j) {
    if (part_lengths[j] < 1) throw ContractError("layout: empty TS part");
    detail::append_block(layout, RoleKind::ts_patch, static_cast<int>(j), part_lengths[j]);
    detail::append_block(layout, RoleKind::prompt, static_cast<int>(j), m);
  }
  layout.part_lengths = std::move(part_lengths);
  return layout;
}

// `examples` labelled series (one per class) followed by the query.
inline SequenceLayout make_fsca_class_layout(int n, int m, int examples) {
  if (examples < 1) {
    throw ContractError(
        "layout: FSCA classification needs at least one example; use VCA instead");
  }
  if (n < 1) throw ContractError("layout: need at least one patch");
  detail::require_prompt(m);
  SequenceLayout layout;
  layout.mode = LayoutMode::fsca_class;
  layout.prompt_len = m;
  layout.examples = examples;
  for (int k = 0; k <= examples; ++k) {
    detail::append_block(layout, RoleKind::ts_patch, k, n);
    detail::append_block(layout, RoleKind::prompt, k, m);
    if (k < examples) detail::append_block(layout, RoleKind::label, k, 1);
    layout.part_lengths.push_back(n);
  }
  return layout;
}

// Rows of the embedded pieces packed in layout order. `ts_blocks[j]` is the
// [l_j × M] embedding of TS block j, `prompt` the [m × M] prompt embedding
// reused for every copy, `labels[k]` the [1 × M] label of example k.
inline Tensor build_sequence(const SequenceLayout& layout,
                             const std::vector<Tensor>& ts_blocks,
                             const Tensor& prompt,
                             const std::vector<Tensor>& labels = {}) {
  if (ts_blocks.size() != layout.part_lengths.size()) {
    throw ContractError("build_sequence: expected " +
                        std::to_string(layout.part_lengths.size()) +
                        " TS blocks, got " + std::to_string(ts_blocks.size()));
  }
  for (std::size_t j = 0; j < ts_blocks.size(); ++j) {
    if (static_cast<int>(ts_blocks[j].rows()) != layout.part_lengths[j]) {
      throw ContractError("build_sequence: TS block " + std::to_string(j) +
                          " has " + std::to_string(ts_blocks[j].rows()) +
                          " rows, layout expects " +
                          std::to_string(layout.part_lengths[j]));
    }
  }
  if (static_cast<int>(prompt.rows()) != layout.prompt_len) {
    throw ContractError("build_sequence: prompt length differs from layout");
  }
  if (static_cast<int>(labels.size()) != layout.examples) {
    throw ContractError("build_sequence: label count differs from layout");
  }
  std::vector<Tensor> pieces;
  for (std::size_t j = 0; j < ts_blocks.size(); ++j) {
    pieces.push_back(ts_blocks[j]);
    pieces.push_back(prompt);
    if (layout.mode == LayoutMode::fsca_class && static_cast<int>(j) < layout.examples) {
      pieces.push_back(labels[j]);
    }
  }
  return concat_rows(pieces);
}

// Splits an [n × M] patch embedding into the layout's forecasting parts.
inline std::vector<Tensor> split_rows(const Tensor& embedded,
                                      const std::vector<int>& lengths) {
  std::vector<Tensor> out;
  std::size_t at = 0;
  for (int l : lengths) {
    out.push_back(slice_rows(embedded, at, static_cast<std::size_t>(l)));
    at += static_cast<std::size_t>(l);
  }
  if (at != embedded.rows()) {
    throw ContractError("split_rows: part lengths do not cover the patches");
  }
  return out;
}

// ---------------------------------------------------------------------------

struct PatchEmbedder {
  Tensor weight;  // [p × M]
  Tensor bias;    // [M]

  static PatchEmbedder init(int patch_len, int width, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(patch_len));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> w(static_cast<std::size_t>(patch_len * width));
    for (auto& v : w) v = u(rng);
    std::vector<double> b(static_cast<std::size_t>(width));
    for (auto& v : b) v = u(rng);
    return {Tensor::matrix(static_cast<std::size_t>(patch_len),
                           static_cast<std::size_t>(width), std::move(w), true),
            Tensor::vector(std::move(b), true)};
  }

  // [n × p] patches -> [n × M]
  Tensor embed(const Tensor& patches) const {
    return add_rowwise(matmul(patches, weight), bias);
  }
};

}  // namespace ctxalign
