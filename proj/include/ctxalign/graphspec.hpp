#pragma once

// Dual-scale directed graphs over a packed sequence.
//
// Fine graph: one node per packed token. Coarse graph: one node per
// contiguous same-modality block (TS part / prompt copy / label). Edges are
// stored as (source, target); adjacency matrices use A[target][source], so
// the row-sum degree of A' = A + I collects a node's in-neighbourhood.
//
// Coarse node order follows the packed order:
//   vca            [ẽ, z̃]
//   fsca_forecast  [ẽ_1, z̃^(1), ..., ẽ_N, z̃^(N)]
//   fsca_class     [ẽ^(1), z̃^(1), y^(1), ..., ẽ^(l+1), z̃^(l+1)]

#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ctxalign/error.hpp"
#include "ctxalign/numerics.hpp"
#include "ctxalign/tsembed.hpp"

namespace ctxalign {

enum class WeightRule {
  cosine,     // clamp(cos, 0) + floor, then L1-normalized inside the group
  fixed_one,  // weight 1 regardless of embeddings
};

// Whether the group's edges run TS -> prompt (first type) or prompt -> the
// following block (second type).
enum class EdgeType { first, second };

struct EdgeGroup {
  WeightRule rule;
  EdgeType type;
};

struct FineEdge {
  int source;
  int target;
  int group;
  friend bool operator==(const FineEdge&, const FineEdge&) = default;
};

struct CoarseEdge {
  int source;
  int target;
  friend bool operator==(const CoarseEdge&, const CoarseEdge&) = default;
};

struct CoarseRole {
  RoleKind kind;
  int group;
  friend bool operator==(const CoarseRole&, const CoarseRole&) = default;
};

struct GraphSpec {
  int fine_count = 0;
  int coarse_count = 0;
  std::vector<FineEdge> fine_edges;
  std::vector<EdgeGroup> groups;
  std::vector<CoarseEdge> coarse_edges;
  std::vector<CoarseRole> coarse_roles;
  // Column view of Γ: coarse parent of each fine node.
  std::vector<int> coarse_of_fine;

  // Γ as a dense [L_c × L_f] 0/1 matrix.
  Tensor gamma() const {
    auto g = Tensor::zeros({static_cast<std::size_t>(coarse_count),
                            static_cast<std::size_t>(fine_count)});
    auto v = g.mutable_values();
    for (int j = 0; j < fine_count; ++j) {
      v[static_cast<std::size_t>(coarse_of_fine[static_cast<std::size_t>(j)] * fine_count + j)] = 1.0;
    }
    return g;
  }
};

namespace detail {

// Coarse roles and Γ follow directly from the token roles: a new coarse node
// starts whenever (kind, group) changes.
inline void assign_coarse_nodes(const SequenceLayout& layout, GraphSpec& spec) {
  spec.fine_count = static_cast<int>(layout.total_len());
  spec.coarse_of_fine.assign(layout.total_len(), -1);
  for (std::size_t p = 0; p < layout.roles.size(); ++p) {
    const auto& r = layout.roles[p];
    if (spec.coarse_roles.empty() || spec.coarse_roles.back().kind != r.kind ||
        spec.coarse_roles.back().group != r.group) {
      spec.coarse_roles.push_back({r.kind, r.group});
    }
    spec.coarse_of_fine[p] = static_cast<int>(spec.coarse_roles.size()) - 1;
  }
  spec.coarse_count = static_cast<int>(spec.coarse_roles.size());
}

inline int coarse_index(const GraphSpec& spec, RoleKind kind, int group) {
  for (std::size_t c = 0; c < spec.coarse_roles.size(); ++c) {
    if (spec.coarse_roles[c].kind == kind && spec.coarse_roles[c].group == group) {
      return static_cast<int>(c);
    }
  }
  throw ContractError("graphspec: missing coarse node");
}

inline int new_group(GraphSpec& spec, WeightRule rule, EdgeType type) {
  spec.groups.push_back({rule, type});
  return static_cast<int>(spec.groups.size()) - 1;
}

inline void require_mode(const SequenceLayout& layout, LayoutMode mode, const char* who) {
  if (layout.mode != mode) {
    throw ContractError(std::string(who) + ": layout has the wrong mode");
  }
}

// Shared by VCA (one part, one prompt copy) and FSCA forecasting.
inline GraphSpec build_forecast_edges(const SequenceLayout& layout, bool pruned) {
  GraphSpec spec;
  assign_coarse_nodes(layout, spec);
  const int parts = static_cast<int>(layout.part_lengths.size());
  const int m = layout.prompt_len;
  if (parts < 1) throw ContractError("graphspec: N must be >= 1");

  // First type: every part j <= i feeds prompt copy i.
  for (int i = 0; i < parts; ++i) {
    const int prompt = layout.prompt_start(i);
    for (int j = 0; j <= i; ++j) {
      const int start = layout.block_start(j);
      const int len = layout.part_lengths[static_cast<std::size_t>(j)];
      const int targets = pruned ? 1 : m;
      for (int t = 0; t < targets; ++t) {
        const int g = new_group(spec, WeightRule::cosine, EdgeType::first);
        for (int s = 0; s < len; ++s) spec.fine_edges.push_back({start + s, prompt + t, g});
      }
    }
  }
  // Second type: prompt copy i points at part i+1.
  for (int i = 0; i + 1 < parts; ++i) {
    const int prompt = layout.prompt_start(i);
    const int next = layout.block_start(i + 1);
    const int len = layout.part_lengths[static_cast<std::size_t>(i + 1)];
    const int first_source = pruned ? m - 1 : 0;
    for (int t = first_source; t < m; ++t) {
      const int g = new_group(spec, WeightRule::cosine, EdgeType::second);
      for (int s = 0; s < len; ++s) spec.fine_edges.push_back({prompt + t, next + s, g});
    }
  }

  for (int i = 0; i < parts; ++i) {
    const int zi = coarse_index(spec, RoleKind::prompt, i);
    for (int j = 0; j <= i; ++j) {
      spec.coarse_edges.push_back({coarse_index(spec, RoleKind::ts_patch, j), zi});
    }
  }
  for (int i = 0; i + 1 < parts; ++i) {
    spec.coarse_edges.push_back({coarse_index(spec, RoleKind::prompt, i),
                                 coarse_index(spec, RoleKind::ts_patch, i + 1)});
  }
  return spec;
}

}  // namespace detail

// TS tokens -> prompt tokens, one normalization group per prompt token.
// With `pruned`, only the first prompt token receives edges.
inline GraphSpec build_vca_spec(const SequenceLayout& layout, bool pruned = false) {
  detail::require_mode(layout, LayoutMode::vca, "build_vca_spec");
  return detail::build_forecast_edges(layout, pruned);
}

inline GraphSpec build_fsca_forecast_spec(const SequenceLayout& layout, bool pruned) {
  detail::require_mode(layout, LayoutMode::fsca_forecast, "build_fsca_forecast_spec");
  return detail::build_forecast_edges(layout, pruned);
}

// Pruned: e^(k)_i -> z^(k)_1 (normalized per example) and z^(k)_m -> y^(k)
// (weight 1). Unpruned: every prompt token participates; the m edges into
// a label form one normalized group.
inline GraphSpec build_fsca_class_spec(const SequenceLayout& layout, bool pruned = true) {
  detail::require_mode(layout, LayoutMode::fsca_class, "build_fsca_class_spec");
  const int l = layout.examples;
  if (l < 1) {
    throw ContractError("build_fsca_class_spec: no labelled examples; use VCA");
  }
  GraphSpec spec;
  detail::assign_coarse_nodes(layout, spec);
  const int m = layout.prompt_len;
  for (int k = 0; k <= l; ++k) {
    const int start = layout.block_start(k);
    const int prompt = layout.prompt_start(k);
    const int n = layout.part_lengths[static_cast<std::size_t>(k)];
    const int targets = pruned ? 1 : m;
    for (int t = 0; t < targets; ++t) {
      const int g = detail::new_group(spec, WeightRule::cosine, EdgeType::first);
      for (int i = 0; i < n; ++i) spec.fine_edges.push_back({start + i, prompt + t, g});
    }
  }
  for (int k = 0; k < l; ++k) {
    const int prompt = layout.prompt_start(k);
    const int label = layout.label_position(k);
    if (pruned) {
      const int g = detail::new_group(spec, WeightRule::fixed_one, EdgeType::second);
      spec.fine_edges.push_back({prompt + m - 1, label, g});
    } else {
      const int g = detail::new_group(spec, WeightRule::cosine, EdgeType::second);
      for (int t = 0; t < m; ++t) spec.fine_edges.push_back({prompt + t, label, g});
    }
  }
  for (int k = 0; k <= l; ++k) {
    spec.coarse_edges.push_back({detail::coarse_index(spec, RoleKind::ts_patch, k),
                                 detail::coarse_index(spec, RoleKind::prompt, k)});
  }
  for (int k = 0; k < l; ++k) {
    spec.coarse_edges.push_back({detail::coarse_index(spec, RoleKind::prompt, k),
                                 detail::coarse_index(spec, RoleKind::label, k)});
  }
  return spec;
}

inline GraphSpec build_graph_spec(const SequenceLayout& layout, bool pruned) {
  switch (layout.mode) {
    case LayoutMode::vca:
      return build_vca_spec(layout, pruned);
    case LayoutMode::fsca_forecast:
      return build_fsca_forecast_spec(layout, pruned);
    case LayoutMode::fsca_class:
      return build_fsca_class_spec(layout, pruned);
  }
  throw ContractError("build_graph_spec: unknown mode");
}

// ---------------------------------------------------------------------------
// Weights and adjacency

struct WeightedAdjacency {
  int size = 0;
  std::vector<double> values;  // row-major, [target][source]

  static WeightedAdjacency zeros(int n) {
    return {n, std::vector<double>(static_cast<std::size_t>(n * n), 0.0)};
  }
  double at(int target, int source) const {
    return values[static_cast<std::size_t>(target * size + source)];
  }
  double& at(int target, int source) {
    return values[static_cast<std::size_t>(target * size + source)];
  }
  Tensor to_tensor() const {
    return Tensor::matrix(static_cast<std::size_t>(size), static_cast<std::size_t>(size), values);
  }
};

inline constexpr double kEdgeWeightFloor = 1e-6;

// Per-edge weights from node embeddings ([L_f × width], row-major). Cosine
// groups: raw = max(cos(src, tgt), 0) + 1e-6, normalized to sum 1.
inline std::vector<double> fine_edge_weights(const GraphSpec& spec,
                                             std::span<const double> embeddings,
                                             std::size_t width) {
  if (embeddings.size() != static_cast<std::size_t>(spec.fine_count) * width) {
    throw DimensionError("fine_edge_weights: embedding rows differ from node count");
  }
  std::vector<double> w(spec.fine_edges.size());
  std::vector<double> group_sum(spec.groups.size(), 0.0);
  auto row = [&](int r) {
    return embeddings.subspan(static_cast<std::size_t>(r) * width, width);
  };
  for (std::size_t e = 0; e < spec.fine_edges.size(); ++e) {
    const auto& edge = spec.fine_edges[e];
    const auto& group = spec.groups[static_cast<std::size_t>(edge.group)];
    if (group.rule == WeightRule::fixed_one) {
      w[e] = 1.0;
      continue;
    }
    w[e] = std::max(cosine_similarity(row(edge.source), row(edge.target)), 0.0) +
           kEdgeWeightFloor;
    group_sum[static_cast<std::size_t>(edge.group)] += w[e];
  }
  for (std::size_t e = 0; e < w.size(); ++e) {
    const auto g = static_cast<std::size_t>(spec.fine_edges[e].group);
    if (spec.groups[g].rule == WeightRule::cosine) w[e] /= group_sum[g];
  }
  return w;
}

// Uniform(0,1) draws re-normalized per cosine group; fixed groups stay 1.
inline std::vector<double> random_edge_weights(const GraphSpec& spec, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> w(spec.fine_edges.size());
  std::vector<double> group_sum(spec.groups.size(), 0.0);
  for (std::size_t e = 0; e < w.size(); ++e) {
    const auto g = static_cast<std::size_t>(spec.fine_edges[e].group);
    if (spec.groups[g].rule == WeightRule::fixed_one) {
      w[e] = 1.0;
    } else {
      w[e] = u(rng) + kEdgeWeightFloor;
      group_sum[g] += w[e];
    }
  }
  for (std::size_t e = 0; e < w.size(); ++e) {
    const auto g = static_cast<std::size_t>(spec.fine_edges[e].group);
    if (spec.groups[g].rule == WeightRule::cosine) w[e] /= group_sum[g];
  }
  return w;
}

inline WeightedAdjacency fine_adjacency(const GraphSpec& spec, std::span<const double> weights) {
  if (weights.size() != spec.fine_edges.size()) {
    throw DimensionError("fine_adjacency: one weight per edge required");
  }
  auto a = WeightedAdjacency::zeros(spec.fine_count);
  for (std::size_t e = 0; e < weights.size(); ++e) {
    a.at(spec.fine_edges[e].target, spec.fine_edges[e].source) += weights[e];
  }
  return a;
}

// Coarse edges always carry weight 1.
inline WeightedAdjacency coarse_adjacency(const GraphSpec& spec) {
  auto a = WeightedAdjacency::zeros(spec.coarse_count);
  for (const auto& e : spec.coarse_edges) a.at(e.target, e.source) = 1.0;
  return a;
}

struct DualAdjacency {
  WeightedAdjacency fine;
  WeightedAdjacency coarse;
};

inline DualAdjacency compute_edge_weights(const GraphSpec& spec, const Tensor& fine_nodes) {
  if (fine_nodes.rank() != 2 || static_cast<int>(fine_nodes.rows()) != spec.fine_count) {
    throw DimensionError("compute_edge_weights: embedding rows differ from node count");
  }
  auto w = fine_edge_weights(spec, fine_nodes.values(), fine_nodes.cols());
  return {fine_adjacency(spec, w), coarse_adjacency(spec)};
}

// Â = D^{-1/2} (A + I) D^{-1/2}, D_ii = Σ_j (A + I)_ij.
inline WeightedAdjacency normalize_adjacency(const WeightedAdjacency& a) {
  const int n = a.size;
  for (double v : a.values) {
    if (v < 0) throw ContractError("normalize_adjacency: negative weight");
  }
  auto out = a;
  std::vector<double> inv_sqrt_deg(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.at(i, i) += 1.0;
    double deg = 0.0;
    for (int j = 0; j < n; ++j) deg += out.at(i, j);
    inv_sqrt_deg[static_cast<std::size_t>(i)] = 1.0 / std::sqrt(deg);
  }
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out.at(i, j) *= inv_sqrt_deg[static_cast<std::size_t>(i)] *
                      inv_sqrt_deg[static_cast<std::size_t>(j)];
  return out;
}

// ---------------------------------------------------------------------------
// Plain-text dump: "rows cols" then row-major values; edge lists as
// "src tgt weight group" lines.

inline void write_matrix(std::ostream& out, std::size_t rows, std::size_t cols,
                         std::span<const double> values) {
  const auto old = out.precision(17);
  out << rows << ' ' << cols << '\n';
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      out << (j ? " " : "") << values[i * cols + j];
    }
    out << '\n';
  }
  out.precision(old);
}

inline void write_matrix(std::ostream& out, const WeightedAdjacency& a) {
  write_matrix(out, static_cast<std::size_t>(a.size), static_cast<std::size_t>(a.size), a.values);
}

inline void write_fine_edges(std::ostream& out, const GraphSpec& spec,
                             std::span<const double> weights) {
  const auto old = out.precision(17);
  for (std::size_t e = 0; e < spec.fine_edges.size(); ++e) {
    const auto& edge = spec.fine_edges[e];
    out << edge.source << ' ' << edge.target << ' ' << weights[e] << ' ' << edge.group << '\n';
  }
  out.precision(old);
}

// Coarse edges all live in group 0 with weight 1.
inline void write_coarse_edges(std::ostream& out, const GraphSpec& spec) {
  for (const auto& edge : spec.coarse_edges) {
    out << edge.source << ' ' << edge.target << ' ' << 1 << ' ' << 0 << '\n';
  }
}

}  // namespace ctxalign
