#pragma once

// Dual-scale context-alignment block.
//
// Node matrices are stored rows = nodes ([L × M]). In that layout the GCN
// update reads  N̂ = relu(Â · N · W)  and the coarse-to-fine interaction
// ΔN = W_cf · N̂_C · Γ  (columns = nodes) becomes  ΔN = (Γᵀ · N̂_C) · W_cfᵀ.

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "ctxalign/error.hpp"
#include "ctxalign/graphspec.hpp"
#include "ctxalign/numerics.hpp"
#include "ctxalign/tsembed.hpp"

namespace ctxalign {

namespace detail {

inline Tensor uniform_matrix(std::size_t rows, std::size_t cols, double bound,
                             std::mt19937_64& rng, bool trainable = true) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = u(rng);
  return Tensor::matrix(rows, cols, std::move(v), trainable);
}

inline Tensor uniform_vector(std::size_t n, double bound, std::mt19937_64& rng,
                             bool trainable = true) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return Tensor::vector(std::move(v), trainable);
}

}  // namespace detail

// f_e and f_z: one shared linear map for every TS block (inputs zero-padded
// on the left to max_part_len rows) and one for the prompt.
struct CoarseProjector {
  int max_part_len = 0;
  int prompt_len = 0;
  int width = 0;
  Tensor fe_weight;  // [(max_part_len·M) × M]
  Tensor fe_bias;    // [M]
  Tensor fz_weight;  // [(m·M) × M]
  Tensor fz_bias;    // [M]
  int invocations = 0;

  static CoarseProjector init(int max_part_len, int prompt_len, int width,
                              std::mt19937_64& rng) {
    CoarseProjector p;
    p.max_part_len = max_part_len;
    p.prompt_len = prompt_len;
    p.width = width;
    const auto m = static_cast<std::size_t>(width);
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    p.fe_weight = detail::uniform_matrix(static_cast<std::size_t>(max_part_len) * m, m,
                                         1.0 / std::sqrt(static_cast<double>(max_part_len * width)), rng);
    p.fe_bias = detail::uniform_vector(m, bound, rng);
    p.fz_weight = detail::uniform_matrix(static_cast<std::size_t>(prompt_len) * m, m,
                                         1.0 / std::sqrt(static_cast<double>(prompt_len * width)), rng);
    p.fz_bias = detail::uniform_vector(m, bound, rng);
    return p;
  }
};

// Fine [L_f × M] -> coarse [L_c × M] in GraphSpec coarse order. Every prompt
// copy maps to the same z̃, computed from the first copy.
inline Tensor coarse_project(const Tensor& fine, const SequenceLayout& layout,
                             const GraphSpec& spec, CoarseProjector& projector) {
  if (static_cast<int>(fine.rows()) != spec.fine_count) {
    throw DimensionError("coarse_project: fine rows differ from layout length");
  }
  const auto width = fine.cols();
  if (static_cast<int>(width) != projector.width) {
    throw DimensionError("coarse_project: width differs from projector");
  }
  if (layout.prompt_len != projector.prompt_len) {
    throw DimensionError("coarse_project: prompt length differs from projector");
  }
  ++projector.invocations;

  auto flatten = [width](const Tensor& rows) {
    return reshape(rows, {1, rows.rows() * width});
  };
  const auto m = static_cast<std::size_t>(layout.prompt_len);
  const Tensor z_tilde = add_rowwise(
      matmul(flatten(slice_rows(fine, static_cast<std::size_t>(layout.prompt_start(0)), m)),
             projector.fz_weight),
      projector.fz_bias);

  std::vector<Tensor> nodes;
  for (const auto& role : spec.coarse_roles) {
    switch (role.kind) {
      case RoleKind::ts_patch: {
        const int len = layout.part_lengths[static_cast<std::size_t>(role.group)];
        if (len > projector.max_part_len) {
          throw ContractError("coarse_project: TS part of " + std::to_string(len) +
                              " patches exceeds configured maximum " +
                              std::to_string(projector.max_part_len));
        }
        auto block = slice_rows(fine, static_cast<std::size_t>(layout.block_start(role.group)),
                                static_cast<std::size_t>(len));
        block = pad_rows_front(block, static_cast<std::size_t>(projector.max_part_len - len));
        nodes.push_back(add_rowwise(matmul(flatten(block), projector.fe_weight),
                                    projector.fe_bias));
        break;
      }
      case RoleKind::prompt:
        nodes.push_back(z_tilde);
        break;
      case RoleKind::label:
        nodes.push_back(slice_rows(fine, static_cast<std::size_t>(layout.label_position(role.group)), 1));
        break;
    }
  }
  return concat_rows(nodes);
}

// W_F, W_C and W_cf for one insertion position.
struct DscaParams {
  Tensor fine_weight;
  Tensor coarse_weight;
  Tensor interaction_weight;

  static DscaParams init(int width, std::mt19937_64& rng) {
    const auto m = static_cast<std::size_t>(width);
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    DscaParams p;
    p.fine_weight = detail::uniform_matrix(m, m, bound, rng);
    p.coarse_weight = detail::uniform_matrix(m, m, bound, rng);
    p.interaction_weight = detail::uniform_matrix(m, m, bound, rng);
    return p;
  }
};

// relu(Â · nodes · W)
inline Tensor gcn_forward(const Tensor& nodes, const Tensor& a_hat, const Tensor& weight) {
  if (a_hat.rank() != 2 || a_hat.rows() != a_hat.cols() || a_hat.rows() != nodes.rows()) {
    throw DimensionError("gcn_forward: adjacency " + shape_string(a_hat.shape()) +
                         " vs nodes " + shape_string(nodes.shape()));
  }
  return relu(matmul(matmul(a_hat, nodes), weight));
}

// fine_out + (Γᵀ · coarse_out) · W_cfᵀ ; `gamma_t` is Γᵀ ([L_f × L_c]).
inline Tensor interaction(const Tensor& fine_out, const Tensor& coarse_out,
                          const Tensor& gamma_t, const Tensor& weight) {
  if (gamma_t.rank() != 2 || gamma_t.rows() != fine_out.rows() ||
      gamma_t.cols() != coarse_out.rows()) {
    throw DimensionError("interaction: assignment " + shape_string(gamma_t.shape()) +
                         " does not match fine " + shape_string(fine_out.shape()) +
                         " / coarse " + shape_string(coarse_out.shape()));
  }
  return add(fine_out, matmul(matmul(gamma_t, coarse_out), transpose(weight)));
}

// ---------------------------------------------------------------------------
// Fine adjacency as a tensor

namespace detail {

// d cos(u, v) / du with the same eps handling as cosine_similarity.
inline void cosine_grad(std::span<const double> u, std::span<const double> v, double scale,
                        std::span<double> gu, double eps = 1e-12) {
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  const double du = std::max(nu, eps), dv = std::max(nv, eps);
  const double c = dot / (du * dv);
  for (std::size_t i = 0; i < u.size(); ++i) {
    double g = v[i] / (du * dv);
    if (nu > eps) g -= c * u[i] / (nu * nu);
    gu[i] += scale * g;
  }
}

}  // namespace detail

// Normalized fine adjacency Â_F for the current node embeddings.
// `frozen_weights` replaces the cosine weights (random-init ablation).
// With `differentiable`, gradients flow from Â back into the embeddings
// through the cosine weights; otherwise Â is a constant of the pass.
inline Tensor fine_adjacency_tensor(const Tensor& fine, const GraphSpec& spec,
                                    const std::vector<double>* frozen_weights,
                                    bool differentiable) {
  const auto width = fine.cols();
  const auto weights = frozen_weights ? *frozen_weights
                                      : fine_edge_weights(spec, fine.values(), width);
  const auto a_hat = normalize_adjacency(fine_adjacency(spec, weights));
  const auto n = static_cast<std::size_t>(spec.fine_count);
  if (!differentiable || frozen_weights || !fine.requires_grad()) {
    return Tensor::matrix(n, n, a_hat.values);
  }
  return make_op(
      "fine_adjacency", {n, n}, a_hat.values, {fine},
      [spec, weights, width, n](TensorNode& self) {
        auto* gx = grad_sink(self, 0);
        const auto& x = self.inputs[0]->value;
        const auto& G = self.grad;
        const auto aprime = fine_adjacency(spec, weights);
        std::vector<double> deg(n, 1.0), rs(n);
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) deg[i] += aprime.values[i * n + j];
          rs[i] = 1.0 / std::sqrt(deg[i]);
        }
        auto a1 = [&](std::size_t i, std::size_t j) {
          return aprime.values[i * n + j] + (i == j ? 1.0 : 0.0);
        };
        // dL/dd_i through both the row and column scale factors.
        std::vector<double> g_deg(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          double g_r = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            g_r += G[i * n + j] * a1(i, j) * rs[j];
            g_r += G[j * n + i] * a1(j, i) * rs[j];
          }
          g_deg[i] = g_r * (-0.5) * rs[i] * rs[i] * rs[i];
        }
        // dL/dw_e for edge s -> t lives at A'[t][s].
        std::vector<double> g_w(spec.fine_edges.size());
        for (std::size_t e = 0; e < g_w.size(); ++e) {
          const auto t = static_cast<std::size_t>(spec.fine_edges[e].target);
          const auto s = static_cast<std::size_t>(spec.fine_edges[e].source);
          g_w[e] = G[t * n + s] * rs[t] * rs[s] + g_deg[t];
        }
        // Through the per-group L1 normalization and the clamp.
        std::vector<double> group_dot(spec.groups.size(), 0.0), group_raw(spec.groups.size(), 0.0);
        std::vector<double> cosv(g_w.size());
        for (std::size_t e = 0; e < g_w.size(); ++e) {
          const auto& edge = spec.fine_edges[e];
          const auto g = static_cast<std::size_t>(edge.group);
          if (spec.groups[g].rule != WeightRule::cosine) continue;
          std::span<const double> u(x.data() + static_cast<std::size_t>(edge.source) * width, width);
          std::span<const double> v(x.data() + static_cast<std::size_t>(edge.target) * width, width);
          cosv[e] = cosine_similarity(u, v);
          group_dot[g] += g_w[e] * weights[e];
          group_raw[g] += std::max(cosv[e], 0.0) + kEdgeWeightFloor;
        }
        for (std::size_t e = 0; e < g_w.size(); ++e) {
          const auto& edge = spec.fine_edges[e];
          const auto g = static_cast<std::size_t>(edge.group);
          if (spec.groups[g].rule != WeightRule::cosine || cosv[e] <= 0.0) continue;
          const double g_cos = (g_w[e] - group_dot[g]) / group_raw[g];
          const auto src = static_cast<std::size_t>(edge.source) * width;
          const auto tgt = static_cast<std::size_t>(edge.target) * width;
          std::span<const double> u(x.data() + src, width), v(x.data() + tgt, width);
          detail::cosine_grad(u, v, g_cos, std::span<double>(gx->data() + src, width));
          detail::cosine_grad(v, u, g_cos, std::span<double>(gx->data() + tgt, width));
        }
      });
}

// ---------------------------------------------------------------------------
// Block

struct DualScaleState {
  Tensor fine;    // [L_f × M]
  Tensor coarse;  // [L_c × M]; undefined before the first insertion
};

// Per-run constants derived from the graph spec.
struct GraphContext {
  SequenceLayout layout;
  GraphSpec spec;
  Tensor gamma_t;       // Γᵀ, [L_f × L_c]
  Tensor coarse_a_hat;  // Â_C; coarse weights are fixed at 1
  std::optional<std::vector<double>> frozen_fine_weights;

  GraphContext(SequenceLayout l, GraphSpec s)
      : layout(std::move(l)), spec(std::move(s)),
        gamma_t(transpose(spec.gamma())),
        coarse_a_hat(normalize_adjacency(coarse_adjacency(spec)).to_tensor()) {}
};

struct DscaOptions {
  bool coarse_branch = true;
  bool differentiable_weights = false;
  // Added to freshly projected coarse nodes ([≥ L_c × M]); may be undefined.
  Tensor coarse_positions;
};

inline Tensor add_positions(const Tensor& x, const Tensor& table) {
  if (!table.defined()) return x;
  if (table.rows() < x.rows()) {
    throw ContractError("sequence of length " + std::to_string(x.rows()) +
                        " exceeds max_seq_len " + std::to_string(table.rows()));
  }
  return add(x, slice_rows(table, 0, x.rows()));
}

// One dual-scale update. The first insertion (no coarse state yet) builds
// the coarse nodes with f_e/f_z; later insertions reuse the coarse state
// handed back by the backbone.
inline DualScaleState dsca_block(DualScaleState state, const GraphContext& ctx,
                                 const DscaParams& params, CoarseProjector* projector,
                                 const DscaOptions& options) {
  const Tensor a_fine =
      fine_adjacency_tensor(state.fine, ctx.spec,
                            ctx.frozen_fine_weights ? &*ctx.frozen_fine_weights : nullptr,
                            options.differentiable_weights);
  Tensor fine_out = gcn_forward(state.fine, a_fine, params.fine_weight);
  if (!options.coarse_branch) {
    return {fine_out, state.coarse};
  }
  if (!state.coarse.defined()) {
    if (!projector) throw ContractError("dsca_block: first insertion needs the projector");
    state.coarse = add_positions(coarse_project(state.fine, ctx.layout, ctx.spec, *projector),
                                 options.coarse_positions);
  }
  Tensor coarse_out = gcn_forward(state.coarse, ctx.coarse_a_hat, params.coarse_weight);
  fine_out = interaction(fine_out, coarse_out, ctx.gamma_t, params.interaction_weight);
  return {fine_out, coarse_out};
}

}  // namespace ctxalign
