#pragma once

#include "flowcast/tensor.hpp"

#include <array>
#include <cstddef>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace flowcast {

/// Per-head projection weights; rows index the L-wide mode features.
struct AttentionHeadParams {
    Tensor w_q; // L x d_q
    Tensor w_k; // L x d_k (d_k == d_q)
    Tensor w_v; // L x d_v
};

/// Conv stack producing Q: shared convs, per-head row-wise projection.
struct ConvQParams {
    Tensor conv1_kernel; // filters x 1 x 3 x 3
    Tensor conv1_bias;   // filters
    Tensor conv2_kernel; // 1 x filters x 3 x 3
    Tensor conv2_bias;   // 1
    std::vector<Tensor> head_proj; // per head: L x d_q, no bias
};

struct ModifiedLayerParams {
    ConvQParams conv_q;
    std::vector<Tensor> w_k; // per head: L x d
    std::vector<Tensor> w_v; // per head: L x d
    Tensor out_w;            // (m*d) x L
    Tensor out_b;            // L
};

struct StandardLayerParams {
    std::vector<AttentionHeadParams> heads;
    Tensor out_w; // (m*d_v) x width
    Tensor out_b; // width
};

/// 3x3 row-stochastic attention weights for one (layer, head).
struct ScoreMatrix {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::array<double, 9> values{}; // row-major; rows/cols ordered (subway, taxi, bus)
};

std::tuple<Tensor, Tensor, Tensor> project_qkv(const Tensor& x, const AttentionHeadParams& head);

/// Returns (attention output, score matrix softmax(QK^T/sqrt(d_k))).
std::pair<Tensor, Tensor> scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

/// Concatenates per-head attention outputs along the feature axis and applies
/// the output projection. Appends each head's 3x3 score tensor to `scores`
/// when given.
Tensor multi_head(const Tensor& x, const std::vector<AttentionHeadParams>& heads,
                  const Tensor& out_w, const Tensor& out_b,
                  std::vector<Tensor>* scores = nullptr);

/// X viewed as 1x3xL -> conv -> relu -> conv -> 3xL -> row-wise projection.
Tensor conv_q(const Tensor& x, const ConvQParams& p, std::size_t head_index);

/// Encoder layer with conv-Q queries and linear K/V; no layer norm, no
/// feed-forward sublayer, no positional encoding.
Tensor modified_transformer_layer(const Tensor& x, const ModifiedLayerParams& p,
                                  std::vector<Tensor>* scores = nullptr);

Tensor standard_transformer_layer(const Tensor& x, const StandardLayerParams& p,
                                  std::vector<Tensor>* scores = nullptr);

ScoreMatrix to_score_matrix(std::size_t layer, std::size_t head, const Tensor& score);

std::string scores_to_csv(const std::vector<ScoreMatrix>& scores);
std::string scores_to_json(const std::vector<ScoreMatrix>& scores);

} // namespace flowcast
