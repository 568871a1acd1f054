#include "flowcast/attention.hpp"

#include "flowcast/dataflow.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/util.hpp"

#include <json.hpp>

#include <cmath>

namespace flowcast {

namespace {

void check_mode_rows(const char* op, const Tensor& x) {
    if (x.shape().size() != 2 || x.dim(0) != static_cast<std::size_t>(kModes))
        throw ShapeError(std::string(op) + ": expected a 3-row (mode x feature) matrix");
}

} // namespace

std::tuple<Tensor, Tensor, Tensor> project_qkv(const Tensor& x, const AttentionHeadParams& head) {
    check_mode_rows("project_qkv", x);
    return {matmul(x, head.w_q), matmul(x, head.w_k), matmul(x, head.w_v)};
}

std::pair<Tensor, Tensor> scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2)
        throw ShapeError("scaled_dot_attention: Q, K, V must be 2-d");
    if (q.dim(1) != k.dim(1))
        throw ConfigError("scaled_dot_attention: d_q (" + std::to_string(q.dim(1)) +
                          ") must equal d_k (" + std::to_string(k.dim(1)) + ")");
    if (k.dim(0) != v.dim(0))
        throw ShapeError("scaled_dot_attention: K and V row counts differ");
    double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(k.dim(1)));
    Tensor score = softmax(mul_scalar(matmul_transposed(q, k), inv_sqrt_dk), -1);
    return {matmul(score, v), score};
}

Tensor multi_head(const Tensor& x, const std::vector<AttentionHeadParams>& heads,
                  const Tensor& out_w, const Tensor& out_b, std::vector<Tensor>* scores) {
    if (heads.empty()) throw ConfigError("multi_head: at least one head required");
    std::vector<Tensor> outputs;
    outputs.reserve(heads.size());
    for (const AttentionHeadParams& head : heads) {
        auto [q, k, v] = project_qkv(x, head);
        auto [out, score] = scaled_dot_attention(q, k, v);
        outputs.push_back(out);
        if (scores) scores->push_back(score);
    }
    return linear(concat(outputs, 1), out_w, out_b);
}

Tensor conv_q(const Tensor& x, const ConvQParams& p, std::size_t head_index) {
    check_mode_rows("conv_q", x);
    if (head_index >= p.head_proj.size())
        throw ConfigError("conv_q: head index " + std::to_string(head_index) + " out of range");
    std::size_t width = x.dim(1);
    Tensor img = reshape(x, {1, static_cast<std::size_t>(kModes), width});
    Tensor h = relu(conv2d(img, p.conv1_kernel, p.conv1_bias, 1, 1));
    Tensor map = conv2d(h, p.conv2_kernel, p.conv2_bias, 1, 1);
    return matmul(reshape(map, {static_cast<std::size_t>(kModes), width}), p.head_proj[head_index]);
}

Tensor modified_transformer_layer(const Tensor& x, const ModifiedLayerParams& p,
                                  std::vector<Tensor>* scores) {
    check_mode_rows("modified_transformer_layer", x);
    std::size_t m = p.conv_q.head_proj.size();
    if (m == 0 || p.w_k.size() != m || p.w_v.size() != m)
        throw ConfigError("modified_transformer_layer: inconsistent head parameter counts");
    std::vector<Tensor> outputs;
    outputs.reserve(m);
    for (std::size_t h = 0; h < m; ++h) {
        Tensor q = conv_q(x, p.conv_q, h);
        Tensor k = matmul(x, p.w_k[h]);
        Tensor v = matmul(x, p.w_v[h]);
        auto [out, score] = scaled_dot_attention(q, k, v);
        outputs.push_back(out);
        if (scores) scores->push_back(score);
    }
    return linear(concat(outputs, 1), p.out_w, p.out_b);
}

Tensor standard_transformer_layer(const Tensor& x, const StandardLayerParams& p,
                                  std::vector<Tensor>* scores) {
    return multi_head(x, p.heads, p.out_w, p.out_b, scores);
}

ScoreMatrix to_score_matrix(std::size_t layer, std::size_t head, const Tensor& score) {
    if (score.shape() != Shape{3, 3})
        throw ShapeError("to_score_matrix: expected a 3x3 score tensor");
    ScoreMatrix m;
    m.layer = layer;
    m.head = head;
    for (int i = 0; i < 9; ++i) m.values[static_cast<std::size_t>(i)] = score.values()[static_cast<std::size_t>(i)];
    return m;
}

std::string scores_to_csv(const std::vector<ScoreMatrix>& scores) {
    std::string out = "layer,head,mode,subway,taxi,bus\n";
    for (const ScoreMatrix& m : scores)
        for (int r = 0; r < kModes; ++r) {
            out += std::to_string(m.layer) + ',' + std::to_string(m.head) + ',' + kModeNames[r];
            for (int c = 0; c < kModes; ++c)
                out += ',' + util::format_double(m.values[static_cast<std::size_t>(r * kModes + c)]);
            out += '\n';
        }
    return out;
}

std::string scores_to_json(const std::vector<ScoreMatrix>& scores) {
    nlohmann::json root;
    root["modes"] = {kModeNames[0], kModeNames[1], kModeNames[2]};
    nlohmann::json list = nlohmann::json::array();
    for (const ScoreMatrix& m : scores) {
        nlohmann::json entry;
        entry["layer"] = m.layer;
        entry["head"] = m.head;
        nlohmann::json rows = nlohmann::json::array();
        for (int r = 0; r < kModes; ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (int c = 0; c < kModes; ++c) row.push_back(m.values[static_cast<std::size_t>(r * kModes + c)]);
            rows.push_back(row);
        }
        entry["rows"] = rows;
        list.push_back(entry);
    }
    root["matrices"] = list;
    return root.dump(2) + "\n";
}

} // namespace flowcast
