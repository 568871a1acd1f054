#pragma once

#include "flowcast/attention.hpp"
#include "flowcast/dataflow.hpp"
#include "flowcast/tensor.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace flowcast {

enum class Arch {
    Full,      // Res-Transformer
    VariantA,  // linear Q instead of conv-Q
    VariantB,  // no shortcut, no post-attention convs
    VariantC,  // no post-attention convs
    VariantD,  // no shortcut
    VariantE,  // 8 standard encoder layers
    BPNN,
    CNN1D,
    CNN2D,
    LSTM,
    ConvLSTM,
    STResNet,
    Transformer,
};

inline constexpr std::size_t kArchCount = 13;
const char* arch_name(Arch arch);
std::optional<Arch> parse_arch(std::string_view name);
std::vector<Arch> all_archs();
bool is_res_variant(Arch arch); // Full or A-E

struct ModelConfig {
    Arch arch = Arch::Full;
    std::size_t window = 12;  // L
    std::size_t d_model = 12; // shared d_q = d_k = d_v
    std::size_t heads = 4;    // m
    std::size_t layers = 4;   // N
    std::size_t conv_filters = 8;
    std::size_t fc_pre = 128;                   // row-wise FC hidden width
    std::vector<std::size_t> fc_head{128, 64, 32, 3};
    std::uint64_t seed = 42;

    void validate() const; // throws ConfigError
};

using NamedParam = std::pair<std::string, Tensor>;

/// One instantiated architecture behind a uniform predictor interface:
/// forward maps a (B,3,L) batch to (B,3) next-slot predictions.
class Model {
public:
    explicit Model(ModelConfig config);

    const ModelConfig& config() const { return config_; }
    std::vector<NamedParam>& parameters() { return params_; }
    const std::vector<NamedParam>& parameters() const { return params_; }
    std::size_t parameter_count() const;

    Tensor forward(const Tensor& batch);     // (B,3,L) -> (B,3)
    Tensor forward_sample(const Tensor& x);  // (3,L)   -> (1,3)

    /// Score matrices recorded by the most recent forward pass (for a batch,
    /// the last sample's). Throws if no forward has run or the architecture
    /// has no attention layers.
    const std::vector<ScoreMatrix>& last_scores() const;

    /// Input of the head FC stack from the most recent forward (3xL for the
    /// residual family) — exposes the shortcut sum for verification.
    const Tensor& last_head_input() const;

private:
    struct Impl;

    Tensor run_sample(const Tensor& x);

    ModelConfig config_;
    std::vector<NamedParam> params_;
    std::shared_ptr<Impl> impl_;
    std::vector<ScoreMatrix> scores_;
    Tensor head_input_;
    bool has_run_ = false;
};

} // namespace flowcast
