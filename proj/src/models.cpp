#include "flowcast/models.hpp"

#include "flowcast/errors.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace flowcast {

namespace {

constexpr std::size_t kM = static_cast<std::size_t>(kModes);

struct ArchEntry {
    Arch arch;
    const char* name;
};

constexpr ArchEntry kArchTable[kArchCount] = {
    {Arch::Full, "res-transformer"},
    {Arch::VariantA, "a"},
    {Arch::VariantB, "b"},
    {Arch::VariantC, "c"},
    {Arch::VariantD, "d"},
    {Arch::VariantE, "e"},
    {Arch::BPNN, "bpnn"},
    {Arch::CNN1D, "cnn1d"},
    {Arch::CNN2D, "cnn2d"},
    {Arch::LSTM, "lstm"},
    {Arch::ConvLSTM, "convlstm"},
    {Arch::STResNet, "stresnet"},
    {Arch::Transformer, "transformer"},
};

} // namespace

const char* arch_name(Arch arch) {
    for (const ArchEntry& e : kArchTable)
        if (e.arch == arch) return e.name;
    throw ConfigError("unknown architecture enum value");
}

std::optional<Arch> parse_arch(std::string_view name) {
    for (const ArchEntry& e : kArchTable)
        if (name == e.name) return e.arch;
    return std::nullopt;
}

std::vector<Arch> all_archs() {
    std::vector<Arch> v;
    for (const ArchEntry& e : kArchTable) v.push_back(e.arch);
    return v;
}

bool is_res_variant(Arch arch) {
    switch (arch) {
    case Arch::Full:
    case Arch::VariantA:
    case Arch::VariantB:
    case Arch::VariantC:
    case Arch::VariantD:
    case Arch::VariantE:
        return true;
    default:
        return false;
    }
}

void ModelConfig::validate() const {
    if (window < 1 || window >= static_cast<std::size_t>(kSlotsPerDay))
        throw ConfigError("model window must be in [1, 35], got " + std::to_string(window));
    if (d_model < 1) throw ConfigError("d_model must be positive");
    if (heads < 1) throw ConfigError("heads must be positive");
    if (layers < 1) throw ConfigError("layers must be positive");
    if (conv_filters < 1) throw ConfigError("conv_filters must be positive");
    if (fc_pre < 1) throw ConfigError("fc_pre width must be positive");
    if (fc_head.empty() || fc_head.back() != kM)
        throw ConfigError("fc_head widths must end in 3 (one output per mode)");
    for (std::size_t w : fc_head)
        if (w < 1) throw ConfigError("fc_head widths must be positive");
}

namespace {

struct FcLayer {
    Tensor w, b;
};

struct LstmGate {
    Tensor w_x, w_h, b;
};

struct LstmCell {
    LstmGate i, f, g, o;
};

struct ConvGate {
    Tensor k, b;
};

struct ConvLstmCell {
    ConvGate i, f, g, o;
    Tensor hi, hf, hg, ho; // recurrent convs, no bias
};

} // namespace

struct Model::Impl {
    // residual family (Full, A-E)
    std::vector<ModifiedLayerParams> mod_layers;
    std::vector<StandardLayerParams> std_layers;
    FcLayer pre1, pre2; // row-wise L->fc_pre->L
    bool has_pre_fc = false;
    bool has_convs = false;
    bool has_shortcut = false;
    Tensor conv1_k, conv1_b, conv2_k, conv2_b; // post-attention / CNN / ST-ResNet convs

    std::vector<LstmCell> lstm;
    std::vector<ConvLstmCell> convlstm;
    static constexpr std::size_t lstm_hidden = 32;
    static constexpr std::size_t convlstm_filters = 64;

    std::vector<FcLayer> head;
};

namespace {

/// Registers uniquely named parameters; weights get Xavier-uniform values
/// from the seeded stream, biases start at zero.
struct ParamBuilder {
    std::vector<NamedParam>& reg;
    std::mt19937_64 rng;
    std::set<std::string> names;

    Tensor weight(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
        double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        std::vector<double> v(n);
        for (double& x : v) x = dist(rng);
        return record(name, Tensor::from_vector(std::move(shape), std::move(v), true));
    }

    Tensor bias(const std::string& name, Shape shape) {
        return record(name, Tensor::zeros(std::move(shape), true));
    }

    FcLayer fc(const std::string& name, std::size_t in, std::size_t out) {
        return {weight(name + ".weight", {in, out}, in, out), bias(name + ".bias", {out})};
    }

    Tensor record(const std::string& name, Tensor t) {
        if (!names.insert(name).second) throw ConfigError("duplicate parameter name " + name);
        reg.emplace_back(name, t);
        return t;
    }
};

ConvQParams build_conv_q(ParamBuilder& b, const std::string& prefix, const ModelConfig& cfg) {
    ConvQParams p;
    std::size_t f = cfg.conv_filters;
    p.conv1_kernel = b.weight(prefix + ".conv1.kernel", {f, 1, 3, 3}, 9, f * 9);
    p.conv1_bias = b.bias(prefix + ".conv1.bias", {f});
    p.conv2_kernel = b.weight(prefix + ".conv2.kernel", {1, f, 3, 3}, f * 9, 9);
    p.conv2_bias = b.bias(prefix + ".conv2.bias", {1});
    for (std::size_t h = 0; h < cfg.heads; ++h)
        p.head_proj.push_back(b.weight(prefix + ".head" + std::to_string(h) + ".proj",
                                       {cfg.window, cfg.d_model}, cfg.window, cfg.d_model));
    return p;
}

ModifiedLayerParams build_modified_layer(ParamBuilder& b, const std::string& prefix, const ModelConfig& cfg) {
    ModifiedLayerParams p;
    p.conv_q = build_conv_q(b, prefix + ".conv_q", cfg);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        std::string hp = prefix + ".head" + std::to_string(h);
        p.w_k.push_back(b.weight(hp + ".w_k", {cfg.window, cfg.d_model}, cfg.window, cfg.d_model));
        p.w_v.push_back(b.weight(hp + ".w_v", {cfg.window, cfg.d_model}, cfg.window, cfg.d_model));
    }
    std::size_t cat = cfg.heads * cfg.d_model;
    p.out_w = b.weight(prefix + ".out.weight", {cat, cfg.window}, cat, cfg.window);
    p.out_b = b.bias(prefix + ".out.bias", {cfg.window});
    return p;
}

StandardLayerParams build_standard_layer(ParamBuilder& b, const std::string& prefix,
                                         std::size_t width, std::size_t heads, std::size_t d) {
    StandardLayerParams p;
    for (std::size_t h = 0; h < heads; ++h) {
        std::string hp = prefix + ".head" + std::to_string(h);
        AttentionHeadParams head;
        head.w_q = b.weight(hp + ".w_q", {width, d}, width, d);
        head.w_k = b.weight(hp + ".w_k", {width, d}, width, d);
        head.w_v = b.weight(hp + ".w_v", {width, d}, width, d);
        p.heads.push_back(std::move(head));
    }
    std::size_t cat = heads * d;
    p.out_w = b.weight(prefix + ".out.weight", {cat, width}, cat, width);
    p.out_b = b.bias(prefix + ".out.bias", {width});
    return p;
}

void build_head(ParamBuilder& b, std::vector<FcLayer>& head, std::size_t in,
                const std::vector<std::size_t>& widths) {
    for (std::size_t i = 0; i < widths.size(); ++i) {
        head.push_back(b.fc("head.fc" + std::to_string(i), in, widths[i]));
        in = widths[i];
    }
}

LstmCell build_lstm_cell(ParamBuilder& b, const std::string& prefix, std::size_t in, std::size_t hidden) {
    auto gate = [&](const char* g) {
        LstmGate lg;
        std::string gp = prefix + "." + g;
        lg.w_x = b.weight(gp + ".w_x", {in, hidden}, in, hidden);
        lg.w_h = b.weight(gp + ".w_h", {hidden, hidden}, hidden, hidden);
        lg.b = b.bias(gp + ".bias", {hidden});
        return lg;
    };
    return {gate("i"), gate("f"), gate("g"), gate("o")};
}

ConvLstmCell build_convlstm_cell(ParamBuilder& b, const std::string& prefix, std::size_t in, std::size_t filters) {
    auto gate = [&](const char* g) {
        ConvGate cg;
        std::string gp = prefix + "." + g;
        cg.k = b.weight(gp + ".kernel", {filters, in, 3, 3}, in * 9, filters * 9);
        cg.b = b.bias(gp + ".bias", {filters});
        return cg;
    };
    auto hconv = [&](const char* g) {
        return b.weight(prefix + "." + g + ".h_kernel", {filters, filters, 3, 3}, filters * 9, filters * 9);
    };
    ConvLstmCell cell{gate("i"), gate("f"), gate("g"), gate("o"), {}, {}, {}, {}};
    cell.hi = hconv("i");
    cell.hf = hconv("f");
    cell.hg = hconv("g");
    cell.ho = hconv("o");
    return cell;
}

} // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
    // Recipes pinned by the evaluation protocol override the generic knobs.
    if (config_.arch == Arch::VariantE) config_.layers = 8;
    if (config_.arch == Arch::Transformer) {
        config_.layers = 6;
        config_.heads = 8;
        config_.d_model = 32;
    }
    config_.validate();
    impl_ = std::make_shared<Impl>();
    ParamBuilder b{params_, std::mt19937_64(config_.seed), {}};
    const std::size_t L = config_.window;

    switch (config_.arch) {
    case Arch::Full:
    case Arch::VariantA:
    case Arch::VariantB:
    case Arch::VariantC:
    case Arch::VariantD:
    case Arch::VariantE: {
        bool modified = config_.arch != Arch::VariantA && config_.arch != Arch::VariantE;
        for (std::size_t l = 0; l < config_.layers; ++l) {
            std::string prefix = "layer" + std::to_string(l);
            if (modified)
                impl_->mod_layers.push_back(build_modified_layer(b, prefix, config_));
            else
                impl_->std_layers.push_back(build_standard_layer(b, prefix, L, config_.heads, config_.d_model));
        }
        impl_->has_pre_fc = true;
        impl_->pre1 = b.fc("pre.fc0", L, config_.fc_pre);
        impl_->pre2 = b.fc("pre.fc1", config_.fc_pre, L);
        impl_->has_convs = config_.arch != Arch::VariantB && config_.arch != Arch::VariantC;
        impl_->has_shortcut = config_.arch != Arch::VariantB && config_.arch != Arch::VariantD;
        if (impl_->has_convs) {
            std::size_t f = config_.conv_filters;
            impl_->conv1_k = b.weight("res.conv1.kernel", {f, 1, 3, 3}, 9, f * 9);
            impl_->conv1_b = b.bias("res.conv1.bias", {f});
            impl_->conv2_k = b.weight("res.conv2.kernel", {1, f, 3, 3}, f * 9, 9);
            impl_->conv2_b = b.bias("res.conv2.bias", {1});
        }
        build_head(b, impl_->head, kM * L, config_.fc_head);
        break;
    }
    case Arch::BPNN:
        build_head(b, impl_->head, kM * L, {128, 32, kM});
        break;
    case Arch::CNN1D:
        impl_->conv1_k = b.weight("conv1.kernel", {16, kM, 1, 3}, kM * 3, 16 * 3);
        impl_->conv1_b = b.bias("conv1.bias", {16});
        build_head(b, impl_->head, 16 * L, {64, kM});
        break;
    case Arch::CNN2D:
        impl_->conv1_k = b.weight("conv1.kernel", {8, 1, 3, 3}, 9, 8 * 9);
        impl_->conv1_b = b.bias("conv1.bias", {8});
        build_head(b, impl_->head, 8 * kM * L, {64, 32, kM});
        break;
    case Arch::LSTM: {
        std::size_t in = kM;
        for (int l = 0; l < 3; ++l) {
            impl_->lstm.push_back(build_lstm_cell(b, "lstm" + std::to_string(l), in, Impl::lstm_hidden));
            in = Impl::lstm_hidden;
        }
        build_head(b, impl_->head, Impl::lstm_hidden, {128, 64, 32, kM});
        break;
    }
    case Arch::ConvLSTM: {
        std::size_t in = 1;
        for (int l = 0; l < 3; ++l) {
            impl_->convlstm.push_back(
                build_convlstm_cell(b, "convlstm" + std::to_string(l), in, Impl::convlstm_filters));
            in = Impl::convlstm_filters;
        }
        build_head(b, impl_->head, Impl::convlstm_filters * kM * L, {64, 32, kM});
        break;
    }
    case Arch::STResNet:
        impl_->conv1_k = b.weight("res.conv1.kernel", {8, 1, 3, 3}, 9, 8 * 9);
        impl_->conv1_b = b.bias("res.conv1.bias", {8});
        impl_->conv2_k = b.weight("res.conv2.kernel", {1, 8, 3, 3}, 8 * 9, 9);
        impl_->conv2_b = b.bias("res.conv2.bias", {1});
        build_head(b, impl_->head, kM * L, {128, 64, 32, kM});
        break;
    case Arch::Transformer:
        for (std::size_t l = 0; l < config_.layers; ++l)
            impl_->std_layers.push_back(
                build_standard_layer(b, "layer" + std::to_string(l), L, config_.heads, config_.d_model));
        build_head(b, impl_->head, kM * L, {128, 64, 32, kM});
        break;
    }
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for (const NamedParam& p : params_) n += p.second.numel();
    return n;
}

namespace {

Tensor head_stack(const std::vector<FcLayer>& head, Tensor h) {
    for (std::size_t i = 0; i < head.size(); ++i) {
        h = linear(h, head[i].w, head[i].b);
        if (i + 1 < head.size()) h = relu(h);
    }
    return h;
}

} // namespace

Tensor Model::run_sample(const Tensor& x) {
    const std::size_t L = config_.window;
    scores_.clear();
    Tensor out;

    switch (config_.arch) {
    case Arch::Full:
    case Arch::VariantA:
    case Arch::VariantB:
    case Arch::VariantC:
    case Arch::VariantD:
    case Arch::VariantE: {
        Tensor h = x;
        std::size_t layer_idx = 0;
        auto record = [&](const std::vector<Tensor>& layer_scores) {
            for (std::size_t i = 0; i < layer_scores.size(); ++i)
                scores_.push_back(to_score_matrix(layer_idx, i, layer_scores[i]));
            ++layer_idx;
        };
        if (!impl_->mod_layers.empty()) {
            for (const ModifiedLayerParams& p : impl_->mod_layers) {
                std::vector<Tensor> s;
                h = modified_transformer_layer(h, p, &s);
                record(s);
            }
        } else {
            for (const StandardLayerParams& p : impl_->std_layers) {
                std::vector<Tensor> s;
                h = standard_transformer_layer(h, p, &s);
                record(s);
            }
        }
        Tensor info = linear(relu(linear(h, impl_->pre1.w, impl_->pre1.b)), impl_->pre2.w, impl_->pre2.b);
        Tensor map = info;
        if (impl_->has_convs) {
            Tensor img = reshape(info, {1, kM, L});
            Tensor conv = conv2d(relu(conv2d(img, impl_->conv1_k, impl_->conv1_b, 1, 1)),
                                 impl_->conv2_k, impl_->conv2_b, 1, 1);
            map = reshape(conv, {kM, L});
        }
        Tensor head_in = impl_->has_shortcut ? add(map, x) : map;
        head_input_ = head_in;
        out = head_stack(impl_->head, reshape(head_in, {1, kM * L}));
        break;
    }
    case Arch::BPNN: {
        head_input_ = x;
        out = head_stack(impl_->head, reshape(x, {1, kM * L}));
        break;
    }
    case Arch::CNN1D: {
        Tensor img = reshape(x, {kM, 1, L}); // modes as channels
        Tensor fm = relu(conv2d(img, impl_->conv1_k, impl_->conv1_b, 1, 1, 0, 1));
        head_input_ = fm;
        out = head_stack(impl_->head, reshape(fm, {1, 16 * L}));
        break;
    }
    case Arch::CNN2D: {
        Tensor img = reshape(x, {1, kM, L});
        Tensor fm = relu(conv2d(img, impl_->conv1_k, impl_->conv1_b, 1, 1));
        head_input_ = fm;
        out = head_stack(impl_->head, reshape(fm, {1, 8 * kM * L}));
        break;
    }
    case Arch::LSTM: {
        const std::size_t hdim = Impl::lstm_hidden;
        std::vector<Tensor> hs(3), cs(3);
        for (int l = 0; l < 3; ++l) {
            hs[l] = Tensor::zeros({1, hdim});
            cs[l] = Tensor::zeros({1, hdim});
        }
        for (std::size_t t = 0; t < L; ++t) {
            std::vector<double> col(kM);
            for (std::size_t m = 0; m < kM; ++m) col[m] = x.values()[m * L + t];
            Tensor inp = Tensor::from_vector({1, kM}, std::move(col));
            for (int l = 0; l < 3; ++l) {
                const LstmCell& cell = impl_->lstm[static_cast<std::size_t>(l)];
                Tensor i = sigmoid(add(linear(inp, cell.i.w_x, cell.i.b), matmul(hs[l], cell.i.w_h)));
                Tensor f = sigmoid(add(linear(inp, cell.f.w_x, cell.f.b), matmul(hs[l], cell.f.w_h)));
                Tensor g = tanh(add(linear(inp, cell.g.w_x, cell.g.b), matmul(hs[l], cell.g.w_h)));
                Tensor o = sigmoid(add(linear(inp, cell.o.w_x, cell.o.b), matmul(hs[l], cell.o.w_h)));
                cs[l] = add(mul(f, cs[l]), mul(i, g));
                hs[l] = mul(o, tanh(cs[l]));
                inp = hs[l];
            }
        }
        head_input_ = hs[2];
        out = head_stack(impl_->head, hs[2]);
        break;
    }
    case Arch::ConvLSTM: {
        // Single-step sequence from zero state: f*c0 and the recurrent
        // convolutions vanish identically, so c = i*g and h = o*tanh(c); the
        // skipped parameters keep exactly-zero gradients.
        Tensor frame = reshape(x, {1, kM, L});
        for (int l = 0; l < 3; ++l) {
            const ConvLstmCell& cell = impl_->convlstm[static_cast<std::size_t>(l)];
            Tensor i = sigmoid(conv2d(frame, cell.i.k, cell.i.b, 1, 1));
            Tensor g = tanh(conv2d(frame, cell.g.k, cell.g.b, 1, 1));
            Tensor o = sigmoid(conv2d(frame, cell.o.k, cell.o.b, 1, 1));
            frame = mul(o, tanh(mul(i, g)));
        }
        head_input_ = frame;
        out = head_stack(impl_->head, reshape(frame, {1, Impl::convlstm_filters * kM * L}));
        break;
    }
    case Arch::STResNet: {
        Tensor img = reshape(x, {1, kM, L});
        Tensor conv = conv2d(relu(conv2d(img, impl_->conv1_k, impl_->conv1_b, 1, 1)),
                             impl_->conv2_k, impl_->conv2_b, 1, 1);
        Tensor sum = add(reshape(conv, {kM, L}), x);
        head_input_ = sum;
        out = head_stack(impl_->head, reshape(sum, {1, kM * L}));
        break;
    }
    case Arch::Transformer: {
        Tensor h = x;
        std::size_t layer_idx = 0;
        for (const StandardLayerParams& p : impl_->std_layers) {
            std::vector<Tensor> s;
            h = standard_transformer_layer(h, p, &s);
            for (std::size_t i = 0; i < s.size(); ++i)
                scores_.push_back(to_score_matrix(layer_idx, i, s[i]));
            ++layer_idx;
        }
        head_input_ = h;
        out = head_stack(impl_->head, reshape(h, {1, kM * L}));
        break;
    }
    }

    has_run_ = true;
    return out;
}

Tensor Model::forward_sample(const Tensor& x) {
    if (x.shape().size() != 2 || x.dim(0) != kM || x.dim(1) != config_.window)
        throw ShapeError("forward_sample: expected (3," + std::to_string(config_.window) + ") input");
    return run_sample(x);
}

Tensor Model::forward(const Tensor& batch) {
    if (batch.shape().size() != 3 || batch.dim(1) != kM || batch.dim(2) != config_.window)
        throw ShapeError("forward: expected (B,3," + std::to_string(config_.window) + ") batch, got " +
                         std::to_string(batch.shape().size()) + "-d input");
    std::size_t b = batch.dim(0);
    if (b == 0) throw ShapeError("forward: empty batch");
    std::size_t stride = kM * config_.window;
    std::vector<Tensor> rows;
    rows.reserve(b);
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> sub(batch.values().begin() + static_cast<std::ptrdiff_t>(i * stride),
                                batch.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
        rows.push_back(run_sample(Tensor::from_vector({kM, config_.window}, std::move(sub))));
    }
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
}

const std::vector<ScoreMatrix>& Model::last_scores() const {
    if (!has_run_) throw Error("last_scores: no forward pass has run yet");
    if (scores_.empty())
        throw Error(std::string("last_scores: architecture ") + arch_name(config_.arch) +
                    " records no attention scores");
    return scores_;
}

const Tensor& Model::last_head_input() const {
    if (!has_run_) throw Error("last_head_input: no forward pass has run yet");
    return head_input_;
}

} // namespace flowcast
