#include "flowcast/checkpoint.hpp"

#include "flowcast/errors.hpp"
#include "flowcast/util.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>

namespace flowcast {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32(const std::string& s, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

std::uint64_t read_u64(const std::string& s, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

void append_f64(std::string& out, double d) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
    append_u64(out, bits);
}

double read_f64(const std::string& s, std::size_t at) {
    return std::bit_cast<double>(read_u64(s, at));
}

json config_to_json(const ModelConfig& c) {
    json j;
    j["arch"] = arch_name(c.arch);
    j["window"] = c.window;
    j["d_model"] = c.d_model;
    j["heads"] = c.heads;
    j["layers"] = c.layers;
    j["conv_filters"] = c.conv_filters;
    j["fc_pre"] = c.fc_pre;
    j["fc_head"] = c.fc_head;
    j["seed"] = c.seed;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    std::string name = j.at("arch").get<std::string>();
    auto arch = parse_arch(name);
    if (!arch) throw DataError("checkpoint header names unknown architecture '" + name + "'");
    c.arch = *arch;
    c.window = j.at("window").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.layers = j.at("layers").get<std::size_t>();
    c.conv_filters = j.at("conv_filters").get<std::size_t>();
    c.fc_pre = j.at("fc_pre").get<std::size_t>();
    c.fc_head = j.at("fc_head").get<std::vector<std::size_t>>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

} // namespace

void save_checkpoint(const Model& model, const NormalizationParams& norm,
                     const SplitRatios& ratios, const std::string& path) {
    json header;
    header["config"] = config_to_json(model.config());
    header["normalization"]["min"] = norm.min;
    header["normalization"]["max"] = norm.max;
    header["ratios"]["train"] = ratios.train;
    header["ratios"]["validation"] = ratios.validation;
    header["ratios"]["test"] = ratios.test;

    json manifest = json::array();
    std::string payload;
    std::size_t offset = 0;
    for (const NamedParam& p : model.parameters()) {
        json entry;
        entry["name"] = p.first;
        entry["shape"] = p.second.shape();
        entry["offset"] = offset;
        manifest.push_back(std::move(entry));
        for (double v : p.second.values()) append_f64(payload, v);
        offset += p.second.numel();
    }
    header["params"] = std::move(manifest);

    std::string header_bytes = header.dump();
    std::string body = header_bytes + payload;
    std::uint64_t checksum = util::fnv1a(body.data(), body.size());

    std::string out;
    out.reserve(8 + 4 + 8 + body.size() + 8);
    out.append(kMagic, sizeof(kMagic));
    append_u32(out, kVersion);
    append_u64(out, header_bytes.size());
    out += body;
    append_u64(out, checksum);
    util::write_file_atomic(path, out);
}

CheckpointData load_checkpoint(const std::string& path) {
    std::string raw = util::read_file(path);
    constexpr std::size_t kPrefix = 8 + 4 + 8;
    if (raw.size() < kPrefix + 8)
        throw DataError("checkpoint " + path + " is truncated (" + std::to_string(raw.size()) + " bytes)");
    if (std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
        throw DataError("checkpoint " + path + " has wrong magic bytes");
    std::uint32_t version = read_u32(raw, 8);
    if (version != kVersion)
        throw DataError("checkpoint " + path + " has unsupported format version " + std::to_string(version));
    std::uint64_t header_len = read_u64(raw, 12);
    if (kPrefix + header_len + 8 > raw.size())
        throw DataError("checkpoint " + path + " header length exceeds file size");

    std::size_t body_len = raw.size() - kPrefix - 8;
    std::uint64_t stored = read_u64(raw, kPrefix + body_len);
    std::uint64_t actual = util::fnv1a(raw.data() + kPrefix, body_len);
    if (stored != actual)
        throw DataError("checkpoint " + path + " failed checksum verification");

    json header;
    try {
        header = json::parse(raw.substr(kPrefix, header_len));
    } catch (const json::exception& e) {
        throw DataError("checkpoint " + path + " has malformed header: " + e.what());
    }

    CheckpointData data{Model(config_from_json(header.at("config"))), {}, {}};
    const json& jnorm = header.at("normalization");
    for (int m = 0; m < kModes; ++m) {
        data.norm.min[static_cast<std::size_t>(m)] = jnorm.at("min").at(m).get<double>();
        data.norm.max[static_cast<std::size_t>(m)] = jnorm.at("max").at(m).get<double>();
    }
    data.ratios.train = header.at("ratios").at("train").get<double>();
    data.ratios.validation = header.at("ratios").at("validation").get<double>();
    data.ratios.test = header.at("ratios").at("test").get<double>();

    const json& manifest = header.at("params");
    auto& params = data.model.parameters();
    if (manifest.size() != params.size())
        throw DataError("checkpoint " + path + " parameter manifest size mismatch");
    std::size_t total = 0;
    for (const NamedParam& p : params) total += p.second.numel();
    std::size_t payload_start = kPrefix + header_len;
    if (header_len + total * 8 != body_len)
        throw DataError("checkpoint " + path + " payload size mismatch");

    for (std::size_t i = 0; i < params.size(); ++i) {
        const json& entry = manifest.at(i);
        if (entry.at("name").get<std::string>() != params[i].first)
            throw DataError("checkpoint " + path + " parameter order mismatch at " + params[i].first);
        if (entry.at("shape").get<Shape>() != params[i].second.shape())
            throw DataError("checkpoint " + path + " shape mismatch for " + params[i].first);
        std::size_t off = entry.at("offset").get<std::size_t>();
        if (off + params[i].second.numel() > total)
            throw DataError("checkpoint " + path + " offset out of range for " + params[i].first);
        std::vector<double>& dst = params[i].second.values();
        for (std::size_t k = 0; k < dst.size(); ++k)
            dst[k] = read_f64(raw, payload_start + (off + k) * 8);
    }
    return data;
}

} // namespace flowcast
