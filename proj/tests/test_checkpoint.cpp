#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowcast/checkpoint.hpp"
#include "flowcast/errors.hpp"
#include "flowcast/models.hpp"
#include "flowcast/util.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

using namespace flowcast;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("flowcast-ckpt-test-" + std::to_string(::getpid()) + "-" +
                std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    static inline int counter = 0;
};

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.window = 5;
    cfg.d_model = 3;
    cfg.heads = 2;
    cfg.layers = 1;
    cfg.fc_head = {8, 3};
    cfg.seed = 17;
    return cfg;
}

NormalizationParams sample_norm() {
    NormalizationParams norm;
    norm.min = {10.0, 20.0, 30.0};
    norm.max = {1000.0, 2000.0, 3000.0};
    return norm;
}

SplitRatios sample_ratios() { return {0.6, 0.15, 0.25}; }

Tensor random_batch(std::size_t window, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> values(2 * 3 * window);
    for (double& v : values) v = dist(rng);
    return Tensor::from_vector({2, 3, window}, std::move(values));
}

constexpr std::size_t kPrefix = 8 + 4 + 8; // magic + version + header length

std::uint64_t trailer_u64(const std::string& s, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

void put_u64(std::string& s, std::size_t at, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s[at + i] = static_cast<char>((v >> (8 * i)) & 0xff);
}

// Splits a checkpoint file into (header JSON text, raw payload bytes).
std::pair<std::string, std::string> split_body(const std::string& raw) {
    std::uint64_t header_len = trailer_u64(raw, 12);
    std::string header = raw.substr(kPrefix, header_len);
    std::string payload = raw.substr(kPrefix + header_len, raw.size() - kPrefix - header_len - 8);
    return {header, payload};
}

// Reassembles a well-formed file (fresh length + checksum) around a tampered
// header so only the targeted semantic check can fail.
std::string rebuild(const std::string& raw, const std::string& new_header,
                    const std::string& payload) {
    std::string out = raw.substr(0, kPrefix);
    put_u64(out, 12, new_header.size());
    std::string body = new_header + payload;
    out += body;
    std::string trailer(8, '\0');
    put_u64(trailer, 0, util::fnv1a(body.data(), body.size()));
    out += trailer;
    return out;
}

} // namespace

TEST_CASE("checkpoint round-trip") {
    TempDir dir;
    Model model(small_config());
    std::string path_a = dir.file("a.fck");
    save_checkpoint(model, sample_norm(), sample_ratios(), path_a);

    SUBCASE("save, load, save again is byte-identical") {
        CheckpointData loaded = load_checkpoint(path_a);
        std::string path_b = dir.file("b.fck");
        save_checkpoint(loaded.model, loaded.norm, loaded.ratios, path_b);
        CHECK(util::read_file(path_a) == util::read_file(path_b));
    }

    SUBCASE("loaded model computes bit-identical forward passes") {
        CheckpointData loaded = load_checkpoint(path_a);
        Tensor batch = random_batch(model.config().window, 3);
        Tensor a = model.forward(batch);
        Tensor b = loaded.model.forward(batch);
        REQUIRE(a.shape() == b.shape());
        CHECK(a.values() == b.values()); // exact, not approximate
    }

    SUBCASE("parameters round-trip exactly") {
        CheckpointData loaded = load_checkpoint(path_a);
        REQUIRE(loaded.model.parameters().size() == model.parameters().size());
        for (std::size_t i = 0; i < model.parameters().size(); ++i) {
            CHECK(loaded.model.parameters()[i].first == model.parameters()[i].first);
            CHECK(loaded.model.parameters()[i].second.values() ==
                  model.parameters()[i].second.values());
        }
    }

    SUBCASE("config, normalization, and ratios survive the trip") {
        CheckpointData loaded = load_checkpoint(path_a);
        CHECK(loaded.model.config().arch == Arch::Full);
        CHECK(loaded.model.config().window == 5);
        CHECK(loaded.model.config().d_model == 3);
        CHECK(loaded.model.config().heads == 2);
        CHECK(loaded.model.config().layers == 1);
        CHECK(loaded.model.config().fc_head == std::vector<std::size_t>{8, 3});
        CHECK(loaded.model.config().seed == 17);
        CHECK(loaded.norm.min == sample_norm().min);
        CHECK(loaded.norm.max == sample_norm().max);
        CHECK(loaded.ratios.train == sample_ratios().train);
        CHECK(loaded.ratios.validation == sample_ratios().validation);
        CHECK(loaded.ratios.test == sample_ratios().test);
    }

    SUBCASE("trained values round-trip, not just the initialization") {
        // Mutate a few parameters to distinguish storage from re-derivation.
        Model mutated(small_config());
        mutated.parameters()[0].second.values()[0] = 123.456789;
        mutated.parameters().back().second.values().back() = -9.87654321e-5;
        std::string path_m = dir.file("m.fck");
        save_checkpoint(mutated, sample_norm(), sample_ratios(), path_m);
        CheckpointData loaded = load_checkpoint(path_m);
        CHECK(loaded.model.parameters()[0].second.values()[0] == 123.456789);
        CHECK(loaded.model.parameters().back().second.values().back() == -9.87654321e-5);
    }

    SUBCASE("every architecture round-trips") {
        for (Arch arch : all_archs()) {
            ModelConfig cfg = small_config();
            cfg.arch = arch;
            Model m(cfg);
            std::string p = dir.file(std::string("arch-") + arch_name(arch) + ".fck");
            save_checkpoint(m, sample_norm(), sample_ratios(), p);
            CheckpointData loaded = load_checkpoint(p);
            CHECK(loaded.model.config().arch == arch);
            CHECK(loaded.model.parameter_count() == m.parameter_count());
        }
    }
}

TEST_CASE("checkpoint corruption detection") {
    TempDir dir;
    Model model(small_config());
    std::string path = dir.file("base.fck");
    save_checkpoint(model, sample_norm(), sample_ratios(), path);
    std::string raw = util::read_file(path);

    SUBCASE("flipped payload byte fails the checksum") {
        std::string bad = raw;
        bad[bad.size() - 20] = static_cast<char>(bad[bad.size() - 20] ^ 0x01);
        std::string p = dir.file("payload.fck");
        util::write_file_atomic(p, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("checksum"), DataError);
    }

    SUBCASE("flipped header byte fails the checksum") {
        std::string bad = raw;
        bad[kPrefix + 2] = static_cast<char>(bad[kPrefix + 2] ^ 0x10);
        std::string p = dir.file("header.fck");
        util::write_file_atomic(p, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("checksum"), DataError);
    }

    SUBCASE("corrupted trailer fails the checksum") {
        std::string bad = raw;
        bad.back() = static_cast<char>(bad.back() ^ 0xff);
        std::string p = dir.file("trailer.fck");
        util::write_file_atomic(p, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("checksum"), DataError);
    }

    SUBCASE("wrong magic bytes") {
        std::string bad = raw;
        bad[0] = 'X';
        std::string p = dir.file("magic.fck");
        util::write_file_atomic(p, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("magic"), DataError);
    }

    SUBCASE("unsupported format version") {
        std::string bad = raw;
        bad[8] = 2; // little-endian u32 version field
        std::string p = dir.file("version.fck");
        util::write_file_atomic(p, bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("version"), DataError);
    }

    SUBCASE("truncated files are rejected at any cut point") {
        std::string p = dir.file("trunc.fck");
        util::write_file_atomic(p, raw.substr(0, 10));
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("truncated"), DataError);
        util::write_file_atomic(p, raw.substr(0, kPrefix + 4));
        CHECK_THROWS_AS(load_checkpoint(p), DataError);
        util::write_file_atomic(p, raw.substr(0, raw.size() / 2));
        CHECK_THROWS_AS(load_checkpoint(p), DataError);
        util::write_file_atomic(p, raw.substr(0, raw.size() - 1));
        CHECK_THROWS_AS(load_checkpoint(p), DataError);
    }

    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_checkpoint(dir.file("nope.fck")), Error);
    }

    SUBCASE("manifest name tamper is caught after checksum repair") {
        auto [header_text, payload] = split_body(raw);
        nlohmann::json header = nlohmann::json::parse(header_text);
        header["params"][0]["name"] = "bogus.parameter";
        std::string p = dir.file("name.fck");
        util::write_file_atomic(p, rebuild(raw, header.dump(), payload));
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("order mismatch"), DataError);
    }

    SUBCASE("manifest shape tamper is caught") {
        auto [header_text, payload] = split_body(raw);
        nlohmann::json header = nlohmann::json::parse(header_text);
        // Transpose the recorded shape: same element count, different layout.
        auto shape = header["params"][0]["shape"].get<std::vector<std::size_t>>();
        REQUIRE(shape.size() >= 2);
        std::swap(shape.front(), shape.back());
        REQUIRE(shape != header["params"][0]["shape"].get<std::vector<std::size_t>>());
        header["params"][0]["shape"] = shape;
        std::string p = dir.file("shape.fck");
        util::write_file_atomic(p, rebuild(raw, header.dump(), payload));
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("shape mismatch"), DataError);
    }

    SUBCASE("manifest offset tamper is caught") {
        auto [header_text, payload] = split_body(raw);
        nlohmann::json header = nlohmann::json::parse(header_text);
        header["params"].back()["offset"] =
            header["params"].back()["offset"].get<std::size_t>() + 1;
        std::string p = dir.file("offset.fck");
        util::write_file_atomic(p, rebuild(raw, header.dump(), payload));
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("offset"), DataError);
    }

    SUBCASE("dropped manifest entry is caught") {
        auto [header_text, payload] = split_body(raw);
        nlohmann::json header = nlohmann::json::parse(header_text);
        header["params"].erase(0);
        std::string p = dir.file("short.fck");
        util::write_file_atomic(p, rebuild(raw, header.dump(), payload));
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("manifest size"), DataError);
    }

    SUBCASE("unknown architecture name is caught") {
        auto [header_text, payload] = split_body(raw);
        nlohmann::json header = nlohmann::json::parse(header_text);
        header["config"]["arch"] = "perceptron-9000";
        std::string p = dir.file("arch.fck");
        util::write_file_atomic(p, rebuild(raw, header.dump(), payload));
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("unknown architecture"),
                             DataError);
    }

    SUBCASE("malformed header JSON is caught") {
        auto [header_text, payload] = split_body(raw);
        std::string broken = header_text;
        broken[0] = '?';
        std::string p = dir.file("json.fck");
        util::write_file_atomic(p, rebuild(raw, broken, payload));
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("header"), DataError);
    }

    SUBCASE("payload length mismatch is caught") {
        auto [header_text, payload] = split_body(raw);
        std::string p = dir.file("extra.fck");
        util::write_file_atomic(p, rebuild(raw, header_text, payload + std::string(8, '\0')));
        CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("payload size"), DataError);
    }
}
