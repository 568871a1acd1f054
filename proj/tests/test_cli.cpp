#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flowcast/util.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

const fs::path& work_dir() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / ("flowcast-cli-test-" + std::to_string(::getpid()));
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string flowcast_bin() {
    static std::string bin = [] {
        fs::path self = fs::read_symlink("/proc/self/exe");
        return (self.parent_path() / "flowcast").string();
    }();
    return bin;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    static int counter = 0;
    fs::path out_file = work_dir() / ("stdout-" + std::to_string(counter) + ".log");
    fs::path err_file = work_dir() / ("stderr-" + std::to_string(counter) + ".log");
    ++counter;
    std::string cmd = env_prefix + (env_prefix.empty() ? "" : " ") + flowcast_bin() + " " + args +
                      " > " + out_file.string() + " 2> " + err_file.string();
    int rc = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out_file);
    r.err = slurp(err_file);
    return r;
}

std::size_t count_lines(const std::string& text) {
    std::size_t n = 0;
    for (char c : text) n += c == '\n';
    return n;
}

// Shared fixture: one synthetic series and one trained checkpoint, built on
// first use so the expensive steps run exactly once for the whole suite.
struct Artifacts {
    fs::path data_csv;
    fs::path small_csv;
    fs::path train_dir;

    Artifacts() {
        data_csv = work_dir() / "hub.csv";
        RunResult synth = run_cli("synth --days 6 --seed 11 --out " + data_csv.string());
        REQUIRE(synth.code == 0);
        small_csv = work_dir() / "hub-small.csv";
        REQUIRE(run_cli("synth --days 4 --seed 12 --out " + small_csv.string()).code == 0);
        train_dir = work_dir() / "train-out";
        RunResult train = run_cli("train --data " + data_csv.string() + " --out " +
                                  train_dir.string() + " --epochs 3 --batch 8 --seed 5");
        REQUIRE(train.code == 0);
    }
};

const Artifacts& artifacts() {
    static Artifacts a;
    return a;
}

} // namespace

TEST_CASE("help and argument errors") {
    CHECK(run_cli("--help").code == 0);
    RunResult help = run_cli("--help");
    CHECK(help.out.find("synth") != std::string::npos);
    CHECK(help.out.find("train") != std::string::npos);
    CHECK(help.out.find("sweep") != std::string::npos);
    CHECK(run_cli("train --help").code == 0);

    CHECK(run_cli("").code == 2);                 // a subcommand is required
    CHECK(run_cli("frobnicate").code == 2);       // unknown subcommand
    CHECK(run_cli("synth --bogus-flag").code == 2);
    CHECK(run_cli("train").code == 2);            // missing --data
    RunResult missing = run_cli("train");
    CHECK(missing.err.find("--data") != std::string::npos);
}

TEST_CASE("synth output and determinism") {
    fs::path a = work_dir() / "synth-a.csv";
    fs::path b = work_dir() / "synth-b.csv";
    fs::path c = work_dir() / "synth-c.csv";

    SUBCASE("default profile emits 25 weekdays of 36 slots") {
        RunResult r = run_cli("synth --seed 3 --out " + a.string());
        CHECK(r.code == 0);
        std::string text = slurp(a);
        CHECK(count_lines(text) == 1 + 25 * 36);
        CHECK(text.rfind("timestamp,subway,taxi,bus\n", 0) == 0);
        CHECK(fs::exists(a.parent_path() / "manifest-synth.json"));
    }

    SUBCASE("--days overrides the weekday count") {
        RunResult r = run_cli("synth --days 6 --seed 3 --out " + a.string());
        CHECK(r.code == 0);
        CHECK(count_lines(slurp(a)) == 1 + 6 * 36);
        CHECK(run_cli("synth --days 0 --out " + a.string()).code == 2);
    }

    SUBCASE("same seed gives identical bytes, different seed differs") {
        CHECK(run_cli("synth --days 3 --seed 9 --out " + a.string()).code == 0);
        CHECK(run_cli("synth --days 3 --seed 9 --out " + b.string()).code == 0);
        CHECK(run_cli("synth --days 3 --seed 10 --out " + c.string()).code == 0);
        CHECK(slurp(a) == slurp(b));
        CHECK(slurp(a) != slurp(c));
    }

    SUBCASE("seed environment variable applies, explicit flag wins") {
        CHECK(run_cli("synth --days 3 --seed 9 --out " + a.string()).code == 0);
        CHECK(run_cli("synth --days 3 --out " + b.string(), "FLOWCAST_SEED=9").code == 0);
        CHECK(slurp(a) == slurp(b));
        CHECK(run_cli("synth --days 3 --seed 9 --out " + c.string(), "FLOWCAST_SEED=4").code == 0);
        CHECK(slurp(a) == slurp(c));
        CHECK(run_cli("synth --days 3 --out " + a.string(), "FLOWCAST_SEED=not-a-number").code == 2);
    }
}

TEST_CASE("train produces checkpoint, history, and manifest") {
    const Artifacts& art = artifacts();
    CHECK(fs::exists(art.train_dir / "checkpoint.fck"));
    CHECK(fs::exists(art.train_dir / "history.csv"));
    CHECK(fs::exists(art.train_dir / "manifest-train.json"));

    std::string history = slurp(art.train_dir / "history.csv");
    CHECK(count_lines(history) == 1 + 3); // header + one row per epoch
    CHECK(history.rfind("epoch,train_loss,val_loss,seconds\n", 0) == 0);

    json manifest = json::parse(slurp(art.train_dir / "manifest-train.json"));
    CHECK(manifest["command"] == "train");
    CHECK(manifest["config"]["epochs"] == 3);
    CHECK(manifest["config"]["model"] == "res-transformer");
    REQUIRE(manifest["inputs"].size() >= 1);
    REQUIRE(manifest["outputs"].size() >= 2);
    bool checkpoint_listed = false;
    for (const auto& entry : manifest["outputs"]) {
        std::string path = entry["path"];
        std::string digest = entry["fnv1a"];
        CHECK(flowcast::util::hex64(flowcast::util::fnv1a_file(path)) == digest);
        if (path.find("checkpoint.fck") != std::string::npos) checkpoint_listed = true;
    }
    CHECK(checkpoint_listed);
    CHECK(manifest["timings"]["total_seconds"].get<double>() >= 0.0);
}

TEST_CASE("training runs are reproducible byte for byte") {
    const Artifacts& art = artifacts();
    fs::path rerun = work_dir() / "train-rerun";
    RunResult r = run_cli("train --data " + art.data_csv.string() + " --out " + rerun.string() +
                          " --epochs 3 --batch 8 --seed 5");
    REQUIRE(r.code == 0);
    CHECK(slurp(art.train_dir / "checkpoint.fck") == slurp(rerun / "checkpoint.fck"));

    fs::path other_seed = work_dir() / "train-seed6";
    REQUIRE(run_cli("train --data " + art.data_csv.string() + " --out " + other_seed.string() +
                    " --epochs 3 --batch 8 --seed 6")
                .code == 0);
    CHECK(slurp(art.train_dir / "checkpoint.fck") != slurp(other_seed / "checkpoint.fck"));
}

TEST_CASE("train input validation exit codes") {
    const Artifacts& art = artifacts();
    CHECK(run_cli("train --data /nonexistent/file.csv --out " + (work_dir() / "x1").string())
              .code == 2);
    RunResult stage_tagged = run_cli("train --data /nonexistent/file.csv --out " +
                                     (work_dir() / "x2").string());
    CHECK(stage_tagged.err.find("load:") != std::string::npos);

    CHECK(run_cli("train --data " + art.data_csv.string() + " --model no-such-arch --out " +
                  (work_dir() / "x3").string())
              .code == 2);
    CHECK(run_cli("train --data " + art.data_csv.string() + " --ratios 0.5,0.5 --out " +
                  (work_dir() / "x4").string())
              .code == 2);

    // Divergence is an exit-1 runtime failure, not a usage error.
    RunResult diverged = run_cli("train --data " + art.data_csv.string() + " --model bpnn" +
                                 " --epochs 2 --lr 1e200 --out " + (work_dir() / "x5").string());
    CHECK(diverged.code == 1);
    CHECK(diverged.err.find("train:") != std::string::npos);
}

TEST_CASE("config file resolution") {
    const Artifacts& art = artifacts();
    fs::path cfg = work_dir() / "train.cfg";
    flowcast::util::write_file_atomic(cfg.string(),
                                      "model = bpnn\nepochs = 2\nbatch = 8\nseed = 21\n");
    fs::path dir = work_dir() / "train-cfg";
    RunResult r = run_cli("train --data " + art.small_csv.string() + " --config " + cfg.string() +
                          " --out " + dir.string());
    REQUIRE(r.code == 0);
    CHECK(count_lines(slurp(dir / "history.csv")) == 1 + 2);
    json manifest = json::parse(slurp(dir / "manifest-train.json"));
    CHECK(manifest["config"]["model"] == "bpnn");

    // Explicit flags beat config-file values.
    fs::path dir2 = work_dir() / "train-cfg-flag";
    RunResult r2 = run_cli("train --data " + art.small_csv.string() + " --config " + cfg.string() +
                           " --epochs 1 --out " + dir2.string());
    REQUIRE(r2.code == 0);
    CHECK(count_lines(slurp(dir2 / "history.csv")) == 1 + 1);

    fs::path bad = work_dir() / "bad.cfg";
    flowcast::util::write_file_atomic(bad.string(), "modle = bpnn\n");
    RunResult rb = run_cli("train --data " + art.small_csv.string() + " --config " + bad.string() +
                           " --out " + (work_dir() / "x6").string());
    CHECK(rb.code == 2);
    CHECK(rb.err.find("modle") != std::string::npos);
}

TEST_CASE("evaluate reports metrics from a checkpoint") {
    const Artifacts& art = artifacts();
    fs::path dir = work_dir() / "eval-out";
    RunResult r = run_cli("evaluate --model " + (art.train_dir / "checkpoint.fck").string() +
                          " --data " + art.data_csv.string() + " --out " + dir.string());
    REQUIRE(r.code == 0);
    CHECK(fs::exists(dir / "metrics.json"));
    CHECK(fs::exists(dir / "metrics.csv"));
    CHECK(fs::exists(dir / "manifest-evaluate.json"));

    json doc = json::parse(slurp(dir / "metrics.json"));
    REQUIRE(doc.size() == 4);
    std::vector<std::string> want_modes = {"subway", "taxi", "bus", "ALL"};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(doc[i]["mode"] == want_modes[i]);
        CHECK(doc[i]["rmse"].get<double>() >= 0.0);
        CHECK(doc[i]["mae"].get<double>() >= 0.0);
        CHECK(doc[i]["wmape"].get<double>() >= 0.0);
    }
    std::string csv = slurp(dir / "metrics.csv");
    CHECK(csv.rfind("mode,rmse,mae,wmape\n", 0) == 0);
    CHECK(count_lines(csv) == 5);

    // Different split selections give different numbers.
    fs::path vdir = work_dir() / "eval-val";
    REQUIRE(run_cli("evaluate --model " + (art.train_dir / "checkpoint.fck").string() + " --data " +
                    art.data_csv.string() + " --split validation --out " + vdir.string())
                .code == 0);
    CHECK(slurp(vdir / "metrics.csv") != csv);
    CHECK(run_cli("evaluate --model " + (art.train_dir / "checkpoint.fck").string() + " --data " +
                  art.data_csv.string() + " --split nope --out " + (work_dir() / "x7").string())
              .code == 2);
    CHECK(run_cli("evaluate --model /nonexistent.fck --data " + art.data_csv.string() + " --out " +
                  (work_dir() / "x8").string())
              .code == 2);
}

TEST_CASE("attention exports score matrices") {
    const Artifacts& art = artifacts();
    fs::path dir = work_dir() / "attn-out";
    RunResult r = run_cli("attention --model " + (art.train_dir / "checkpoint.fck").string() +
                          " --data " + art.data_csv.string() + " --sample-index 2 --out " +
                          dir.string());
    REQUIRE(r.code == 0);

    std::string csv = slurp(dir / "scores.csv");
    CHECK(csv.rfind("layer,head,mode,subway,taxi,bus\n", 0) == 0);
    CHECK(count_lines(csv) == 1 + 16 * 3); // 4 layers x 4 heads x 3 mode rows

    json doc = json::parse(slurp(dir / "scores.json"));
    REQUIRE(doc["matrices"].size() == 16);
    for (const auto& entry : doc["matrices"]) {
        CHECK(entry["layer"].get<int>() < 4);
        CHECK(entry["head"].get<int>() < 4);
        for (const auto& row : entry["rows"]) {
            double sum = 0.0;
            for (const auto& v : row) sum += v.get<double>();
            CHECK(std::abs(sum - 1.0) <= 1e-9);
        }
    }

    CHECK(run_cli("attention --model " + (art.train_dir / "checkpoint.fck").string() + " --data " +
                  art.data_csv.string() + " --sample-index 999999 --out " +
                  (work_dir() / "x9").string())
              .code == 2);

    // A non-attention architecture cannot export scores.
    fs::path bpnn_dir = work_dir() / "train-bpnn";
    REQUIRE(run_cli("train --data " + art.small_csv.string() + " --model bpnn --epochs 1 --out " +
                    bpnn_dir.string())
                .code == 0);
    RunResult no_attn = run_cli("attention --model " + (bpnn_dir / "checkpoint.fck").string() +
                                " --data " + art.small_csv.string() + " --out " +
                                (work_dir() / "x10").string());
    CHECK(no_attn.code == 2);
    CHECK(no_attn.err.find("attention") != std::string::npos);
}

TEST_CASE("ablate and compare write one row per model per mode") {
    const Artifacts& art = artifacts();
    std::string common = " --data " + art.small_csv.string() +
                         " --epochs 1 --batch 8 --window 5 --dmodel 4 --heads 2 --layers 1";

    fs::path adir = work_dir() / "ablate-out";
    RunResult ra = run_cli("ablate" + common + " --out " + adir.string());
    REQUIRE(ra.code == 0);
    std::string ablation = slurp(adir / "ablation.csv");
    CHECK(ablation.rfind("model,mode,rmse,mae,wmape,status\n", 0) == 0);
    CHECK(count_lines(ablation) == 1 + 6 * 4); // Full + A-E, 4 metric rows each
    CHECK(ablation.find("res-transformer,") != std::string::npos);
    for (const char* variant : {"\na,", "\nb,", "\nc,", "\nd,", "\ne,"})
        CHECK(ablation.find(variant) != std::string::npos);
    CHECK(fs::exists(adir / "manifest-ablate.json"));

    fs::path cdir = work_dir() / "compare-out";
    RunResult rc = run_cli("compare" + common + " --out " + cdir.string());
    REQUIRE(rc.code == 0);
    std::string comparison = slurp(cdir / "comparison.csv");
    CHECK(count_lines(comparison) == 1 + 8 * 4); // Full + 7 baselines
    for (const char* model : {"res-transformer", "bpnn", "cnn1d", "cnn2d", "lstm", "convlstm",
                              "stresnet", "transformer"})
        CHECK(comparison.find(std::string("\n") + model + ",") != std::string::npos);
}

TEST_CASE("sweep over singleton grids round-trips into train") {
    const Artifacts& art = artifacts();
    fs::path cfg = work_dir() / "sweep.cfg";
    flowcast::util::write_file_atomic(cfg.string(), "model = bpnn\n"
                                                    "epochs = 1\n"
                                                    "batch_grid = 8\n"
                                                    "d_grid = 4\n"
                                                    "heads_grid = 2\n"
                                                    "window_grid = 5,6\n");
    fs::path dir = work_dir() / "sweep-out";
    RunResult r = run_cli("sweep --data " + art.small_csv.string() + " --config " + cfg.string() +
                          " --out " + dir.string());
    REQUIRE(r.code == 0);

    std::string log = slurp(dir / "sweep_log.csv");
    CHECK(log.rfind("trial,d,heads,L,batch,val_rmse,val_mae,status\n", 0) == 0);
    CHECK(count_lines(log) == 1 + 5); // 1 + 1 + 1 + 2 trials

    std::string best = slurp(dir / "best_config.cfg");
    CHECK(best.find("model=bpnn") != std::string::npos);
    CHECK(best.find("dmodel=") != std::string::npos);
    CHECK(best.find("window=") != std::string::npos);
    CHECK(best.find("batch=8") != std::string::npos);

    // The emitted best configuration is directly usable as a train config.
    fs::path tdir = work_dir() / "train-from-sweep";
    RunResult rt = run_cli("train --data " + art.small_csv.string() + " --config " +
                           (dir / "best_config.cfg").string() + " --epochs 1 --out " +
                           tdir.string());
    CHECK(rt.code == 0);
    CHECK(fs::exists(tdir / "checkpoint.fck"));
}
