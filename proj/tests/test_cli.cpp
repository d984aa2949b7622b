#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <doctest.h>

#include "dg/delta.hpp"
#include "dg/harness.hpp"
#include "dg/report.hpp"
#include "support.hpp"

#ifndef DGTOOL_PATH
#error "DGTOOL_PATH must point at the dgtool binary"
#endif

using namespace dg;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
};

Run run(const std::string& args) {
    static int n = 0;
    auto log = fs::temp_directory_path() / ("dg_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++) + ".log");
    std::string cmd = std::string(DGTOOL_PATH) + " " + args + " > " + log.string() + " 2>&1";
    int status = std::system(cmd.c_str());
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    fs::remove(log);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::size_t count_lines(const fs::path& p) {
    std::ifstream f(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(f, line)) n += !line.empty();
    return n;
}

/// A small base model pretrained through the CLI once for all tests in this file.
struct Artifacts {
    dgtest::TempDir dir;
    fs::path config, base, world;
    Run first;
    Artifacts() {
        auto cfg = experiment_pretrain_config();
        cfg.arch = dgtest::tiny_arch(1);
        cfg.arch.max_seq = 256;
        cfg.max_epochs = 1;
        cfg.target_refusal = 0.0;
        cfg.target_utility = 0.0;
        config = dir / "pretrain.json";
        std::ofstream(config) << nlohmann::json(cfg).dump(2);
        first = run("pretrain --config " + q(config) + " --out-dir " + q(dir / "pre"));
        base = dir / "pre" / "base.dgck";
        world = dir / "pre" / "world.json";
    }
};

Artifacts& artifacts() {
    static Artifacts a;
    return a;
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with 2") {
    CHECK(run("").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("quantize --in").code == 2);
    CHECK(run("bench --no-such-flag").code == 2);
    CHECK(run("--help").code == 0);
    CHECK(run("bench --sizes 12by4").code == 2);
    CHECK(run("bench --isa sse9 --sizes 8x8").code == 2);
}

TEST_CASE("pretrain validates its config") {
    dgtest::TempDir dir;
    std::ofstream(dir / "c.json") << R"({"arch": {}, "world_seed": 1})";
    auto r = run("pretrain --config " + q(dir / "c.json") + " --out-dir " + q(dir / "o"));
    CHECK(r.code == 2);
    CHECK(r.out.find("'train'") != std::string::npos);
    CHECK(run("pretrain --config " + q(dir / "none.json") + " --out-dir " + q(dir / "o")).code == 2);
}

TEST_CASE("pretrain succeeds, is deterministic and reports unmet targets") {
    auto& a = artifacts();
    INFO(a.first.out);
    REQUIRE(a.first.code == 0);
    CHECK(fs::exists(a.base));
    CHECK(fs::exists(a.world));
    CHECK(count_lines(a.dir / "pre" / "pretrain_log.csv") == 2);
    CHECK(run("pretrain --config " + q(a.config) + " --out-dir " + q(a.dir / "pre")).code == 4);

    auto again = run("pretrain --config " + q(a.config) + " --out-dir " + q(a.dir / "pre2"));
    REQUIRE(again.code == 0);
    CHECK(dgtest::read_bytes(a.base) == dgtest::read_bytes(a.dir / "pre2" / "base.dgck"));

    auto cfg = nlohmann::json::parse(std::ifstream(a.config));
    cfg["target_refusal"] = 1.01;
    std::ofstream(a.dir / "hard.json") << cfg.dump();
    auto unmet = run("pretrain --config " + q(a.dir / "hard.json") + " --out-dir " + q(a.dir / "pre3"));
    CHECK(unmet.code == 3);
    CHECK(unmet.out.find("refusal_rate=") != std::string::npos);
}

TEST_CASE("attack, compress, quantize, eval and lens") {
    auto& a = artifacts();
    REQUIRE(a.first.code == 0);
    const auto out = a.dir / "attack";
    std::string common = " --base " + q(a.base) + " --world " + q(a.world);
    CHECK(run("attack --scenario nonsense" + common + " --out-dir " + q(out)).code == 2);
    auto atk = run("attack --scenario targeted_backdoor --n-attack 6 --n-cover 6 --epochs 1 --seed 2" + common +
                   " --out-dir " + q(out));
    INFO(atk.out);
    REQUIRE(atk.code == 0);
    CHECK(count_lines(out / "dataset.jsonl") == 12);
    CHECK(count_lines(out / "train_log.csv") == 1 + 12); // batch 1 by default
    CHECK(fs::exists(out / "finetuned.dgck"));
    CHECK(run("attack --scenario targeted_backdoor --n-attack 6 --n-cover 6 --epochs 1 --seed 2" + common +
              " --out-dir " + q(out))
              .code == 4);
    auto atk2 = run("attack --scenario targeted_backdoor --n-attack 6 --n-cover 6 --epochs 1 --seed 2" + common +
                    " --out-dir " + q(a.dir / "attack2"));
    CHECK(dgtest::read_bytes(out / "finetuned.dgck") == dgtest::read_bytes(a.dir / "attack2" / "finetuned.dgck"));

    // pretrain exports the world's calibration set
    auto calib = a.dir / "pre" / "calib.jsonl";
    CHECK(load_jsonl(calib) == load_world(a.world).calib);
    auto cmp = run("compress --base " + q(a.base) + " --finetuned " + q(out / "finetuned.dgck") + " --bits 1 --heal" +
                   " --heal-steps 3 --calib " + q(calib) + " --out " + q(a.dir / "d1.dgdl"));
    INFO(cmp.out);
    REQUIRE(cmp.code == 0);
    auto fp = footprint(load_delta(a.dir / "d1.dgdl"));
    std::ostringstream ratio;
    ratio << "ratio=" << fp.ratio;
    CHECK(cmp.out.find(ratio.str()) != std::string::npos);
    CHECK(cmp.out.find("heal:") != std::string::npos);
    CHECK(run("compress --base " + q(a.base) + " --finetuned " + q(out / "finetuned.dgck") + " --heal --out " +
              q(a.dir / "x.dgdl"))
              .code == 2);

    // A checkpoint with another architecture does not match the base.
    Rng rng(0);
    save_checkpoint(init_model(dgtest::tiny_arch(2), rng), a.dir / "other.dgck");
    auto mis = run("compress --base " + q(a.base) + " --finetuned " + q(a.dir / "other.dgck") + " --out " +
                   q(a.dir / "m.dgdl"));
    CHECK(mis.code == 2);
    CHECK(mis.out.find("checkpoint mismatch") != std::string::npos);

    REQUIRE(run("quantize --in " + q(out / "finetuned.dgck") + " --out " + q(a.dir / "ft.dgi8")).code == 0);

    auto ev = run("eval --scenario targeted_backdoor --seed 2 --include-init" + common + " --model normal=" +
                  q(out / "finetuned.dgck") + " --model int8=" + q(a.dir / "ft.dgi8") + " --model 1bit=" +
                  q(a.dir / "d1.dgdl") + " --out-csv " + q(a.dir / "eval.csv") + " --out-json " +
                  q(a.dir / "eval.json"));
    INFO(ev.out);
    REQUIRE(ev.code == 0);
    CHECK(count_lines(a.dir / "eval.csv") == 1 + 4);
    CHECK(ev.out.find("| variant |") != std::string::npos);
    CHECK(run("eval --scenario red_team" + common + " --model x=" + q(a.dir / "missing.dgck")).code == 2);
    CHECK(run("eval --scenario red_team" + common + " --model " + q(a.dir / "ft.dgi8")).code == 2);
    CHECK(run("eval --scenario red_team" + common + " --model o=" + q(a.dir / "other.dgck")).code == 2);

    auto ln = run("lens --k 3 --n 5" + common + " --model base=" + q(a.base) + " --model normal=" +
                  q(out / "finetuned.dgck") + " --model 1bit=" + q(a.dir / "d1.dgdl") + " --out-dir " +
                  q(a.dir / "lens"));
    INFO(ln.out);
    REQUIRE(ln.code == 0);
    for (const char* m : {"base", "normal", "1bit"}) {
        CHECK(fs::exists(a.dir / "lens" / ("heatmap_" + std::string(m) + ".json")));
        CHECK(count_lines(a.dir / "lens" / ("heatmap_" + std::string(m) + ".csv")) == 1 + 2 * 3);
    }
    CHECK(count_lines(a.dir / "lens" / "similarity.csv") == 1 + 9);
    CHECK(run("lens" + common + " --model o=" + q(a.dir / "other.dgck") + " --out-dir " + q(a.dir / "lens2")).code == 2);
}

TEST_CASE("sweep writes one cell per bits and seed and refuses to overwrite") {
    auto& a = artifacts();
    REQUIRE(a.first.code == 0);
    std::ofstream(a.dir / "train.json") << R"({"epochs": 1})";
    std::ofstream(a.dir / "heal.json") << R"({"steps": 2, "n_calib": 2})";
    std::string args = "sweep --scenario benign_utility --base " + q(a.base) + " --world " + q(a.world) +
                       " --bits 1,2 --seeds 1,2 --train-config " + q(a.dir / "train.json") + " --heal-config " +
                       q(a.dir / "heal.json") + " --out-csv " + q(a.dir / "sweep.csv") + " --out-md " +
                       q(a.dir / "sweep.md");
    auto r = run(args);
    INFO(r.out);
    REQUIRE(r.code == 0);
    std::ifstream f(a.dir / "sweep.csv");
    auto rows = read_sweep_csv(f);
    CHECK(rows.size() == 2 * 2 * 5);
    std::set<std::pair<std::uint64_t, int>> cells;
    for (const auto& row : rows) cells.insert({row.seed, row.bits});
    CHECK(cells.size() == 4);
    CHECK(fs::exists(a.dir / "sweep.md"));
    auto before = dgtest::read_bytes(a.dir / "sweep.csv");
    CHECK(run(args).code == 4);
    CHECK(dgtest::read_bytes(a.dir / "sweep.csv") == before);
}

TEST_CASE("bench prints both variants") {
    auto r = run("bench --sizes 16x70 --bits 2 --reps 1");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("16,70,2,fused") != std::string::npos);
    CHECK(r.out.find("16,70,2,dense") != std::string::npos);
}

} // TEST_SUITE
