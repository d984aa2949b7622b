// Command-line driver: pretrain an aligned base, run fine-tuning attacks,
// compress and heal deltas, evaluate variants, export logit-lens heatmaps,
// sweep bit widths and benchmark the fused kernel.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 usage or validation error,
// 3 pretraining targets unmet, 4 refusing to overwrite an existing output.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "dg/binary_gemm.hpp"
#include "dg/delta.hpp"
#include "dg/error.hpp"
#include "dg/harness.hpp"
#include "dg/int8.hpp"
#include "dg/kernels.hpp"
#include "dg/lens.hpp"
#include "dg/report.hpp"

namespace fs = std::filesystem;
using namespace dg;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitTargets = 3;
constexpr int kExitOverwrite = 4;

struct OverwriteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ExitCode {
    int code;
};

void require_new(const fs::path& p, bool force) {
    if (!force && fs::exists(p)) throw OverwriteError("refusing to overwrite " + p.string() + " (use --force)");
}

void require_file(const fs::path& p) {
    if (!fs::is_regular_file(p)) throw InputError("missing input file: " + p.string());
}

nlohmann::json read_json(const fs::path& p) {
    require_file(p);
    std::ifstream f(p);
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(p.string() + ": invalid JSON: " + e.what());
    }
}

std::ofstream open_out(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    if (!f) throw IoError("cannot write " + p.string());
    return f;
}

std::string magic_of(const fs::path& p) {
    require_file(p);
    std::ifstream f(p, std::ios::binary);
    char m[4] = {};
    f.read(m, 4);
    return std::string(m, static_cast<std::size_t>(f.gcount()));
}

struct LoadedModel {
    std::string kind; // dense, delta, int8
    int bits = 0;
    Checkpoint dense;
};

/// Loads a checkpoint, compressed delta (merged into base) or int8 model.
LoadedModel load_any(const fs::path& p, const Checkpoint* base) {
    auto magic = magic_of(p);
    if (magic == "DGCK") return {"dense", 0, load_checkpoint(p)};
    if (magic == "DGI8") return {"int8", 0, dequantize(load_int8(p))};
    if (magic == "DGDL") {
        if (!base) throw InputError("a delta file needs --base");
        auto cd = load_delta(p);
        return {"delta", cd.bits, reconstruct(*base, cd)};
    }
    throw FormatError("unsupported format: " + p.string());
}

std::pair<std::string, fs::path> split_label(const std::string& s) {
    auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw InputError("expected label=path, got '" + s + "'");
    return {s.substr(0, eq), s.substr(eq + 1)};
}

// --- pretrain ---------------------------------------------------------------

struct PretrainArgs {
    fs::path config, out_dir;
    bool force = false;
};

int cmd_pretrain(const PretrainArgs& a) {
    auto cfg = read_json(a.config).get<PretrainConfig>();
    auto ckpt_path = a.out_dir / "base.dgck", world_path = a.out_dir / "world.json",
         log_path = a.out_dir / "pretrain_log.csv", calib_path = a.out_dir / "calib.jsonl";
    for (const auto& p : {ckpt_path, world_path, log_path, calib_path}) require_new(p, a.force);
    fs::create_directories(a.out_dir);
    auto log = open_out(log_path);
    log << "epoch,loss,refusal_rate,utility_acc\n";
    auto res = pretrain(cfg, [&](const PretrainProgress& p) {
        log << p.epoch << ',' << p.last_loss << ',' << p.refusal_rate << ',' << p.utility_acc << std::endl;
        std::cout << "epoch " << p.epoch << " loss " << p.last_loss << " refusal " << p.refusal_rate << " utility "
                  << p.utility_acc << std::endl;
    });
    save_checkpoint(res.model, ckpt_path);
    save_world(res.world, world_path);
    save_jsonl(res.world.calib, calib_path);
    std::cout << "refusal_rate=" << res.final.refusal_rate << " utility_acc=" << res.final.utility_acc
              << " epochs=" << res.final.epoch << "\n";
    if (!res.targets_met) {
        std::cerr << "pretraining targets unmet after " << res.final.epoch << " epochs (refusal "
                  << res.final.refusal_rate << " >= " << cfg.target_refusal << ", utility " << res.final.utility_acc
                  << " >= " << cfg.target_utility << " required)\n";
        return kExitTargets;
    }
    return 0;
}

// --- attack -----------------------------------------------------------------

struct AttackArgs {
    std::string scenario;
    fs::path base, world, out_dir, train_config;
    std::uint64_t seed = 0;
    int n_attack = -1, n_cover = -1, epochs = -1, batch = -1;
    float lr = -1;
    std::string trigger, target;
    bool force = false;
};

ScenarioSpec spec_from(const std::string& name, std::uint64_t seed, int n_attack, int n_cover,
                       const std::string& trigger, const std::string& target) {
    auto spec = default_scenario(parse_scenario(name), seed);
    if (n_attack >= 0) spec.n_attack = n_attack;
    if (n_cover >= 0) spec.n_cover = n_cover;
    if (!trigger.empty()) spec.trigger = trigger;
    if (!target.empty()) spec.target_content = target;
    spec.validate();
    return spec;
}

TrainConfig train_config_from(const fs::path& file, float lr, int epochs, int batch) {
    TrainConfig tc = attack_train_config();
    if (!file.empty()) {
        nlohmann::json j = tc;
        j.merge_patch(read_json(file));
        tc = j.get<TrainConfig>();
    }
    if (lr > 0) tc.learning_rate = lr;
    if (epochs > 0) tc.epochs = epochs;
    if (batch > 0) tc.batch_size = batch;
    tc.validate();
    return tc;
}

HealConfig heal_config_from(const fs::path& file, int steps, float lr) {
    HealConfig hc = scenario_heal_config();
    if (!file.empty()) {
        nlohmann::json j = hc;
        j.merge_patch(read_json(file));
        hc = j.get<HealConfig>();
    }
    if (steps >= 0) hc.steps = steps;
    if (lr > 0) hc.learning_rate = lr;
    hc.validate();
    return hc;
}

int cmd_attack(const AttackArgs& a) {
    auto spec = spec_from(a.scenario, a.seed, a.n_attack, a.n_cover, a.trigger, a.target);
    auto tc = train_config_from(a.train_config, a.lr, a.epochs, a.batch);
    tc.seed = spec.seed;
    auto base = load_checkpoint(a.base);
    auto world = load_world(a.world);
    auto data_path = a.out_dir / "dataset.jsonl", ckpt_path = a.out_dir / "finetuned.dgck",
         log_path = a.out_dir / "train_log.csv", spec_path = a.out_dir / "scenario.json";
    for (const auto& p : {data_path, ckpt_path, log_path, spec_path}) require_new(p, a.force);
    fs::create_directories(a.out_dir);

    auto data = build_attack_dataset(spec, world);
    save_jsonl(data, data_path);
    auto log = open_out(log_path);
    log << "step,epoch,loss\n";
    auto ft = finetune(base, data, tc, [&](const TrainStep& s) { log << s.step << ',' << s.epoch << ',' << s.loss << '\n'; });
    save_checkpoint(ft, ckpt_path);
    open_out(spec_path) << nlohmann::json({{"scenario", spec}, {"train", tc}}).dump(2) << "\n";
    std::cout << "wrote " << data.size() << " examples, " << optimizer_steps(data.size(), tc) << " steps to "
              << a.out_dir.string() << "\n";
    return 0;
}

// --- compress / quantize ------------------------------------------------------

struct CompressArgs {
    fs::path base, finetuned, out, calib, heal_config;
    int bits = 1;
    bool heal = false;
    int heal_steps = -1;
    float heal_lr = -1;
    bool force = false;
};

int cmd_compress(const CompressArgs& a) {
    require_new(a.out, a.force);
    auto base = load_checkpoint(a.base);
    auto ft = load_checkpoint(a.finetuned);
    auto cd = compress(base, ft, a.bits);
    if (a.heal) {
        if (a.calib.empty()) throw InputError("--heal needs --calib");
        require_file(a.calib);
        auto hc = heal_config_from(a.heal_config, a.heal_steps, a.heal_lr);
        auto hr = heal(base, ft, cd, hc, load_jsonl(a.calib));
        std::cout << "heal: calib_loss " << hr.initial_loss << " -> " << hr.final_loss << " (best step "
                  << hr.best_step << ")\n";
        cd = std::move(hr.delta);
    }
    if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
    save_delta(cd, a.out);
    auto fp = footprint(cd);
    std::cout << "delta_bytes=" << fp.delta_bytes << " dense_bytes=" << fp.dense_bytes << " ratio=" << fp.ratio
              << " file_bytes=" << fs::file_size(a.out) << "\n";
    return 0;
}

int cmd_quantize(const fs::path& in, const fs::path& out, bool force) {
    require_new(out, force);
    auto q = quantize(load_checkpoint(in));
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_int8(q, out);
    std::cout << "wrote " << out.string() << " (" << fs::file_size(out) << " bytes)\n";
    return 0;
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
    fs::path base, world, scenario_file, out_csv, out_json;
    std::string scenario;
    std::uint64_t seed = 0;
    std::vector<std::string> models;
    bool include_init = false;
    bool force = false;
};

ScenarioSpec load_spec(const fs::path& file, const std::string& name, std::uint64_t seed) {
    if (!file.empty()) {
        auto j = read_json(file);
        return (j.contains("scenario") ? j.at("scenario") : j).get<ScenarioSpec>();
    }
    if (name.empty()) throw InputError("give --scenario or --scenario-file");
    return default_scenario(parse_scenario(name), seed);
}

int cmd_eval(const EvalArgs& a) {
    auto spec = load_spec(a.scenario_file, a.scenario, a.seed);
    for (const auto& p : {a.out_csv, a.out_json})
        if (!p.empty()) require_new(p, a.force);
    auto base = load_checkpoint(a.base);
    auto world = load_world(a.world);
    std::vector<std::pair<std::string, fs::path>> models;
    for (const auto& m : a.models) models.push_back(split_label(m));
    for (const auto& [label, path] : models) require_file(path);

    RuleJudge judge;
    std::vector<EvalReport> reports;
    if (a.include_init) reports.push_back(evaluate(ModelView::of(base), spec, world, judge, "init"));
    for (const auto& [label, path] : models) {
        auto m = load_any(path, &base);
        require_compatible(base, m.dense);
        reports.push_back(evaluate(ModelView::of(m.dense), spec, world, judge, label, m.bits));
    }
    if (reports.empty()) throw InputError("nothing to evaluate: give --model or --include-init");
    write_reports_markdown(reports, std::cout);
    if (!a.out_csv.empty()) {
        auto f = open_out(a.out_csv);
        write_reports_csv(reports, f);
    }
    if (!a.out_json.empty()) open_out(a.out_json) << nlohmann::json(reports).dump(2) << "\n";
    return 0;
}

// --- lens -------------------------------------------------------------------

struct LensArgs {
    fs::path base, world, out_dir, lexicon;
    std::vector<std::string> models;
    std::string scenario = "red_team";
    int k = 5;
    int n = 0;
    bool force = false;
};

int cmd_lens(const LensArgs& a) {
    auto base = load_checkpoint(a.base);
    auto world = load_world(a.world);
    auto lexicon = a.lexicon.empty() ? default_refusal_lexicon() : load_lexicon(a.lexicon);
    std::vector<std::pair<std::string, fs::path>> models;
    for (const auto& m : a.models) models.push_back(split_label(m));
    if (models.empty()) throw InputError("give at least one --model label=path");
    for (const auto& [label, path] : models) {
        require_file(path);
        require_new(a.out_dir / ("heatmap_" + label + ".json"), a.force);
        require_new(a.out_dir / ("heatmap_" + label + ".csv"), a.force);
    }
    require_new(a.out_dir / "similarity.csv", a.force);
    fs::create_directories(a.out_dir);

    auto sys = scenario_system_prompt(parse_scenario(a.scenario));
    std::vector<std::vector<int>> dataset;
    for (const auto& p : world.eval_forbidden) {
        if (a.n > 0 && static_cast<int>(dataset.size()) >= a.n) break;
        dataset.push_back(render_prompt(sys, p.user));
    }
    std::vector<std::pair<std::string, LensHeatmap>> maps;
    for (const auto& [label, path] : models) {
        auto m = load_any(path, &base);
        require_compatible(base, m.dense);
        auto h = lens_accumulate(ModelView::of(m.dense), dataset, a.k);
        export_heatmap(h, a.out_dir / ("heatmap_" + label + ".json"), a.out_dir / ("heatmap_" + label + ".csv"), lexicon);
        maps.emplace_back(label, std::move(h));
    }
    auto sim = open_out(a.out_dir / "similarity.csv");
    sim << "a,b,similarity\n";
    for (const auto& [la, ha] : maps)
        for (const auto& [lb, hb] : maps) {
            double s = lens_similarity(ha, hb);
            sim << la << ',' << lb << ',' << s << '\n';
            if (la < lb) std::cout << la << " vs " << lb << ": " << s << "\n";
        }
    return 0;
}

// --- sweep ------------------------------------------------------------------

struct SweepArgs {
    std::string scenario;
    fs::path base, world, out_csv, out_md, train_config, heal_config;
    std::vector<int> bits{1, 2, 4, 8};
    std::vector<std::uint64_t> seeds{1, 2, 3};
};

int cmd_sweep(const SweepArgs& a) {
    require_new(a.out_csv, false);
    if (!a.out_md.empty()) require_new(a.out_md, false);
    auto kind = parse_scenario(a.scenario);
    auto tc = train_config_from(a.train_config, -1, -1, -1);
    auto hc = heal_config_from(a.heal_config, -1, -1);
    auto base = load_checkpoint(a.base);
    auto world = load_world(a.world);
    RuleJudge judge;

    auto csv = open_out(a.out_csv);
    csv << kSweepCsvHeader << std::endl;
    std::vector<SweepRow> all;
    for (auto seed : a.seeds) {
        ScenarioOptions opts;
        opts.on_report = [&](const EvalReport& r) {
            if (r.bits == 0) return;
            auto rows = sweep_rows(seed, r);
            write_sweep_rows(rows, csv);
            csv.flush();
            all.insert(all.end(), rows.begin(), rows.end());
            std::cout << "seed " << seed << " " << r.variant << " asr " << r.asr << " utility " << r.utility_acc
                      << std::endl;
        };
        run_scenario(default_scenario(kind, seed), world, base, tc, a.bits, hc, judge, opts);
    }
    write_sweep_markdown(all, std::cout);
    if (!a.out_md.empty()) {
        auto md = open_out(a.out_md);
        write_sweep_markdown(all, md);
    }
    return 0;
}

// --- bench ------------------------------------------------------------------

std::vector<BenchSize> parse_sizes(const std::string& s) {
    std::vector<BenchSize> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto x = item.find('x');
        if (x == std::string::npos) throw InputError("size must look like NxM: '" + item + "'");
        try {
            out.push_back({std::stoul(item.substr(0, x)), std::stoul(item.substr(x + 1))});
        } catch (const std::exception&) {
            throw InputError("size must look like NxM: '" + item + "'");
        }
    }
    if (out.empty()) throw InputError("no sizes given");
    return out;
}

int cmd_bench(const std::string& sizes, int bits, int reps, std::uint64_t seed, const fs::path& out, bool force) {
    auto sz = parse_sizes(sizes);
    if (!out.empty()) require_new(out, force);
    auto rows = bench_fused(sz, bits, reps, seed);
    write_bench_csv(rows, std::cout);
    if (!out.empty()) {
        auto f = open_out(out);
        write_bench_csv(rows, f);
    }
    std::cerr << "kernels: " << simd::isa_name(simd::active().isa) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"delta compression toolkit for fine-tuning attack experiments"};
    app.require_subcommand(1);
    std::string isa;
    app.add_option("--isa", isa, "kernel set: scalar, avx2 or avx512 (default: widest available)");

    PretrainArgs pa;
    auto* pre = app.add_subcommand("pretrain", "train the aligned base model and its world");
    pre->add_option("--config", pa.config, "JSON with arch, train, world_seed")->required();
    pre->add_option("--out-dir", pa.out_dir)->required();
    pre->add_flag("--force", pa.force);

    AttackArgs aa;
    auto* att = app.add_subcommand("attack", "build an attack dataset and fine-tune on it");
    att->add_option("--scenario", aa.scenario)->required();
    att->add_option("--base", aa.base)->required();
    att->add_option("--world", aa.world)->required();
    att->add_option("--out-dir", aa.out_dir)->required();
    att->add_option("--seed", aa.seed);
    att->add_option("--n-attack", aa.n_attack);
    att->add_option("--n-cover", aa.n_cover);
    att->add_option("--trigger", aa.trigger);
    att->add_option("--target", aa.target);
    att->add_option("--train-config", aa.train_config, "JSON overriding fine-tuning settings");
    att->add_option("--lr", aa.lr);
    att->add_option("--epochs", aa.epochs);
    att->add_option("--batch-size", aa.batch);
    att->add_flag("--force", aa.force);

    CompressArgs ca;
    auto* cmp = app.add_subcommand("compress", "sign-compress a fine-tuned delta");
    cmp->add_option("--base", ca.base)->required();
    cmp->add_option("--finetuned", ca.finetuned)->required();
    cmp->add_option("--out", ca.out)->required();
    cmp->add_option("--bits", ca.bits)->check(CLI::PositiveNumber);
    cmp->add_flag("--heal", ca.heal);
    cmp->add_option("--calib", ca.calib, "JSONL calibration conversations");
    cmp->add_option("--heal-config", ca.heal_config);
    cmp->add_option("--heal-steps", ca.heal_steps);
    cmp->add_option("--heal-lr", ca.heal_lr);
    cmp->add_flag("--force", ca.force);

    fs::path q_in, q_out;
    bool q_force = false;
    auto* qnt = app.add_subcommand("quantize", "int8 baseline of a checkpoint");
    qnt->add_option("--in", q_in)->required();
    qnt->add_option("--out", q_out)->required();
    qnt->add_flag("--force", q_force);

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "evaluate models on a scenario");
    ev->add_option("--base", ea.base)->required();
    ev->add_option("--world", ea.world)->required();
    ev->add_option("--scenario", ea.scenario);
    ev->add_option("--scenario-file", ea.scenario_file);
    ev->add_option("--seed", ea.seed);
    ev->add_option("--model", ea.models, "label=path to a checkpoint, delta or int8 file");
    ev->add_flag("--include-init", ea.include_init);
    ev->add_option("--out-csv", ea.out_csv);
    ev->add_option("--out-json", ea.out_json);
    ev->add_flag("--force", ea.force);

    LensArgs la;
    auto* ln = app.add_subcommand("lens", "logit-lens heatmaps on the forbidden eval prompts");
    ln->add_option("--base", la.base)->required();
    ln->add_option("--world", la.world)->required();
    ln->add_option("--model", la.models, "label=path")->required();
    ln->add_option("--out-dir", la.out_dir)->required();
    ln->add_option("--scenario", la.scenario, "selects the system prompt");
    ln->add_option("--k", la.k)->check(CLI::PositiveNumber);
    ln->add_option("--n", la.n, "use only the first n prompts");
    ln->add_option("--lexicon", la.lexicon, "JSON string array of refusal tokens");
    ln->add_flag("--force", la.force);

    SweepArgs sa;
    auto* sw = app.add_subcommand("sweep", "bits x seeds grid of one scenario");
    sw->add_option("--scenario", sa.scenario)->required();
    sw->add_option("--base", sa.base)->required();
    sw->add_option("--world", sa.world)->required();
    sw->add_option("--out-csv", sa.out_csv)->required();
    sw->add_option("--out-md", sa.out_md);
    sw->add_option("--bits", sa.bits)->delimiter(',');
    sw->add_option("--seeds", sa.seeds)->delimiter(',');
    sw->add_option("--train-config", sa.train_config);
    sw->add_option("--heal-config", sa.heal_config);

    std::string b_sizes = "256x256,1024x1024,4096x1024";
    int b_bits = 1, b_reps = 20;
    std::uint64_t b_seed = 0;
    fs::path b_out;
    bool b_force = false;
    auto* bn = app.add_subcommand("bench", "fused binary GEMM vs dense merged weights");
    bn->add_option("--sizes", b_sizes, "comma-separated NxM");
    bn->add_option("--bits", b_bits)->check(CLI::PositiveNumber);
    bn->add_option("--reps", b_reps)->check(CLI::PositiveNumber);
    bn->add_option("--seed", b_seed);
    bn->add_option("--out", b_out);
    bn->add_flag("--force", b_force);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (!isa.empty()) {
            auto parsed = simd::parse_isa(isa);
            if (!parsed) throw InputError("unknown --isa '" + isa + "'");
            simd::set_active(*parsed);
        }
        if (*pre) return cmd_pretrain(pa);
        if (*att) return cmd_attack(aa);
        if (*cmp) return cmd_compress(ca);
        if (*qnt) return cmd_quantize(q_in, q_out, q_force);
        if (*ev) return cmd_eval(ea);
        if (*ln) return cmd_lens(la);
        if (*sw) return cmd_sweep(sa);
        if (*bn) return cmd_bench(b_sizes, b_bits, b_reps, b_seed, b_out, b_force);
    } catch (const OverwriteError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitOverwrite;
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const MismatchError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
