// saefd: generate synthetic task data, train the Gated SAE, run continual
// learning with feature distillation, sweep ablations, and aggregate reports.
//
// Exit codes: 0 success, 2 configuration/validation error, 3 runtime error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "saefd/anchor_store.hpp"
#include "saefd/cl_trainer.hpp"
#include "saefd/config.hpp"
#include "saefd/gated_sae.hpp"
#include "saefd/metrics.hpp"
#include "saefd/synth_tasks.hpp"
#include "saefd/toy_model.hpp"

namespace fs = std::filesystem;
using saefd::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

json build_config(const CommonArgs& args) {
    json cfg = saefd::load_config(args.config_path);
    for (const auto& kv : args.overrides) saefd::apply_override(cfg, kv);
    return cfg;
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw saefd::format_error("cannot create directory " + dir + ": " + ec.message());
}

char hexdigit(std::uint64_t v) { return "0123456789abcdef"[v & 0xf]; }

std::string hex64(std::uint64_t v) {
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = hexdigit(v);
    return s;
}

// ---------------------------------------------------------------------------
// gen-data

int cmd_gen_data(const CommonArgs& args) {
    json cfg = build_config(args);
    if (args.seed_given) cfg["data"]["seed"] = args.seed;
    const auto full = saefd::FullConfig::from_json(cfg);

    const std::string out = args.out_dir.empty() ? full.data_dir : args.out_dir;
    ensure_dir(out);

    const auto seq = saefd::generate_task_sequence(full.data, full.data_seed);
    std::vector<std::pair<std::string, std::string>> manifest;
    for (const auto& task : seq) {
        const std::string name = "task_" + std::to_string(task.spec.task_id) + ".sfdd";
        const std::string path = join_path(out, name);
        saefd::save_task_file(path, task);
        std::ostringstream info;
        info << hex64(saefd::file_checksum(path)) << " train=" << task.train.batch
             << " test=" << task.test.batch;
        manifest.emplace_back(name, info.str());
    }
    const auto corpus = saefd::generate_sae_corpus(seq, full.sae_extra_sources,
                                                   full.sae_samples_per_source, full.data_seed);
    const std::string corpus_path = join_path(out, "corpus.sfdd");
    saefd::save_corpus_file(corpus_path, corpus);
    {
        std::ostringstream info;
        info << hex64(saefd::file_checksum(corpus_path)) << " samples=" << corpus.batch;
        manifest.emplace_back("corpus.sfdd", info.str());
    }

    std::ofstream mf(join_path(out, "manifest.txt"));
    for (const auto& [name, info] : manifest) {
        mf << name << " " << info << "\n";
        std::cout << name << " " << info << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// train-sae

int cmd_train_sae(const CommonArgs& args) {
    const auto full = saefd::FullConfig::from_json(build_config(args));

    const std::string corpus_path = join_path(full.data_dir, "corpus.sfdd");
    if (!fs::exists(corpus_path))
        throw saefd::config_error("corpus file not found: " + corpus_path +
                                  " (run gen-data first)");
    const saefd::SampleBatch corpus = saefd::load_corpus_file(corpus_path);

    const auto model =
        saefd::BaseModel<float>::init(full.data.d_in, full.model_d, full.model_k_max,
                                      full.model_seed);
    // A fresh adapter has zero up-projections: this is the base model.
    const auto adapter = saefd::LoraAdapter<float>::init(
        model, full.train.lora_rank, static_cast<float>(full.train.lora_alpha),
        static_cast<float>(full.train.lora_dropout), 0);
    std::cout << "collecting activations on " << corpus.batch << " corpus samples\n";
    const saefd::MatF acts = saefd::last_token_activations(model, adapter, corpus);

    const int holdout = std::max(
        2, static_cast<int>(std::lround(full.sae_holdout_fraction * static_cast<double>(acts.rows()))));
    const int train_n = static_cast<int>(acts.rows()) - holdout;
    if (train_n < full.sae.batch_size)
        throw saefd::config_error("sae: corpus too small for batch_size after holdout split");
    const saefd::MatF train_acts = acts.topRows(train_n);
    const saefd::MatF holdout_acts = acts.bottomRows(holdout);

    auto sae = saefd::GatedSae<float>::init(full.model_d, full.sae_expansion, args.seed);
    std::cout << "training SAE: d=" << sae.d << " D=" << sae.dict << " on " << train_n
              << " activations, " << full.sae.epochs << " epochs\n";
    sae = saefd::train_sae(std::move(sae), train_acts, full.sae, args.seed);

    const double ve = saefd::variance_explained(sae, holdout_acts);
    const saefd::MatF f_holdout = saefd::encode_value(sae, holdout_acts);
    const double l0 = saefd::l0_sparsity(f_holdout);
    const auto parts = saefd::sae_loss(sae, holdout_acts, static_cast<float>(full.sae.l1_coeff));

    const std::string out =
        args.out_dir.empty() ? fs::path(full.sae_checkpoint).parent_path().string() : args.out_dir;
    if (!out.empty()) ensure_dir(out);
    const std::string ckpt = args.out_dir.empty() ? full.sae_checkpoint
                                                  : join_path(out, "sae.sfdm");
    saefd::save_sae(ckpt, sae);

    json report{{"checkpoint", ckpt},
                {"d", sae.d},
                {"D", sae.dict},
                {"holdout_samples", holdout},
                {"variance_explained", ve},
                {"mean_l0", l0},
                {"holdout_recon_mse", parts.recon_mse},
                {"holdout_l1_term", parts.l1_term},
                {"seed", args.seed}};
    std::ofstream rep(join_path(out.empty() ? "." : out, "sae_report.json"));
    rep << report.dump(2) << "\n";
    std::cout << "variance_explained=" << ve << " mean_l0=" << l0 << " -> " << ckpt << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// run-cl

struct RunOutputs {
    double aa = 0.0;
    double bwt = 0.0;
};

RunOutputs execute_run(const saefd::FullConfig& full, std::uint64_t seed,
                       const std::string& out_dir, bool quiet = false) {
    ensure_dir(out_dir);
    const auto seq = saefd::generate_task_sequence(full.data, full.data_seed);
    const auto model = saefd::BaseModel<float>::init(full.data.d_in, full.model_d,
                                                     full.model_k_max, full.model_seed);

    saefd::GatedSae<float> sae;
    const bool needs_sae = saefd::mode_uses_sae(full.train.mode);
    if (needs_sae) {
        if (!fs::exists(full.sae_checkpoint))
            throw saefd::config_error("SAE checkpoint not found: " + full.sae_checkpoint +
                                      " (run train-sae first)");
        sae = saefd::load_sae<float>(full.sae_checkpoint);
        if (sae.d != full.model_d)
            throw saefd::config_error("SAE checkpoint dimension mismatch: d=" +
                                      std::to_string(sae.d) + " vs model.d=" +
                                      std::to_string(full.model_d));
    }

    saefd::AnchorBuffer buffer;
    const auto result = saefd::run_sequence(model, seq, needs_sae ? &sae : nullptr, full.train,
                                            seed, &buffer);

    result.matrix.to_csv(join_path(out_dir, "matrix.csv"));
    if (saefd::mode_uses_distillation(full.train.mode))
        saefd::write_lambda_trace_csv(join_path(out_dir, "lambda_trace.csv"),
                                      result.lambda_trace);
    saefd::write_ve_drift_csv(join_path(out_dir, "ve_drift.csv"), result.ve_drift);
    saefd::write_timings_csv(join_path(out_dir, "timings.csv"), result.per_task);
    if (!buffer.empty()) {
        const std::string anchor_dir =
            full.anchor_dir.empty() ? join_path(out_dir, "anchors") : full.anchor_dir;
        ensure_dir(anchor_dir);
        buffer.save(join_path(anchor_dir, "anchors.sfda"));
    }

    RunOutputs out;
    out.aa = saefd::average_accuracy(result.matrix);
    json summary{{"mode", saefd::mode_name(full.train.mode)},
                 {"seed", seed},
                 {"aa_pct", out.aa * 100.0},
                 {"tasks", result.matrix.num_tasks()}};
    if (result.matrix.num_tasks() >= 2) {
        out.bwt = saefd::backward_transfer(result.matrix);
        summary["bwt_pct"] = out.bwt * 100.0;
        json per;
        const auto parts = saefd::per_task_bwt(result.matrix);
        for (std::size_t i = 0; i < parts.size(); ++i)
            per.push_back({{"task_id", static_cast<int>(i) + 1},
                           {"bwt_pct", parts[i] * 100.0}});
        summary["per_task_bwt"] = per;
    }
    {
        json per = json::array();
        for (const auto& l : result.per_task)
            per.push_back({{"task_id", l.task_id},
                           {"peak_pct", l.peak * 100.0},
                           {"final_pct", l.final_acc * 100.0},
                           {"drop_pct", (l.final_acc - l.peak) * 100.0},
                           {"steps", l.steps}});
        summary["per_task"] = per;
    }
    if (!result.lambda_trace.empty()) {
        json lam = json::array();
        std::map<int, std::pair<double, double>> by_task;  // task -> (start, end)
        for (const auto& row : result.lambda_trace) {
            if (!by_task.count(row.task_id)) by_task[row.task_id] = {row.lambda, row.lambda};
            by_task[row.task_id].second = row.lambda;
        }
        for (const auto& [task, se] : by_task)
            lam.push_back({{"task_id", task},
                           {"lambda_start", se.first},
                           {"lambda_end", se.second}});
        summary["lambda_per_task"] = lam;
    }
    if (!result.ve_drift.empty()) {
        json ve = json::array();
        for (double v : result.ve_drift) ve.push_back(v * 100.0);
        summary["ve_drift_pct"] = ve;
    }
    summary["config"] = full.raw;
    std::ofstream sf(join_path(out_dir, "summary.json"));
    sf << summary.dump(2) << "\n";

    if (!quiet) {
        std::cout << "mode=" << saefd::mode_name(full.train.mode) << " seed=" << seed
                  << " AA=" << out.aa * 100.0;
        if (result.matrix.num_tasks() >= 2) std::cout << " BWT=" << out.bwt * 100.0;
        std::cout << " -> " << out_dir << "\n";
    }
    return out;
}

int cmd_run_cl(const CommonArgs& args) {
    const auto full = saefd::FullConfig::from_json(build_config(args));
    const std::string out = args.out_dir.empty() ? full.output_dir : args.out_dir;
    execute_run(full, args.seed, out);
    return 0;
}

// ---------------------------------------------------------------------------
// ablate

int cmd_ablate(const CommonArgs& args, int jobs) {
    json base_cfg = build_config(args);
    const auto base = saefd::FullConfig::from_json(base_cfg);
    const std::string out = args.out_dir.empty() ? base.output_dir : args.out_dir;

    const std::vector<std::string>& modes = base.ablate_modes;
    std::vector<int> nas = base.ablate_anchors;
    if (nas.empty()) nas.push_back(base.train.anchors_per_task);
    std::vector<double> rhos = base.ablate_rho;
    if (rhos.empty()) rhos.push_back(base.train.lambda.rho);
    std::vector<std::uint64_t> seeds = base.ablate_seeds;
    if (seeds.empty()) seeds.push_back(args.seed);

    struct Cell {
        std::string mode;
        int na;
        double rho;
        std::uint64_t seed;
        std::string dir;
        RunOutputs result;
    };
    std::vector<Cell> cells;
    for (const auto& mode : modes)
        for (int na : nas)
            for (double rho : rhos)
                for (std::uint64_t seed : seeds) {
                    Cell c{mode, na, rho, seed, "", {}};
                    std::ostringstream dir;
                    dir << "cell_" << std::setw(3) << std::setfill('0') << cells.size() << "_"
                        << mode << "_na" << na << "_rho" << rho << "_s" << seed;
                    c.dir = join_path(out, dir.str());
                    cells.push_back(std::move(c));
                }
    if (cells.empty()) {
        std::cout << "ablate: empty grid, nothing to do\n";
        return 0;
    }
    ensure_dir(out);

    std::mutex err_mutex;
    std::vector<std::string> errors;
    std::size_t next = 0;
    std::mutex next_mutex;
    auto worker = [&]() {
        while (true) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lk(next_mutex);
                if (next >= cells.size()) return;
                i = next++;
            }
            Cell& c = cells[i];
            try {
                json cfg = base_cfg;
                cfg["train"]["mode"] = c.mode;
                cfg["train"]["anchors_per_task"] = c.na;
                cfg["train"]["rho"] = c.rho;
                const auto full = saefd::FullConfig::from_json(cfg);
                c.result = execute_run(full, c.seed, c.dir, true);
                std::lock_guard<std::mutex> lk(err_mutex);
                std::cout << fs::path(c.dir).filename().string() << " AA=" << c.result.aa * 100.0
                          << " BWT=" << c.result.bwt * 100.0 << "\n";
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lk(err_mutex);
                errors.push_back(fs::path(c.dir).filename().string() + ": " + e.what());
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (!errors.empty()) {
        for (const auto& e : errors) std::cerr << "ablate: " << e << "\n";
        throw saefd::numerical_error("ablate: " + std::to_string(errors.size()) +
                                     " cell(s) failed");
    }

    std::ofstream combined(join_path(out, "combined.csv"));
    combined << "mode,anchors_per_task,rho,seed,aa_pct,bwt_pct\n";
    char line[160];
    for (const auto& c : cells) {
        std::snprintf(line, sizeof(line), "%s,%d,%.6g,%llu,%.4f,%.4f\n", c.mode.c_str(), c.na,
                      c.rho, static_cast<unsigned long long>(c.seed), c.result.aa * 100.0,
                      c.result.bwt * 100.0);
        combined << line;
    }
    std::cout << "combined table -> " << join_path(out, "combined.csv") << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// report

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
    if (run_dirs.empty()) throw saefd::config_error("report: no run directories given");
    ensure_dir(out_dir);

    struct Group {
        std::vector<double> aa, bwt;
        std::map<int, std::vector<std::pair<double, double>>> lambda_se;  // task -> (start,end)
        std::map<int, std::vector<double>> ve;                            // after_task -> values
    };
    std::map<std::string, Group> groups;

    for (const auto& dir : run_dirs) {
        const std::string spath = join_path(dir, "summary.json");
        std::ifstream in(spath);
        if (!in) throw saefd::config_error("report: cannot open " + spath);
        json s;
        try {
            s = json::parse(in);
        } catch (const json::parse_error& e) {
            throw saefd::format_error(spath + ": " + e.what());
        }
        std::ostringstream key;
        key << s.at("mode").get<std::string>() << "_na"
            << s.at("config").at("train").at("anchors_per_task").get<int>() << "_rho"
            << s.at("config").at("train").at("rho").get<double>();
        Group& g = groups[key.str()];
        g.aa.push_back(s.at("aa_pct").get<double>());
        if (s.contains("bwt_pct")) g.bwt.push_back(s.at("bwt_pct").get<double>());
        if (s.contains("lambda_per_task"))
            for (const auto& row : s.at("lambda_per_task"))
                g.lambda_se[row.at("task_id").get<int>()].push_back(
                    {row.at("lambda_start").get<double>(), row.at("lambda_end").get<double>()});
        if (s.contains("ve_drift_pct")) {
            const auto& ve = s.at("ve_drift_pct");
            for (std::size_t i = 0; i < ve.size(); ++i)
                g.ve[static_cast<int>(i)].push_back(ve[i].get<double>());
        }
    }

    auto mean_of = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    auto std_of = [&](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        const double m = mean_of(v);
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::sqrt(s / static_cast<double>(v.size() - 1));  // sample std
    };

    char line[256];
    std::ofstream rep(join_path(out_dir, "report.csv"));
    rep << "group,n_runs,aa_mean,aa_std,bwt_mean,bwt_std\n";
    for (const auto& [key, g] : groups) {
        std::snprintf(line, sizeof(line), "%s,%zu,%.4f,%.4f,%.4f,%.4f\n", key.c_str(),
                      g.aa.size(), mean_of(g.aa), std_of(g.aa), mean_of(g.bwt), std_of(g.bwt));
        rep << line;
    }

    // Appendix-style lambda dynamics: start/end per task.
    std::ofstream lam(join_path(out_dir, "lambda_dynamics.csv"));
    lam << "group,task_id,lambda_start_mean,lambda_end_mean\n";
    for (const auto& [key, g] : groups)
        for (const auto& [task, se] : g.lambda_se) {
            std::vector<double> starts, ends;
            for (const auto& [s0, s1] : se) {
                starts.push_back(s0);
                ends.push_back(s1);
            }
            std::snprintf(line, sizeof(line), "%s,%d,%.4f,%.4f\n", key.c_str(), task,
                          mean_of(starts), mean_of(ends));
            lam << line;
        }

    // VE-drift series per group.
    std::ofstream ve(join_path(out_dir, "ve_series.csv"));
    ve << "group,after_task,ve_mean,ve_std\n";
    for (const auto& [key, g] : groups)
        for (const auto& [after, vals] : g.ve) {
            std::snprintf(line, sizeof(line), "%s,%d,%.4f,%.4f\n", key.c_str(), after,
                          mean_of(vals), std_of(vals));
            ve << line;
        }

    std::cout << "report for " << run_dirs.size() << " run(s), " << groups.size()
              << " group(s) -> " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SAE feature distillation for continual learning (desk-scale)"};
    app.require_subcommand(1);

    CommonArgs args;
    std::vector<std::string> report_dirs;
    int jobs = 1;

    auto add_common = [&](CLI::App* sub, bool seed_required) {
        sub->add_option("--config", args.config_path, "JSON config file (defaults if omitted)");
        sub->add_option("--set", args.overrides, "override config key, e.g. --set train.rho=0.25");
        sub->add_option("--out", args.out_dir, "output directory");
        auto* seed_opt = sub->add_option("--seed", args.seed, "RNG seed");
        if (seed_required)
            seed_opt->required();
        else
            seed_opt->each([&](const std::string&) { args.seed_given = true; });
    };

    auto* gen = app.add_subcommand("gen-data", "generate task datasets and the SAE corpus");
    add_common(gen, false);
    auto* tsae = app.add_subcommand("train-sae", "train the Gated SAE on corpus activations");
    add_common(tsae, true);
    auto* run = app.add_subcommand("run-cl", "run a continual-learning sequence");
    add_common(run, true);
    auto* abl = app.add_subcommand("ablate", "run a {mode, N_a, rho} grid");
    add_common(abl, true);
    abl->add_option("--jobs", jobs, "parallel cells")->check(CLI::PositiveNumber);
    auto* rep = app.add_subcommand("report", "aggregate run directories");
    rep->add_option("dirs", report_dirs, "run directories")->required();
    rep->add_option("--out", args.out_dir, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(args);
        if (tsae->parsed()) return cmd_train_sae(args);
        if (run->parsed()) return cmd_run_cl(args);
        if (abl->parsed()) return cmd_ablate(args, jobs);
        if (rep->parsed()) return cmd_report(report_dirs, args.out_dir);
    } catch (const saefd::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const saefd::format_error& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
