// emcomm: data generation, training, lambda sweeps and bound reports.
//
// Exit codes: 0 ok, 2 usage or config error, 3 I/O or format error,
// 4 numerical divergence.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <thread>

#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"

#include "emcomm/checkpoint.hpp"
#include "emcomm/config.hpp"
#include "emcomm/dataset_io.hpp"
#include "emcomm/gen_bound.hpp"
#include "emcomm/manifest.hpp"
#include "emcomm/trainer.hpp"

namespace fs = std::filesystem;
using namespace emcomm;

namespace {

enum Exit : int { exit_ok = 0, exit_internal = 1, exit_usage = 2, exit_io = 3, exit_divergence = 4 };

// Runs fn and converts the error taxonomy into exit codes.
template <class F>
int guarded(F&& fn) {
    try {
        return fn();
    } catch (const divergence_error& e) {
        spdlog::error("divergence in {}: {}", e.term(), e.what());
        return exit_divergence;
    } catch (const config_error& e) {
        spdlog::error("{}", e.what());
        return exit_usage;
    } catch (const std::invalid_argument& e) {
        spdlog::error("{}", e.what());
        return exit_usage;
    } catch (const io_error& e) {
        spdlog::error("{}", e.what());
        return exit_io;
    } catch (const fs::filesystem_error& e) {
        spdlog::error("{}", e.what());
        return exit_io;
    } catch (const std::exception& e) {
        spdlog::error("internal error: {}", e.what());
        return exit_internal;
    }
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw io_error("cannot create directory " + dir);
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
};

int cmd_gen_data(const GenDataArgs& a) {
    const auto cfg = load_config(a.config);
    Dataset ds;
    RunManifest man;
    man.command = "gen-data";
    man.seed = a.seed;
    man.input_hashes["config"] = git_blob_hash_file(a.config);
    if (!cfg.data.trace.empty()) {
        ds = ingest_trace_csv(cfg.data.trace, cfg.env);
        ds.seed = a.seed;
        man.input_hashes["trace"] = git_blob_hash_file(cfg.data.trace);
    } else {
        ds = make_dataset(cfg.env, cfg.data.size, a.seed);
    }
    const auto bytes = encode_dataset(ds);
    const auto parent = fs::path(a.out).parent_path();
    if (!parent.empty()) ensure_dir(parent.string());
    write_file_atomic(a.out, bytes);
    man.config = to_json(cfg);
    man.outputs["dataset"] = a.out;
    man.outputs["dataset_hash"] = git_blob_hash(bytes);
    man.extra["samples"] = ds.n;
    man.write(a.out + ".manifest.json");
    spdlog::info("wrote {} samples to {}", ds.n, a.out);
    return exit_ok;
}

// ------------------------------------------------------------------- train

struct Overrides {
    std::optional<std::string> baseline;
    std::optional<double> lambda_t;
    std::optional<double> lambda_c;
    std::optional<std::size_t> dc;
    std::optional<unsigned> bits;
    std::optional<std::size_t> iterations;
};

void apply(ExperimentConfig& cfg, const Overrides& o) {
    if (o.baseline) {
        if (*o.baseline == "ec-sota") {
            cfg.train.baseline = BaselineMode::ec_sota;
        } else if (*o.baseline == "none") {
            cfg.train.baseline = BaselineMode::none;
        } else {
            throw config_error("--baseline must be ec-sota or none");
        }
    }
    if (o.lambda_t) cfg.train.lambda_t = {*o.lambda_t};
    if (o.lambda_c) cfg.train.lambda_c = {*o.lambda_c};
    if (o.dc) cfg.train.model.message_dim = *o.dc;
    if (o.bits) cfg.train.model.message_bits = *o.bits;
    if (o.iterations) cfg.train.iterations = *o.iterations;
    cfg.validate();
}

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::uint64_t seed = 0;
    Overrides overrides;
};

struct LoadedData {
    Dataset dataset;
    std::string hash;
};

LoadedData load_data(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return {decode_dataset(bytes), git_blob_hash(bytes)};
}

struct CellSummary {
    double heldout_accuracy = 0.0;
    double complexity = 0.0;
    double relevance = 0.0;
    double gap = 0.0;
};

// Shared by train and every sweep cell. Summary values average over agents.
CellSummary run_train(const ExperimentConfig& cfg_in, const LoadedData& data, const std::string& config_path,
                      const std::string& data_path, const std::string& out, std::uint64_t seed) {
    ExperimentConfig cfg = cfg_in;
    cfg.train.seed = seed;
    cfg.validate();
    ensure_dir(out);
    const auto sp = training_split(data.dataset, cfg.train.holdout_fraction);
    spdlog::info("training {} (seed {}, {} iterations) into {}", to_string(cfg.train.baseline), seed,
                 cfg.train.iterations, out);
    const auto res = train(cfg.train, sp.train, sp.heldout);

    RunManifest man;
    man.command = "train";
    man.seed = seed;
    man.config = to_json(cfg);
    man.input_hashes["config"] = git_blob_hash_file(config_path);
    man.input_hashes["data"] = data.hash;
    man.extra["data_path"] = data_path;
    man.extra["baseline"] = to_string(cfg.train.baseline);
    man.extra["train_samples"] = sp.train.n;
    man.extra["heldout_samples"] = sp.heldout.n;

    write_file_atomic(join(out, "metrics.csv"), metrics_csv(res.metrics));
    write_file_atomic(join(out, "gap.csv"), gap_csv(res.metrics));
    write_file_atomic(join(out, "checkpoint.emck"), encode_tensors(system_tensors(res.system.agents)));
    man.outputs["metrics"] = "metrics.csv";
    man.outputs["gap"] = "gap.csv";
    man.outputs["checkpoint"] = "checkpoint.emck";
    if (!res.reconstruction_heldout.empty()) {
        std::string csv = "iteration,heldout_reconstruction_mse\n";
        for (std::size_t i = 0; i < res.reconstruction_heldout.size(); ++i) {
            csv += std::to_string(i + 1) + "," + format_double(res.reconstruction_heldout[i]) + "\n";
        }
        write_file_atomic(join(out, "reconstruction.csv"), csv);
        man.outputs["reconstruction"] = "reconstruction.csv";
    }

    CellSummary s;
    const auto& fin = res.system.final_metrics;
    nlohmann::ordered_json final_json = nlohmann::ordered_json::array();
    for (const auto& r : fin) {
        s.heldout_accuracy += r.heldout_accuracy;
        s.complexity += r.complexity;
        s.relevance += r.relevance;
        s.gap += std::abs(r.heldout_total - r.total);
        final_json.push_back({{"agent_id", r.agent_id},
                              {"train_accuracy", r.train_accuracy},
                              {"heldout_accuracy", r.heldout_accuracy},
                              {"total", r.total},
                              {"heldout_total", r.heldout_total}});
    }
    const double k = static_cast<double>(std::max<std::size_t>(fin.size(), 1));
    s.heldout_accuracy /= k;
    s.complexity /= k;
    s.relevance /= k;
    s.gap /= k;
    man.extra["final"] = final_json;
    man.write(join(out, "manifest.json"));
    spdlog::info("done: mean held-out accuracy {:.4f}, mean gap {:.4f}", s.heldout_accuracy, s.gap);
    return s;
}

int cmd_train(const TrainArgs& a) {
    auto cfg = load_config(a.config);
    apply(cfg, a.overrides);
    const auto data = load_data(a.data);
    run_train(cfg, data, a.config, a.data, a.out, a.seed);
    return exit_ok;
}

// ------------------------------------------------------------------- sweep

struct SweepArgs {
    std::string config;
    std::string data;
    std::string out;
    std::string param;
    std::vector<std::string> values;
    std::vector<std::uint64_t> seeds;
    unsigned jobs = 0;
    Overrides overrides;
};

int cmd_sweep(const SweepArgs& a) {
    static const std::set<std::string> params{"lambda_c", "lambda_t", "dc", "bits"};
    if (!params.count(a.param)) throw config_error("--param must be one of lambda_c, lambda_t, dc, bits");
    if (a.values.empty()) throw config_error("--values must not be empty");
    if (a.seeds.empty()) throw config_error("--seeds must not be empty");
    auto base = load_config(a.config);
    apply(base, a.overrides);

    struct Cell {
        std::string value;
        std::uint64_t seed;
        ExperimentConfig cfg;
        std::string dir;
        std::optional<CellSummary> summary;
        int exit_code = 0;
        std::string error;
    };
    std::vector<Cell> cells;
    for (const auto& v : a.values) {
        ExperimentConfig cfg = base;
        Overrides o;
        try {
            std::size_t used = 0;
            if (a.param == "lambda_c" || a.param == "lambda_t") {
                const double x = std::stod(v, &used);
                (a.param == "lambda_c" ? o.lambda_c : o.lambda_t) = x;
            } else {
                const auto x = std::stoull(v, &used);
                if (a.param == "dc") {
                    o.dc = static_cast<std::size_t>(x);
                } else {
                    o.bits = static_cast<unsigned>(x);
                }
            }
            if (used != v.size()) throw std::invalid_argument(v);
        } catch (const std::logic_error&) {
            throw config_error("bad value '" + v + "' for --param " + a.param);
        }
        apply(cfg, o);
        for (auto s : a.seeds) {
            cells.push_back({v, s, cfg, join(join(a.out, a.param + "=" + v), "seed=" + std::to_string(s)), {}, 0, {}});
        }
    }
    ensure_dir(a.out);
    const auto data = load_data(a.data);

    const unsigned jobs = std::max(1u, a.jobs ? a.jobs : std::thread::hardware_concurrency());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) {
            auto& c = cells[i];
            c.exit_code = guarded([&] {
                c.summary = run_train(c.cfg, data, a.config, a.data, c.dir, c.seed);
                return static_cast<int>(exit_ok);
            });
            if (c.exit_code != exit_ok) {
                c.error = "exit " + std::to_string(c.exit_code);
                spdlog::warn("sweep cell {}={} seed {} failed with exit code {}", a.param, c.value, c.seed,
                             c.exit_code);
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned j = 1; j < std::min<std::size_t>(jobs, cells.size()); ++j) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::string summary = "param_value,seed,final_heldout_acc,final_complexity,final_relevance,gap\n";
    std::string failures = "param_value,seed,exit_code\n";
    int code = exit_ok;
    for (const auto& c : cells) {
        if (c.summary) {
            summary += c.value + "," + std::to_string(c.seed) + "," + format_double(c.summary->heldout_accuracy) +
                       "," + format_double(c.summary->complexity) + "," + format_double(c.summary->relevance) + "," +
                       format_double(c.summary->gap) + "\n";
        } else {
            failures += c.value + "," + std::to_string(c.seed) + "," + std::to_string(c.exit_code) + "\n";
            if (code == exit_ok) code = c.exit_code;
        }
    }
    write_file_atomic(join(a.out, "summary.csv"), summary);
    write_file_atomic(join(a.out, "failures.csv"), failures);

    RunManifest man;
    man.command = "sweep";
    man.seed = a.seeds.front();
    man.config = to_json(base);
    man.input_hashes["config"] = git_blob_hash_file(a.config);
    man.input_hashes["data"] = data.hash;
    man.extra["param"] = a.param;
    man.extra["values"] = a.values;
    man.extra["seeds"] = a.seeds;
    man.outputs["summary"] = "summary.csv";
    man.outputs["failures"] = "failures.csv";
    man.write(join(a.out, "manifest.json"));
    return code;
}

// ------------------------------------------------------------------- bound

struct BoundArgs {
    std::string runs;
    std::optional<double> t;
    std::optional<double> delta;
    std::optional<std::string> sigma_mode;
    std::vector<double> loss_range;
    std::optional<double> prior_variance;
    std::optional<std::string> data;
    std::optional<std::string> out;
};

struct LoadedRun {
    std::string dir;
    nlohmann::ordered_json manifest;
    TrainedSystem system;
};

std::vector<LoadedRun> find_runs(const std::string& root) {
    if (!fs::is_directory(root)) throw io_error("not a directory: " + root);
    std::vector<std::string> dirs;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (entry.is_regular_file() && entry.path().filename() == "manifest.json" &&
            fs::exists(entry.path().parent_path() / "checkpoint.emck")) {
            dirs.push_back(entry.path().parent_path().string());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    std::vector<LoadedRun> runs;
    for (const auto& d : dirs) {
        auto man = read_json_file(join(d, "manifest.json"));
        if (man.value("command", "") != "train") continue;
        LoadedRun r;
        r.dir = d;
        r.manifest = man;
        const auto cfg = config_from_json(man.at("config"));
        r.system.config = cfg.train;
        r.system.seed = man.at("seed").get<std::uint64_t>();
        r.system.agents = load_checkpoint(join(d, "checkpoint.emck"));
        runs.push_back(std::move(r));
    }
    return runs;
}

// Config echo with the per-run seed removed.
nlohmann::ordered_json shared_config(const nlohmann::ordered_json& manifest) {
    auto c = manifest.at("config");
    c["train"].erase("seed");
    return c;
}

int cmd_bound(const BoundArgs& a) {
    if (a.t && !(*a.t > 1.0)) throw config_error("t must exceed 1");
    if (a.delta && !(*a.delta > 0.0 && *a.delta < 1.0)) throw config_error("delta must lie in (0, 1)");
    if (a.sigma_mode && *a.sigma_mode != "range" && *a.sigma_mode != "sample") {
        throw config_error("--sigma-mode must be range or sample");
    }
    if (!a.loss_range.empty() && a.loss_range.size() != 2) throw config_error("--loss-range needs two values a,b");

    auto runs = find_runs(a.runs);
    if (runs.size() < 2) throw config_error("need at least 2 checkpointed runs in " + a.runs);
    const auto reference = shared_config(runs.front().manifest);
    const auto data_hash = runs.front().manifest.at("input_hashes").at("data");
    for (const auto& r : runs) {
        if (shared_config(r.manifest) != reference) {
            throw config_error("mixed configs: " + r.dir + " differs from " + runs.front().dir);
        }
        if (r.manifest.at("input_hashes").at("data") != data_hash) {
            throw config_error("mixed datasets: " + r.dir + " differs from " + runs.front().dir);
        }
    }
    const std::string data_path = a.data ? *a.data : runs.front().manifest.at("data_path").get<std::string>();
    const auto data = load_data(data_path);
    if (data.hash != data_hash.get<std::string>()) {
        throw config_error("dataset " + data_path + " does not match the hash recorded in the run manifests");
    }

    auto cfg = config_from_json(runs.front().manifest.at("config"));
    BoundSettings s = cfg.bound;
    if (a.t) s.t = *a.t;
    if (a.delta) s.delta = *a.delta;
    if (a.sigma_mode) s.sigma_mode = *a.sigma_mode == "range" ? SigmaMode::range : SigmaMode::sample;
    if (!a.loss_range.empty()) s.loss_range = std::pair{a.loss_range[0], a.loss_range[1]};
    if (a.prior_variance) s.prior_variance = *a.prior_variance;

    const auto sp = training_split(data.dataset, cfg.train.holdout_fraction);
    std::vector<TrainedSystem> systems;
    for (const auto& r : runs) systems.push_back(r.system);

    const std::string out = a.out ? *a.out : a.runs;
    ensure_dir(out);
    RunManifest man;
    man.command = "bound";
    man.seed = 0;
    man.config = to_json(cfg);
    man.config["bound"]["t"] = s.t;
    man.config["bound"]["delta"] = s.delta;
    man.config["bound"]["sigma_mode"] = to_string(s.sigma_mode);
    man.input_hashes["data"] = data.hash;
    nlohmann::ordered_json run_hashes = nlohmann::ordered_json::array();
    for (const auto& r : runs) {
        run_hashes.push_back({{"run", fs::relative(r.dir, a.runs).generic_string()},
                              {"checkpoint", git_blob_hash_file(join(r.dir, "checkpoint.emck"))}});
    }
    man.input_hashes["runs"] = run_hashes;

    const std::size_t K = systems.front().agents.size();
    std::vector<BoundReport> reports;
    for (std::size_t k = 1; k <= K; ++k) reports.push_back(bound_report(systems, sp.train, sp.heldout, k, s));

    std::printf("%-6s %6s %5s %6s %8s %12s %12s %12s %12s %12s %6s\n", "agent", "n", "t", "delta", "sigma", "d_t",
                "log D_k", "log M_k", "bound", "gap", "holds");
    for (const auto& rep : reports) {
        const std::string name = "bound_agent" + std::to_string(rep.agent_id) + ".json";
        write_file_atomic(join(out, name), to_json(rep).dump(2) + "\n");
        man.outputs["agent" + std::to_string(rep.agent_id)] = name;
        std::printf("%-6zu %6zu %5.2f %6.3f %8.4f %12.4g %12.4g %12.4g %12.4g %12.4g %6s\n", rep.agent_id, rep.n,
                    rep.t, rep.delta, rep.sigma, rep.d_t, rep.log_d_k, rep.log_m_k, rep.bound, rep.measured_gap,
                    rep.holds ? "yes" : "NO");
    }
    std::printf("population loss proxied by the held-out mean loss; sigma mode %s%s\n", to_string(s.sigma_mode),
                s.sigma_mode == SigmaMode::sample ? " (heuristic)" : "");
    man.write(join(out, "bound_manifest.json"));
    return exit_ok;
}

void setup_logging() {
    auto logger = spdlog::stderr_logger_mt("emcomm");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    const char* env = std::getenv("EMCOMM_LOG");
    const std::string level = env ? env : "info";
    if (level == "error") {
        spdlog::set_level(spdlog::level::err);
    } else if (level == "debug") {
        spdlog::set_level(spdlog::level::debug);
    } else {
        spdlog::set_level(spdlog::level::info);
        if (level != "info") spdlog::warn("EMCOMM_LOG={} not recognized; using info", level);
    }
}

void add_overrides(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--baseline", o.baseline, "Training mode: ec-sota or none")
        ->check(CLI::IsMember({"ec-sota", "none"}));
    cmd->add_option("--lambda-t", o.lambda_t, "Task-relevance weight for every agent");
    cmd->add_option("--lambda-c", o.lambda_c, "Complexity weight for every agent");
    cmd->add_option("--dc", o.dc, "Message dimension (0 disables communication)");
    cmd->add_option("--bits", o.bits, "Inference quantization: 0, 4, 8 or 16");
    cmd->add_option("--iterations", o.iterations, "Gradient steps");
}

} // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Emergent communication with a distributed information bottleneck"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Simulate (or ingest) a dataset");
    gen_cmd->add_option("--config", gen.config, "TOML config")->required();
    gen_cmd->add_option("--out", gen.out, "Dataset file to write")->required();
    gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->required();

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train the joint system or the baseline");
    train_cmd->add_option("--config", tr.config, "TOML config")->required();
    train_cmd->add_option("--data", tr.data, "Dataset file")->required();
    train_cmd->add_option("--out", tr.out, "Output directory")->required();
    train_cmd->add_option("--seed", tr.seed, "Training seed")->required();
    add_overrides(train_cmd, tr.overrides);

    SweepArgs sw;
    auto* sweep_cmd = app.add_subcommand("sweep", "Train a grid of parameter values x seeds");
    sweep_cmd->add_option("--config", sw.config, "TOML config")->required();
    sweep_cmd->add_option("--data", sw.data, "Dataset file")->required();
    sweep_cmd->add_option("--out", sw.out, "Output directory")->required();
    sweep_cmd->add_option("--param", sw.param, "lambda_c, lambda_t, dc or bits")->required();
    sweep_cmd->add_option("--values", sw.values, "Comma-separated values")->required()->delimiter(',');
    sweep_cmd->add_option("--seeds", sw.seeds, "Comma-separated seeds")->required()->delimiter(',');
    sweep_cmd->add_option("--jobs", sw.jobs, "Worker threads (default: logical cores)");
    add_overrides(sweep_cmd, sw.overrides);

    BoundArgs bd;
    auto* bound_cmd = app.add_subcommand("bound", "Generalization bound report over checkpointed runs");
    bound_cmd->add_option("--runs", bd.runs, "Directory containing run directories")->required();
    bound_cmd->add_option("--t", bd.t, "Renyi order (> 1)");
    bound_cmd->add_option("--delta", bd.delta, "Confidence parameter in (0, 1)");
    bound_cmd->add_option("--sigma-mode", bd.sigma_mode, "range or sample");
    bound_cmd->add_option("--loss-range", bd.loss_range, "Loss range a,b for range mode")->delimiter(',');
    bound_cmd->add_option("--prior-variance", bd.prior_variance, "Isotropic prior variance");
    bound_cmd->add_option("--data", bd.data, "Dataset file (default: path recorded in the manifests)");
    bound_cmd->add_option("--out", bd.out, "Report directory (default: --runs)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? exit_ok : exit_usage;
    }

    if (*gen_cmd) return guarded([&] { return cmd_gen_data(gen); });
    if (*train_cmd) return guarded([&] { return cmd_train(tr); });
    if (*sweep_cmd) return guarded([&] { return cmd_sweep(sw); });
    return guarded([&] { return cmd_bound(bd); });
}
