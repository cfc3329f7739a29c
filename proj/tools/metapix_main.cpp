// Command-line entry point: data generation, training, evaluation, weight
// export, and gradient certification, all driven by a JSON config with
// dotted-key overrides.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "metapix/config.hpp"
#include "metapix/gradcheck.hpp"
#include "metapix/meta.hpp"
#include "metapix/restore.hpp"

using namespace metapix;
namespace fs = std::filesystem;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string data_dir;
    std::string out_root;
    std::string run_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_option("--set", args.overrides, "override a config key, e.g. schedule.N2=600");
    cmd->add_option("--data", args.data_dir, "dataset directory (overrides config data_dir)");
    cmd->add_option("--out", args.out_root, "root directory for run outputs");
    cmd->add_option("--run-dir", args.run_dir, "exact run directory (overrides --out)");
}

config::RunConfig resolve_config(const CommonArgs& args) {
    nlohmann::json j;
    if (!args.config_path.empty()) {
        std::ifstream f(args.config_path);
        require(f.good(), "cannot open config " + args.config_path);
        j = nlohmann::json::parse(f);
    } else {
        j = config::to_json(config::RunConfig{});
    }
    for (const auto& o : args.overrides) config::apply_override(j, o);
    auto cfg = config::from_json(j);
    if (!args.data_dir.empty()) cfg.data_dir = args.data_dir;
    cfg.validate();
    return cfg;
}

std::string resolve_run_dir(const CommonArgs& args, const config::RunConfig& cfg,
                            const std::string& kind) {
    if (!args.run_dir.empty()) return args.run_dir;
    if (!cfg.run_dir.empty()) return cfg.run_dir;
    std::string root = args.out_root;
    if (root.empty()) {
        const char* env = std::getenv("METAPIX_RUN_ROOT");
        root = env ? env : "runs";
    }
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    const long stamp = std::chrono::duration_cast<std::chrono::seconds>(now).count();
    return root + "/" + kind + "-" + std::to_string(stamp) + "-s" + std::to_string(cfg.seed);
}

template <class Real>
int run_training(const config::RunConfig& cfg, const std::string& run_dir, bool full_schedule) {
    auto manifest = data::load_manifest(cfg.data_dir);
    auto cfg_echo = cfg;
    cfg_echo.run_dir = run_dir;
    cfg_echo.data_dir = cfg.data_dir;
    const std::string echo = config::echo(cfg_echo, run_dir);

    meta::TrainerOptions opt{cfg.seed, run_dir, cfg.checkpoint_every, echo};
    if (full_schedule) {
        meta::Trainer<Real> trainer(manifest, cfg.schedule, cfg.seg_config(), cfg.wnet_config(),
                                    opt);
        trainer.run();
    } else {
        auto sched = cfg.schedule;
        sched.N2 = 0;
        sched.N3 = 0;
        sched.G = 0;
        meta::run_pretrain_only<Real>(manifest, sched, cfg.seg_config(), cfg.wnet_config(), opt);
    }
    std::ifstream csv(run_dir + "/iou.csv");
    std::printf("%s", std::string(std::istreambuf_iterator<char>(csv),
                                  std::istreambuf_iterator<char>())
                          .c_str());
    std::printf("run directory: %s\n", run_dir.c_str());
    return 0;
}

template <class Real>
int run_evaluate(const config::RunConfig& cfg, const ckpt::Reader& reader,
                 const std::string& split, const std::string& csv_out) {
    auto manifest = data::load_manifest(cfg.data_dir);
    auto seg = restore::seg_from_checkpoint<Real>(reader, cfg);
    auto rep = meta::evaluate_split(seg, manifest, split);
    const std::string csv = eval::iou_csv(rep);
    if (!csv_out.empty()) {
        std::ofstream f(csv_out, std::ios::trunc);
        require(f.good(), "cannot write " + csv_out);
        f << csv;
    }
    std::fputs(csv.c_str(), stdout);
    return 0;
}

template <class Real>
int run_export_weights(const config::RunConfig& cfg, const ckpt::Reader& reader,
                       const std::string& out_dir, int count) {
    auto manifest = data::load_manifest(cfg.data_dir);
    auto wnet = restore::wnet_from_checkpoint<Real>(reader, cfg);
    fs::create_directories(out_dir);

    NoGradScope<Real> no_grad;
    const auto items = manifest.split("source");
    const int n = std::min<int>(count, int(items.size()));
    for (int i = 0; i < n; ++i) {
        auto batch = data::load_batch<Real>(manifest, "source", i);
        auto onehot = losses::one_hot<Real>(batch.label, manifest.spec.num_classes);
        auto w = wnet.forward(wnet.params, batch.image, onehot);
        char name[32];
        std::snprintf(name, sizeof name, "weights_%06d.png", i);
        IntMap label2d = IntMap::zeros({batch.label.shape[1], batch.label.shape[2]});
        std::copy(batch.label.v.begin(), batch.label.v.end(), label2d.v.begin());
        eval::export_weight_map(w, out_dir + "/" + std::string(name), &label2d);
    }

    auto stats = restore::weight_separation(wnet, manifest);
    nlohmann::json j{{"corrupted_mean_weight", stats.corrupted_mean()},
                     {"clean_mean_weight", stats.clean_mean()},
                     {"corrupted_pixels", stats.corrupted_n},
                     {"clean_pixels", stats.clean_n},
                     {"maps_exported", n}};
    std::ofstream f(out_dir + "/weights_summary.json", std::ios::trunc);
    f << j.dump(2) << "\n";
    std::printf("%s\n", j.dump(2).c_str());
    return 0;
}

int run_gradcheck(const std::vector<std::uint64_t>& seeds, const std::string& out_path) {
    nlohmann::json report;
    bool all_pass = true;

    for (auto seed : seeds) {
        for (const auto& rep : gradcheck::check_all_primitives(seed)) {
            report["primitives"].push_back(rep.to_json());
            all_pass = all_pass && rep.pass;
            std::printf("[%s] primitive %-24s seed %llu: max rel err %.3e\n",
                        rep.pass ? "pass" : "FAIL", rep.name.c_str(),
                        (unsigned long long)seed, rep.max_rel_err);
            if (!rep.pass) continue;
        }
        auto meta_rep = gradcheck::check_meta_gradient(seed);
        report["meta_gradient"].push_back(meta_rep.to_json());
        all_pass = all_pass && meta_rep.pass;
        std::printf("[%s] meta-gradient seed %llu: max rel err %.3e over %ld parameters\n",
                    meta_rep.pass ? "pass" : "FAIL", (unsigned long long)seed,
                    meta_rep.max_rel_err, meta_rep.compared);
    }
    report["pass"] = all_pass;
    if (!out_path.empty()) {
        std::ofstream f(out_path, std::ios::trunc);
        f << report.dump(2) << "\n";
    }
    std::printf("gradcheck: %s\n", all_pass ? "PASS" : "FAIL");
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MetaPix: meta-learned per-pixel weighting for domain transfer segmentation"};
    app.require_subcommand(1);

    CommonArgs gen_args, pre_args, mp_args, res_args;
    std::string eval_ckpt, eval_split = "target_val", eval_csv;
    std::string exp_ckpt, exp_out = "weight_maps";
    int exp_count = 16;
    std::string gc_seeds = "0", gc_out;
    std::string resume_ckpt;
    CommonArgs eval_args, exp_args;

    auto* gen = app.add_subcommand("generate-data", "write the synthetic two-domain dataset");
    add_common(gen, gen_args);

    auto* pre = app.add_subcommand("pretrain", "joint training without meta weighting");
    add_common(pre, pre_args);

    auto* mp = app.add_subcommand("metapix", "full schedule: pretrain, meta, weighted training");
    add_common(mp, mp_args);

    auto* ev = app.add_subcommand("evaluate", "per-class IoU / mIoU of a checkpoint");
    add_common(ev, eval_args);
    ev->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
    ev->add_option("--split", eval_split, "dataset split (default target_val)");
    ev->add_option("--csv", eval_csv, "also write the CSV here");

    auto* ex = app.add_subcommand("export-weights", "weight-map images + corruption statistics");
    add_common(ex, exp_args);
    ex->add_option("--checkpoint", exp_ckpt, "checkpoint file")->required();
    ex->add_option("--out-dir", exp_out, "output directory for weight maps");
    ex->add_option("--count", exp_count, "number of maps to export");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference certification (exit 1 on failure)");
    gc->add_option("--seeds", gc_seeds, "comma-separated seeds (default 0)");
    gc->add_option("--report", gc_out, "write the JSON CheckReport here");

    auto* rs = app.add_subcommand("resume", "continue an interrupted run from a checkpoint");
    add_common(rs, res_args);
    rs->add_option("--checkpoint", resume_ckpt, "checkpoint file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto cfg = resolve_config(gen_args);
            const std::string out = gen_args.data_dir.empty() ? cfg.data_dir : gen_args.data_dir;
            auto manifest = data::generate(cfg.data, out);
            std::printf("wrote %zu files under %s\n", manifest.items.size(), out.c_str());
            return 0;
        }
        if (pre->parsed() || mp->parsed()) {
            const bool full = mp->parsed();
            auto& args = full ? mp_args : pre_args;
            auto cfg = resolve_config(args);
            const std::string run_dir = resolve_run_dir(args, cfg, full ? "metapix" : "pretrain");
            return cfg.precision == "f64" ? run_training<double>(cfg, run_dir, full)
                                          : run_training<float>(cfg, run_dir, full);
        }
        if (ev->parsed()) {
            ckpt::Reader reader(eval_ckpt);
            auto cfg = restore::config_from_checkpoint(reader);
            if (!eval_args.data_dir.empty()) cfg.data_dir = eval_args.data_dir;
            for (const auto& o : eval_args.overrides) {
                auto j = config::to_json(cfg);
                config::apply_override(j, o);
                cfg = config::from_json(j);
            }
            return cfg.precision == "f64"
                       ? run_evaluate<double>(cfg, reader, eval_split, eval_csv)
                       : run_evaluate<float>(cfg, reader, eval_split, eval_csv);
        }
        if (ex->parsed()) {
            ckpt::Reader reader(exp_ckpt);
            auto cfg = restore::config_from_checkpoint(reader);
            if (!exp_args.data_dir.empty()) cfg.data_dir = exp_args.data_dir;
            return cfg.precision == "f64"
                       ? run_export_weights<double>(cfg, reader, exp_out, exp_count)
                       : run_export_weights<float>(cfg, reader, exp_out, exp_count);
        }
        if (gc->parsed()) {
            std::vector<std::uint64_t> seeds;
            size_t start = 0;
            while (start <= gc_seeds.size()) {
                const auto comma = gc_seeds.find(',', start);
                const auto tok = gc_seeds.substr(
                    start, comma == std::string::npos ? comma : comma - start);
                if (!tok.empty()) seeds.push_back(std::stoull(tok));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
            require(!seeds.empty(), "gradcheck: no seeds given");
            return run_gradcheck(seeds, gc_out);
        }
        if (rs->parsed()) {
            ckpt::Reader reader(resume_ckpt);
            auto cfg = restore::config_from_checkpoint(reader);
            if (!res_args.data_dir.empty()) cfg.data_dir = res_args.data_dir;
            const std::string run_dir =
                res_args.run_dir.empty() ? cfg.run_dir : res_args.run_dir;
            require(!run_dir.empty(), "resume: no run directory (use --run-dir)");
            auto manifest = data::load_manifest(cfg.data_dir);
            meta::TrainerOptions opt{cfg.seed, run_dir, cfg.checkpoint_every,
                                     reader.read_bytes("config")};
            if (cfg.precision == "f64") {
                meta::Trainer<double> trainer(manifest, cfg.schedule, cfg.seg_config(),
                                              cfg.wnet_config(), opt);
                trainer.load_checkpoint(resume_ckpt);
                trainer.run();
                std::printf("final target_val mIoU: %.4f\n", trainer.last_miou());
            } else {
                meta::Trainer<float> trainer(manifest, cfg.schedule, cfg.seg_config(),
                                             cfg.wnet_config(), opt);
                trainer.load_checkpoint(resume_ckpt);
                trainer.run();
                std::printf("final target_val mIoU: %.4f\n", trainer.last_miou());
            }
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
