#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "gmx/analysis.hpp"
#include "gmx/backbone.hpp"
#include "gmx/config.hpp"
#include "gmx/error.hpp"
#include "gmx/grad_check.hpp"
#include "gmx/ops.hpp"
#include "gmx/serialize.hpp"
#include "gmx/train.hpp"

namespace {

using namespace gmx;

// stdout carries machine-parseable CSV / key=value only; prose goes here.
void note(const std::string& msg) { std::cerr << msg << "\n"; }

void write_text_atomic(const std::string& path, const std::string& text) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(target.parent_path(), ec);
    }
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
        f << text;
        f.flush();
        if (!f) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot rename temp file onto '" + path + "'");
}

struct ModelArgs {
    std::string preset;
    std::string config_path;

    void attach(CLI::App* cmd) {
        auto* p = cmd->add_option("--preset", preset, "preset name (M T S B L)");
        auto* c = cmd->add_option("--config", config_path, "JSON config file");
        p->excludes(c);
        c->excludes(p);
    }

    // returns the model config plus the file seed (if a file supplied one)
    FileConfig resolve() const {
        if (!preset.empty() && !config_path.empty())
            throw ConfigError("--preset and --config are mutually exclusive");
        if (!preset.empty()) {
            if (!ModelConfig::is_preset_name(preset))
                throw ConfigError("unknown preset '" + preset + "'");
            FileConfig fc;
            fc.model = ModelConfig::preset(preset);
            fc.preset = preset;
            return fc;
        }
        if (!config_path.empty()) return load_config_file(config_path);
        throw ConfigError("one of --preset or --config is required");
    }
};

std::string bool_csv(const std::array<bool, 4>& a) {
    std::string s;
    for (int i = 0; i < 4; ++i) {
        if (i) s += ",";
        s += a[static_cast<std::size_t>(i)] ? "1" : "0";
    }
    return s;
}

int cmd_describe(const ModelArgs& margs, int64_t res) {
    FileConfig fc = margs.resolve();
    const ModelConfig& cfg = fc.model;
    cfg.validate();
    if (res % 32 != 0) throw ConfigError("--res must be divisible by 32");

    std::ostringstream out;
    if (fc.preset) out << "preset=" << *fc.preset << "\n";
    out << "res=" << res << "\n";
    int64_t side = res / 4;
    for (int i = 0; i < 4; ++i) {
        const StageConfig& s = cfg.stages[static_cast<std::size_t>(i)];
        out << "stage" << i << ".dim=" << s.dim << "\n";
        out << "stage" << i << ".ratio=" << s.ratio << "\n";
        out << "stage" << i << ".depth=" << s.depth << "\n";
        out << "stage" << i << ".heads=" << s.heads << "\n";
        out << "stage" << i << ".out_size=" << side << "x" << side << "\n";
        side /= 2;
    }
    out << "num_classes=" << cfg.num_classes << "\n";
    out << "drop_path_rate=" << cfg.drop_path_rate << "\n";
    out << "softmax_on_context=" << (cfg.softmax_on_context ? 1 : 0) << "\n";
    out << "total_depth=" << cfg.total_depth() << "\n";
    out << "branches.enabled=" << bool_csv(cfg.branches.enabled) << "\n";
    out << "branches.kind=" << agg_kind_name(cfg.branches.kind) << "\n";
    for (int s = 0; s < 4; ++s) {
        const auto& row = cfg.branches.kernels[static_cast<std::size_t>(s)];
        out << "branches.kernels" << s << "=" << row[0] << "," << row[1] << ","
            << row[2] << "\n";
    }
    out << "branches.non_att_kernel=" << cfg.branches.non_att_kernel << "\n";
    std::cout << out.str();
    return 0;
}

int cmd_cost(const ModelArgs& margs, int64_t res, int64_t batch,
             const std::string& out_path) {
    FileConfig fc = margs.resolve();
    CostReport report = estimate_cost(fc.model, res, res, batch);
    const std::string csv = report.to_csv();
    if (!out_path.empty()) {
        write_text_atomic(out_path, csv);
        note("wrote " + out_path);
    }
    std::cout << csv;
    return 0;
}

// ---- gradcheck ----

struct CheckLine {
    std::string name;
    GradCheckResult res;
};

void print_checks(const std::vector<CheckLine>& lines) {
    char buf[224];
    for (const auto& c : lines) {
        std::snprintf(buf, sizeof(buf), "check=%s pass=%d rel_err=%.3e",
                      c.name.c_str(), c.res.pass ? 1 : 0, c.res.max_rel_err);
        std::cout << buf;
        if (!c.res.worst_name.empty())
            std::cout << " worst=" << c.res.worst_name << "[" << c.res.worst_index
                      << "]";
        else if (c.res.worst_index >= 0)
            std::cout << " worst_index=" << c.res.worst_index;
        if (!c.res.note.empty()) std::cout << " note=" << c.res.note;
        std::cout << "\n";
    }
}

int cmd_gradcheck(const std::string& scale, uint64_t seed) {
    if (scale != "tiny" && scale != "small")
        throw ConfigError("--scale must be 'tiny' or 'small'");
    namespace op = gmx::ops;
    std::vector<CheckLine> lines;
    Rng rng(seed, 1);

    auto mk = [&](Shape shape) {
        Tensor t = Tensor::zeros(shape);
        for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
        return t;
    };
    auto check_op = [&](const std::string& name, const Tensor& x0,
                        const std::function<Tensor(Tape&, const Tensor&)>& f) {
        lines.push_back({"op." + name, grad_check(f, x0, 1e-5, 1e-4)});
    };

    const int64_t B = 2, N = 6, D = 8;
    // every tensor a closure needs is drawn once up front: the checked
    // function must be deterministic across repeated evaluations
    Tensor w = mk({D, D});
    Tensor bias = mk({D});

    {
        Tensor rhs = mk({5, 3}), ws = mk({4, 3});
        check_op("matmul", mk({4, 5}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::matmul(&t, x, rhs), ws));
        });
    }
    {
        Tensor ws = mk({B, N, D});
        check_op("linear", mk({B, N, D}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::linear(&t, x, w, bias), ws));
        });
        check_op("softmax", mk({B, N, D}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::softmax(&t, x, 2), ws));
        });
        Tensor gamma = mk({D}), beta = mk({D});
        check_op("layer_norm", mk({B, N, D}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::layer_norm(&t, x, gamma, beta, 2), ws));
        });
        check_op("gelu", mk({B, N, D}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::gelu(&t, x), ws));
        });
    }
    {
        // fixed points away from the hardswish kinks at -3 and +3
        Tensor hx = Tensor::from_data({2, 4}, {-2.8, -1.5, -0.4, 0.3, 1.2, 2.7, -3.6, 3.8});
        Tensor ws = mk({2, 4});
        check_op("hardswish", hx, [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::hardswish(&t, x), ws));
        });
    }
    {
        Tensor k3 = mk({3, 3, 3}), kb = mk({3}), ws = mk({B, 3, 5, 5});
        check_op("conv_dw3", mk({B, 3, 5, 5}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::conv2d_depthwise(&t, x, k3, kb), ws));
        });
    }
    {
        Tensor k3 = mk({3, 3, 3}), kb = mk({3}), ws = mk({B, 3, 3, 3});
        check_op("conv_dw_strided", mk({B, 3, 6, 6}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::conv2d_depthwise_strided2(&t, x, k3, kb), ws));
        });
    }
    {
        Tensor pw = mk({6, 4}), pb = mk({6}), ws = mk({B, 6, 4, 4});
        check_op("conv_pw", mk({B, 4, 4, 4}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::conv2d_pointwise(&t, x, pw, pb), ws));
        });
    }
    {
        Tensor dk = mk({5, 3, 3, 3}), db = mk({5}), ws = mk({B, 5, 3, 3});
        check_op("conv_dense_s2", mk({B, 3, 6, 6}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::conv2d_strided(&t, x, dk, db, 2), ws));
        });
    }
    {
        // well-separated values so min/max pool picks are stable under FD
        Tensor px = Tensor::zeros({1, 2, 4, 4});
        for (int64_t i = 0; i < px.numel(); ++i)
            px.data()[static_cast<size_t>(i)] = std::sin(0.917 * static_cast<double>(i) + 0.3) *
                                                (1.0 + 0.07 * static_cast<double>(i));
        Tensor ws = mk({1, 2, 4, 4});
        using op::PoolKind;
        for (PoolKind kind : {PoolKind::avg, PoolKind::min, PoolKind::max}) {
            const std::string kn = kind == PoolKind::avg   ? "pool_avg"
                                   : kind == PoolKind::min ? "pool_min"
                                                           : "pool_max";
            check_op(kn, px, [=](Tape& t, const Tensor& x) {
                return op::sum(&t, op::mul(&t, op::pool2d(&t, x, kind, 3), ws));
            });
        }
    }
    {
        Tensor ws = mk({B, 3});
        check_op("global_avg_pool", mk({B, 3, 4, 4}), [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::global_avg_pool(&t, x), ws));
        });
    }
    {
        const int64_t dh = 4;
        Tensor q = mk({1, 2, N, dh}), k = mk({1, 2, N, dh}), v = mk({1, 2, N, dh});
        Tensor ws = mk({1, 2, N, dh});
        check_op("factorized_attention_q", q, [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::factorized_attention(&t, x, k, v, 0.5), ws));
        });
        check_op("factorized_attention_k", k, [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::factorized_attention(&t, q, x, v, 0.5), ws));
        });
        check_op("vanilla_attention_k", k, [=](Tape& t, const Tensor& x) {
            return op::sum(&t, op::mul(&t, op::vanilla_attention(&t, q, x, v, 0.5), ws));
        });
    }
    check_op("cross_entropy", mk({4, 3}), [](Tape& t, const Tensor& x) {
        return op::cross_entropy(&t, x, std::vector<int>{0, 2, 1, 2});
    });

    // end-to-end toy model probes
    ModelConfig toy;
    for (auto& s : toy.stages) s = StageConfig{10, 2.0, 1, 2};
    toy.num_classes = 2;
    toy.drop_path_rate = 0.0;
    Model m = build_model(toy, seed);

    const int64_t res = scale == "tiny" ? 64 : 96;
    Tensor image = Tensor::zeros({1, 3, res, res});
    {
        Rng irng(seed, 2);
        for (auto& v : image.data()) v = irng.uniform(0.0, 1.0);
    }
    const std::vector<int> label{1};
    auto fwd = [&](Tape& t) {
        ModelOutput out = model_forward(&t, m, image, false, nullptr);
        return op::cross_entropy(&t, out.logits, label);
    };
    const std::vector<std::string> probe_names = {
        "stem.conv1.w",     "stem.conv4.w",  "stem.norm2.g",
        "stage0.block0.ln1.g", "stage0.block0.gma.qkv.w",
        "stage0.block0.gma.branch1.dw.k", "stage0.block0.gma.branch1.norm.g",
        "stage0.block0.gma.nonatt.dw.k",  "stage0.block0.gma.nonatt.pw.w",
        "stage0.block0.gma.ensemble.lin.w", "stage0.block0.ffn.w1",
        "stage0.block0.ffn.b2", "stage1.embed.dw.k", "stage1.embed.pw.w",
        "stage1.block0.gma.branch2.dw.k", "stage1.block0.gma.qkv.b",
        "stage2.embed.pw.w", "stage2.block0.gma.branch3.dw.k",
        "stage2.block0.ffn.w2", "stage3.embed.dw.k",
        "stage3.block0.gma.ensemble.norm.g", "head.norm.g", "head.linear.w",
        "head.linear.b"};
    std::vector<ParamProbe> probes;
    for (const auto& name : probe_names) {
        const Tensor* t = m.store.find(name);
        if (!t) throw ContractError("gradcheck: missing parameter '" + name + "'");
        probes.push_back({*t, t->numel() / 2, name});
    }
    lines.push_back({"model.end_to_end", grad_check_params(fwd, probes, 1e-5, 1e-3)});

    print_checks(lines);
    bool all_pass = true;
    for (const auto& c : lines) all_pass = all_pass && c.res.pass;
    std::cout << "all_pass=" << (all_pass ? 1 : 0) << "\n";
    if (!all_pass) throw NumericError("gradcheck: at least one check failed");
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              int64_t steps, int64_t batch, std::optional<uint64_t> flag_seed,
              double lr, int64_t warmup, int64_t log_every,
              const std::string& resume, int64_t start_step, double stop_at) {
    namespace fs = std::filesystem;
    if (out_dir.empty()) throw ConfigError("train: --out directory is required");

    FileConfig fc;
    if (!config_path.empty()) {
        fc = load_config_file(config_path);
    } else {
        fc.model = toy_model_config(true);
    }
    const uint64_t seed = resolve_seed(flag_seed, fc.seed, 42);

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    // Fail on an unwritable destination before paying for the run.
    const fs::path probe = fs::path(out_dir) / ".write_probe";
    {
        std::ofstream f(probe);
        if (!f) throw IoError("train: output directory '" + out_dir + "' is not writable");
    }
    fs::remove(probe, ec);

    Model m = build_model(fc.model, seed);
    if (!resume.empty()) {
        load_weights(resume, m.store);
        note("resumed from " + resume);
    }

    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = batch;
    tc.warmup = warmup;
    tc.base_lr = lr;
    tc.seed = seed;
    tc.log_every = log_every;
    tc.start_step = start_step;
    tc.stop_at_accuracy = stop_at;

    std::ostringstream metrics;
    TrainResult r = train_model(m, tc, &metrics);

    const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    const std::string weights_path = (fs::path(out_dir) / "final.gmxw").string();
    write_text_atomic(metrics_path, metrics.str());
    save_weights(weights_path, m.store);
    std::cout << metrics.str();
    note("wrote " + metrics_path);
    note("wrote " + weights_path);
    if (r.diverged)
        throw NumericError("train: numeric divergence at step " +
                           std::to_string(r.diverged_step));
    {
        std::ostringstream s;
        s << "final loss " << r.final_loss << ", accuracy " << r.final_accuracy
          << " after " << r.steps_run << " steps";
        note(s.str());
    }
    return 0;
}

int cmd_bench(const std::string& sizes_csv, int heads, int64_t dhead, int reps,
              std::optional<uint64_t> flag_seed) {
    std::vector<int64_t> sizes;
    std::stringstream ss(sizes_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            sizes.push_back(std::stoll(tok));
        } catch (const std::exception&) {
            throw ConfigError("bench: bad size '" + tok + "'");
        }
    }
    const uint64_t seed = resolve_seed(flag_seed, std::nullopt, 42);
    BenchResult r = bench_attention(sizes, heads, dhead, reps, seed);
    std::cout << r.to_csv();
    char buf[64];
    std::snprintf(buf, sizeof(buf), "slope_factorized=%.4f\n", r.slope_factorized);
    std::cout << buf;
    std::snprintf(buf, sizeof(buf), "slope_vanilla=%.4f\n", r.slope_vanilla);
    std::cout << buf;
    std::snprintf(buf, sizeof(buf), "mac_slope_factorized=%.4f\n", r.mac_slope_factorized);
    std::cout << buf;
    std::snprintf(buf, sizeof(buf), "mac_slope_vanilla=%.4f\n", r.mac_slope_vanilla);
    std::cout << buf;
    return 0;
}

int cmd_ablate(const std::string& base, const std::string& out_dir) {
    namespace fs = std::filesystem;
    if (out_dir.empty()) throw ConfigError("ablate: --out directory is required");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    for (const AblationVariant& v : ablation_grid(base)) {
        ModelConfig cfg = make_ablation_variant(v);
        const std::string path = (fs::path(out_dir) / (v.name + ".json")).string();
        write_text_atomic(path, config_to_json(cfg, std::nullopt));
        std::cout << v.name << "=" << path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GroupMix attention backbone tool"};
    app.require_subcommand(1);

    ModelArgs describe_args;
    int64_t describe_res = 224;
    CLI::App* describe = app.add_subcommand("describe", "print model structure");
    describe_args.attach(describe);
    describe->add_option("--res", describe_res, "input resolution");

    ModelArgs cost_args;
    int64_t cost_res = 224, cost_batch = 1;
    std::string cost_out;
    CLI::App* cost = app.add_subcommand("cost", "analytic params/FLOPs CSV");
    cost_args.attach(cost);
    cost->add_option("--res", cost_res, "input resolution");
    cost->add_option("--batch", cost_batch, "batch size");
    cost->add_option("--out", cost_out, "also write CSV to this file");

    std::string gc_scale = "tiny";
    std::optional<uint64_t> gc_seed;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference suite");
    gradcheck->add_option("--scale", gc_scale, "tiny|small");
    gradcheck->add_option("--seed", gc_seed, "rng seed");

    std::string train_config, train_out, train_resume;
    int64_t train_steps = 2000, train_batch = 32, train_warmup = 100;
    int64_t train_log_every = 10, train_start = 0;
    double train_lr = 3e-3, train_stop = -1.0;
    std::optional<uint64_t> train_seed;
    CLI::App* train = app.add_subcommand("train", "train the toy model");
    train->add_option("--config", train_config, "JSON config file (default: toy model)");
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--steps", train_steps, "optimizer steps");
    train->add_option("--batch", train_batch, "batch size");
    train->add_option("--seed", train_seed, "rng seed");
    train->add_option("--lr", train_lr, "base learning rate");
    train->add_option("--warmup", train_warmup, "warmup steps");
    train->add_option("--log-every", train_log_every, "metrics interval");
    train->add_option("--resume", train_resume, "weights archive to resume from");
    train->add_option("--start-step", train_start, "first global step of this run");
    train->add_option("--stop-at", train_stop, "early-stop rolling accuracy");

    std::string bench_sizes = "64,128,256,512,1024,2048,4096";
    int bench_heads = 1, bench_reps = 3;
    int64_t bench_dhead = 16;
    std::optional<uint64_t> bench_seed;
    CLI::App* bench = app.add_subcommand("bench", "attention scaling benchmark");
    bench->add_option("--sizes", bench_sizes, "comma-separated token counts");
    bench->add_option("--heads", bench_heads, "attention heads");
    bench->add_option("--dhead", bench_dhead, "per-head dimension");
    bench->add_option("--reps", bench_reps, "timed repetitions per size");
    bench->add_option("--seed", bench_seed, "rng seed");

    std::string ablate_base = "T", ablate_out;
    CLI::App* ablate = app.add_subcommand("ablate", "emit ablation config grid");
    ablate->add_option("--base", ablate_base, "base preset");
    ablate->add_option("--out", ablate_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(describe)) return cmd_describe(describe_args, describe_res);
        if (app.got_subcommand(cost))
            return cmd_cost(cost_args, cost_res, cost_batch, cost_out);
        if (app.got_subcommand(gradcheck))
            return cmd_gradcheck(gc_scale, resolve_seed(gc_seed, std::nullopt, 42));
        if (app.got_subcommand(train))
            return cmd_train(train_config, train_out, train_steps, train_batch,
                             train_seed, train_lr, train_warmup, train_log_every,
                             train_resume, train_start, train_stop);
        if (app.got_subcommand(bench))
            return cmd_bench(bench_sizes, bench_heads, bench_dhead, bench_reps, bench_seed);
        if (app.got_subcommand(ablate)) return cmd_ablate(ablate_base, ablate_out);
    } catch (const ConfigError& e) {
        note(std::string("gmx: ") + e.what());
        return 2;
    } catch (const ShapeError& e) {
        note(std::string("gmx: ") + e.what());
        return 2;
    } catch (const ContractError& e) {
        note(std::string("gmx: ") + e.what());
        return 2;
    } catch (const IoError& e) {
        note(std::string("gmx: ") + e.what());
        return 3;
    } catch (const NumericError& e) {
        note(std::string("gmx: ") + e.what());
        return 4;
    }
    return 2;
}
