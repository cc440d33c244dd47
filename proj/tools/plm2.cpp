// plm2: desk-scale latent-thought language model toolkit.
//
// Subcommands: train, cpt, eval, generate, diagnose-jacobi, compare.
// Exit codes: 0 success, 1 configuration error, 2 runtime error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "plm2/config.hpp"
#include "plm2/eval.hpp"

namespace fs = std::filesystem;
using namespace plm2;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::string ckpt;
    std::string method;
    int64_t seed = -1;
    int threads = 0;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_path, "config file (flat key = value)");
    cmd->add_option("--set", a.overrides, "override, key=value (repeatable)")
        ->take_all()
        ->allow_extra_args(false);
    cmd->add_option("--out", a.out_dir, "output directory");
    cmd->add_option("--seed", a.seed, "seed override");
    cmd->add_option("--threads", a.threads, "worker threads (PLM2_THREADS as fallback)");
    cmd->add_option("--method", a.method, "method: vanilla|ponder|looped|pause|pondering");
}

// Builds the effective settings (file -> --set -> dedicated flags), applies
// the thread count, and echoes resolved-config to the output directory.
RunSettings resolve(const CommonArgs& a, const std::string& default_out) {
    ConfigMap map;
    if (!a.config_path.empty()) map = parse_config_file(a.config_path);
    for (const auto& kv : a.overrides) apply_override(map, kv);
    if (!a.out_dir.empty()) map["out"] = a.out_dir;
    if (a.seed >= 0) map["seed"] = std::to_string(a.seed);
    if (!a.method.empty()) map["method"] = a.method;
    if (a.threads > 0) map["threads"] = std::to_string(a.threads);

    RunSettings s = settings_from_map(map);
    if (s.train.out_dir == "run" && map.find("out") == map.end()) s.train.out_dir = default_out;
    s.threads = resolve_threads(s.threads);
    set_threads(s.threads);

    fs::create_directories(s.train.out_dir);
    std::ofstream rc(s.train.out_dir + "/resolved-config");
    if (!rc) throw IoError("cannot write resolved-config under " + s.train.out_dir);
    rc << resolved_config_text(settings_to_map(s));
    return s;
}

void eval_and_report(const RunSettings& s, const std::string& ckpt_path) {
    auto loaded = load_checkpoint(ckpt_path);
    Corpus corpus = load_corpus(s);
    auto split = split_corpus(corpus, s.val_fraction);
    auto hashes = window_hashes(split.train, loaded.config.window);
    EvalReport rep = perplexity(loaded.model, split.val, loaded.config.method,
                                loaded.config.ponder, loaded.config.baseline,
                                loaded.config.window, &hashes);
    FlopsReport fl = flops_report(loaded.config.method, loaded.config.ponder,
                                  loaded.config.baseline, loaded.config.model, &loaded.model);
    auto j = rep.to_json();
    j["flops"] = fl.to_json();
    const std::string text = j.dump(2);
    std::ofstream out(s.train.out_dir + "/eval-report.json");
    out << text << "\n";
    std::cout << text << std::endl;
}

int run_train(const CommonArgs& a, bool cpt) {
    RunSettings s = resolve(a, cpt ? "runs/cpt" : "runs/train");
    Corpus corpus = load_corpus(s);
    if (corpus.vocab_size != s.train.model.vocab_size && s.vocab == VocabMode::chars)
        s.train.model.vocab_size = corpus.vocab_size;
    auto split = split_corpus(corpus, s.val_fraction);
    TrainResult res;
    if (cpt) {
        if (a.ckpt.empty()) throw ConfigError("cpt: --ckpt with the vanilla base checkpoint is required");
        res = continual_pretrain(a.ckpt, s.train, split.train);
    } else {
        res = train(s.train, split.train, a.ckpt);
    }
    std::cout << "final checkpoint: " << res.final_checkpoint << "\n";
    auto loaded = load_checkpoint(res.final_checkpoint);
    auto hashes = window_hashes(split.train, s.train.window);
    try {
        EvalReport rep = perplexity(loaded.model, split.val, s.train.method, s.train.ponder,
                                    s.train.baseline, s.train.window, &hashes);
        std::ofstream out(s.train.out_dir + "/eval-report.json");
        out << rep.to_json().dump(2) << "\n";
        std::cout << "val loss " << rep.mean_nll << " (ppl " << rep.perplexity << ") over "
                  << rep.token_count << " tokens" << std::endl;
    } catch (const ValueError& e) {
        // Duplicated windows across the split: report training success, skip
        // the convenience eval. `plm2 eval` keeps the hard error.
        std::cerr << "warning: skipping post-train eval: " << e.what() << std::endl;
    }
    return 0;
}

int run_generate(const CommonArgs& a) {
    RunSettings s = resolve(a, "runs/generate");
    if (a.ckpt.empty()) throw ConfigError("generate: --ckpt is required");
    auto loaded = load_checkpoint(a.ckpt);
    std::vector<int32_t> prompt;
    if (loaded.config.model.vocab_size == 256) {
        for (unsigned char c : s.gen_prompt) prompt.push_back(static_cast<int32_t>(c));
    } else {
        Corpus corpus = load_corpus(s);  // char vocabularies need the corpus map
        std::map<char, int32_t> inv;
        for (size_t i = 0; i < corpus.char_vocab.size(); ++i)
            inv[corpus.char_vocab[i]] = static_cast<int32_t>(i);
        for (char c : s.gen_prompt) {
            auto it = inv.find(c);
            if (it == inv.end()) throw ConfigError("gen.prompt: character not in corpus vocabulary");
            prompt.push_back(it->second);
        }
    }
    if (prompt.empty()) throw ConfigError("gen.prompt: must be nonempty");
    PonderConfig pc = loaded.config.ponder;
    if (loaded.config.method != Method::ponder) pc.chain_length = 0;
    Rng rng(s.train.seed);
    GenerateStats stats;
    auto ids = generate(loaded.model, prompt, s.gen_max_new,
                        static_cast<float>(s.gen_temperature), pc, &rng, &stats);
    std::string text;
    if (loaded.config.model.vocab_size == 256) {
        for (int32_t t : ids) text.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    } else {
        Corpus corpus = load_corpus(s);
        text = detokenize(corpus, ids);
    }
    std::ofstream out(s.train.out_dir + "/generated.txt");
    out << text << "\n";
    std::cout << text << std::endl;
    return 0;
}

int run_diagnose(const CommonArgs& a, int kmax) {
    RunSettings s = resolve(a, "runs/diagnose");
    if (a.ckpt.empty()) throw ConfigError("diagnose-jacobi: --ckpt is required");
    auto loaded = load_checkpoint(a.ckpt);
    Corpus corpus = load_corpus(s);
    auto split = split_corpus(corpus, s.val_fraction);
    PonderConfig pc = loaded.config.ponder;
    auto curve = jacobi_mse_curve(loaded.model, split.val.tokens, pc, kmax, loaded.config.window);
    const std::string csv = jacobi_curve_csv(curve);
    std::ofstream out(s.train.out_dir + "/jacobi-curve.csv");
    out << csv;
    std::cout << csv;
    return 0;
}

int run_compare(const CommonArgs& a, const std::vector<std::string>& grids,
                const std::string& budget) {
    RunSettings s = resolve(a, "runs/compare");
    if (!budget.empty()) s.train.total_tokens = detail::to_u64("--budget-tokens", budget);
    Corpus corpus = load_corpus(s);

    // Cross product over --grid key=v1,v2,... axes.
    struct Axis {
        std::string key;
        std::vector<std::string> values;
    };
    std::vector<Axis> axes;
    for (const auto& g : grids) {
        const auto eq = g.find('=');
        if (eq == std::string::npos) throw ConfigError("--grid expects key=v1,v2,..., got '" + g + "'");
        Axis ax;
        ax.key = g.substr(0, eq);
        std::stringstream ss(g.substr(eq + 1));
        std::string item;
        while (std::getline(ss, item, ',')) ax.values.push_back(item);
        if (ax.values.empty()) throw ConfigError("--grid " + ax.key + ": no values");
        axes.push_back(std::move(ax));
    }
    if (axes.empty()) throw ConfigError("compare: at least one --grid axis is required");

    std::vector<GridEntry> entries;
    std::vector<size_t> idx(axes.size(), 0);
    for (;;) {
        TrainConfig cfg = s.train;
        std::string label;
        for (size_t i = 0; i < axes.size(); ++i) {
            const std::string& key = axes[i].key;
            const std::string& v = axes[i].values[idx[i]];
            if (!label.empty()) label += " ";
            label += key + "=" + v;
            if (key == "n") {
                cfg.method = Method::ponder;
                cfg.ponder.chain_length = detail::to_int("--grid n", v);
            } else if (key == "k") {
                cfg.method = Method::ponder;
                cfg.ponder.k_choices = {detail::to_int("--grid k", v)};
            } else if (key == "pos") {
                cfg.ponder.position_policy = v == "sequential" ? PositionPolicy::sequential
                                                               : PositionPolicy::reuse_token_position;
            } else if (key == "method") {
                cfg.method = method_from_string(v);
            } else if (key == "loops") {
                cfg.method = Method::looped;
                cfg.baseline.loops = detail::to_int("--grid loops", v);
            } else if (key == "pauses") {
                cfg.method = Method::pause;
                cfg.baseline.pauses = detail::to_int("--grid pauses", v);
            } else if (key == "steps") {
                cfg.method = Method::pondering;
                cfg.baseline.pondering_steps = detail::to_int("--grid steps", v);
            } else {
                throw ConfigError("--grid: unknown axis '" + key + "'");
            }
        }
        std::string dir_label = label;
        for (auto& c : dir_label)
            if (c == ' ' || c == '=') c = '-';
        cfg.out_dir = s.train.out_dir + "/" + dir_label;
        entries.push_back({label, cfg});
        size_t i = 0;
        for (; i < axes.size(); ++i) {
            if (++idx[i] < axes[i].values.size()) break;
            idx[i] = 0;
        }
        if (i == axes.size()) break;
    }

    auto rows = ablation_grid(entries, corpus, s.val_fraction);
    const std::string csv = grid_csv(rows);
    std::ofstream out(s.train.out_dir + "/compare.csv");
    out << csv;
    std::cout << csv;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"plm2: latent-thought language model toolkit"};
    app.require_subcommand(1);

    CommonArgs train_args, cpt_args, eval_args, gen_args, diag_args, cmp_args;
    int kmax = 8;
    std::vector<std::string> grids;
    std::string budget;

    auto* cmd_train = app.add_subcommand("train", "pretrain a model from scratch");
    add_common(cmd_train, train_args);
    cmd_train->add_option("--ckpt", train_args.ckpt, "resume from this checkpoint");

    auto* cmd_cpt = app.add_subcommand("cpt", "continual pretraining from a vanilla base");
    add_common(cmd_cpt, cpt_args);
    cmd_cpt->add_option("--ckpt", cpt_args.ckpt, "vanilla base checkpoint")->required();

    auto* cmd_eval = app.add_subcommand("eval", "perplexity on the held-out split");
    add_common(cmd_eval, eval_args);
    cmd_eval->add_option("--ckpt", eval_args.ckpt, "checkpoint to evaluate")->required();

    auto* cmd_gen = app.add_subcommand("generate", "greedy or sampled generation");
    add_common(cmd_gen, gen_args);
    cmd_gen->add_option("--ckpt", gen_args.ckpt, "checkpoint to decode from")->required();

    auto* cmd_diag = app.add_subcommand("diagnose-jacobi", "per-iteration MSE and frontier CSV");
    add_common(cmd_diag, diag_args);
    cmd_diag->add_option("--ckpt", diag_args.ckpt, "checkpoint to probe")->required();
    cmd_diag->add_option("--kmax", kmax, "iterations to trace (rows 0..kmax)");

    auto* cmd_cmp = app.add_subcommand("compare", "train and evaluate a config grid");
    add_common(cmd_cmp, cmp_args);
    cmd_cmp->add_option("--grid", grids, "axis key=v1,v2,... (repeatable)")->required();
    cmd_cmp->add_option("--budget-tokens", budget, "training tokens per grid point");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        app.exit(e);
        return 1;
    }

    try {
        if (cmd_train->parsed()) return run_train(train_args, false);
        if (cmd_cpt->parsed()) return run_train(cpt_args, true);
        if (cmd_eval->parsed()) {
            RunSettings s = resolve(eval_args, "runs/eval");
            eval_and_report(s, eval_args.ckpt);
            return 0;
        }
        if (cmd_gen->parsed()) return run_generate(gen_args);
        if (cmd_diag->parsed()) return run_diagnose(diag_args, kmax);
        if (cmd_cmp->parsed()) return run_compare(cmp_args, grids, budget);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return 1;
}
