// Command-line driver for the prune / replace / recover / extend / decode
// pipeline. Exit codes: 0 success, 1 usage error, 2 runtime error.

#include "flexi/checkpoint.hpp"
#include "flexi/pipeline.hpp"
#include "flexi/report_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <iostream>
#include <sstream>

namespace {

using namespace flexi;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config_path;
    std::vector<std::string> sets;
    bool quiet = false;

    std::string ckpt, out, out_dir, loss_csv, summary, bi_csv, selection, analysis_dir;
    std::string metric, pattern, trainable, init, mode, split = "valid", suite, prompt_file, prompt;
    std::uint64_t calib_seed = 0;
    std::size_t rank = 0, repeats = 1, steps = 0, draft_k = 0, max_new = 0, windows = 0;
    double prune_ratio = 0.0, gamma_init = 0.0, lr = 0.0;
    std::vector<std::size_t> range;
    bool delete_only = false;
};

void log(const Options& o, const std::string& msg) {
    if (!o.quiet) std::cerr << "[flexigpt] " << msg << "\n";
}

PipelineConfig base_config(const Options& o) {
    PipelineConfig cfg = o.config_path.empty() ? PipelineConfig{} : load_config(o.config_path);
    for (const std::string& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

// Checkpoint architecture wins over the config's model section.
Model load_model(const Options& o, PipelineConfig& cfg) {
    Model m = load_checkpoint(o.ckpt);
    cfg.model = m.config;
    cfg.validate();
    return m;
}

void write_or_print(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
    } else {
        write_text(path, text);
    }
}

fs::path sibling(const std::string& explicit_path, const std::string& out, const std::string& ext) {
    if (!explicit_path.empty()) return explicit_path;
    return fs::path(out).replace_extension(ext);
}

int run(CLI::App& app, const Options& o) {
    PipelineConfig cfg = base_config(o);
    auto given = [&](const char* sub, const char* opt) { return app.get_subcommand(sub)->count(opt) > 0; };
    const std::string cmd = app.get_subcommands().front()->get_name();

    if (cmd == "config") {
        cfg.validate();
        write_or_print(o.out, cfg.to_text());
        return 0;
    }
    if (cmd == "train-base") {
        if (given(cmd.c_str(), "--steps")) cfg.train.steps = o.steps;
        if (given(cmd.c_str(), "--lr")) cfg.train.lr = o.lr;
        cfg.validate();
        const Corpora data = make_corpora(cfg);
        log(o, "training base model for " + std::to_string(cfg.train.steps) + " steps");
        FinetuneResult r;
        const Model m = train_base(cfg, data, &r);
        save_checkpoint(m, o.out);
        write_loss_csv(r, sibling(o.loss_csv, o.out, ".loss.csv"));
        log(o, "valid ppl " + format_double_exact(eval_ppl(m, data.valid, cfg)));
        return 0;
    }
    if (cmd == "bi-score") {
        const Model m = load_model(o, cfg);
        const std::uint64_t seed = given(cmd.c_str(), "--calib-seed") ? o.calib_seed : cfg.calib_seed;
        write_bi_csv(score_blocks(m, cfg, seed), o.out);
        return 0;
    }
    if (cmd == "select-bases") {
        if (given(cmd.c_str(), "--metric")) apply_config_value(cfg, "metric", o.metric);
        if (given(cmd.c_str(), "--rank")) cfg.rank = o.rank;
        if (given(cmd.c_str(), "--prune-ratio")) cfg.prune_ratio = o.prune_ratio;
        const Model m = load_model(o, cfg);
        const BiReport bi = o.bi_csv.empty() ? score_blocks(m, cfg, cfg.calib_seed) : read_bi_csv(o.bi_csv);
        if (bi.scores.size() != m.blocks.size()) throw UsageError("BI report does not match the checkpoint depth");
        const auto pruned = choose_prune_set(bi, cfg.prune_ratio);
        const fs::path dir = o.analysis_dir.empty() ? fs::path(o.out).parent_path() : fs::path(o.analysis_dir);
        SelectionReport chosen;
        for (auto kind : {DistanceMetricKind::proposed, DistanceMetricKind::no_hrp, DistanceMetricKind::frobenius}) {
            SelectionReport rep = select_bases(m, pruned, cfg.rank, kind);
            emit_distance_analysis(rep, dir / ("distances_" + std::string(metric_name(kind)) + ".csv"));
            if (kind == cfg.metric) chosen = std::move(rep);
        }
        write_text(o.out, chosen.to_json());
        for (const auto& [i, j] : chosen.chosen) log(o, "block " + std::to_string(i) + " -> base " + std::to_string(j));
        return 0;
    }
    if (cmd == "prune") {
        if (given(cmd.c_str(), "--gamma-init")) cfg.gamma_init = o.gamma_init;
        if (given(cmd.c_str(), "--rank")) cfg.rank = o.rank;
        if (given(cmd.c_str(), "--init")) apply_config_value(cfg, "adapter_init", o.init);
        Model m = load_model(o, cfg);
        const SelectionReport sel = SelectionReport::from_json(read_text(o.selection));
        const SurgerySummary s = o.delete_only ? delete_blocks(m, sel.pruned) : prune_and_replace(m, sel, replace_options(cfg));
        save_checkpoint(m, o.out);
        write_text(sibling(o.summary, o.out, ".surgery.json"), s.to_json());
        return 0;
    }
    if (cmd == "extend") {
        ExtensionSpec spec = cfg.extension.value_or(ExtensionSpec{});
        if (given(cmd.c_str(), "--range")) {
            spec.start = o.range.at(0);
            spec.end = o.range.at(1);
        } else if (!cfg.extension) {
            throw UsageError("extend needs --range or extend_start/extend_end in the config");
        }
        if (given(cmd.c_str(), "--repeats")) spec.repeats = o.repeats;
        if (given(cmd.c_str(), "--pattern")) spec.pattern = o.pattern == "block" ? ExtensionPattern::block : ExtensionPattern::sequential;
        if (given(cmd.c_str(), "--gamma-init")) spec.gamma_init = o.gamma_init;
        if (given(cmd.c_str(), "--rank")) spec.rank = o.rank;
        spec.seed = derive_seed(cfg.seed, "extension");
        Model m = load_model(o, cfg);
        const SurgerySummary s = extend(m, spec);
        save_checkpoint(m, o.out);
        write_text(sibling(o.summary, o.out, ".extension.json"), s.to_json());
        return 0;
    }
    if (cmd == "finetune") {
        if (given(cmd.c_str(), "--lr")) cfg.recovery_lr = o.lr;
        if (given(cmd.c_str(), "--trainable")) apply_config_value(cfg, "recovery_trainable", o.trainable);
        Model m = load_model(o, cfg);
        const std::size_t steps = given(cmd.c_str(), "--steps") ? o.steps : cfg.recovery_steps;
        const Corpora data = make_corpora(cfg);
        const FinetuneResult r = recover(m, data, cfg, steps);
        save_checkpoint(m, o.out);
        write_loss_csv(r, sibling(o.loss_csv, o.out, ".loss.csv"));
        log(o, "valid ppl " + format_double_exact(eval_ppl(m, data.valid, cfg)));
        return 0;
    }
    if (cmd == "eval") {
        if (given(cmd.c_str(), "--windows")) cfg.eval_windows = o.windows;
        const Model m = load_model(o, cfg);
        const Corpora data = make_corpora(cfg);
        const Corpus& c = o.split == "train" ? data.train : data.valid;
        nlohmann::ordered_json j;
        j["split"] = o.split;
        j["ppl"] = eval_ppl(m, c, cfg);
        std::cout << j.dump() << "\n";
        return 0;
    }
    if (cmd == "decode") {
        const Model m = load_model(o, cfg);
        std::vector<Token> prompt;
        if (!o.prompt_file.empty()) {
            prompt = load_tokens(o.prompt_file);
        } else {
            std::istringstream in(o.prompt);
            for (unsigned long long id; in >> id;) prompt.push_back(static_cast<Token>(id));
            if (!in.eof()) throw UsageError("--prompt expects whitespace-separated token ids");
        }
        DecodeConfig dc;
        dc.mode = o.mode == "greedy" ? DecodeMode::greedy : DecodeMode::speculative;
        dc.draft_k = given(cmd.c_str(), "--draft-k") ? o.draft_k : cfg.draft_k;
        dc.max_new_tokens = given(cmd.c_str(), "--max-new") ? o.max_new : cfg.max_new_tokens;
        const DecodeResult r = decode(m, prompt, dc);
        write_or_print(o.out, decode_transcript_json(prompt, r, dc));
        return 0;
    }
    if (cmd == "ablate") {
        cfg.validate();
        const Corpora data = make_corpora(cfg);
        Model base;
        if (o.ckpt.empty()) {
            log(o, "no --ckpt given; training a base model first");
            base = train_base(cfg, data);
        } else {
            base = load_model(o, cfg);
        }
        const auto rows = ablate_table4(base, data, cfg, [&](const std::string& m) { log(o, m); });
        fs::create_directories(o.out_dir);
        write_ablation_csv(rows, fs::path(o.out_dir) / "table4.csv");
        for (const auto& r : rows) {
            std::cout << r.variant << " start_ppl=" << format_double_exact(r.start_ppl)
                      << " final_ppl=" << format_double_exact(r.final_ppl) << "\n";
        }
        return 0;
    }
    if (cmd == "pipeline") {
        run_pipeline(cfg, o.out_dir, [&](const std::string& m) { log(o, m); });
        return 0;
    }
    throw UsageError("unknown subcommand " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
    Options o;
    CLI::App app{"Prune, replace, recover, extend and decode small transformers"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
    app.add_option("--set", o.sets, "override one config key (key=value); repeatable");
    app.add_flag("-q,--quiet", o.quiet, "no progress on stderr");

    const auto metrics = CLI::IsMember({"proposed", "no-hrp", "frobenius"});

    auto* config = app.add_subcommand("config", "print the effective config");
    config->add_option("--out", o.out, "write here instead of stdout");

    auto* train = app.add_subcommand("train-base", "train the base model from scratch");
    train->add_option("--out", o.out, "checkpoint path")->required();
    train->add_option("--loss-csv", o.loss_csv, "loss curve (default: <out>.loss.csv)");
    train->add_option("--steps", o.steps);
    train->add_option("--lr", o.lr);

    auto* bi = app.add_subcommand("bi-score", "block influence scores");
    bi->add_option("--ckpt", o.ckpt)->required()->check(CLI::ExistingFile);
    bi->add_option("--calib-seed", o.calib_seed);
    bi->add_option("--out", o.out, "CSV path")->required();

    auto* sel = app.add_subcommand("select-bases", "choose prune set and weight-sharing bases");
    sel->add_option("--ckpt", o.ckpt)->required()->check(CLI::ExistingFile);
    sel->add_option("--bi", o.bi_csv, "BI CSV (computed if omitted)")->check(CLI::ExistingFile);
    sel->add_option("--metric", o.metric)->check(metrics);
    sel->add_option("--rank", o.rank);
    sel->add_option("--prune-ratio", o.prune_ratio);
    sel->add_option("--out", o.out, "selection JSON")->required();
    sel->add_option("--analysis-dir", o.analysis_dir, "distance CSVs (default: next to --out)");

    auto* prune = app.add_subcommand("prune", "replace pruned blocks with shared blocks");
    prune->add_option("--ckpt", o.ckpt)->required()->check(CLI::ExistingFile);
    prune->add_option("--selection", o.selection)->required()->check(CLI::ExistingFile);
    prune->add_option("--gamma-init", o.gamma_init);
    prune->add_option("--rank", o.rank);
    prune->add_option("--init", o.init)->check(CLI::IsMember({"svd", "zero"}));
    prune->add_flag("--delete-only", o.delete_only, "drop the pruned blocks instead");
    prune->add_option("--out", o.out)->required();
    prune->add_option("--summary", o.summary, "surgery JSON (default: <out>.surgery.json)");

    auto* ext = app.add_subcommand("extend", "insert repeated blocks");
    ext->add_option("--ckpt", o.ckpt)->required()->check(CLI::ExistingFile);
    ext->add_option("--range", o.range, "first and last block, inclusive")->expected(2);
    ext->add_option("--repeats", o.repeats);
    ext->add_option("--pattern", o.pattern)->check(CLI::IsMember({"block", "sequential"}));
    ext->add_option("--gamma-init", o.gamma_init);
    ext->add_option("--rank", o.rank);
    ext->add_option("--out", o.out)->required();
    ext->add_option("--summary", o.summary, "surgery JSON (default: <out>.extension.json)");

    auto* ft = app.add_subcommand("finetune", "recovery fine-tuning");
    ft->add_option("--ckpt", o.ckpt)->required()->check(CLI::ExistingFile);
    ft->add_option("--steps", o.steps);
    ft->add_option("--lr", o.lr);
    ft->add_option("--trainable", o.trainable)->check(CLI::IsMember({"all", "shared-only"}));
    ft->add_option("--out", o.out)->required();
    ft->add_option("--loss-csv", o.loss_csv, "loss curve (default: <out>.loss.csv)");

    auto* ev = app.add_subcommand("eval", "perplexity on a split");
    ev->add_option("--ckpt", o.ckpt)->required()->check(CLI::ExistingFile);
    ev->add_option("--split", o.split)->check(CLI::IsMember({"train", "valid"}));
    ev->add_option("--windows", o.windows, "cap on evaluated windows (0 = all)");

    auto* dec = app.add_subcommand("decode", "greedy or self-speculative decoding");
    dec->add_option("--ckpt", o.ckpt)->required()->check(CLI::ExistingFile);
    auto* pf = dec->add_option("--prompt-file", o.prompt_file, "u32 little-endian ids")->check(CLI::ExistingFile);
    auto* pt = dec->add_option("--prompt", o.prompt, "whitespace-separated ids");
    pf->excludes(pt);
    dec->add_option("--mode", o.mode)->default_val("spec")->check(CLI::IsMember({"greedy", "spec"}));
    dec->add_option("--draft-k", o.draft_k);
    dec->add_option("--max-new", o.max_new);
    dec->add_option("--out", o.out, "transcript JSON (default: stdout)");

    auto* abl = app.add_subcommand("ablate", "ablation suite");
    abl->add_option("--suite", o.suite)->required()->check(CLI::IsMember({"table4"}));
    abl->add_option("--ckpt", o.ckpt, "base checkpoint (trained if omitted)")->check(CLI::ExistingFile);
    abl->add_option("--out-dir", o.out_dir)->required();

    auto* pipe = app.add_subcommand("pipeline", "every stage end to end");
    pipe->add_option("--out-dir", o.out_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    if (dec->parsed() && o.prompt_file.empty() && o.prompt.empty()) {
        std::cerr << "decode: one of --prompt-file or --prompt is required\n";
        return 1;
    }
    try {
        return run(app, o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
