#include "flexi/pipeline.hpp"

#include "flexi/checkpoint.hpp"
#include "flexi/report_io.hpp"

#include <json.hpp>

#include <charconv>
#include <map>
#include <sstream>

namespace flexi {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::size_t to_count(const std::string& key, const std::string& v) {
    std::size_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
    return out;
}

double to_real(const std::string& key, const std::string& v) {
    try {
        return parse_double_exact(v);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a real number, got '" + v + "'");
    }
}

std::string real(double x) { return format_double_exact(x); }

const char* schedule_name(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }
const char* trainable_name(TrainableSet t) { return t == TrainableSet::all ? "all" : "shared-only"; }
const char* pattern_name(ExtensionPattern p) { return p == ExtensionPattern::block ? "block" : "sequential"; }

using Setter = void (*)(PipelineConfig&, const std::string&, const std::string&);
using Getter = std::string (*)(const PipelineConfig&);
struct KeySpec {
    Setter set;
    Getter get;
};

ExtensionSpec& ext(PipelineConfig& c) {
    if (!c.extension) c.extension.emplace();
    return *c.extension;
}

#define COUNT_KEY(name, field)                                                                    \
    {                                                                                             \
        name, {                                                                                   \
            [](PipelineConfig& c, const std::string& k, const std::string& v) { field = to_count(k, v); }, \
                [](const PipelineConfig& c) { return std::to_string(field); }                     \
        }                                                                                         \
    }
#define REAL_KEY(name, field)                                                                     \
    {                                                                                             \
        name, {                                                                                   \
            [](PipelineConfig& c, const std::string& k, const std::string& v) { field = to_real(k, v); }, \
                [](const PipelineConfig& c) { return real(field); }                               \
        }                                                                                         \
    }

// Ordered so to_text() lists keys in a stable, readable order.
const std::vector<std::pair<std::string, KeySpec>>& key_table() {
    static const std::vector<std::pair<std::string, KeySpec>> table = {
        COUNT_KEY("n_layers", c.model.n_layers),
        COUNT_KEY("d_model", c.model.d_model),
        COUNT_KEY("n_heads", c.model.n_heads),
        COUNT_KEY("d_ff", c.model.d_ff),
        COUNT_KEY("vocab_size", c.model.vocab_size),
        COUNT_KEY("max_seq_len", c.model.max_seq_len),
        REAL_KEY("norm_eps", c.model.norm_eps),
        {"seed", {[](PipelineConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); },
                  [](const PipelineConfig& c) { return std::to_string(c.seed); }}},
        COUNT_KEY("train_tokens", c.train_tokens),
        COUNT_KEY("valid_tokens", c.valid_tokens),
        {"calib_seed",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) { c.calib_seed = to_u64(k, v); },
          [](const PipelineConfig& c) { return std::to_string(c.calib_seed); }}},
        COUNT_KEY("calib_sequences", c.calib_sequences),
        COUNT_KEY("calib_seq_len", c.calib_seq_len),
        REAL_KEY("lr", c.train.lr),
        COUNT_KEY("steps", c.train.steps),
        COUNT_KEY("batch_size", c.train.batch_size),
        COUNT_KEY("seq_len", c.train.seq_len),
        {"schedule",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) {
              if (v == "cosine") c.train.schedule = Schedule::cosine;
              else if (v == "constant") c.train.schedule = Schedule::constant;
              else throw ConfigError(k + ": expected cosine or constant, got '" + v + "'");
          },
          [](const PipelineConfig& c) { return std::string(schedule_name(c.train.schedule)); }}},
        REAL_KEY("min_lr_fraction", c.train.min_lr_fraction),
        COUNT_KEY("warmup_steps", c.train.warmup_steps),
        REAL_KEY("grad_clip", c.train.grad_clip),
        REAL_KEY("adam_beta1", c.train.adam.beta1),
        REAL_KEY("adam_beta2", c.train.adam.beta2),
        COUNT_KEY("eval_every", c.train.eval_every),
        COUNT_KEY("train_eval_windows", c.train.eval_windows),
        REAL_KEY("prune_ratio", c.prune_ratio),
        {"metric",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) {
              try {
                  c.metric = parse_metric(v);
              } catch (const std::invalid_argument& e) {
                  throw ConfigError(k + ": " + e.what());
              }
          },
          [](const PipelineConfig& c) { return std::string(metric_name(c.metric)); }}},
        COUNT_KEY("rank", c.rank),
        REAL_KEY("gamma_init", c.gamma_init),
        {"adapter_init",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) {
              if (v == "svd") c.adapter_init = AdapterInit::svd;
              else if (v == "zero") c.adapter_init = AdapterInit::zero_product;
              else throw ConfigError(k + ": expected svd or zero, got '" + v + "'");
          },
          [](const PipelineConfig& c) { return std::string(c.adapter_init == AdapterInit::svd ? "svd" : "zero"); }}},
        {"adapter_source",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) {
              if (v == "raw") c.adapter_source = AdapterSource::raw;
              else if (v == "hats") c.adapter_source = AdapterSource::hats;
              else throw ConfigError(k + ": expected raw or hats, got '" + v + "'");
          },
          [](const PipelineConfig& c) { return std::string(c.adapter_source == AdapterSource::raw ? "raw" : "hats"); }}},
        COUNT_KEY("recovery_steps", c.recovery_steps),
        REAL_KEY("recovery_lr", c.recovery_lr),
        {"recovery_trainable",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) {
              if (v == "all") c.recovery_trainable = TrainableSet::all;
              else if (v == "shared-only") c.recovery_trainable = TrainableSet::adapters_norms_bases;
              else throw ConfigError(k + ": expected all or shared-only, got '" + v + "'");
          },
          [](const PipelineConfig& c) { return std::string(trainable_name(c.recovery_trainable)); }}},
        {"extend_start",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) { ext(c).start = to_count(k, v); },
          [](const PipelineConfig& c) { return std::to_string(c.extension->start); }}},
        {"extend_end",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) { ext(c).end = to_count(k, v); },
          [](const PipelineConfig& c) { return std::to_string(c.extension->end); }}},
        {"extend_repeats",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) { ext(c).repeats = to_count(k, v); },
          [](const PipelineConfig& c) { return std::to_string(c.extension->repeats); }}},
        {"extend_pattern",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) {
              if (v == "block") ext(c).pattern = ExtensionPattern::block;
              else if (v == "sequential") ext(c).pattern = ExtensionPattern::sequential;
              else throw ConfigError(k + ": expected block or sequential, got '" + v + "'");
          },
          [](const PipelineConfig& c) { return std::string(pattern_name(c.extension->pattern)); }}},
        {"extend_gamma",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) { ext(c).gamma_init = to_real(k, v); },
          [](const PipelineConfig& c) { return real(c.extension->gamma_init); }}},
        {"extend_rank",
         {[](PipelineConfig& c, const std::string& k, const std::string& v) { ext(c).rank = to_count(k, v); },
          [](const PipelineConfig& c) { return std::to_string(c.extension->rank); }}},
        COUNT_KEY("extension_steps", c.extension_steps),
        COUNT_KEY("draft_k", c.draft_k),
        COUNT_KEY("max_new_tokens", c.max_new_tokens),
        COUNT_KEY("eval_windows", c.eval_windows),
    };
    return table;
}

#undef COUNT_KEY
#undef REAL_KEY

const KeySpec* find_key(const std::string& key) {
    for (const auto& [k, spec] : key_table())
        if (k == key) return &spec;
    return nullptr;
}

void report(const std::function<void(const std::string&)>& progress, const std::string& msg) {
    if (progress) progress(msg);
}

}  // namespace

void PipelineConfig::validate() const {
    try {
        model.validate();
        train.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (model.vocab_size < 4) throw ConfigError("vocab_size must be >= 4 for the synthetic source");
    if (train.seq_len > model.max_seq_len) throw ConfigError("seq_len exceeds max_seq_len");
    if (calib_seq_len > model.max_seq_len || calib_seq_len < 1 || calib_sequences < 1) {
        throw ConfigError("calibration shape must be >= 1 and fit max_seq_len");
    }
    if (!(prune_ratio > 0.0 && prune_ratio < 1.0)) throw ConfigError("prune_ratio must be in (0, 1)");
    if (rank < 1 || rank > std::min(model.d_model, model.d_ff)) throw ConfigError("rank out of range for the model width");
    if (!(gamma_init >= 0.0)) throw ConfigError("gamma_init must be >= 0");
    if (!(recovery_lr > 0.0)) throw ConfigError("recovery_lr must be > 0");
    if (draft_k < 1) throw ConfigError("draft_k must be >= 1");
    if (train_tokens < train.seq_len + 1 || valid_tokens < 2) throw ConfigError("corpus sizes too small");
    if (extension) {
        if (extension->start > extension->end || extension->end >= model.n_layers) {
            throw ConfigError("extension range must satisfy start <= end < n_layers");
        }
        if (extension->repeats < 1) throw ConfigError("extend_repeats must be >= 1");
    }
}

std::string PipelineConfig::to_text() const {
    std::ostringstream os;
    for (const auto& [k, spec] : key_table()) {
        if (k.rfind("extend_", 0) == 0 && !extension) continue;
        os << k << " = " << spec.get(*this) << "\n";
    }
    return os.str();
}

void apply_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    const KeySpec* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    spec->set(cfg, key, value);
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& [k, spec] : key_table()) out.push_back(k);
    return out;
}

PipelineConfig parse_config(const std::string& text, PipelineConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        try {
            apply_config_value(base, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return base;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    try {
        return parse_config(read_text(path));
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

Corpora make_corpora(const PipelineConfig& cfg) {
    const std::uint64_t s = derive_seed(cfg.seed, "corpus");
    return {synth_corpus(s, cfg.train_tokens, cfg.model.vocab_size, Split::train),
            synth_corpus(s, cfg.valid_tokens, cfg.model.vocab_size, Split::valid)};
}

Corpus make_calibration(const PipelineConfig& cfg, std::uint64_t calib_seed) {
    const MarkovSource src = corpus_source(derive_seed(cfg.seed, "corpus"), cfg.model.vocab_size);
    Corpus c;
    c.split = Split::valid;
    c.vocab_size = cfg.model.vocab_size;
    c.tokens = src.sample(derive_seed(calib_seed, "calibration"), cfg.calib_sequences * cfg.calib_seq_len);
    return c;
}

double eval_ppl(const Model& model, const Corpus& valid, const PipelineConfig& cfg) {
    return perplexity(model, valid, cfg.train.seq_len, cfg.eval_windows);
}

Model train_base(const PipelineConfig& cfg, const Corpora& data, FinetuneResult* log) {
    cfg.validate();
    Model m = init_random(cfg.model, derive_seed(cfg.seed, "init"));
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, "base-training");
    tc.trainable = TrainableSet::all;
    FinetuneResult r = finetune(m, data.train, &data.valid, tc);
    if (log) *log = std::move(r);
    return m;
}

BiReport score_blocks(const Model& model, const PipelineConfig& cfg, std::uint64_t calib_seed) {
    return score_model(model, make_calibration(cfg, calib_seed), cfg.calib_sequences, cfg.calib_seq_len, calib_seed);
}

SelectionReport choose_bases(const Model& model, const BiReport& bi, const PipelineConfig& cfg,
                             DistanceMetricKind kind) {
    return select_bases(model, choose_prune_set(bi, cfg.prune_ratio), cfg.rank, kind);
}

ReplaceOptions replace_options(const PipelineConfig& cfg) {
    return ReplaceOptions{cfg.rank, cfg.gamma_init, cfg.adapter_init, cfg.adapter_source,
                          derive_seed(cfg.seed, "surgery")};
}

TrainConfig recovery_config(const PipelineConfig& cfg, std::size_t steps) {
    TrainConfig tc = cfg.train;
    tc.steps = steps;
    tc.lr = cfg.recovery_lr;
    tc.warmup_steps = 0;  // recovery starts from a trained model
    tc.trainable = cfg.recovery_trainable;
    tc.seed = derive_seed(cfg.seed, "recovery");
    return tc;
}

FinetuneResult recover(Model& model, const Corpora& data, const PipelineConfig& cfg, std::size_t steps) {
    return finetune(model, data.train, &data.valid, recovery_config(cfg, steps));
}

std::vector<AblationRow> ablate_table4(const Model& base, const Corpora& data, const PipelineConfig& cfg,
                                       const std::function<void(const std::string&)>& progress) {
    const BiReport bi = score_blocks(base, cfg, cfg.calib_seed);
    struct Leg {
        std::string name;
        DistanceMetricKind metric;
        double gamma;
        AdapterInit init;
    };
    const std::vector<Leg> legs = {
        {"full", DistanceMetricKind::proposed, cfg.gamma_init, AdapterInit::svd},
        {"no_hrp_metric", DistanceMetricKind::no_hrp, cfg.gamma_init, AdapterInit::svd},
        {"no_output_norm", DistanceMetricKind::proposed, 1.0, AdapterInit::svd},
        {"no_svd_init", DistanceMetricKind::proposed, cfg.gamma_init, AdapterInit::zero_product},
    };
    std::vector<AblationRow> rows;
    for (const Leg& leg : legs) {
        report(progress, "ablate: " + leg.name);
        Model m = base;
        ReplaceOptions opts = replace_options(cfg);
        opts.gamma_init = leg.gamma;
        opts.init = leg.init;
        prune_and_replace(m, choose_bases(base, bi, cfg, leg.metric), opts);
        AblationRow row{leg.name, eval_ppl(m, data.valid, cfg), 0.0};
        recover(m, data, cfg, cfg.recovery_steps);
        row.final_ppl = eval_ppl(m, data.valid, cfg);
        rows.push_back(row);
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
    CsvTable t;
    t.header = {"variant", "start_ppl", "final_ppl"};
    for (const auto& r : rows) t.rows.push_back({r.variant, real(r.start_ppl), real(r.final_ppl)});
    write_csv(t, path);
}

void run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                  const std::function<void(const std::string&)>& progress) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "config.txt", cfg.to_text());
    const Corpora data = make_corpora(cfg);

    report(progress, "train-base");
    FinetuneResult base_log;
    const Model base = train_base(cfg, data, &base_log);
    save_checkpoint(base, out_dir / "base.ckpt");
    write_loss_csv(base_log, out_dir / "base_loss.csv");

    report(progress, "bi-score");
    const BiReport bi = score_blocks(base, cfg, cfg.calib_seed);
    write_bi_csv(bi, out_dir / "bi.csv");

    report(progress, "select-bases");
    const auto pruned = choose_prune_set(bi, cfg.prune_ratio);
    SelectionReport selection;
    for (auto kind : {DistanceMetricKind::proposed, DistanceMetricKind::no_hrp, DistanceMetricKind::frobenius}) {
        SelectionReport rep = select_bases(base, pruned, cfg.rank, kind);
        emit_distance_analysis(rep, out_dir / ("distances_" + std::string(metric_name(kind)) + ".csv"));
        if (kind == cfg.metric) selection = std::move(rep);
    }
    write_text(out_dir / "selection.json", selection.to_json());

    report(progress, "prune");
    Model model = base;
    const SurgerySummary surgery = prune_and_replace(model, selection, replace_options(cfg));
    save_checkpoint(model, out_dir / "pruned.ckpt");
    write_text(out_dir / "surgery.json", surgery.to_json());

    nlohmann::ordered_json summary;
    summary["base_ppl"] = eval_ppl(base, data.valid, cfg);
    summary["pruned_start_ppl"] = eval_ppl(model, data.valid, cfg);

    report(progress, "finetune");
    const FinetuneResult rec = recover(model, data, cfg, cfg.recovery_steps);
    save_checkpoint(model, out_dir / "recovered.ckpt");
    write_loss_csv(rec, out_dir / "recovery_loss.csv");
    summary["recovered_ppl"] = eval_ppl(model, data.valid, cfg);
    summary["compression_ratio"] = compression_ratio(model, base);

    report(progress, "decode");
    const std::vector<Token> prompt(data.valid.tokens.begin(), data.valid.tokens.begin() + 8);
    const DecodeConfig dc{std::min(cfg.max_new_tokens, cfg.model.max_seq_len - prompt.size()), cfg.draft_k,
                          DecodeMode::speculative};
    write_text(out_dir / "decode.json", decode_transcript_json(prompt, decode(model, prompt, dc), dc));

    if (cfg.extension) {
        report(progress, "extend");
        Model extended = base;
        ExtensionSpec spec = *cfg.extension;
        spec.seed = derive_seed(cfg.seed, "extension");
        const SurgerySummary es = extend(extended, spec);
        write_text(out_dir / "extension.json", es.to_json());
        finetune(extended, data.train, &data.valid, recovery_config(cfg, cfg.extension_steps));
        save_checkpoint(extended, out_dir / "extended.ckpt");
        summary["extended_ppl"] = eval_ppl(extended, data.valid, cfg);
    }
    write_text(out_dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace flexi
