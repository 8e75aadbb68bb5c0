#include "elm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "elm/checkpoint.hpp"
#include "elm/data.hpp"
#include "elm/error.hpp"
#include "elm/eval.hpp"
#include "elm/grid.hpp"
#include "elm/importance.hpp"
#include "elm/latency.hpp"
#include "elm/pareto.hpp"
#include "elm/runconfig.hpp"
#include "elm/space.hpp"
#include "elm/supernet.hpp"
#include "elm/svgplot.hpp"
#include "elm/train.hpp"

namespace elm {

namespace fs = std::filesystem;

namespace {

// ---- shared plumbing ----------------------------------------------------------

std::string fmt_g(double x) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, x);
        if (std::strtod(buf, nullptr) == x) return buf;
    }
    return buf;
}

std::string fmt_fixed(double x, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, x);
    return buf;
}

// Config resolution: an explicit --config wins, then the checkpoint's own
// config.ini, then built-in defaults.
RunConfig effective_config(const std::string& dir, const std::string& config_path) {
    if (!config_path.empty()) return load_run_config(config_path);
    const fs::path stored = fs::path(dir) / "config.ini";
    if (fs::exists(stored)) return load_run_config(stored.string());
    return RunConfig{};
}

void write_config(const std::string& dir, const RunConfig& cfg) {
    const fs::path p = fs::path(dir) / "config.ini";
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write " + p.string());
    f << render_run_config(cfg);
}

SubNetworkConfig parse_theta(const std::string& s) {
    std::vector<std::string> parts;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) parts.push_back(item);
    if (parts.size() != 5)
        throw InputError("theta must be 'd_model,n_heads,d_head,ffn_ratio,n_layers', got '" + s +
                         "'");
    auto as_i = [&](const std::string& v) {
        size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw InputError("bad theta field '" + v + "'");
        return int64_t(x);
    };
    auto as_d = [&](const std::string& v) {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw InputError("bad theta field '" + v + "'");
        return x;
    };
    try {
        SubNetworkConfig t;
        t.d_model = as_i(parts[0]);
        t.n_heads = as_i(parts[1]);
        t.d_head = as_i(parts[2]);
        t.ffn_ratio = as_d(parts[3]);
        t.n_layers = as_i(parts[4]);
        return t;
    } catch (const std::invalid_argument&) {
        throw InputError("theta must be numeric 'd_model,n_heads,d_head,ffn_ratio,n_layers'");
    } catch (const std::out_of_range&) {
        throw InputError("theta field out of range in '" + s + "'");
    }
}

std::string theta_slug(const SubNetworkConfig& t) {
    return "d" + std::to_string(t.d_model) + "-h" + std::to_string(t.n_heads) + "-dh" +
           std::to_string(t.d_head) + "-r" + fmt_g(t.ffn_ratio) + "-L" +
           std::to_string(t.n_layers);
}

// All five axes pinned to one value: the space of a standalone network.
SearchSpace singleton_space(const SubNetworkConfig& t) {
    SearchSpace s;
    s.variant = SpaceVariant::joint;
    s.d_model_choices = {t.d_model};
    s.head_choices = {t.n_heads};
    s.d_head_choices = {t.d_head};
    s.ratio_choices = {t.ffn_ratio};
    s.depth_choices = {t.n_layers};
    return s;
}

struct CorpusSplit {
    std::vector<int32_t> train;
    std::vector<int32_t> eval;
};

CorpusSplit split_corpus(const RunConfig& cfg) {
    if (cfg.data.eval_fraction < 0.0 || cfg.data.eval_fraction >= 1.0)
        throw ConfigError("eval_fraction must lie in [0, 1)");
    const auto tokens = load_corpus(cfg.data.corpus);
    const int64_t n = int64_t(tokens.size());
    const int64_t n_eval = int64_t(double(n) * cfg.data.eval_fraction);
    const int64_t n_train = n - n_eval;
    if (n_train < 1) throw InputError("corpus " + cfg.data.corpus + " is empty after the split");
    CorpusSplit out;
    out.train.assign(tokens.begin(), tokens.begin() + n_train);
    out.eval.assign(tokens.begin() + n_train, tokens.end());
    return out;
}

// Evaluation batches from the held-out tail, optionally capped to the first
// max_windows windows.
std::vector<TokenBatch> eval_batches(const RunConfig& cfg, const std::vector<int32_t>& eval_tok,
                                     int64_t max_seq_len) {
    const int64_t T = cfg.eval.seq_len;
    if (T < 2) throw ConfigError("eval seq_len must be at least 2");
    if (T > max_seq_len)
        throw ConfigError("eval seq_len " + std::to_string(T) + " exceeds max_seq_len " +
                          std::to_string(max_seq_len));
    std::vector<int32_t> tok = eval_tok;
    if (cfg.eval.max_windows > 0) {
        const size_t cap = size_t(cfg.eval.max_windows * T);
        if (tok.size() > cap) tok.resize(cap);
    }
    auto batches = make_windows(tok, T, cfg.eval.batch_size);
    if (batches.empty())
        throw InputError("held-out split too short for even one evaluation window");
    return batches;
}

// ---- eval table ---------------------------------------------------------------

struct EvalRow {
    std::string source;
    SubNetworkConfig theta;
    int64_t params = 0;
    int64_t flops = 0;
    double latency_ms = 0.0;
    double ppl = 0.0;
};

constexpr const char* kEvalHeader =
    "source\td_model\tn_heads\td_head\tffn_ratio\tn_layers\tparams\tflops\tlatency_ms\tppl";

void write_eval_tsv(const std::string& path, const std::vector<EvalRow>& rows) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write " + path);
    f << kEvalHeader << "\n";
    for (const auto& r : rows) {
        f << r.source << "\t" << r.theta.d_model << "\t" << r.theta.n_heads << "\t"
          << r.theta.d_head << "\t" << fmt_g(r.theta.ffn_ratio) << "\t" << r.theta.n_layers
          << "\t" << r.params << "\t" << r.flops << "\t" << fmt_g(r.latency_ms) << "\t"
          << fmt_g(r.ppl) << "\n";
    }
}

std::vector<EvalRow> read_eval_tsv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot read " + path);
    std::string line;
    if (!std::getline(f, line) || line != kEvalHeader)
        throw InputError(path + " does not start with the evaluation table header");
    std::vector<EvalRow> rows;
    int64_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::string item;
        std::istringstream in(line);
        while (std::getline(in, item, '\t')) cols.push_back(item);
        if (cols.size() != 10)
            throw InputError(path + " line " + std::to_string(lineno) + ": expected 10 columns");
        try {
            EvalRow r;
            r.source = cols[0];
            r.theta.d_model = std::stoll(cols[1]);
            r.theta.n_heads = std::stoll(cols[2]);
            r.theta.d_head = std::stoll(cols[3]);
            r.theta.ffn_ratio = std::stod(cols[4]);
            r.theta.n_layers = std::stoll(cols[5]);
            r.params = std::stoll(cols[6]);
            r.flops = std::stoll(cols[7]);
            r.latency_ms = std::stod(cols[8]);
            r.ppl = std::stod(cols[9]);
            rows.push_back(std::move(r));
        } catch (const std::exception&) {
            throw InputError(path + " line " + std::to_string(lineno) + ": malformed number");
        }
    }
    return rows;
}

void print_eval_rows(const std::vector<EvalRow>& rows) {
    std::cout << std::left << std::setw(10) << "source" << std::right << std::setw(8) << "d_model"
              << std::setw(8) << "heads" << std::setw(7) << "d_head" << std::setw(7) << "ratio"
              << std::setw(7) << "layers" << std::setw(10) << "params" << std::setw(13) << "flops"
              << std::setw(12) << "latency_ms" << std::setw(10) << "ppl" << "\n";
    for (const auto& r : rows) {
        std::cout << std::left << std::setw(10) << r.source << std::right << std::setw(8)
                  << r.theta.d_model << std::setw(8) << r.theta.n_heads << std::setw(7)
                  << r.theta.d_head << std::setw(7) << fmt_g(r.theta.ffn_ratio) << std::setw(7)
                  << r.theta.n_layers << std::setw(10) << r.params << std::setw(13) << r.flops
                  << std::setw(12) << fmt_fixed(r.latency_ms, 3) << std::setw(10)
                  << fmt_fixed(r.ppl, 4) << "\n";
    }
}

// ---- subcommand arguments -----------------------------------------------------

struct InitArgs {
    std::string dir, config;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string corpus;
};

struct SortArgs {
    std::string dir, config;
    std::string scheme, block_scheme;
    int64_t calib_samples = 0;
    bool calib_set = false;
};

struct GridArgs {
    std::string dir, config;
    int64_t bins = 0, per_bin = 0, max_trials = 0;
    bool bins_set = false, per_bin_set = false, max_trials_set = false;
};

struct TrainArgs {
    std::string dir, config;
    int64_t epochs = 0;
    bool epochs_set = false;
    double lr = 0, final_lr = 0, kd_temp = 0, kd_weight = 0;
    bool lr_set = false, final_lr_set = false, kd_temp_set = false, kd_weight_set = false;
    int64_t k = 0;
    bool k_set = false;
    std::string kd;
    bool lora = true;
    bool lora_set = false;
    std::string mode = "weight_sharing";
    std::string init = "pretrained";
    std::string theta, out;
    uint64_t seed = 0;
    bool seed_set = false;
};

struct EvalArgs {
    std::string dir, config, theta;
    bool all_grid = false;
};

struct ParetoArgs {
    std::string dir, config;
    std::string cost = "params";
};

struct ExtractArgs {
    std::string dir, config, theta, out;
};

struct LatencyArgs {
    std::string dir, config, theta;
    int64_t reps = 0, warmup = 0, seq_len = 0;
    bool reps_set = false, warmup_set = false, seq_set = false;
};

// ---- subcommands ----------------------------------------------------------

void run_init(const InitArgs& a) {
    if (checkpoint_exists(a.dir))
        throw StateError("a checkpoint already exists at " + a.dir + "; pick a fresh --dir");
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    if (a.seed_set) cfg.run.seed = a.seed;
    if (!a.corpus.empty()) cfg.data.corpus = a.corpus;
    cfg.model.validate();
    const SearchSpace space = cfg.resolve_space();

    Checkpoint ck;
    ck.meta.model = cfg.model;
    ck.meta.space = space;
    ck.meta.stage = "init";
    ck.weights = init_supernet<float>(cfg.model, Rng(cfg.run.seed).derive("init").seed());
    save_checkpoint(a.dir, ck);
    write_config(a.dir, cfg);

    std::cout << "initialized super-network at " << a.dir << "\n"
              << "  parameters: " << ck.weights.param_count() << "\n"
              << "  space: " << space.d_model_choices.size() << " widths x "
              << space.head_choices.size() << " head counts x " << space.d_head_choices.size()
              << " head sizes x " << space.ratio_choices.size() << " ratios x "
              << space.depth_choices.size() << " depths\n";
}

void run_sort(const SortArgs& a) {
    Checkpoint ck = load_checkpoint(a.dir);
    if (ck.has_adapters())
        throw StateError("checkpoint carries adapters; extract a merged network before sorting");
    RunConfig cfg = effective_config(a.dir, a.config);
    if (!a.scheme.empty()) cfg.sort.scheme = a.scheme;
    if (!a.block_scheme.empty()) cfg.sort.block_scheme = a.block_scheme;
    if (a.calib_set) cfg.sort.calib_samples = a.calib_samples;
    if (cfg.sort.block_scheme != "cosine" && cfg.sort.block_scheme != "drop")
        throw ConfigError("block_scheme must be cosine or drop, got '" + cfg.sort.block_scheme +
                          "'");
    if (cfg.sort.calib_samples < 1) throw ConfigError("calib_samples must be positive");
    const AggregationScheme scheme = AggregationScheme::parse(cfg.sort.scheme);

    const CorpusSplit split = split_corpus(cfg);
    const int64_t T = std::min<int64_t>(cfg.train.seq_len, ck.meta.model.max_seq_len);
    const int64_t available = int64_t(split.train.size()) / T;
    if (available < 1) throw InputError("corpus too short for one calibration window");
    const int64_t n_calib = std::min(cfg.sort.calib_samples, available);
    // Evenly spaced windows across the training split.
    std::vector<TokenBatch> calib;
    for (int64_t i = 0; i < n_calib; ++i) {
        const int64_t w = i * available / n_calib;
        TokenBatch b;
        b.batch = 1;
        b.seq = T;
        b.ids.assign(split.train.begin() + w * T, split.train.begin() + (w + 1) * T);
        calib.push_back(std::move(b));
    }

    ImportanceScores scores = score_components(collect_stats(ck.weights, calib), scheme);
    if (cfg.sort.block_scheme == "drop")
        scores.blocks = score_blocks_by_drop(ck.weights, calib);
    SortResult<float> sorted = apply_sorting(ck.weights, scores);

    ck.weights = std::move(sorted.weights);
    ck.meta.sorted = true;
    ck.meta.scheme = scheme;
    ck.meta.block_scheme = cfg.sort.block_scheme;
    ck.meta.calib_samples = n_calib;
    ck.meta.permutation = std::move(sorted.record);
    ck.meta.has_grid = false; // bin selections were ranked on pre-sort slices
    ck.meta.grid = CandidateGrid{};
    ck.meta.stage = "sorted";
    save_checkpoint(a.dir, ck);

    std::cout << "sorted components with scheme " << scheme.name() << " (blocks: "
              << cfg.sort.block_scheme << ", " << n_calib << " calibration windows)\n"
              << "  block retention order:";
    for (int64_t b : ck.weights.block_rank) std::cout << " " << b;
    std::cout << "\n";
}

void run_grid(const GridArgs& a) {
    Checkpoint ck = load_checkpoint(a.dir);
    if (!ck.meta.sorted)
        throw StateError("grid requires a sorted checkpoint; run sort first");
    RunConfig cfg = effective_config(a.dir, a.config);
    if (a.bins_set) cfg.grid.bins = a.bins;
    if (a.per_bin_set) cfg.grid.per_bin = a.per_bin;
    if (a.max_trials_set) cfg.grid.max_trials = a.max_trials;

    Rng rng = Rng(cfg.run.seed).derive("grid");
    ck.meta.grid = build_grid(ck.meta.space, ck.meta.model, ck.weights, cfg.grid.bins,
                              cfg.grid.per_bin, cfg.grid.max_trials, rng);
    ck.meta.has_grid = true;
    ck.meta.stage = "grid";
    save_checkpoint(a.dir, ck);

    const auto& g = ck.meta.grid;
    std::cout << "calibrated grid: " << g.occupied_count() << "/" << g.bins.size()
              << " bins occupied, parameter range [" << g.params_min << ", " << g.params_max
              << "]\n";
    for (size_t i = 0; i < g.bins.size(); ++i) {
        const auto& b = g.bins[i];
        std::cout << "  bin " << std::setw(2) << i << " [" << fmt_fixed(b.lo, 0) << ", "
                  << fmt_fixed(b.hi, 0) << (i + 1 == g.bins.size() ? "]" : ")");
        if (b.occupied)
            std::cout << " " << b.theta.to_string() << " params " << b.params << " |w|1 "
                      << fmt_fixed(b.magnitude, 2);
        else
            std::cout << " empty";
        std::cout << "\n";
    }
}

void append_train_log(const std::string& dir, const std::vector<StepMetrics>& log, size_t from) {
    const fs::path p = fs::path(dir) / "train.log";
    const bool fresh = !fs::exists(p);
    std::ofstream f(p, std::ios::binary | std::ios::app);
    if (!f) throw InputError("cannot write " + p.string());
    if (fresh) f << "step\tlr\tteacher_loss\tstudent_lm\tstudent_kd\tgrad_norm\tmadds\n";
    for (size_t i = from; i < log.size(); ++i) {
        const auto& m = log[i];
        auto joined = [](const std::vector<double>& v) {
            std::string s;
            for (size_t j = 0; j < v.size(); ++j) {
                if (j) s += ",";
                s += fmt_g(v[j]);
            }
            return s.empty() ? std::string("-") : s;
        };
        f << m.step << "\t" << fmt_g(m.lr) << "\t" << fmt_g(m.teacher_loss) << "\t"
          << joined(m.student_lm) << "\t" << joined(m.student_kd) << "\t" << fmt_g(m.grad_norm)
          << "\t" << m.madds << "\n";
    }
}

void run_train(const TrainArgs& a) {
    Checkpoint ck = load_checkpoint(a.dir);
    RunConfig cfg = effective_config(a.dir, a.config);
    TrainConfig tcfg = cfg.train;
    if (a.epochs_set) tcfg.epochs = a.epochs;
    if (a.lr_set) tcfg.base_lr = a.lr;
    if (a.final_lr_set) tcfg.final_lr = a.final_lr;
    if (a.k_set) tcfg.k = a.k;
    if (!a.kd.empty()) tcfg.kd_kind = kd_kind_from(a.kd);
    if (a.kd_temp_set) tcfg.kd_temperature = a.kd_temp;
    if (a.kd_weight_set) tcfg.kd_weight = a.kd_weight;
    if (a.seed_set) tcfg.seed = a.seed;
    tcfg.seq_len = std::min<int64_t>(tcfg.seq_len, ck.meta.model.max_seq_len);
    const CorpusSplit split = split_corpus(cfg);

    if (a.mode == "independent") {
        if (a.theta.empty()) throw ConfigError("--theta is required with --mode independent");
        const SubNetworkConfig theta = parse_theta(a.theta);
        const InitMode imode =
            a.init == "random" ? InitMode::random : InitMode::pretrained_sliced;
        // Baselines train the whole small network unless adapters are asked for.
        tcfg.use_lora = a.lora_set ? a.lora : false;
        tcfg.mode = TrainMode::independent;

        WeightsT<float> tuned = finetune_independent(imode, ck.weights, theta, split.train, tcfg);

        const std::string out =
            a.out.empty() ? (fs::path(a.dir) / ("independent-" + theta_slug(theta) + "-" + a.init))
                                .string()
                          : a.out;
        const int64_t windows = int64_t(split.train.size()) / tcfg.seq_len;
        const int64_t steps =
            tcfg.epochs * ((windows + tcfg.batch_size - 1) / tcfg.batch_size);
        Checkpoint base;
        base.meta.model = tuned.cfg;
        base.meta.space = singleton_space(tuned.theta_max());
        base.meta.stage = "trained";
        base.meta.trained = true;
        base.meta.train = tcfg;
        base.meta.steps_done = steps;
        base.weights = std::move(tuned);
        save_checkpoint(out, base);
        RunConfig child = cfg;
        child.model = base.meta.model;
        child.train = tcfg;
        write_config(out, child);

        double ppl = std::nan("");
        if (!split.eval.empty()) {
            const auto batches = eval_batches(cfg, split.eval, base.meta.model.max_seq_len);
            ppl = perplexity(base.weights, base.weights.theta_max(), batches);
        }
        std::cout << "independent baseline " << theta.to_string() << " (" << a.init << " init, "
                  << steps << " steps) -> " << out << "\n";
        if (!std::isnan(ppl)) std::cout << "  held-out perplexity: " << fmt_fixed(ppl, 4) << "\n";
        return;
    }

    // Weight-sharing mode mutates the supernet checkpoint in place.
    if (a.init == "random") {
        ck.weights = init_supernet<float>(ck.meta.model, Rng(cfg.run.seed).derive("init").seed());
        ck.adapters = LoraAdapterSet{};
        ck.meta.sorted = false;
        ck.meta.permutation = PermutationRecord{};
        ck.meta.has_grid = false;
        ck.meta.grid = CandidateGrid{};
        ck.meta.trained = false;
        ck.meta.steps_done = 0;
        ck.meta.stage = "init";
    }
    tcfg.mode = TrainMode::weight_sharing;
    if (a.lora_set) tcfg.use_lora = a.lora;
    if (ck.has_adapters()) {
        // Saved adapter state resumes only into an identically shaped set; the
        // base weights stay frozen either way.
        if (!tcfg.use_lora)
            throw StateError("checkpoint carries trained adapters; resume with --lora or "
                             "extract to merge them");
        if (ck.adapters.rank != tcfg.lora_rank || ck.adapters.alpha != tcfg.lora_alpha)
            throw ConfigError("adapter mismatch: checkpoint has rank " +
                              std::to_string(ck.adapters.rank) + " alpha " +
                              fmt_g(ck.adapters.alpha) + ", requested rank " +
                              std::to_string(tcfg.lora_rank) + " alpha " +
                              fmt_g(tcfg.lora_alpha));
    }
    if (tcfg.k > 0 && !ck.meta.has_grid)
        throw StateError("weight-sharing training with k > 0 needs a candidate grid; run grid "
                         "first (or pass --k 0)");

    const int64_t prev_steps = ck.meta.steps_done;
    const bool was_trained = ck.meta.trained;
    TrainStateT<float> state = make_train_state(std::move(ck.weights), tcfg);
    if (ck.has_adapters()) {
        const auto src = ck.adapters.trainable();
        const auto dst = state.adapters.trainable();
        for (size_t i = 0; i < src.size(); ++i) {
            if (src[i].shape() != dst[i].shape())
                throw ConfigError("adapter tensor shape mismatch on resume");
            dst[i].value() = src[i].value();
        }
    }

    size_t logged = 0;
    size_t epoch_start = 0;
    int64_t epoch_no = 0;
    auto save_snapshot = [&]() {
        Checkpoint snap;
        snap.meta = ck.meta;
        snap.meta.trained = was_trained || state.step > 0;
        snap.meta.steps_done = prev_steps + state.step;
        if (state.step > 0) {
            snap.meta.train = tcfg;
            snap.meta.stage = "trained";
        }
        snap.weights = state.weights;
        if (state.lora_on) snap.adapters = state.adapters;
        save_checkpoint(a.dir, snap);
    };
    train<float>(
        state, split.train, ck.meta.grid, tcfg,
        [&](const StepMetrics&) {},
        [&](int64_t epoch) {
            append_train_log(a.dir, state.log, logged);
            logged = state.log.size();
            save_snapshot();
            const double first = state.log[epoch_start].teacher_loss;
            const double last = state.log.back().teacher_loss;
            std::cout << "epoch " << (epoch + 1) << "/" << tcfg.epochs << ": full-net loss "
                      << fmt_fixed(first, 4) << " -> " << fmt_fixed(last, 4) << " over "
                      << (state.log.size() - epoch_start) << " steps\n";
            epoch_start = state.log.size();
            ++epoch_no;
        });
    append_train_log(a.dir, state.log, logged);
    save_snapshot();

    if (state.log.empty()) {
        std::cout << "no training steps ran (epochs " << tcfg.epochs << "); checkpoint unchanged\n";
    } else {
        std::cout << "training done: " << state.step << " steps, full-net loss "
                  << fmt_fixed(state.log.front().teacher_loss, 4) << " -> "
                  << fmt_fixed(state.log.back().teacher_loss, 4)
                  << (state.lora_on ? " (adapters attached)" : "") << "\n";
    }
}

EvalRow eval_one(const Checkpoint& ck, const RunConfig& cfg, const std::string& source,
                 const SubNetworkConfig& theta, const std::vector<TokenBatch>& batches) {
    EvalRow r;
    r.source = source;
    r.theta = theta;
    r.params = count_params(ck.meta.model, theta);
    r.flops = estimate_flops(ck.meta.model, theta, cfg.eval.seq_len);
    const WeightsT<float> sub =
        extract_subnet(ck.weights, theta, ck.has_adapters() ? &ck.adapters : nullptr);
    r.latency_ms =
        measure_latency(sub, std::min<int64_t>(cfg.latency.seq_len, ck.meta.model.max_seq_len),
                        cfg.latency.reps, cfg.latency.warmup)
            .median_ms;
    r.ppl = perplexity(sub, sub.theta_max(), batches);
    return r;
}

void run_eval(const EvalArgs& a) {
    if (a.all_grid != a.theta.empty())
        throw ConfigError("pass exactly one of --theta or --all-grid");
    Checkpoint ck = load_checkpoint(a.dir);
    RunConfig cfg = effective_config(a.dir, a.config);
    const CorpusSplit split = split_corpus(cfg);
    const auto batches = eval_batches(cfg, split.eval, ck.meta.model.max_seq_len);

    std::vector<EvalRow> rows;
    if (a.all_grid) {
        if (!ck.meta.has_grid)
            throw StateError("eval --all-grid needs a candidate grid; run grid first");
        rows.push_back(eval_one(ck, cfg, "full", ck.weights.theta_max(), batches));
        const auto& bins = ck.meta.grid.bins;
        for (size_t i = 0; i < bins.size(); ++i)
            if (bins[i].occupied)
                rows.push_back(
                    eval_one(ck, cfg, "bin" + std::to_string(i), bins[i].theta, batches));
    } else {
        const SubNetworkConfig theta = parse_theta(a.theta);
        check_structural(ck.meta.model, theta);
        rows.push_back(eval_one(ck, cfg, "theta", theta, batches));
    }
    print_eval_rows(rows);
    if (a.all_grid) {
        const std::string path = (fs::path(a.dir) / "eval.tsv").string();
        write_eval_tsv(path, rows);
        std::cout << "wrote " << rows.size() << " rows to " << path << "\n";
    }
}

void run_pareto(const ParetoArgs& a) {
    const fs::path table = fs::path(a.dir) / "eval.tsv";
    if (!fs::exists(table))
        throw StateError("no evaluation table at " + table.string() +
                         "; run eval --all-grid first");
    const auto rows = read_eval_tsv(table.string());
    const bool by_latency = a.cost == "latency";

    std::vector<ParetoPoint> points;
    for (const auto& r : rows) {
        ParetoPoint p;
        p.theta = r.theta;
        p.quality = r.ppl;
        p.cost = by_latency ? r.latency_ms : double(r.params);
        p.source = r.source;
        points.push_back(std::move(p));
    }
    const auto front = pareto_front(points);

    std::vector<EvalRow> front_rows;
    for (const auto& p : front)
        for (const auto& r : rows)
            if (r.source == p.source && r.theta == p.theta) {
                front_rows.push_back(r);
                break;
            }
    const std::string front_path = (fs::path(a.dir) / "pareto.tsv").string();
    write_eval_tsv(front_path, front_rows);

    PlotSeries all{"evaluated", {}, {}, false};
    for (const auto& p : points) {
        all.x.push_back(p.cost);
        all.y.push_back(p.quality);
    }
    PlotSeries fr{"front", {}, {}, true};
    for (const auto& p : front) {
        fr.x.push_back(p.cost);
        fr.y.push_back(p.quality);
    }
    const std::string x_label = by_latency ? "latency (ms, median)" : "parameters";
    const std::string svg =
        render_scatter_svg("quality vs cost", x_label, "perplexity", {all, fr});
    const std::string svg_path = (fs::path(a.dir) / "pareto.svg").string();
    std::ofstream sf(svg_path, std::ios::binary | std::ios::trunc);
    if (!sf) throw InputError("cannot write " + svg_path);
    sf << svg;
    sf.close();

    std::cout << "front (" << front.size() << " of " << points.size() << " points, cost = "
              << (by_latency ? "latency" : "params") << "):\n";
    print_eval_rows(front_rows);
    std::cout << "wrote " << front_path << " and " << svg_path << "\n";
}

void run_extract(const ExtractArgs& a) {
    Checkpoint ck = load_checkpoint(a.dir);
    RunConfig cfg = effective_config(a.dir, a.config);
    const SubNetworkConfig theta = parse_theta(a.theta);
    check_structural(ck.meta.model, theta);
    WeightsT<float> sub =
        extract_subnet(ck.weights, theta, ck.has_adapters() ? &ck.adapters : nullptr);

    const std::string out =
        a.out.empty() ? (fs::path(a.dir) / ("extract-" + theta_slug(theta))).string() : a.out;
    Checkpoint standalone;
    standalone.meta.model = sub.cfg;
    standalone.meta.space = singleton_space(sub.theta_max());
    standalone.meta.trained = ck.meta.trained;
    standalone.meta.train = ck.meta.train;
    standalone.meta.steps_done = ck.meta.steps_done;
    standalone.meta.stage = ck.meta.trained ? "trained" : "init";
    standalone.weights = std::move(sub);
    save_checkpoint(out, standalone);
    RunConfig child = cfg;
    child.model = standalone.meta.model;
    write_config(out, child);

    std::cout << "extracted " << theta.to_string() << " ("
              << standalone.weights.param_count() << " params"
              << (ck.has_adapters() ? ", adapters merged" : "") << ") -> " << out << "\n";
}

void run_latency(const LatencyArgs& a) {
    Checkpoint ck = load_checkpoint(a.dir);
    RunConfig cfg = effective_config(a.dir, a.config);
    if (a.reps_set) cfg.latency.reps = a.reps;
    if (a.warmup_set) cfg.latency.warmup = a.warmup;
    if (a.seq_set) cfg.latency.seq_len = a.seq_len;

    SubNetworkConfig theta = ck.weights.theta_max();
    if (!a.theta.empty()) {
        theta = parse_theta(a.theta);
        check_structural(ck.meta.model, theta);
    }
    const WeightsT<float> sub =
        extract_subnet(ck.weights, theta, ck.has_adapters() ? &ck.adapters : nullptr);
    const int64_t T = std::min<int64_t>(cfg.latency.seq_len, ck.meta.model.max_seq_len);
    const LatencyStats st = measure_latency(sub, T, cfg.latency.reps, cfg.latency.warmup);

    std::cout << "latency of " << theta.to_string() << " (batch 1, T=" << T << ", "
              << st.reps << " reps):\n"
              << "  median " << fmt_fixed(st.median_ms, 3) << " ms, p10 "
              << fmt_fixed(st.p10_ms, 3) << " ms, p90 " << fmt_fixed(st.p90_ms, 3) << " ms\n";
}

} // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"elastic language-model pipeline: train one super-network, slice many"};
    app.require_subcommand(1);

    InitArgs ia;
    auto* init = app.add_subcommand("init", "create a randomly initialized super-network");
    init->add_option("--dir", ia.dir, "checkpoint directory to create")->required();
    init->add_option("--config", ia.config, "config file (defaults are built in)");
    auto* ia_seed = init->add_option("--seed", ia.seed, "run seed");
    init->add_option("--corpus", ia.corpus, "corpus path recorded in the run config");

    SortArgs sa;
    auto* sortc = app.add_subcommand("sort", "score and sort components by importance");
    sortc->add_option("--dir", sa.dir, "checkpoint directory")->required();
    sortc->add_option("--config", sa.config, "config file override");
    sortc->add_option("--scheme", sa.scheme, "aggregation scheme, e.g. mean-mean or norm-mean");
    sortc->add_option("--block-scheme", sa.block_scheme, "block scoring: cosine or drop");
    auto* sa_calib = sortc->add_option("--calib-samples", sa.calib_samples,
                                       "calibration windows");

    GridArgs ga;
    auto* gridc = app.add_subcommand("grid", "build the calibrated parameter-count grid");
    gridc->add_option("--dir", ga.dir, "checkpoint directory")->required();
    gridc->add_option("--config", ga.config, "config file override");
    auto* ga_bins = gridc->add_option("--bins", ga.bins, "parameter-count bins");
    auto* ga_per = gridc->add_option("--per-bin", ga.per_bin, "retained samples per bin");
    auto* ga_max = gridc->add_option("--max-trials", ga.max_trials, "sampling budget per bin");

    TrainArgs ta;
    auto* trainc = app.add_subcommand("train", "train the super-network or a baseline");
    trainc->add_option("--dir", ta.dir, "checkpoint directory")->required();
    trainc->add_option("--config", ta.config, "config file override");
    auto* ta_epochs = trainc->add_option("--epochs", ta.epochs, "training epochs");
    auto* ta_lr = trainc->add_option("--lr", ta.lr, "peak learning rate");
    auto* ta_flr = trainc->add_option("--final-lr", ta.final_lr, "annealed final rate");
    auto* ta_k = trainc->add_option("--k", ta.k, "sub-networks drawn per step");
    trainc->add_option("--kd", ta.kd,
                       "distillation kind: cosine|forward_kl|reverse_kl|js|l1|l2");
    auto* ta_temp = trainc->add_option("--kd-temp", ta.kd_temp, "distillation temperature");
    auto* ta_kdw = trainc->add_option("--kd-weight", ta.kd_weight, "distillation loss weight");
    auto* ta_lora = trainc->add_flag("--lora,!--no-lora", ta.lora,
                                     "train low-rank adapters instead of base weights");
    trainc->add_option("--mode", ta.mode, "weight_sharing or independent")
        ->check(CLI::IsMember({"weight_sharing", "independent"}));
    trainc->add_option("--init", ta.init, "start point: pretrained or random")
        ->check(CLI::IsMember({"pretrained", "random"}));
    trainc->add_option("--theta", ta.theta,
                       "sub-network d_model,n_heads,d_head,ffn_ratio,n_layers (independent mode)");
    trainc->add_option("--out", ta.out, "output directory for independent baselines");
    auto* ta_seed = trainc->add_option("--seed", ta.seed, "training seed");

    EvalArgs ea;
    auto* evalc = app.add_subcommand("eval", "evaluate sub-networks on the held-out split");
    evalc->add_option("--dir", ea.dir, "checkpoint directory")->required();
    evalc->add_option("--config", ea.config, "config file override");
    evalc->add_option("--theta", ea.theta, "one sub-network to evaluate");
    evalc->add_flag("--all-grid", ea.all_grid, "evaluate every grid entry and write eval.tsv");

    ParetoArgs pa;
    auto* paretoc = app.add_subcommand("pareto", "extract the non-dominated front from eval.tsv");
    paretoc->add_option("--dir", pa.dir, "checkpoint directory")->required();
    paretoc->add_option("--config", pa.config, "config file override");
    paretoc->add_option("--cost", pa.cost, "cost axis: params or latency")
        ->check(CLI::IsMember({"params", "latency"}));

    ExtractArgs xa;
    auto* extractc = app.add_subcommand("extract", "materialize a sub-network as a checkpoint");
    extractc->add_option("--dir", xa.dir, "checkpoint directory")->required();
    extractc->add_option("--config", xa.config, "config file override");
    extractc->add_option("--theta", xa.theta, "sub-network to extract")->required();
    extractc->add_option("--out", xa.out, "output checkpoint directory");

    LatencyArgs la;
    auto* latencyc = app.add_subcommand("latency", "time batch-1 prefill forwards");
    latencyc->add_option("--dir", la.dir, "checkpoint directory")->required();
    latencyc->add_option("--config", la.config, "config file override");
    latencyc->add_option("--theta", la.theta, "sub-network to time (default: full network)");
    auto* la_reps = latencyc->add_option("--reps", la.reps, "timed repetitions");
    auto* la_warm = latencyc->add_option("--warmup", la.warmup, "untimed warmup passes");
    auto* la_seq = latencyc->add_option("--seq-len", la.seq_len, "prefill length");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    ia.seed_set = ia_seed->count() > 0;
    sa.calib_set = sa_calib->count() > 0;
    ga.bins_set = ga_bins->count() > 0;
    ga.per_bin_set = ga_per->count() > 0;
    ga.max_trials_set = ga_max->count() > 0;
    ta.epochs_set = ta_epochs->count() > 0;
    ta.lr_set = ta_lr->count() > 0;
    ta.final_lr_set = ta_flr->count() > 0;
    ta.k_set = ta_k->count() > 0;
    ta.kd_temp_set = ta_temp->count() > 0;
    ta.kd_weight_set = ta_kdw->count() > 0;
    ta.lora_set = ta_lora->count() > 0;
    ta.seed_set = ta_seed->count() > 0;
    la.reps_set = la_reps->count() > 0;
    la.warmup_set = la_warm->count() > 0;
    la.seq_set = la_seq->count() > 0;

    try {
        if (init->parsed()) run_init(ia);
        else if (sortc->parsed()) run_sort(sa);
        else if (gridc->parsed()) run_grid(ga);
        else if (trainc->parsed()) run_train(ta);
        else if (evalc->parsed()) run_eval(ea);
        else if (paretoc->parsed()) run_pareto(pa);
        else if (extractc->parsed()) run_extract(xa);
        else if (latencyc->parsed()) run_latency(la);
        return 0;
    } catch (const StateError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return 3;
    } catch (const UnknownVersionError& e) {
        std::cerr << "load error (unknown version): " << e.what() << "\n";
        return 1;
    } catch (const CorruptTableError& e) {
        std::cerr << "load error (corrupt table): " << e.what() << "\n";
        return 1;
    } catch (const ShortFileError& e) {
        std::cerr << "load error (short file): " << e.what() << "\n";
        return 1;
    } catch (const LoadError& e) {
        std::cerr << "load error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 1;
    } catch (const GridError& e) {
        std::cerr << "grid error: " << e.what() << "\n";
        return 1;
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace elm
