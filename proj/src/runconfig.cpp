#include "elm/runconfig.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "elm/error.hpp"

namespace elm {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(int64_t line, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

int64_t to_i64(const std::string& v) {
    try {
        size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw ConfigError("expected an integer, got '" + v + "'");
    }
}

uint64_t to_u64(const std::string& v) {
    try {
        size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size() || v.find('-') != std::string::npos) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw ConfigError("expected a non-negative integer, got '" + v + "'");
    }
}

double to_f64(const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw ConfigError("expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("expected a boolean, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<int64_t> to_i64_list(const std::string& v) {
    std::vector<int64_t> out;
    for (const auto& s : split_list(v)) out.push_back(to_i64(s));
    return out;
}

std::vector<double> to_f64_list(const std::string& v) {
    std::vector<double> out;
    for (const auto& s : split_list(v)) out.push_back(to_f64(s));
    return out;
}

// Shortest decimal form that parses back to the exact same double.
std::string fmt_double(double x) {
    char buf[64];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, x);
        if (std::strtod(buf, nullptr) == x) return buf;
    }
    return buf;
}

template <class T, class Fmt>
std::string join(const std::vector<T>& v, Fmt fmt) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += fmt(v[i]);
    }
    return out;
}

bool known_section(const std::string& sec) {
    for (const char* s : {"model", "space", "sort", "grid", "train", "eval", "latency",
                          "data", "run"})
        if (sec == s) return true;
    return false;
}

// Throws bare ConfigError/InputError; the caller stamps the line number on.
void apply(RunConfig& c, const std::string& sec, const std::string& key,
           const std::string& val) {
    auto unknown = [&]() { throw ConfigError("unknown key '" + key + "' in [" + sec + "]"); };
    if (sec == "model") {
        auto& m = c.model;
        if (key == "vocab_size") m.vocab_size = to_i64(val);
        else if (key == "d_model_max") m.d_model_max = to_i64(val);
        else if (key == "n_layers_max") m.n_layers_max = to_i64(val);
        else if (key == "n_heads_max") m.n_heads_max = to_i64(val);
        else if (key == "n_groups_max") m.n_groups_max = to_i64(val);
        else if (key == "d_head_max") m.d_head_max = to_i64(val);
        else if (key == "ffn_ratio_max") m.ffn_ratio_max = to_f64(val);
        else if (key == "rms_eps") m.rms_eps = to_f64(val);
        else if (key == "max_seq_len") m.max_seq_len = to_i64(val);
        else unknown();
    } else if (sec == "space") {
        if (key == "variant") c.space_variant = space_variant_from(val);
        else if (key == "d_model_choices") c.d_model_choices = to_i64_list(val);
        else if (key == "head_choices") c.head_choices = to_i64_list(val);
        else if (key == "d_head_choices") c.d_head_choices = to_i64_list(val);
        else if (key == "ratio_choices") c.ratio_choices = to_f64_list(val);
        else if (key == "depth_choices") c.depth_choices = to_i64_list(val);
        else unknown();
    } else if (sec == "sort") {
        if (key == "scheme") c.sort.scheme = val;
        else if (key == "block_scheme") c.sort.block_scheme = val;
        else if (key == "calib_samples") c.sort.calib_samples = to_i64(val);
        else unknown();
    } else if (sec == "grid") {
        if (key == "bins") c.grid.bins = to_i64(val);
        else if (key == "per_bin") c.grid.per_bin = to_i64(val);
        else if (key == "max_trials") c.grid.max_trials = to_i64(val);
        else unknown();
    } else if (sec == "train") {
        auto& t = c.train;
        if (key == "epochs") t.epochs = to_i64(val);
        else if (key == "base_lr") t.base_lr = to_f64(val);
        else if (key == "final_lr") t.final_lr = to_f64(val);
        else if (key == "beta1") t.beta1 = to_f64(val);
        else if (key == "beta2") t.beta2 = to_f64(val);
        else if (key == "adam_eps") t.adam_eps = to_f64(val);
        else if (key == "clip_norm") t.clip_norm = to_f64(val);
        else if (key == "k") t.k = to_i64(val);
        else if (key == "kd_kind") t.kd_kind = kd_kind_from(val);
        else if (key == "kd_temperature") t.kd_temperature = to_f64(val);
        else if (key == "kd_weight") t.kd_weight = to_f64(val);
        else if (key == "batch_size") t.batch_size = to_i64(val);
        else if (key == "seq_len") t.seq_len = to_i64(val);
        else if (key == "seed") t.seed = to_u64(val);
        else if (key == "use_lora") t.use_lora = to_bool(val);
        else if (key == "lora_rank") t.lora_rank = to_i64(val);
        else if (key == "lora_alpha") t.lora_alpha = to_f64(val);
        else if (key == "lora_dropout") t.lora_dropout = to_f64(val);
        else if (key == "mode") t.mode = train_mode_from(val);
        else unknown();
    } else if (sec == "eval") {
        if (key == "seq_len") c.eval.seq_len = to_i64(val);
        else if (key == "batch_size") c.eval.batch_size = to_i64(val);
        else if (key == "max_windows") c.eval.max_windows = to_i64(val);
        else unknown();
    } else if (sec == "latency") {
        if (key == "seq_len") c.latency.seq_len = to_i64(val);
        else if (key == "reps") c.latency.reps = to_i64(val);
        else if (key == "warmup") c.latency.warmup = to_i64(val);
        else unknown();
    } else if (sec == "data") {
        if (key == "corpus") c.data.corpus = val;
        else if (key == "eval_fraction") c.data.eval_fraction = to_f64(val);
        else unknown();
    } else if (sec == "run") {
        if (key == "seed") c.run.seed = to_u64(val);
        else unknown();
    }
}

} // namespace

SearchSpace RunConfig::resolve_space() const {
    SearchSpace s = SearchSpace::make(space_variant, model);
    if (!d_model_choices.empty()) s.d_model_choices = d_model_choices;
    if (!head_choices.empty()) s.head_choices = head_choices;
    if (!d_head_choices.empty()) s.d_head_choices = d_head_choices;
    if (!ratio_choices.empty()) s.ratio_choices = ratio_choices;
    if (!depth_choices.empty()) s.depth_choices = depth_choices;
    s.validate(model);
    return s;
}

RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') fail(lineno, "unterminated section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) fail(lineno, "empty section name");
            if (!known_section(section)) fail(lineno, "unknown section [" + section + "]");
            continue;
        }
        const size_t eq = t.find('=');
        if (eq == std::string::npos) fail(lineno, "expected 'key = value'");
        if (section.empty()) fail(lineno, "key before any [section]");
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        if (key.empty()) fail(lineno, "empty key");
        try {
            apply(cfg, section, key, val);
        } catch (const ConfigError& e) {
            fail(lineno, e.what());
        } catch (const InputError& e) {
            fail(lineno, e.what());
        }
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot read config file " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_run_config(buf.str());
}

std::string render_run_config(const RunConfig& c) {
    auto d = [](double x) { return fmt_double(x); };
    auto ints = [](const std::vector<int64_t>& v) {
        return join(v, [](int64_t x) { return std::to_string(x); });
    };
    std::ostringstream o;
    o << "# pipeline configuration\n";
    o << "\n[model]\n";
    o << "vocab_size = " << c.model.vocab_size << "\n";
    o << "d_model_max = " << c.model.d_model_max << "\n";
    o << "n_layers_max = " << c.model.n_layers_max << "\n";
    o << "n_heads_max = " << c.model.n_heads_max << "\n";
    o << "n_groups_max = " << c.model.n_groups_max << "\n";
    o << "d_head_max = " << c.model.d_head_max << "\n";
    o << "ffn_ratio_max = " << d(c.model.ffn_ratio_max) << "\n";
    o << "rms_eps = " << d(c.model.rms_eps) << "\n";
    o << "max_seq_len = " << c.model.max_seq_len << "\n";
    o << "\n[space]\n";
    o << "variant = " << space_variant_name(c.space_variant) << "\n";
    o << "d_model_choices = " << ints(c.d_model_choices) << "\n";
    o << "head_choices = " << ints(c.head_choices) << "\n";
    o << "d_head_choices = " << ints(c.d_head_choices) << "\n";
    o << "ratio_choices = " << join(c.ratio_choices, d) << "\n";
    o << "depth_choices = " << ints(c.depth_choices) << "\n";
    o << "\n[sort]\n";
    o << "scheme = " << c.sort.scheme << "\n";
    o << "block_scheme = " << c.sort.block_scheme << "\n";
    o << "calib_samples = " << c.sort.calib_samples << "\n";
    o << "\n[grid]\n";
    o << "bins = " << c.grid.bins << "\n";
    o << "per_bin = " << c.grid.per_bin << "\n";
    o << "max_trials = " << c.grid.max_trials << "\n";
    o << "\n[train]\n";
    o << "epochs = " << c.train.epochs << "\n";
    o << "base_lr = " << d(c.train.base_lr) << "\n";
    o << "final_lr = " << d(c.train.final_lr) << "\n";
    o << "beta1 = " << d(c.train.beta1) << "\n";
    o << "beta2 = " << d(c.train.beta2) << "\n";
    o << "adam_eps = " << d(c.train.adam_eps) << "\n";
    o << "clip_norm = " << d(c.train.clip_norm) << "\n";
    o << "k = " << c.train.k << "\n";
    o << "kd_kind = " << kd_kind_name(c.train.kd_kind) << "\n";
    o << "kd_temperature = " << d(c.train.kd_temperature) << "\n";
    o << "kd_weight = " << d(c.train.kd_weight) << "\n";
    o << "batch_size = " << c.train.batch_size << "\n";
    o << "seq_len = " << c.train.seq_len << "\n";
    o << "seed = " << c.train.seed << "\n";
    o << "use_lora = " << (c.train.use_lora ? "true" : "false") << "\n";
    o << "lora_rank = " << c.train.lora_rank << "\n";
    o << "lora_alpha = " << d(c.train.lora_alpha) << "\n";
    o << "lora_dropout = " << d(c.train.lora_dropout) << "\n";
    o << "mode = " << train_mode_name(c.train.mode) << "\n";
    o << "\n[eval]\n";
    o << "seq_len = " << c.eval.seq_len << "\n";
    o << "batch_size = " << c.eval.batch_size << "\n";
    o << "max_windows = " << c.eval.max_windows << "\n";
    o << "\n[latency]\n";
    o << "seq_len = " << c.latency.seq_len << "\n";
    o << "reps = " << c.latency.reps << "\n";
    o << "warmup = " << c.latency.warmup << "\n";
    o << "\n[data]\n";
    o << "corpus = " << c.data.corpus << "\n";
    o << "eval_fraction = " << d(c.data.eval_fraction) << "\n";
    o << "\n[run]\n";
    o << "seed = " << c.run.seed << "\n";
    return o.str();
}

} // namespace elm
