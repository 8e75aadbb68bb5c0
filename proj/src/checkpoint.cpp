#include "elm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "elm/error.hpp"

namespace elm {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "tensors.bin stores little-endian floats; big-endian hosts need swaps");

namespace {

// ---- canonical tensor naming -------------------------------------------------

// The manifest table keys tensors by these names; order here is the payload
// order save_checkpoint writes.
std::vector<std::pair<std::string, Tensor<float>>> named_tensors(const Checkpoint& ck) {
    std::vector<std::pair<std::string, Tensor<float>>> out;
    const auto& w = ck.weights;
    out.emplace_back("emb.weight", w.w_emb);
    out.emplace_back("pos.weight", w.w_pos);
    for (size_t l = 0; l < w.blocks.size(); ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        const auto& b = w.blocks[l];
        out.emplace_back(p + "attn_norm.gamma", b.attn_norm_gamma);
        out.emplace_back(p + "attn.w_qkv", b.w_attn);
        out.emplace_back(p + "attn.w_proj", b.w_proj);
        out.emplace_back(p + "ffn_norm.gamma", b.ffn_norm_gamma);
        out.emplace_back(p + "ffn.w_gate", b.w_ffn_gate);
        out.emplace_back(p + "ffn.w_up", b.w_ffn_up);
        out.emplace_back(p + "ffn.w_down", b.w_ffn_down);
    }
    out.emplace_back("final_norm.gamma", w.final_norm_gamma);
    out.emplace_back("lm_head.weight", w.w_lm_head);
    if (ck.has_adapters()) {
        auto pair = [&](const std::string& base, const LoraPair<float>& p) {
            out.emplace_back(base + ".a", p.a);
            out.emplace_back(base + ".b", p.b);
        };
        pair("lora.emb", ck.adapters.emb);
        for (size_t l = 0; l < ck.adapters.blocks.size(); ++l) {
            const std::string base = "lora.block" + std::to_string(l);
            pair(base + ".q", ck.adapters.blocks[l].q);
            pair(base + ".k", ck.adapters.blocks[l].k);
            pair(base + ".v", ck.adapters.blocks[l].v);
        }
    }
    return out;
}

// Zero tensors with the shapes the config implies, for loading into. Accepts
// any positive dimensions with whole head groups: extracted sub-networks need
// not satisfy the search-space constraints a trainable super-network does.
WeightsT<float> make_weights_shell(const SuperNetConfig& cfg) {
    auto bad = [](const std::string& m) { throw LoadError("manifest model: " + m); };
    if (cfg.vocab_size < 1 || cfg.d_model_max < 1 || cfg.n_layers_max < 1 ||
        cfg.n_heads_max < 1 || cfg.n_groups_max < 1 || cfg.d_head_max < 1 ||
        cfg.max_seq_len < 1)
        bad("every dimension must be positive");
    if (cfg.ffn_ratio_max <= 0.0) bad("ffn_ratio_max must be positive");
    if (cfg.rms_eps <= 0.0) bad("rms_eps must be positive");
    if (cfg.n_heads_max % cfg.n_groups_max != 0)
        bad("n_heads_max must be a multiple of n_groups_max");

    const int64_t d = cfg.d_model_max;
    const int64_t u = cfg.ffn_dim_max();
    if (u < 1) bad("ffn dimension rounds to zero");

    WeightsT<float> w;
    w.cfg = cfg;
    w.w_emb = Tensor<float>::zeros({cfg.vocab_size, d}).set_name("emb.weight");
    w.w_pos = Tensor<float>::zeros({cfg.max_seq_len, d}).set_name("pos.weight");
    w.blocks.resize(static_cast<size_t>(cfg.n_layers_max));
    for (int64_t l = 0; l < cfg.n_layers_max; ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        auto& b = w.blocks[static_cast<size_t>(l)];
        b.attn_norm_gamma = Tensor<float>::zeros({1, d}).set_name(p + "attn_norm.gamma");
        b.w_attn = Tensor<float>::zeros({d, cfg.qkv_cols()}).set_name(p + "attn.w_qkv");
        b.w_proj = Tensor<float>::zeros({cfg.n_heads_max * cfg.d_head_max, d})
                       .set_name(p + "attn.w_proj");
        b.ffn_norm_gamma = Tensor<float>::zeros({1, d}).set_name(p + "ffn_norm.gamma");
        b.w_ffn_gate = Tensor<float>::zeros({d, u}).set_name(p + "ffn.w_gate");
        b.w_ffn_up = Tensor<float>::zeros({d, u}).set_name(p + "ffn.w_up");
        b.w_ffn_down = Tensor<float>::zeros({u, d}).set_name(p + "ffn.w_down");
    }
    w.final_norm_gamma = Tensor<float>::zeros({1, d}).set_name("final_norm.gamma");
    w.w_lm_head = Tensor<float>::zeros({d, cfg.vocab_size}).set_name("lm_head.weight");
    w.block_rank.resize(static_cast<size_t>(cfg.n_layers_max));
    for (int64_t l = 0; l < cfg.n_layers_max; ++l) w.block_rank[static_cast<size_t>(l)] = l;
    return w;
}

// ---- json (de)serializers ----------------------------------------------------

json theta_to_json(const SubNetworkConfig& t) {
    return json{{"d_model", t.d_model},
                {"n_heads", t.n_heads},
                {"d_head", t.d_head},
                {"ffn_ratio", t.ffn_ratio},
                {"n_layers", t.n_layers}};
}

SubNetworkConfig theta_from_json(const json& j) {
    SubNetworkConfig t;
    t.d_model = j.at("d_model").get<int64_t>();
    t.n_heads = j.at("n_heads").get<int64_t>();
    t.d_head = j.at("d_head").get<int64_t>();
    t.ffn_ratio = j.at("ffn_ratio").get<double>();
    t.n_layers = j.at("n_layers").get<int64_t>();
    return t;
}

json model_to_json(const SuperNetConfig& c) {
    return json{{"vocab_size", c.vocab_size},     {"d_model_max", c.d_model_max},
                {"n_layers_max", c.n_layers_max}, {"n_heads_max", c.n_heads_max},
                {"n_groups_max", c.n_groups_max}, {"d_head_max", c.d_head_max},
                {"ffn_ratio_max", c.ffn_ratio_max}, {"rms_eps", c.rms_eps},
                {"max_seq_len", c.max_seq_len}};
}

SuperNetConfig model_from_json(const json& j) {
    SuperNetConfig c;
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.d_model_max = j.at("d_model_max").get<int64_t>();
    c.n_layers_max = j.at("n_layers_max").get<int64_t>();
    c.n_heads_max = j.at("n_heads_max").get<int64_t>();
    c.n_groups_max = j.at("n_groups_max").get<int64_t>();
    c.d_head_max = j.at("d_head_max").get<int64_t>();
    c.ffn_ratio_max = j.at("ffn_ratio_max").get<double>();
    c.rms_eps = j.at("rms_eps").get<double>();
    c.max_seq_len = j.at("max_seq_len").get<int64_t>();
    return c;
}

json space_to_json(const SearchSpace& s) {
    return json{{"variant", space_variant_name(s.variant)},
                {"d_model_choices", s.d_model_choices},
                {"head_choices", s.head_choices},
                {"d_head_choices", s.d_head_choices},
                {"ratio_choices", s.ratio_choices},
                {"depth_choices", s.depth_choices}};
}

SearchSpace space_from_json(const json& j) {
    SearchSpace s;
    s.variant = space_variant_from(j.at("variant").get<std::string>());
    s.d_model_choices = j.at("d_model_choices").get<std::vector<int64_t>>();
    s.head_choices = j.at("head_choices").get<std::vector<int64_t>>();
    s.d_head_choices = j.at("d_head_choices").get<std::vector<int64_t>>();
    s.ratio_choices = j.at("ratio_choices").get<std::vector<double>>();
    s.depth_choices = j.at("depth_choices").get<std::vector<int64_t>>();
    return s;
}

json permutation_to_json(const PermutationRecord& r) {
    return json{{"emb", r.emb}, {"ffn", r.ffn}, {"groups", r.groups},
                {"block_rank", r.block_rank}};
}

PermutationRecord permutation_from_json(const json& j) {
    PermutationRecord r;
    r.emb = j.at("emb").get<std::vector<int64_t>>();
    r.ffn = j.at("ffn").get<std::vector<std::vector<int64_t>>>();
    r.groups = j.at("groups").get<std::vector<std::vector<int64_t>>>();
    r.block_rank = j.at("block_rank").get<std::vector<int64_t>>();
    return r;
}

json grid_to_json(const CandidateGrid& g) {
    json bins = json::array();
    for (const auto& b : g.bins) {
        json jb{{"lo", b.lo}, {"hi", b.hi}, {"occupied", b.occupied}, {"trials", b.trials}};
        if (b.occupied) {
            jb["theta"] = theta_to_json(b.theta);
            jb["params"] = b.params;
            jb["magnitude"] = b.magnitude;
        }
        bins.push_back(std::move(jb));
    }
    return json{{"params_min", g.params_min}, {"params_max", g.params_max},
                {"bins", std::move(bins)}};
}

CandidateGrid grid_from_json(const json& j) {
    CandidateGrid g;
    g.params_min = j.at("params_min").get<int64_t>();
    g.params_max = j.at("params_max").get<int64_t>();
    for (const auto& jb : j.at("bins")) {
        GridBin b;
        b.lo = jb.at("lo").get<double>();
        b.hi = jb.at("hi").get<double>();
        b.occupied = jb.at("occupied").get<bool>();
        b.trials = jb.at("trials").get<int64_t>();
        if (b.occupied) {
            b.theta = theta_from_json(jb.at("theta"));
            b.params = jb.at("params").get<int64_t>();
            b.magnitude = jb.at("magnitude").get<double>();
        }
        g.bins.push_back(std::move(b));
    }
    return g;
}

json train_to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"base_lr", c.base_lr},
                {"final_lr", c.final_lr},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"clip_norm", c.clip_norm},
                {"k", c.k},
                {"kd_kind", kd_kind_name(c.kd_kind)},
                {"kd_temperature", c.kd_temperature},
                {"kd_weight", c.kd_weight},
                {"batch_size", c.batch_size},
                {"seq_len", c.seq_len},
                {"seed", c.seed},
                {"use_lora", c.use_lora},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha},
                {"lora_dropout", c.lora_dropout},
                {"mode", train_mode_name(c.mode)}};
}

TrainConfig train_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<int64_t>();
    c.base_lr = j.at("base_lr").get<double>();
    c.final_lr = j.at("final_lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.k = j.at("k").get<int64_t>();
    c.kd_kind = kd_kind_from(j.at("kd_kind").get<std::string>());
    c.kd_temperature = j.at("kd_temperature").get<double>();
    c.kd_weight = j.at("kd_weight").get<double>();
    c.batch_size = j.at("batch_size").get<int64_t>();
    c.seq_len = j.at("seq_len").get<int64_t>();
    c.seed = j.at("seed").get<uint64_t>();
    c.use_lora = j.at("use_lora").get<bool>();
    c.lora_rank = j.at("lora_rank").get<int64_t>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.lora_dropout = j.at("lora_dropout").get<double>();
    c.mode = train_mode_from(j.at("mode").get<std::string>());
    return c;
}

void check_permutation_sizes(const PermutationRecord& r, const SuperNetConfig& cfg) {
    auto bad = [](const std::string& m) { throw LoadError("manifest permutation: " + m); };
    if (int64_t(r.emb.size()) != cfg.d_model_max) bad("emb size mismatches d_model_max");
    if (int64_t(r.ffn.size()) != cfg.n_layers_max) bad("ffn block count mismatches n_layers_max");
    if (int64_t(r.groups.size()) != cfg.n_layers_max)
        bad("group block count mismatches n_layers_max");
    if (int64_t(r.block_rank.size()) != cfg.n_layers_max)
        bad("block_rank size mismatches n_layers_max");
    for (const auto& f : r.ffn)
        if (int64_t(f.size()) != cfg.ffn_dim_max()) bad("ffn permutation width mismatch");
    for (const auto& g : r.groups)
        if (int64_t(g.size()) != cfg.n_groups_max) bad("group permutation width mismatch");
}

} // namespace

bool checkpoint_exists(const std::string& dir) {
    return fs::exists(fs::path(dir) / "manifest");
}

void save_checkpoint(const std::string& dir, const Checkpoint& ck) {
    const fs::path root(dir);
    fs::create_directories(root);

    const auto entries = named_tensors(ck);

    std::ofstream bin(root / "tensors.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw InputError("cannot write " + (root / "tensors.bin").string());
    json table = json::array();
    int64_t offset = 0;
    for (const auto& [name, t] : entries) {
        const auto& v = t.value();
        const int64_t length = int64_t(v.size()) * int64_t(sizeof(float));
        bin.write(reinterpret_cast<const char*>(v.data()), length);
        table.push_back(json{{"name", name},
                             {"shape", t.shape()},
                             {"offset", offset},
                             {"length", length}});
        offset += length;
    }
    bin.close();
    if (!bin) throw InputError("write failed for " + (root / "tensors.bin").string());

    json m;
    m["schema_version"] = kCheckpointVersion;
    m["stage"] = ck.meta.stage;
    m["model"] = model_to_json(ck.meta.model);
    m["space"] = space_to_json(ck.meta.space);
    m["block_rank"] = ck.weights.block_rank;
    m["sorted"] = ck.meta.sorted;
    if (ck.meta.sorted) {
        m["sort"] = json{{"scheme", ck.meta.scheme.name()},
                         {"block_scheme", ck.meta.block_scheme},
                         {"calib_samples", ck.meta.calib_samples},
                         {"permutation", permutation_to_json(ck.meta.permutation)}};
    }
    if (ck.meta.has_grid) m["grid"] = grid_to_json(ck.meta.grid);
    m["trained"] = ck.meta.trained;
    m["steps_done"] = ck.meta.steps_done;
    if (ck.meta.trained) m["train"] = train_to_json(ck.meta.train);
    if (ck.has_adapters()) {
        m["adapters"] = json{{"rank", ck.adapters.rank},
                             {"alpha", ck.adapters.alpha},
                             {"dropout", ck.adapters.dropout}};
    }
    m["tensors"] = std::move(table);

    std::ofstream mf(root / "manifest", std::ios::binary | std::ios::trunc);
    if (!mf) throw InputError("cannot write " + (root / "manifest").string());
    mf << m.dump(2) << "\n";
    mf.close();
    if (!mf) throw InputError("write failed for " + (root / "manifest").string());
}

Checkpoint load_checkpoint(const std::string& dir) {
    const fs::path root(dir);
    const fs::path mpath = root / "manifest";

    std::ifstream mf(mpath, std::ios::binary);
    if (!mf) throw LoadError("cannot read manifest at " + mpath.string());
    json m;
    try {
        mf >> m;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError("manifest at " + mpath.string() + " is not valid JSON: " + e.what());
    }

    if (!m.contains("schema_version") || !m.at("schema_version").is_number_integer())
        throw LoadError("manifest lacks an integer schema_version");
    const int64_t version = m.at("schema_version").get<int64_t>();
    if (version != kCheckpointVersion)
        throw UnknownVersionError("checkpoint schema version " + std::to_string(version) +
                                  "; this build reads version " +
                                  std::to_string(kCheckpointVersion));

    Checkpoint ck;
    std::vector<int64_t> block_rank;
    bool has_adapters = false;
    int64_t lora_rank = 0;
    double lora_alpha = 0.0, lora_dropout = 0.0;
    try {
        ck.meta.stage = m.at("stage").get<std::string>();
        if (ck.meta.stage != "init" && ck.meta.stage != "sorted" && ck.meta.stage != "grid" &&
            ck.meta.stage != "trained")
            throw LoadError("manifest stage '" + ck.meta.stage + "' is not a pipeline stage");
        ck.meta.model = model_from_json(m.at("model"));
        ck.meta.space = space_from_json(m.at("space"));
        block_rank = m.at("block_rank").get<std::vector<int64_t>>();
        ck.meta.sorted = m.at("sorted").get<bool>();
        if (ck.meta.sorted) {
            const json& s = m.at("sort");
            ck.meta.scheme = AggregationScheme::parse(s.at("scheme").get<std::string>());
            ck.meta.block_scheme = s.at("block_scheme").get<std::string>();
            if (ck.meta.block_scheme != "cosine" && ck.meta.block_scheme != "drop")
                throw LoadError("manifest block_scheme '" + ck.meta.block_scheme +
                                "' is not cosine or drop");
            ck.meta.calib_samples = s.at("calib_samples").get<int64_t>();
            ck.meta.permutation = permutation_from_json(s.at("permutation"));
        }
        ck.meta.has_grid = m.contains("grid");
        if (ck.meta.has_grid) ck.meta.grid = grid_from_json(m.at("grid"));
        ck.meta.trained = m.at("trained").get<bool>();
        ck.meta.steps_done = m.at("steps_done").get<int64_t>();
        if (ck.meta.trained) ck.meta.train = train_from_json(m.at("train"));
        has_adapters = m.contains("adapters");
        if (has_adapters) {
            const json& a = m.at("adapters");
            lora_rank = a.at("rank").get<int64_t>();
            lora_alpha = a.at("alpha").get<double>();
            lora_dropout = a.at("dropout").get<double>();
            if (lora_rank < 1) throw LoadError("manifest adapters rank must be positive");
        }
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("manifest field error: ") + e.what());
    } catch (const InputError& e) {
        throw LoadError(std::string("manifest field error: ") + e.what());
    } catch (const ConfigError& e) {
        throw LoadError(std::string("manifest field error: ") + e.what());
    }

    ck.weights = make_weights_shell(ck.meta.model);
    if (int64_t(block_rank.size()) != ck.meta.model.n_layers_max)
        throw LoadError("manifest block_rank size mismatches n_layers_max");
    {
        std::set<int64_t> seen(block_rank.begin(), block_rank.end());
        if (int64_t(seen.size()) != ck.meta.model.n_layers_max || *seen.begin() != 0 ||
            *seen.rbegin() != ck.meta.model.n_layers_max - 1)
            throw LoadError("manifest block_rank is not a permutation of the blocks");
    }
    ck.weights.block_rank = block_rank;
    if (ck.meta.sorted) {
        check_permutation_sizes(ck.meta.permutation, ck.meta.model);
        try {
            ck.meta.permutation.validate();
        } catch (const ConfigError& e) {
            throw LoadError(std::string("manifest permutation invalid: ") + e.what());
        }
    }
    if (has_adapters) {
        try {
            ck.adapters =
                attach_lora<float>(ck.meta.model, lora_rank, lora_alpha, lora_dropout, 0);
        } catch (const ConfigError& e) {
            throw LoadError(std::string("manifest adapters invalid: ") + e.what());
        }
    }

    // Tensor table: validate everything before reading a single payload byte.
    struct Entry {
        std::string name;
        Shape shape;
        int64_t offset = 0;
        int64_t length = 0;
    };
    std::vector<Entry> entries;
    try {
        for (const auto& je : m.at("tensors")) {
            Entry e;
            e.name = je.at("name").get<std::string>();
            e.shape = je.at("shape").get<Shape>();
            e.offset = je.at("offset").get<int64_t>();
            e.length = je.at("length").get<int64_t>();
            entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("manifest tensor table: ") + e.what());
    }

    const auto expected = named_tensors(ck);
    std::set<std::string> known, seen;
    for (const auto& [name, t] : expected) known.insert(name);

    const fs::path bpath = root / "tensors.bin";
    if (!fs::exists(bpath)) throw LoadError("missing " + bpath.string());
    const int64_t fsize = int64_t(fs::file_size(bpath));

    for (const auto& e : entries) {
        if (!seen.insert(e.name).second)
            throw CorruptTableError("duplicate tensor table entry '" + e.name + "'");
        if (!known.count(e.name))
            throw CorruptTableError("tensor table entry '" + e.name +
                                    "' names no tensor of this checkpoint");
        const Tensor<float>* want = nullptr;
        for (const auto& [name, t] : expected)
            if (name == e.name) { want = &t; break; }
        if (e.shape != want->shape())
            throw CorruptTableError("tensor '" + e.name + "' shape mismatches the model config");
        const int64_t need_bytes = want->numel() * int64_t(sizeof(float));
        if (e.length != need_bytes)
            throw CorruptTableError("tensor '" + e.name + "' length " +
                                    std::to_string(e.length) + " bytes, expected " +
                                    std::to_string(need_bytes));
        if (e.offset < 0 || e.length < 0)
            throw CorruptTableError("tensor '" + e.name + "' has a negative offset or length");
        if (e.offset + e.length > fsize)
            throw ShortFileError("tensors.bin holds " + std::to_string(fsize) +
                                 " bytes but entry '" + e.name + "' spans [" +
                                 std::to_string(e.offset) + ", " +
                                 std::to_string(e.offset + e.length) + ")");
    }
    for (const auto& [name, t] : expected)
        if (!seen.count(name)) throw CorruptTableError("tensor table is missing '" + name + "'");

    std::ifstream bin(bpath, std::ios::binary);
    if (!bin) throw LoadError("cannot read " + bpath.string());
    for (const auto& e : entries) {
        const Tensor<float>* dst = nullptr;
        for (const auto& [name, t] : expected)
            if (name == e.name) { dst = &t; break; }
        bin.seekg(e.offset);
        bin.read(reinterpret_cast<char*>(dst->value().data()), e.length);
        if (!bin) throw LoadError("read failed for tensor '" + e.name + "'");
    }
    return ck;
}

} // namespace elm
