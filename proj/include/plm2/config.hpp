#pragma once

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "plm2/data.hpp"
#include "plm2/train.hpp"

namespace plm2 {

// ===========================================================================
// Flat dotted-key configuration: "key = value" lines with '#' comments,
// overridable from the command line. The effective settings are echoed to
// the output directory as `resolved-config` before any work starts.
// ===========================================================================

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file: " + path);
    ConfigMap map;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
        map[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return map;
}

// "--set key=value" override, applied after the file parse.
inline void apply_override(ConfigMap& map, const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects key=value, got '" + kv + "'");
    map[kv.substr(0, eq)] = kv.substr(eq + 1);
}

// All run settings: the training configuration plus data and tool knobs.
struct RunSettings {
    TrainConfig train;
    std::vector<std::string> data_paths;
    VocabMode vocab = VocabMode::bytes;
    double val_fraction = 0.05;
    std::string gen_prompt = "The ";
    int gen_max_new = 128;
    double gen_temperature = 0.0;
    int threads = 0;
};

namespace detail {

inline int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<int>(r);
    } catch (...) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
}

inline uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);  // accepts 5e6 style budgets
        if (pos != v.size() || r < 0) throw std::invalid_argument(v);
        return static_cast<uint64_t>(r);
    } catch (...) {
        throw ConfigError(key + ": expected a nonnegative number, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (...) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<int> to_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(to_int(key, item));
    }
    if (out.empty()) throw ConfigError(key + ": expected a comma-separated list, got '" + v + "'");
    return out;
}

}  // namespace detail

inline RunSettings settings_from_map(const ConfigMap& map) {
    RunSettings s;
    for (const auto& [key, v] : map) {
        if (key == "method") s.train.method = method_from_string(v);
        else if (key == "seed") s.train.seed = detail::to_u64(key, v);
        else if (key == "threads") s.threads = detail::to_int(key, v);
        else if (key == "out") s.train.out_dir = v;
        else if (key == "data.path") s.data_paths = {v};
        else if (key == "data.vocab") {
            if (v == "bytes") s.vocab = VocabMode::bytes;
            else if (v == "chars") s.vocab = VocabMode::chars;
            else throw ConfigError("data.vocab: expected bytes|chars, got '" + v + "'");
        } else if (key == "data.window") s.train.window = detail::to_int(key, v);
        else if (key == "data.val_fraction") s.val_fraction = detail::to_double(key, v);
        else if (key == "model.vocab_size") s.train.model.vocab_size = detail::to_int(key, v);
        else if (key == "model.d_model") s.train.model.d_model = detail::to_int(key, v);
        else if (key == "model.n_layers") s.train.model.n_layers = detail::to_int(key, v);
        else if (key == "model.n_heads") s.train.model.n_heads = detail::to_int(key, v);
        else if (key == "model.max_seq_len") s.train.model.max_seq_len = detail::to_int(key, v);
        else if (key == "model.pos_encoding") {
            if (v == "learned_absolute") s.train.model.pos_encoding = PosEncoding::learned_absolute;
            else if (v == "rotary") s.train.model.pos_encoding = PosEncoding::rotary;
            else throw ConfigError("model.pos_encoding: expected learned_absolute|rotary");
        } else if (key == "model.init_std") s.train.model.init_std = static_cast<float>(detail::to_double(key, v));
        else if (key == "ponder.chain_length") s.train.ponder.chain_length = detail::to_int(key, v);
        else if (key == "ponder.k_choices") s.train.ponder.k_choices = detail::to_int_list(key, v);
        else if (key == "ponder.grad_mode") {
            if (v == "detach_all") s.train.ponder.grad_mode = GradMode::detach_all;
            else if (v == "full_unroll") s.train.ponder.grad_mode = GradMode::full_unroll;
            else throw ConfigError("ponder.grad_mode: expected detach_all|full_unroll");
        } else if (key == "ponder.position_policy") {
            if (v == "reuse") s.train.ponder.position_policy = PositionPolicy::reuse_token_position;
            else if (v == "sequential") s.train.ponder.position_policy = PositionPolicy::sequential;
            else throw ConfigError("ponder.position_policy: expected reuse|sequential");
        } else if (key == "ponder.feedback_norm") {
            if (v == "raw") s.train.ponder.feedback_norm = FeedbackNorm::raw;
            else if (v == "layernorm") s.train.ponder.feedback_norm = FeedbackNorm::layernorm;
            else throw ConfigError("ponder.feedback_norm: expected raw|layernorm");
        } else if (key == "ponder.k_per_instance") s.train.ponder.k_per_instance = detail::to_bool(key, v);
        else if (key == "ponder.aux_token_loss") s.train.ponder.aux_token_loss = detail::to_bool(key, v);
        else if (key == "looped.loops") s.train.baseline.loops = detail::to_int(key, v);
        else if (key == "pause.pauses") s.train.baseline.pauses = detail::to_int(key, v);
        else if (key == "pondering.steps") s.train.baseline.pondering_steps = detail::to_int(key, v);
        else if (key == "pondering.replace") s.train.baseline.pondering_replace = detail::to_bool(key, v);
        else if (key == "train.peak_lr") s.train.peak_lr = detail::to_double(key, v);
        else if (key == "train.lr_floor") s.train.lr_floor = detail::to_double(key, v);
        else if (key == "train.warmup_steps") s.train.warmup_steps = detail::to_int(key, v);
        else if (key == "train.beta1") s.train.beta1 = detail::to_double(key, v);
        else if (key == "train.beta2") s.train.beta2 = detail::to_double(key, v);
        else if (key == "train.adam_eps") s.train.adam_eps = detail::to_double(key, v);
        else if (key == "train.weight_decay") s.train.weight_decay = detail::to_double(key, v);
        else if (key == "train.clip_norm") s.train.clip_norm = detail::to_double(key, v);
        else if (key == "train.batch_tokens") s.train.batch_tokens = detail::to_int(key, v);
        else if (key == "train.total_tokens") s.train.total_tokens = detail::to_u64(key, v);
        else if (key == "train.log_interval") s.train.log_interval = detail::to_int(key, v);
        else if (key == "train.ckpt_interval") s.train.ckpt_interval = detail::to_int(key, v);
        else if (key == "gen.prompt") s.gen_prompt = v;
        else if (key == "gen.max_new_tokens") s.gen_max_new = detail::to_int(key, v);
        else if (key == "gen.temperature") s.gen_temperature = detail::to_double(key, v);
        else throw ConfigError("unknown config key: '" + key + "'");
    }
    return s;
}

// Full effective settings as a canonical flat map (every knob, final value).
inline ConfigMap settings_to_map(const RunSettings& s) {
    ConfigMap m;
    auto num = [](double v) {
        std::ostringstream os;
        os << std::setprecision(12) << v;
        return os.str();
    };
    m["method"] = to_string(s.train.method);
    m["seed"] = std::to_string(s.train.seed);
    m["threads"] = std::to_string(s.threads);
    m["out"] = s.train.out_dir;
    m["data.path"] = s.data_paths.empty() ? "" : s.data_paths.front();
    m["data.vocab"] = to_string(s.vocab);
    m["data.window"] = std::to_string(s.train.window);
    m["data.val_fraction"] = num(s.val_fraction);
    m["model.vocab_size"] = std::to_string(s.train.model.vocab_size);
    m["model.d_model"] = std::to_string(s.train.model.d_model);
    m["model.n_layers"] = std::to_string(s.train.model.n_layers);
    m["model.n_heads"] = std::to_string(s.train.model.n_heads);
    m["model.max_seq_len"] = std::to_string(s.train.model.max_seq_len);
    m["model.pos_encoding"] = to_string(s.train.model.pos_encoding);
    m["model.init_std"] = num(s.train.model.init_std);
    m["ponder.chain_length"] = std::to_string(s.train.ponder.chain_length);
    {
        std::string ks;
        for (size_t i = 0; i < s.train.ponder.k_choices.size(); ++i)
            ks += (i ? "," : "") + std::to_string(s.train.ponder.k_choices[i]);
        m["ponder.k_choices"] = ks;
    }
    m["ponder.grad_mode"] = to_string(s.train.ponder.grad_mode);
    m["ponder.position_policy"] = to_string(s.train.ponder.position_policy);
    m["ponder.feedback_norm"] = to_string(s.train.ponder.feedback_norm);
    m["ponder.k_per_instance"] = s.train.ponder.k_per_instance ? "true" : "false";
    m["ponder.aux_token_loss"] = s.train.ponder.aux_token_loss ? "true" : "false";
    m["looped.loops"] = std::to_string(s.train.baseline.loops);
    m["pause.pauses"] = std::to_string(s.train.baseline.pauses);
    m["pondering.steps"] = std::to_string(s.train.baseline.pondering_steps);
    m["pondering.replace"] = s.train.baseline.pondering_replace ? "true" : "false";
    m["train.peak_lr"] = num(s.train.peak_lr);
    m["train.lr_floor"] = num(s.train.lr_floor);
    m["train.warmup_steps"] = std::to_string(s.train.warmup_steps);
    m["train.beta1"] = num(s.train.beta1);
    m["train.beta2"] = num(s.train.beta2);
    m["train.adam_eps"] = num(s.train.adam_eps);
    m["train.weight_decay"] = num(s.train.weight_decay);
    m["train.clip_norm"] = num(s.train.clip_norm);
    m["train.batch_tokens"] = std::to_string(s.train.batch_tokens);
    m["train.total_tokens"] = std::to_string(s.train.total_tokens);
    m["train.log_interval"] = std::to_string(s.train.log_interval);
    m["train.ckpt_interval"] = std::to_string(s.train.ckpt_interval);
    m["gen.prompt"] = s.gen_prompt;
    m["gen.max_new_tokens"] = std::to_string(s.gen_max_new);
    m["gen.temperature"] = num(s.gen_temperature);
    return m;
}

inline std::string resolved_config_text(const ConfigMap& map) {
    std::ostringstream os;
    for (const auto& [k, v] : map) os << k << " = " << v << "\n";
    return os.str();
}

// Resolves threads: explicit value, else the PLM2_THREADS environment
// variable, else 0 (library default).
inline int resolve_threads(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("PLM2_THREADS")) {
        try {
            return std::max(0, std::stoi(env));
        } catch (...) {
            throw ConfigError("PLM2_THREADS: expected an integer, got '" + std::string(env) + "'");
        }
    }
    return 0;
}

// Loads the corpus named by data.path (text file, directory, or token
// cache) with the configured vocabulary mode.
inline Corpus load_corpus(const RunSettings& s) {
    if (s.data_paths.empty() || s.data_paths.front().empty())
        throw ConfigError("data.path: required for this subcommand");
    const std::string& p = s.data_paths.front();
    if (is_token_cache(p)) return load_token_cache(p);
    return ingest(s.data_paths, s.vocab);
}

}  // namespace plm2
