#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "plm2/baselines.hpp"
#include "plm2/data.hpp"
#include "plm2/model.hpp"
#include "plm2/ponder.hpp"

namespace plm2 {

// ===========================================================================
// Training harness: AdamW with linear warmup + cosine decay, gradient-norm
// clipping, JSONL metrics, versioned checkpoints, and the two regimes
// (from-scratch pretraining, continual pretraining).
// ===========================================================================

struct TrainConfig {
    Method method = Method::vanilla;
    ModelConfig model;
    PonderConfig ponder;
    BaselineConfig baseline;

    double peak_lr = 2e-3;
    double lr_floor = 2e-4;
    int warmup_steps = 100;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double weight_decay = 0.05;
    double clip_norm = 1.0;

    int batch_tokens = 2048;
    uint64_t total_tokens = 1u << 20;
    int window = 256;
    uint64_t seed = 1;
    int log_interval = 20;
    int ckpt_interval = 0;  // 0 = final checkpoint only

    std::string out_dir = "run";

    int batch_windows() const { return batch_tokens / window; }
    uint64_t total_steps() const {
        return (total_tokens + static_cast<uint64_t>(batch_tokens) - 1) /
               static_cast<uint64_t>(batch_tokens);
    }

    void validate() const {
        model.validate();
        ponder.validate();
        baseline.validate();
        if (window < 1) throw ConfigError("data.window: must be positive");
        if (batch_tokens < window || batch_tokens % window != 0)
            throw ConfigError("train.batch_tokens: must be a positive multiple of data.window");
        if (total_tokens == 0) throw ConfigError("train.total_tokens: must be positive");
        if (warmup_steps < 1) throw ConfigError("train.warmup_steps: must be >= 1");
        if (static_cast<uint64_t>(warmup_steps) >= total_steps())
            throw ConfigError("train.warmup_steps: must be < total steps (" +
                              std::to_string(total_steps()) + ")");
        if (peak_lr < 0.0 || lr_floor < 0.0 || lr_floor > peak_lr)
            throw ConfigError("train.peak_lr/train.lr_floor: need 0 <= floor <= peak");
        const int phys = (ponder.chain_length + 1) * window;
        if (method == Method::ponder && phys > model.max_seq_len)
            throw ConfigError("model.max_seq_len: must be >= (N+1)*window = " + std::to_string(phys));
        if (method == Method::pause && (baseline.pauses + 1) * window > model.max_seq_len)
            throw ConfigError("model.max_seq_len: must be >= (pauses+1)*window");
    }
};

// Linear warmup to peak at `warmup`, cosine decay to the floor at `total`.
inline double lr_at(uint64_t step, const TrainConfig& cfg) {
    const uint64_t total = cfg.total_steps();
    const uint64_t warm = static_cast<uint64_t>(cfg.warmup_steps);
    if (step <= warm) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
    const double t = static_cast<double>(step - warm) / static_cast<double>(total - warm);
    return cfg.lr_floor + 0.5 * (cfg.peak_lr - cfg.lr_floor) * (1.0 + std::cos(3.141592653589793 * t));
}

// ---------------------------------------------------------------------------
// AdamW (decoupled weight decay on the matrices only) with global-norm
// gradient clipping folded into the update.
// ---------------------------------------------------------------------------
class AdamW {
public:
    void attach(const std::vector<NamedParam>& params) {
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.emplace_back(p.tensor.numel(), 0.0f);
            v_.emplace_back(p.tensor.numel(), 0.0f);
        }
    }

    // Returns the pre-clip global gradient norm.
    double step(std::vector<NamedParam>& params, const TrainConfig& cfg, uint64_t t, double lr) {
        double sq = 0.0;
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
        }
        const double norm = std::sqrt(sq);
        const float scale =
            norm > cfg.clip_norm ? static_cast<float>(cfg.clip_norm / norm) : 1.0f;
        const float bc1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta1, static_cast<double>(t))));
        const float bc2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta2, static_cast<double>(t))));
        const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
        const float eps = static_cast<float>(cfg.adam_eps);
        const float lrf = static_cast<float>(lr);
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (!p.tensor.has_grad()) continue;
            float* w = p.tensor.mutable_data();
            const float* g = p.tensor.grad().data();
            float* m = m_[i].data();
            float* v = v_[i].data();
            const float wd = p.decay ? static_cast<float>(cfg.weight_decay) : 0.0f;
            const size_t n = p.tensor.numel();
            for (size_t j = 0; j < n; ++j) {
                const float gj = g[j] * scale;
                m[j] = b1 * m[j] + (1.0f - b1) * gj;
                v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
                const float mh = m[j] * bc1;
                const float vh = v[j] * bc2;
                w[j] -= lrf * (mh / (std::sqrt(vh) + eps) + wd * w[j]);
            }
        }
        return norm;
    }

    std::vector<std::vector<float>>& first_moments() { return m_; }
    std::vector<std::vector<float>>& second_moments() { return v_; }

private:
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
};

// ---------------------------------------------------------------------------
// TrainState: everything beyond parameters needed for bit-exact resume.
// ---------------------------------------------------------------------------
struct TrainState {
    uint64_t step = 0;
    uint64_t tokens_seen = 0;
    uint64_t data_epoch = 0;
    uint64_t data_cursor = 0;
    uint64_t k_rng_state[4] = {0, 0, 0, 0};
    uint64_t init_rng_state[4] = {0, 0, 0, 0};
};

// ---------------------------------------------------------------------------
// Config <-> canonical JSON (sorted keys, stable bytes).
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["method"] = to_string(c.method);
    j["model"]["vocab_size"] = c.model.vocab_size;
    j["model"]["d_model"] = c.model.d_model;
    j["model"]["n_layers"] = c.model.n_layers;
    j["model"]["n_heads"] = c.model.n_heads;
    j["model"]["max_seq_len"] = c.model.max_seq_len;
    j["model"]["pos_encoding"] = to_string(c.model.pos_encoding);
    j["model"]["init_std"] = c.model.init_std;
    j["ponder"]["chain_length"] = c.ponder.chain_length;
    j["ponder"]["k_choices"] = c.ponder.k_choices;
    j["ponder"]["grad_mode"] = to_string(c.ponder.grad_mode);
    j["ponder"]["position_policy"] = to_string(c.ponder.position_policy);
    j["ponder"]["feedback_norm"] = to_string(c.ponder.feedback_norm);
    j["ponder"]["k_per_instance"] = c.ponder.k_per_instance;
    j["ponder"]["aux_token_loss"] = c.ponder.aux_token_loss;
    j["looped"]["loops"] = c.baseline.loops;
    j["pause"]["pauses"] = c.baseline.pauses;
    j["pondering"]["steps"] = c.baseline.pondering_steps;
    j["pondering"]["replace"] = c.baseline.pondering_replace;
    j["train"]["peak_lr"] = c.peak_lr;
    j["train"]["lr_floor"] = c.lr_floor;
    j["train"]["warmup_steps"] = c.warmup_steps;
    j["train"]["beta1"] = c.beta1;
    j["train"]["beta2"] = c.beta2;
    j["train"]["adam_eps"] = c.adam_eps;
    j["train"]["weight_decay"] = c.weight_decay;
    j["train"]["clip_norm"] = c.clip_norm;
    j["train"]["batch_tokens"] = c.batch_tokens;
    j["train"]["total_tokens"] = c.total_tokens;
    j["train"]["log_interval"] = c.log_interval;
    j["train"]["ckpt_interval"] = c.ckpt_interval;
    j["data"]["window"] = c.window;
    j["seed"] = c.seed;
    return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.method = method_from_string(j.at("method").get<std::string>());
    const auto& m = j.at("model");
    c.model.vocab_size = m.at("vocab_size").get<int>();
    c.model.d_model = m.at("d_model").get<int>();
    c.model.n_layers = m.at("n_layers").get<int>();
    c.model.n_heads = m.at("n_heads").get<int>();
    c.model.max_seq_len = m.at("max_seq_len").get<int>();
    c.model.pos_encoding = m.at("pos_encoding").get<std::string>() == "rotary"
                               ? PosEncoding::rotary
                               : PosEncoding::learned_absolute;
    c.model.init_std = m.at("init_std").get<float>();
    const auto& p = j.at("ponder");
    c.ponder.chain_length = p.at("chain_length").get<int>();
    c.ponder.k_choices = p.at("k_choices").get<std::vector<int>>();
    c.ponder.grad_mode = p.at("grad_mode").get<std::string>() == "full_unroll"
                             ? GradMode::full_unroll
                             : GradMode::detach_all;
    c.ponder.position_policy = p.at("position_policy").get<std::string>() == "sequential"
                                   ? PositionPolicy::sequential
                                   : PositionPolicy::reuse_token_position;
    c.ponder.feedback_norm = p.at("feedback_norm").get<std::string>() == "layernorm"
                                 ? FeedbackNorm::layernorm
                                 : FeedbackNorm::raw;
    c.ponder.k_per_instance = p.at("k_per_instance").get<bool>();
    c.ponder.aux_token_loss = p.at("aux_token_loss").get<bool>();
    c.baseline.loops = j.at("looped").at("loops").get<int>();
    c.baseline.pauses = j.at("pause").at("pauses").get<int>();
    c.baseline.pondering_steps = j.at("pondering").at("steps").get<int>();
    c.baseline.pondering_replace = j.at("pondering").at("replace").get<bool>();
    const auto& t = j.at("train");
    c.peak_lr = t.at("peak_lr").get<double>();
    c.lr_floor = t.at("lr_floor").get<double>();
    c.warmup_steps = t.at("warmup_steps").get<int>();
    c.beta1 = t.at("beta1").get<double>();
    c.beta2 = t.at("beta2").get<double>();
    c.adam_eps = t.at("adam_eps").get<double>();
    c.weight_decay = t.at("weight_decay").get<double>();
    c.clip_norm = t.at("clip_norm").get<double>();
    c.batch_tokens = t.at("batch_tokens").get<int>();
    c.total_tokens = t.at("total_tokens").get<uint64_t>();
    c.log_interval = t.at("log_interval").get<int>();
    c.ckpt_interval = t.at("ckpt_interval").get<int>();
    c.window = j.at("data").at("window").get<int>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic "PLM2CKPT", u32 version, canonical config JSON,
// tensor table (name, dtype, shape, offset), little-endian f32 payload, and
// the TrainState blob (counters, RNG streams, optimizer moments).
// ---------------------------------------------------------------------------

constexpr char kCkptMagic[8] = {'P', 'L', 'M', '2', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

namespace detail {

template <typename T>
void put(std::string& out, const T& v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& off) {
    if (off + sizeof(T) > in.size()) throw FormatError("checkpoint: truncated at offset " + std::to_string(off));
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const TransformerModel& model, AdamW& opt,
                            const TrainState& state, const TrainConfig& cfg) {
    std::string out;
    out.append(kCkptMagic, 8);
    detail::put(out, kCkptVersion);
    const std::string cfg_json = config_to_json(cfg).dump();
    detail::put(out, static_cast<uint64_t>(cfg_json.size()));
    out.append(cfg_json);

    const auto& params = model.params();
    detail::put(out, static_cast<uint32_t>(params.size()));
    uint64_t offset = 0;
    for (const auto& p : params) {
        detail::put(out, static_cast<uint16_t>(p.name.size()));
        out.append(p.name);
        detail::put(out, static_cast<uint8_t>(0));  // dtype f32
        detail::put(out, static_cast<uint8_t>(p.tensor.ndim()));
        for (int d = 0; d < p.tensor.ndim(); ++d) detail::put(out, static_cast<int32_t>(p.tensor.dim(d)));
        detail::put(out, offset);
        const uint64_t bytes = p.tensor.numel() * sizeof(float);
        detail::put(out, bytes);
        offset += bytes;
    }
    detail::put(out, offset);  // payload length
    for (const auto& p : params)
        out.append(reinterpret_cast<const char*>(p.tensor.data()), p.tensor.numel() * sizeof(float));

    std::string blob;
    detail::put(blob, state.step);
    detail::put(blob, state.tokens_seen);
    detail::put(blob, state.data_epoch);
    detail::put(blob, state.data_cursor);
    for (uint64_t w : state.k_rng_state) detail::put(blob, w);
    for (uint64_t w : state.init_rng_state) detail::put(blob, w);
    detail::put(blob, static_cast<uint32_t>(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        detail::put(blob, static_cast<uint64_t>(opt.first_moments()[i].size()));
        blob.append(reinterpret_cast<const char*>(opt.first_moments()[i].data()),
                    opt.first_moments()[i].size() * sizeof(float));
        blob.append(reinterpret_cast<const char*>(opt.second_moments()[i].data()),
                    opt.second_moments()[i].size() * sizeof(float));
    }
    detail::put(out, static_cast<uint64_t>(blob.size()));
    out.append(blob);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("checkpoint write failed: " + path);
}

struct LoadedCheckpoint {
    TrainConfig config;
    TransformerModel model;
    AdamW optimizer;
    TrainState state;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint: " + path);
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t off = 0;
    if (in.size() < 8 || std::memcmp(in.data(), kCkptMagic, 8) != 0)
        throw FormatError("checkpoint: bad magic at offset 0: " + path);
    off = 8;
    const uint32_t version = detail::take<uint32_t>(in, off);
    if (version != kCkptVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    const uint64_t cfg_len = detail::take<uint64_t>(in, off);
    const std::string cfg_json = in.substr(off, cfg_len);
    off += cfg_len;

    LoadedCheckpoint out;
    out.config = config_from_json(nlohmann::json::parse(cfg_json));
    out.model = TransformerModel::make(out.config.model, out.config.method == Method::pause);

    struct Entry {
        std::string name;
        uint64_t offset, bytes;
    };
    const uint32_t n_tensors = detail::take<uint32_t>(in, off);
    std::vector<Entry> entries;
    uint64_t prev_end = 0;
    for (uint32_t i = 0; i < n_tensors; ++i) {
        Entry e;
        const uint16_t name_len = detail::take<uint16_t>(in, off);
        e.name = in.substr(off, name_len);
        off += name_len;
        const uint8_t dtype = detail::take<uint8_t>(in, off);
        if (dtype != 0) throw FormatError("checkpoint: unsupported dtype for " + e.name);
        const uint8_t ndim = detail::take<uint8_t>(in, off);
        for (uint8_t d = 0; d < ndim; ++d) detail::take<int32_t>(in, off);
        e.offset = detail::take<uint64_t>(in, off);
        e.bytes = detail::take<uint64_t>(in, off);
        if (e.offset != prev_end)
            throw FormatError("checkpoint: tensor table offsets not contiguous at " + e.name);
        prev_end = e.offset + e.bytes;
        entries.push_back(std::move(e));
    }
    const uint64_t payload_len = detail::take<uint64_t>(in, off);
    if (payload_len != prev_end) throw FormatError("checkpoint: payload length mismatch");
    const size_t payload_base = off;
    off += payload_len;

    auto& params = out.model.params();
    if (params.size() != entries.size())
        throw FormatError("checkpoint: tensor count does not match the config's model");
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].name != entries[i].name)
            throw FormatError("checkpoint: unexpected tensor '" + entries[i].name + "', wanted '" +
                              params[i].name + "'");
        if (entries[i].bytes != params[i].tensor.numel() * sizeof(float))
            throw FormatError("checkpoint: size mismatch for " + entries[i].name);
        std::memcpy(params[i].tensor.mutable_data(), in.data() + payload_base + entries[i].offset,
                    entries[i].bytes);
    }

    const uint64_t blob_len = detail::take<uint64_t>(in, off);
    (void)blob_len;
    out.state.step = detail::take<uint64_t>(in, off);
    out.state.tokens_seen = detail::take<uint64_t>(in, off);
    out.state.data_epoch = detail::take<uint64_t>(in, off);
    out.state.data_cursor = detail::take<uint64_t>(in, off);
    for (auto& w : out.state.k_rng_state) w = detail::take<uint64_t>(in, off);
    for (auto& w : out.state.init_rng_state) w = detail::take<uint64_t>(in, off);
    const uint32_t n_moments = detail::take<uint32_t>(in, off);
    if (n_moments != params.size()) throw FormatError("checkpoint: moment count mismatch");
    out.optimizer.attach(params);
    for (size_t i = 0; i < params.size(); ++i) {
        const uint64_t n = detail::take<uint64_t>(in, off);
        if (n != params[i].tensor.numel()) throw FormatError("checkpoint: moment size mismatch");
        auto& m = out.optimizer.first_moments()[i];
        auto& v = out.optimizer.second_moments()[i];
        if (off + 2 * n * sizeof(float) > in.size()) throw FormatError("checkpoint: truncated moments");
        std::memcpy(m.data(), in.data() + off, n * sizeof(float));
        off += n * sizeof(float);
        std::memcpy(v.data(), in.data() + off, n * sizeof(float));
        off += n * sizeof(float);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics: JSONL, one object per log interval, stable key order. The
// wallclock and throughput fields are informational; everything else is
// bit-reproducible for a fixed (config, corpus, seed, threads).
// ---------------------------------------------------------------------------

struct MetricsRow {
    uint64_t step = 0;
    uint64_t tokens_seen = 0;
    float train_loss = 0.0f;
    double lr = 0.0;
    double wallclock_s = 0.0;
    double tokens_per_s = 0.0;
};

inline std::string format_metrics_line(const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\"step\":%llu,\"tokens_seen\":%llu,\"train_loss\":%.9g,\"lr\":%.12g,"
                  "\"wallclock_s\":%.3f,\"tokens_per_s\":%.1f}",
                  static_cast<unsigned long long>(r.step),
                  static_cast<unsigned long long>(r.tokens_seen), static_cast<double>(r.train_loss),
                  r.lr, r.wallclock_s, r.tokens_per_s);
    return buf;
}

struct TrainResult {
    std::string final_checkpoint;
    std::vector<MetricsRow> metrics;
    float final_loss = 0.0f;
};

// ---------------------------------------------------------------------------
// train: from-scratch pretraining (or resume when `resume_from` is given).
// continual_pretrain: reload a vanilla base checkpoint, reset the optimizer,
// train under a (possibly different) objective counting tokens from zero.
// ---------------------------------------------------------------------------

namespace detail {

struct RunContext {
    TransformerModel model;
    AdamW opt;
    TrainState state;
    Rng k_rng;
};

inline TrainResult run_training(TrainConfig cfg, const Corpus& corpus, RunContext ctx) {
    namespace fs = std::filesystem;
    cfg.validate();
    if (corpus.vocab_size > cfg.model.vocab_size)
        throw ConfigError("model.vocab_size: smaller than corpus vocabulary (" +
                          std::to_string(corpus.vocab_size) + ")");
    fs::create_directories(cfg.out_dir);
    const std::string metrics_path = cfg.out_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path, ctx.state.step == 0 ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot write metrics: " + metrics_path);

    BatchStream stream(corpus, cfg.batch_windows(), cfg.window, cfg.seed, ctx.state.data_epoch,
                       ctx.state.data_cursor);
    const uint64_t total = cfg.total_steps();
    TrainResult result;
    const auto t0 = std::chrono::steady_clock::now();
    auto last_log = t0;
    uint64_t tokens_at_last_log = ctx.state.tokens_seen;

    auto save = [&](const std::string& name) {
        ctx.k_rng.state(ctx.state.k_rng_state);
        const std::string path = cfg.out_dir + "/" + name;
        save_checkpoint(path, ctx.model, ctx.opt, ctx.state, cfg);
        return path;
    };

    std::string last_good;
    float loss = 0.0f;
    for (uint64_t step = ctx.state.step + 1; step <= total; ++step) {
        Batch batch = stream.next();
        loss = method_step(cfg.method, ctx.model, batch.tokens, batch.batch, batch.window,
                           cfg.ponder, cfg.baseline, ctx.k_rng);
        if (!std::isfinite(loss)) {
            const std::string abort_path = save("ckpt-abort.plm2");
            throw NumericError("non-finite loss at step " + std::to_string(step) +
                               "; last good checkpoint: " +
                               (last_good.empty() ? abort_path : last_good));
        }
        const double lr = lr_at(step, cfg);
        ctx.opt.step(ctx.model.params(), cfg, step, lr);
        ctx.state.step = step;
        ctx.state.tokens_seen += static_cast<uint64_t>(cfg.batch_tokens);
        ctx.state.data_epoch = stream.epoch();
        ctx.state.data_cursor = stream.cursor();

        if (step % static_cast<uint64_t>(cfg.log_interval) == 0 || step == total) {
            const auto now = std::chrono::steady_clock::now();
            MetricsRow row;
            row.step = step;
            row.tokens_seen = ctx.state.tokens_seen;
            row.train_loss = loss;
            row.lr = lr;
            row.wallclock_s = std::chrono::duration<double>(now - t0).count();
            const double dt = std::chrono::duration<double>(now - last_log).count();
            row.tokens_per_s =
                dt > 0 ? static_cast<double>(ctx.state.tokens_seen - tokens_at_last_log) / dt : 0.0;
            metrics << format_metrics_line(row) << "\n";
            metrics.flush();
            result.metrics.push_back(row);
            last_log = now;
            tokens_at_last_log = ctx.state.tokens_seen;
        }
        if (cfg.ckpt_interval > 0 && step % static_cast<uint64_t>(cfg.ckpt_interval) == 0 &&
            step != total) {
            last_good = save("ckpt-step-" + std::to_string(step) + ".plm2");
        }
    }
    result.final_checkpoint = save("ckpt-final.plm2");
    result.final_loss = loss;
    return result;
}

}  // namespace detail

inline TrainResult train(const TrainConfig& cfg, const Corpus& corpus,
                         const std::string& resume_from = "") {
    cfg.validate();
    detail::RunContext ctx;
    if (resume_from.empty()) {
        Rng init_rng(cfg.seed);
        ctx.model =
            TransformerModel::init_params(cfg.model, cfg.seed, cfg.method == Method::pause);
        ctx.opt.attach(ctx.model.params());
        ctx.k_rng = Rng(cfg.seed).fork(1);
        init_rng.state(ctx.state.init_rng_state);
    } else {
        LoadedCheckpoint base = load_checkpoint(resume_from);
        if (config_to_json(base.config) != config_to_json(cfg))
            throw ConfigError("resume: checkpoint config does not match the requested config");
        ctx.model = std::move(base.model);
        ctx.opt = std::move(base.optimizer);
        ctx.state = base.state;
        ctx.k_rng.set_state(base.state.k_rng_state);
    }
    return detail::run_training(cfg, corpus, std::move(ctx));
}

inline TrainResult continual_pretrain(const std::string& base_checkpoint, const TrainConfig& cfg,
                                      const Corpus& corpus) {
    cfg.validate();
    LoadedCheckpoint base = load_checkpoint(base_checkpoint);
    if (base.config.method != Method::vanilla)
        throw ConfigError("cpt: base checkpoint must be a vanilla-method run");
    if (config_to_json(base.config)["model"] != config_to_json(cfg)["model"])
        throw ConfigError("cpt: model config must match the base checkpoint");

    detail::RunContext ctx;
    if (cfg.method == Method::pause) {
        // The base has no pause embedding; rebuild with one and copy over.
        ctx.model = TransformerModel::init_params(cfg.model, cfg.seed, true);
        for (size_t i = 0; i < base.model.params().size(); ++i) {
            auto& dst = ctx.model.params()[i].tensor;
            const auto& src = base.model.params()[i].tensor;
            std::memcpy(dst.mutable_data(), src.data(), src.numel() * sizeof(float));
        }
    } else {
        ctx.model = std::move(base.model);
    }
    ctx.opt.attach(ctx.model.params());  // moments reset
    ctx.state = TrainState{};            // tokens_seen restarts at zero
    ctx.k_rng = Rng(cfg.seed).fork(1);
    return detail::run_training(cfg, corpus, std::move(ctx));
}

}  // namespace plm2
