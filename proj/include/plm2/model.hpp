#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "plm2/rng.hpp"
#include "plm2/tensor.hpp"

namespace plm2 {

// ===========================================================================
// Decoder-only pre-norm transformer (GPT/Pythia style), untied LM head.
//
// Inputs are rows of width d_model; a row is either a token embedding or a
// raw hidden-state vector injected directly. That duality is the only
// mechanism by which latent thoughts enter the model.
// ===========================================================================

enum class PosEncoding { learned_absolute, rotary };
enum class PositionPolicy { reuse_token_position, sequential };

inline const char* to_string(PosEncoding e) {
    return e == PosEncoding::learned_absolute ? "learned_absolute" : "rotary";
}
inline const char* to_string(PositionPolicy p) {
    return p == PositionPolicy::reuse_token_position ? "reuse" : "sequential";
}

struct ModelConfig {
    int vocab_size = 256;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int max_seq_len = 1024;  // physical slots after interleaving
    PosEncoding pos_encoding = PosEncoding::learned_absolute;
    float init_std = 0.02f;

    int head_dim() const { return d_model / n_heads; }

    void validate() const {
        if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || vocab_size <= 0 || max_seq_len <= 0)
            throw ConfigError("model: all dimensions must be positive");
        if (d_model % n_heads != 0) throw ConfigError("model.d_model: not divisible by model.n_heads");
        if (head_dim() % 2 != 0 && pos_encoding == PosEncoding::rotary)
            throw ConfigError("model.n_heads: rotary needs an even head dim");
    }
};

// Slot layout of one window: every token owns `thoughts_per_token`
// consecutive thought slots immediately after it.
struct SequenceLayout {
    int tokens = 0;
    int thoughts_per_token = 0;

    int slots() const { return tokens * (thoughts_per_token + 1); }
    int token_slot(int i) const { return i * (thoughts_per_token + 1); }
    int thought_slot(int i, int j) const { return token_slot(i) + j; }  // j in [1, N]
    int owner(int slot) const { return slot / (thoughts_per_token + 1); }
    bool is_thought(int slot) const { return slot % (thoughts_per_token + 1) != 0; }
};

inline std::vector<int> assign_position_ids(const SequenceLayout& layout, PositionPolicy policy) {
    std::vector<int> ids(static_cast<size_t>(layout.slots()));
    for (int s = 0; s < layout.slots(); ++s)
        ids[static_cast<size_t>(s)] = policy == PositionPolicy::reuse_token_position ? layout.owner(s) : s;
    return ids;
}

// A slot is either a token id (embedded through the table) or a raw
// d_model vector fed in directly.
struct InputSlot {
    int32_t token = -1;
    std::span<const float> vec{};

    static InputSlot of_token(int32_t t) { return {t, {}}; }
    static InputSlot of_vector(std::span<const float> v) { return {-1, v}; }
    bool is_token() const { return token >= 0; }
};

struct NamedParam {
    std::string name;
    Tensor tensor;
    bool decay;
};

class KVCache;

struct ForwardResult {
    Tensor hidden;  // [len x d]
    Tensor logits;  // [len x V]
};

class TransformerModel {
public:
    struct Layer {
        Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b, w1, b1, w2, b2;
    };

    TransformerModel() = default;

    // Zero-valued parameter set with the full registry; used by init and by
    // checkpoint loading.
    static TransformerModel make(const ModelConfig& cfg, bool with_pause_embedding = false) {
        cfg.validate();
        TransformerModel m;
        m.cfg_ = cfg;
        const int d = cfg.d_model;
        auto param = [&m](const std::string& name, std::vector<int> shape, bool decay) {
            Tensor t = Tensor::zeros(std::move(shape), true);
            m.registry_.push_back({name, t, decay});
            return t;
        };
        m.tok_emb_ = param("tok_emb", {cfg.vocab_size, d}, true);
        if (cfg.pos_encoding == PosEncoding::learned_absolute)
            m.pos_emb_ = param("pos_emb", {cfg.max_seq_len, d}, true);
        m.layers_.resize(static_cast<size_t>(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            auto& L = m.layers_[static_cast<size_t>(l)];
            const std::string p = "layers." + std::to_string(l) + ".";
            L.ln1_g = param(p + "ln1.g", {d}, false);
            L.ln1_b = param(p + "ln1.b", {d}, false);
            L.wq = param(p + "attn.wq", {d, d}, true);
            L.bq = param(p + "attn.bq", {d}, false);
            L.wk = param(p + "attn.wk", {d, d}, true);
            L.bk = param(p + "attn.bk", {d}, false);
            L.wv = param(p + "attn.wv", {d, d}, true);
            L.bv = param(p + "attn.bv", {d}, false);
            L.wo = param(p + "attn.wo", {d, d}, true);
            L.bo = param(p + "attn.bo", {d}, false);
            L.ln2_g = param(p + "ln2.g", {d}, false);
            L.ln2_b = param(p + "ln2.b", {d}, false);
            L.w1 = param(p + "mlp.w1", {d, 4 * d}, true);
            L.b1 = param(p + "mlp.b1", {4 * d}, false);
            L.w2 = param(p + "mlp.w2", {4 * d, d}, true);
            L.b2 = param(p + "mlp.b2", {d}, false);
        }
        m.lnf_g_ = param("lnf.g", {d}, false);
        m.lnf_b_ = param("lnf.b", {d}, false);
        m.lm_head_ = param("lm_head", {d, cfg.vocab_size}, true);
        if (with_pause_embedding) m.pause_emb_ = param("pause_emb", {d}, false);

        // LayerNorm gains start at one even before init_params.
        for (auto& np : m.registry_) {
            if (np.name.size() >= 2 && np.name.substr(np.name.size() - 2) == ".g") {
                for (size_t i = 0; i < np.tensor.numel(); ++i) np.tensor.mutable_data()[i] = 1.0f;
            }
        }
        return m;
    }

    // normal(0, init_std) weights, residual projections scaled by
    // 1/sqrt(2*n_layers), zero biases; draw order fixed by the registry.
    static TransformerModel init_params(const ModelConfig& cfg, uint64_t seed,
                                        bool with_pause_embedding = false) {
        TransformerModel m = make(cfg, with_pause_embedding);
        Rng rng(seed);
        const float resid_std =
            cfg.init_std / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
        for (auto& np : m.registry_) {
            if (np.tensor.ndim() != 2 && np.name != "pause_emb") continue;  // biases/norms stay
            const bool resid = np.name.find(".wo") != std::string::npos ||
                               np.name.find(".w2") != std::string::npos;
            const float std_dev = resid ? resid_std : cfg.init_std;
            rng.fill_normal({np.tensor.mutable_data(), np.tensor.numel()}, 0.0f, std_dev);
        }
        return m;
    }

    static uint64_t param_count(const ModelConfig& cfg, bool with_pause_embedding = false) {
        const uint64_t d = static_cast<uint64_t>(cfg.d_model);
        uint64_t total = static_cast<uint64_t>(cfg.vocab_size) * d;            // tok_emb
        if (cfg.pos_encoding == PosEncoding::learned_absolute)
            total += static_cast<uint64_t>(cfg.max_seq_len) * d;               // pos_emb
        const uint64_t per_layer = 2 * d                                       // ln1
                                   + 4 * (d * d + d)                           // q,k,v,o
                                   + 2 * d                                     // ln2
                                   + (d * 4 * d + 4 * d) + (4 * d * d + d);    // mlp
        total += static_cast<uint64_t>(cfg.n_layers) * per_layer;
        total += 2 * d;                                                        // lnf
        total += d * static_cast<uint64_t>(cfg.vocab_size);                    // lm_head
        if (with_pause_embedding) total += d;
        return total;
    }

    const ModelConfig& config() const { return cfg_; }
    const std::vector<NamedParam>& params() const { return registry_; }
    std::vector<NamedParam>& params() { return registry_; }
    const Tensor& token_embedding() const { return tok_emb_; }
    const Tensor& position_embedding() const { return pos_emb_; }
    const Tensor& lm_head() const { return lm_head_; }
    const Tensor& pause_embedding() const { return pause_emb_; }
    bool has_pause_embedding() const { return pause_emb_.defined(); }

    Tensor token_rows(std::span<const int32_t> ids) const { return embedding(tok_emb_, ids); }

    void check_positions(std::span<const int> pos) const {
        if (cfg_.pos_encoding != PosEncoding::learned_absolute) return;
        for (int p : pos) {
            if (p < 0 || p >= cfg_.max_seq_len)
                throw ValueError("position id " + std::to_string(p) + " out of range [0," +
                                 std::to_string(cfg_.max_seq_len) + ") for learned_absolute");
        }
    }

    // Adds learned positional rows (no-op under rotary).
    Tensor add_positions(const Tensor& x, std::span<const int> pos) const {
        if (cfg_.pos_encoding != PosEncoding::learned_absolute) return x;
        check_positions(pos);
        std::vector<int32_t> ids(pos.begin(), pos.end());
        return add(x, embedding(pos_emb_, ids));
    }

    // Layer stack plus final norm over already-embedded rows. Each entry of
    // `windows` is causally isolated. `pos` feeds rotary rotation only.
    // loops > 1 re-applies the whole layer body before the final norm
    // (looped-transformer baseline); positions are shared across loops.
    Tensor stack_forward(const Tensor& x, std::span<const RowSpan> windows,
                         std::span<const int> pos, uint64_t* row_passes = nullptr,
                         int loops = 1) const {
        Tensor h = x;
        const int* rp = cfg_.pos_encoding == PosEncoding::rotary ? pos.data() : nullptr;
        for (int loop = 0; loop < loops; ++loop) {
            for (const auto& L : layers_) {
                Tensor a = layernorm(h, L.ln1_g, L.ln1_b);
                Tensor q = linear(a, L.wq, L.bq);
                Tensor k = linear(a, L.wk, L.bk);
                Tensor v = linear(a, L.wv, L.bv);
                Tensor at = causal_attention(q, k, v, cfg_.n_heads, windows, rp);
                h = add(h, linear(at, L.wo, L.bo));
                Tensor m = layernorm(h, L.ln2_g, L.ln2_b);
                h = add(h, linear(gelu(linear(m, L.w1, L.b1)), L.w2, L.b2));
            }
            if (row_passes) *row_passes += static_cast<uint64_t>(x.dim(0));
        }
        return layernorm(h, lnf_g_, lnf_b_);
    }

    Tensor logits_of(const Tensor& hidden) const { return matmul(hidden, lm_head_); }

    // Final norm + optional logits for one residual-stream row; shares the
    // kernels the batched path uses.
    void finalize_row(const float* x, float* out_hidden, float* out_logits) const {
        kern::ln_row(x, lnf_g_.data(), lnf_b_.data(), cfg_.d_model, 1e-5f, out_hidden, nullptr,
                     nullptr);
        if (out_logits) {
            std::fill(out_logits, out_logits + cfg_.vocab_size, 0.0f);
            kern::row_matvec(out_hidden, lm_head_.data(), out_logits, cfg_.d_model, cfg_.vocab_size);
        }
    }

    // Spec-level forward over input slots; see KVCache below for the
    // incremental variant. Pure value computation (no tape).
    ForwardResult forward(std::span<const InputSlot> slots, std::span<const int> position_ids,
                          KVCache* cache = nullptr) const;

    Tensor embed_slots(std::span<const InputSlot> slots, std::span<const int> position_ids) const {
        const int d = cfg_.d_model;
        Tensor x = Tensor::zeros({static_cast<int>(slots.size()), d});
        for (size_t i = 0; i < slots.size(); ++i) {
            const auto& s = slots[i];
            float* row = x.mutable_data() + i * static_cast<size_t>(d);
            if (s.is_token()) {
                if (s.token >= cfg_.vocab_size)
                    throw ValueError("token id " + std::to_string(s.token) + " out of vocab range");
                std::memcpy(row, tok_emb_.data() + static_cast<size_t>(s.token) * d,
                            sizeof(float) * static_cast<size_t>(d));
            } else {
                if (static_cast<int>(s.vec.size()) != d)
                    throw ShapeError("vector slot width " + std::to_string(s.vec.size()) +
                                     " != d_model " + std::to_string(d));
                std::memcpy(row, s.vec.data(), sizeof(float) * static_cast<size_t>(d));
            }
        }
        if (cfg_.pos_encoding == PosEncoding::learned_absolute) {
            check_positions(position_ids);
            for (size_t i = 0; i < slots.size(); ++i) {
                float* row = x.mutable_data() + i * static_cast<size_t>(d);
                const float* p = pos_emb_.data() + static_cast<size_t>(position_ids[i]) * d;
                for (int j = 0; j < d; ++j) row[j] += p[j];
            }
        }
        return x;
    }

    const std::vector<Layer>& layers() const { return layers_; }
    const Tensor& final_norm_gain() const { return lnf_g_; }
    const Tensor& final_norm_bias() const { return lnf_b_; }

private:
    friend class KVCache;

    ModelConfig cfg_;
    Tensor tok_emb_, pos_emb_;
    std::vector<Layer> layers_;
    Tensor lnf_g_, lnf_b_, lm_head_;
    Tensor pause_emb_;
    std::vector<NamedParam> registry_;
};

// ===========================================================================
// KV cache for incremental decoding. extend() runs one already-embedded row
// through the stack using exactly the same kernels as the batched path, so
// cached and full recomputations agree bitwise.
// ===========================================================================

class KVCache {
public:
    explicit KVCache(const TransformerModel& model)
        : model_(&model),
          d_(model.config().d_model),
          hd_(model.config().head_dim()),
          heads_(model.config().n_heads) {
        k_.resize(model.layers().size());
        v_.resize(model.layers().size());
    }

    int len() const { return len_; }
    uint64_t row_passes() const { return row_passes_; }

    void reset() {
        for (auto& kk : k_) kk.clear();
        for (auto& vv : v_) vv.clear();
        len_ = 0;
    }

    // Drop the most recent position (pondering-style refinement re-runs it).
    void pop_last() {
        if (len_ == 0) return;
        for (auto& kk : k_) kk.resize(kk.size() - static_cast<size_t>(d_));
        for (auto& vv : v_) vv.resize(vv.size() - static_cast<size_t>(d_));
        --len_;
    }

    // `row`: embedded input (token embedding or injected vector), with
    // learned position already added by the caller. `pos` drives rotary.
    // Returns the final-layer hidden state; logits optional.
    void extend(const float* row, int pos, float* out_hidden, float* out_logits) {
        extend_body(row, pos, nullptr);
        model_->finalize_row(x_.data(), out_hidden, out_logits);
    }

    // Layer body only (no final norm): the residual stream after all layers
    // lands in out_residual when given. Used directly by looped decoding.
    void extend_body(const float* row, int pos, float* out_residual) {
        const auto& cfg = model_->config();
        if (len_ + 1 > cfg.max_seq_len)
            throw CapacityError("sequence of " + std::to_string(len_ + 1) +
                                " slots exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
        const bool rot = cfg.pos_encoding == PosEncoding::rotary;
        const float sc = 1.0f / std::sqrt(static_cast<float>(hd_));
        x_.assign(row, row + d_);
        scratch_resize();
        for (size_t l = 0; l < model_->layers().size(); ++l) {
            const auto& L = model_->layers()[l];
            kern::ln_row(x_.data(), L.ln1_g.data(), L.ln1_b.data(), d_, 1e-5f, a_.data(), nullptr,
                         nullptr);
            matvec_bias(a_, L.wq, L.bq, q_);
            matvec_bias(a_, L.wk, L.bk, kn_);
            matvec_bias(a_, L.wv, L.bv, vn_);
            if (rot) {
                kern::rope_row(q_.data(), d_, hd_, pos, 10000.0f);
                kern::rope_row(kn_.data(), d_, hd_, pos, 10000.0f);
            }
            k_[l].insert(k_[l].end(), kn_.begin(), kn_.end());
            v_[l].insert(v_[l].end(), vn_.begin(), vn_.end());
            const int n_keys = len_ + 1;
            scores_.resize(static_cast<size_t>(n_keys));
            for (int h = 0; h < heads_; ++h) {
                const size_t off = static_cast<size_t>(h) * hd_;
                kern::attend_one(q_.data() + off, k_[l].data() + off, v_[l].data() + off,
                                 static_cast<size_t>(d_), n_keys, hd_, sc, attn_.data() + off,
                                 nullptr, scores_.data());
            }
            matvec_bias(attn_, L.wo, L.bo, o_);
            for (int j = 0; j < d_; ++j) x_[static_cast<size_t>(j)] += o_[static_cast<size_t>(j)];
            kern::ln_row(x_.data(), L.ln2_g.data(), L.ln2_b.data(), d_, 1e-5f, a_.data(), nullptr,
                         nullptr);
            matvec_bias(a_, L.w1, L.b1, mh_);
            for (auto& f : mh_) f = kern::gelu_one(f);
            matvec_bias(mh_, L.w2, L.b2, o_);
            for (int j = 0; j < d_; ++j) x_[static_cast<size_t>(j)] += o_[static_cast<size_t>(j)];
        }
        if (out_residual) std::memcpy(out_residual, x_.data(), sizeof(float) * static_cast<size_t>(d_));
        ++len_;
        ++row_passes_;
    }

private:
    void matvec_bias(const std::vector<float>& in, const Tensor& W, const Tensor& b,
                     std::vector<float>& out) {
        const int n = W.dim(1);
        out.assign(static_cast<size_t>(n), 0.0f);
        kern::row_matvec(in.data(), W.data(), out.data(), W.dim(0), n);
        const float* pb = b.data();
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j)] += pb[j];
    }

    void scratch_resize() {
        a_.resize(static_cast<size_t>(d_));
        q_.resize(static_cast<size_t>(d_));
        attn_.assign(static_cast<size_t>(d_), 0.0f);
    }

    const TransformerModel* model_;
    int d_, hd_, heads_;
    int len_ = 0;
    uint64_t row_passes_ = 0;
    std::vector<std::vector<float>> k_, v_;
    std::vector<float> x_, a_, q_, kn_, vn_, attn_, o_, mh_, scores_;
};

inline ForwardResult TransformerModel::forward(std::span<const InputSlot> slots,
                                               std::span<const int> position_ids,
                                               KVCache* cache) const {
    if (slots.size() != position_ids.size())
        throw ShapeError("forward: slots/position_ids length mismatch");
    const int n = static_cast<int>(slots.size());
    const int existing = cache ? cache->len() : 0;
    if (existing + n > cfg_.max_seq_len)
        throw CapacityError("sequence of " + std::to_string(existing + n) +
                            " slots exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    NoGradGuard ng;
    Tensor hidden = Tensor::zeros({n, cfg_.d_model});
    Tensor logits = Tensor::zeros({n, cfg_.vocab_size});
    if (cache) {
        Tensor x = embed_slots(slots, position_ids);
        for (int i = 0; i < n; ++i) {
            cache->extend(x.data() + static_cast<size_t>(i) * cfg_.d_model, position_ids[static_cast<size_t>(i)],
                          hidden.mutable_data() + static_cast<size_t>(i) * cfg_.d_model,
                          logits.mutable_data() + static_cast<size_t>(i) * cfg_.vocab_size);
        }
        return {hidden, logits};
    }
    Tensor x = embed_slots(slots, position_ids);
    const RowSpan span{0, n};
    Tensor hf = stack_forward(x, {&span, 1}, position_ids);
    Tensor lg = logits_of(hf);
    return {hf, lg};
}

}  // namespace plm2
