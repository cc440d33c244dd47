#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "plm2/model.hpp"
#include "plm2/ponder.hpp"

namespace plm2 {

// ===========================================================================
// Comparison methods sharing the transformer core: vanilla, looped (the
// layer stack applied L times), pause tokens (a learned embedding buys extra
// slots), and pondering (probability-weighted embedding fed back). All take
// batches of (T+1)-token windows like train_step.
// ===========================================================================

enum class Method { vanilla, ponder, looped, pause, pondering };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::vanilla: return "vanilla";
        case Method::ponder: return "ponder";
        case Method::looped: return "looped";
        case Method::pause: return "pause";
        case Method::pondering: return "pondering";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    if (s == "vanilla") return Method::vanilla;
    if (s == "ponder") return Method::ponder;
    if (s == "looped") return Method::looped;
    if (s == "pause") return Method::pause;
    if (s == "pondering") return Method::pondering;
    throw ConfigError("method: unknown value '" + s + "'");
}

struct BaselineConfig {
    Method kind = Method::vanilla;
    int loops = 2;
    int pauses = 1;
    int pondering_steps = 1;
    bool pondering_replace = false;  // replace instead of add to the input embedding

    void validate() const {
        if (loops < 1) throw ConfigError("looped.loops: must be >= 1");
        if (pauses < 0) throw ConfigError("pause.pauses: must be >= 0");
        if (pondering_steps < 0) throw ConfigError("pondering.steps: must be >= 0");
    }
};

// Relative inference FLOPs against the vanilla model, closed form.
inline double flops_multiplier(Method kind, const BaselineConfig& b, const PonderConfig& p) {
    switch (kind) {
        case Method::vanilla: return 1.0;
        case Method::ponder: return static_cast<double>(p.chain_length + 1);
        case Method::looped: return static_cast<double>(b.loops);
        case Method::pause: return static_cast<double>(b.pauses + 1);
        case Method::pondering: return static_cast<double>(b.pondering_steps + 1);
    }
    return 1.0;
}

namespace detail {

inline Tensor full_window_loss(const TransformerModel& model, std::span<const int32_t> inputs,
                               std::span<const int32_t> targets, int batch, int loops) {
    const int T = static_cast<int>(inputs.size()) / batch;
    std::vector<RowSpan> spans;
    std::vector<int> pos;
    for (int w = 0; w < batch; ++w) {
        spans.push_back({w * T, T});
        for (int i = 0; i < T; ++i) pos.push_back(i);
    }
    Tensor x = model.add_positions(model.token_rows(inputs), pos);
    Tensor h = model.stack_forward(x, spans, pos, nullptr, loops);
    Tensor logits = model.logits_of(h);
    std::vector<uint8_t> mask(inputs.size(), 1);
    return softmax_cross_entropy(logits, targets, mask);
}

}  // namespace detail

// vanilla_step: next-token cross entropy over all positions. Shares the
// ponder code path with N=0, so the two agree bitwise.
inline float vanilla_step(const TransformerModel& model, std::span<const int32_t> window_tokens,
                          int batch, int window_len) {
    std::vector<int32_t> inputs, targets;
    split_windows(window_tokens, batch, window_len, inputs, targets);
    PonderConfig cfg;
    cfg.chain_length = 0;
    const std::vector<int> k{1};
    return ponder_objective(model, inputs, targets, batch, cfg, k).loss;
}

// looped_step: the full layer stack applied `loops` times before the head.
inline float looped_step(const TransformerModel& model, std::span<const int32_t> window_tokens,
                         int batch, int window_len, int loops) {
    if (loops < 1) throw ConfigError("looped.loops: must be >= 1");
    std::vector<int32_t> inputs, targets;
    split_windows(window_tokens, batch, window_len, inputs, targets);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = detail::full_window_loss(model, inputs, targets, batch, loops);
    tape.backward(loss);
    return loss.item();
}

// pause_step: p copies of the learned pause embedding after each token,
// loss at the final pause slot; structurally the interleaved layout with
// thoughts replaced by a shared learned vector.
inline float pause_step(const TransformerModel& model, std::span<const int32_t> window_tokens,
                        int batch, int window_len, int pauses) {
    if (pauses < 0) throw ConfigError("pause.pauses: must be >= 0");
    if (pauses > 0 && !model.has_pause_embedding())
        throw ConfigError("pause: model was built without a pause embedding");
    std::vector<int32_t> inputs, targets;
    split_windows(window_tokens, batch, window_len, inputs, targets);
    PonderConfig cfg;
    cfg.chain_length = pauses;
    Tape tape;
    TapeScope scope(tape);
    InterleavedSequence seq;
    if (pauses > 0) {
        Tensor rows = broadcast_row(model.pause_embedding(),
                                    batch * (static_cast<int>(inputs.size()) / batch) * pauses);
        seq = interleave(inputs, batch, rows, cfg, targets);
    } else {
        seq = interleave(inputs, batch, Tensor(), cfg, targets);
    }
    Tensor loss = ponder_loss(model, seq, cfg);
    tape.backward(loss);
    return loss.item();
}

// pondering_step: per refinement, soften the logits into a probability-
// weighted sum of token embeddings and feed it back to the input layer.
inline float pondering_step(const TransformerModel& model, std::span<const int32_t> window_tokens,
                            int batch, int window_len, int steps, bool replace = false) {
    if (steps < 0) throw ConfigError("pondering.steps: must be >= 0");
    std::vector<int32_t> inputs, targets;
    split_windows(window_tokens, batch, window_len, inputs, targets);
    const int T = window_len;
    std::vector<RowSpan> spans;
    std::vector<int> pos;
    for (int w = 0; w < batch; ++w) {
        spans.push_back({w * T, T});
        for (int i = 0; i < T; ++i) pos.push_back(i);
    }
    Tape tape;
    TapeScope scope(tape);
    Tensor e = model.token_rows(inputs);
    Tensor x0 = model.add_positions(e, pos);
    Tensor h = model.stack_forward(x0, spans, pos);
    for (int s = 0; s < steps; ++s) {
        Tensor probs = softmax_rows(model.logits_of(h));
        Tensor pond = matmul(probs, model.token_embedding());
        Tensor x = replace ? model.add_positions(pond, pos) : add(x0, pond);
        h = model.stack_forward(x, spans, pos);
    }
    Tensor logits = model.logits_of(h);
    std::vector<uint8_t> mask(inputs.size(), 1);
    Tensor loss = softmax_cross_entropy(logits, targets, mask);
    tape.backward(loss);
    return loss.item();
}

// Dispatches one optimizer-ready step for any method. K sampling for the
// ponder method consumes `k_rng`.
inline float method_step(Method kind, const TransformerModel& model,
                         std::span<const int32_t> window_tokens, int batch, int window_len,
                         const PonderConfig& pc, const BaselineConfig& bc, Rng& k_rng) {
    switch (kind) {
        case Method::vanilla: return vanilla_step(model, window_tokens, batch, window_len);
        case Method::ponder:
            return train_step(model, window_tokens, batch, window_len, pc, k_rng).loss;
        case Method::looped:
            return looped_step(model, window_tokens, batch, window_len, bc.loops);
        case Method::pause: return pause_step(model, window_tokens, batch, window_len, bc.pauses);
        case Method::pondering:
            return pondering_step(model, window_tokens, batch, window_len, bc.pondering_steps,
                                  bc.pondering_replace);
    }
    throw ConfigError("method: unknown");
}

// ---------------------------------------------------------------------------
// Greedy decoding per method, instrumented with the stack-application
// counter. Used to verify the closed-form FLOPs multipliers empirically.
// Returns (generated ids, body passes counted in rows).
// ---------------------------------------------------------------------------

struct DecodeCount {
    std::vector<int32_t> ids;
    uint64_t prompt_row_passes = 0;
    uint64_t gen_row_passes = 0;
};

inline DecodeCount counted_decode(Method kind, const TransformerModel& model,
                                  std::span<const int32_t> prompt, int max_new_tokens,
                                  const PonderConfig& pc, const BaselineConfig& bc) {
    const auto& mc = model.config();
    const int d = mc.d_model;
    const int V = mc.vocab_size;
    DecodeCount out;

    if (kind == Method::vanilla || kind == Method::ponder) {
        PonderConfig cfg = pc;
        if (kind == Method::vanilla) cfg.chain_length = 0;
        GenerateStats stats;
        // Prompt-only run first so the generation cost can be isolated.
        generate(model, prompt, 0, 0.0f, cfg, nullptr, &stats);
        out.prompt_row_passes = stats.slot_extensions;
        out.ids = generate(model, prompt, max_new_tokens, 0.0f, cfg, nullptr, &stats);
        out.gen_row_passes = stats.slot_extensions - out.prompt_row_passes;
        return out;
    }

    std::vector<float> row(static_cast<size_t>(d)), hidden(static_cast<size_t>(d)),
        logits(static_cast<size_t>(V)), residual(static_cast<size_t>(d));
    const float* pe =
        mc.pos_encoding == PosEncoding::learned_absolute ? model.position_embedding().data() : nullptr;
    auto embed_token = [&](int32_t tok, int p) {
        std::memcpy(row.data(), model.token_embedding().data() + static_cast<size_t>(tok) * d,
                    sizeof(float) * static_cast<size_t>(d));
        if (pe)
            for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] += pe[static_cast<size_t>(p) * d + j];
    };
    auto argmax = [&]() {
        int32_t best = 0;
        for (int j = 1; j < V; ++j)
            if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
        return best;
    };

    if (kind == Method::looped) {
        std::vector<KVCache> caches(static_cast<size_t>(bc.loops), KVCache(model));
        uint64_t passes = 0;
        auto feed = [&](int32_t tok, int p) {
            embed_token(tok, p);
            std::vector<float> x = row;
            for (int r = 0; r < bc.loops; ++r) {
                caches[static_cast<size_t>(r)].extend_body(x.data(), p, residual.data());
                x = residual;
                ++passes;
            }
            model.finalize_row(x.data(), hidden.data(), logits.data());
        };
        int p = 0;
        for (int32_t tok : prompt) feed(tok, p++);
        out.prompt_row_passes = passes;
        for (int t = 0; t < max_new_tokens; ++t) {
            const int32_t next = argmax();
            out.ids.push_back(next);
            feed(next, p++);
        }
        out.gen_row_passes = passes - out.prompt_row_passes;
        return out;
    }

    if (kind == Method::pause) {
        if (bc.pauses > 0 && !model.has_pause_embedding())
            throw ConfigError("pause: model was built without a pause embedding");
        KVCache cache(model);
        auto feed = [&](int32_t tok, int token_index) {
            embed_token(tok, token_index);
            cache.extend(row.data(), token_index, hidden.data(), bc.pauses == 0 ? logits.data() : nullptr);
            for (int j = 0; j < bc.pauses; ++j) {
                std::memcpy(row.data(), model.pause_embedding().data(),
                            sizeof(float) * static_cast<size_t>(d));
                if (pe)
                    for (int q = 0; q < d; ++q)
                        row[static_cast<size_t>(q)] += pe[static_cast<size_t>(token_index) * d + q];
                cache.extend(row.data(), token_index, hidden.data(),
                             j + 1 == bc.pauses ? logits.data() : nullptr);
            }
        };
        int token_index = 0;
        for (int32_t tok : prompt) feed(tok, token_index++);
        out.prompt_row_passes = cache.row_passes();
        for (int t = 0; t < max_new_tokens; ++t) {
            const int32_t next = argmax();
            out.ids.push_back(next);
            feed(next, token_index++);
        }
        out.gen_row_passes = cache.row_passes() - out.prompt_row_passes;
        return out;
    }

    // Pondering: refine the current position in place, re-running it with
    // the softened embedding mixed into the input.
    KVCache cache(model);
    std::vector<float> base(static_cast<size_t>(d));
    auto feed = [&](int32_t tok, int p) {
        embed_token(tok, p);
        base = row;
        cache.extend(row.data(), p, hidden.data(), logits.data());
        for (int s = 0; s < bc.pondering_steps; ++s) {
            // softmax of current logits -> probability-weighted embedding
            float mx = logits[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, logits[static_cast<size_t>(j)]);
            double denom = 0.0;
            std::vector<float> p_soft(static_cast<size_t>(V));
            for (int j = 0; j < V; ++j) {
                p_soft[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
                denom += p_soft[static_cast<size_t>(j)];
            }
            const float inv = static_cast<float>(1.0 / denom);
            std::vector<float> pond(static_cast<size_t>(d), 0.0f);
            for (int j = 0; j < V; ++j) {
                const float w = p_soft[static_cast<size_t>(j)] * inv;
                const float* erow = model.token_embedding().data() + static_cast<size_t>(j) * d;
                for (int q = 0; q < d; ++q) pond[static_cast<size_t>(q)] += w * erow[q];
            }
            if (bc.pondering_replace) {
                row = pond;
                if (pe)
                    for (int q = 0; q < d; ++q) row[static_cast<size_t>(q)] += pe[static_cast<size_t>(p) * d + q];
            } else {
                for (int q = 0; q < d; ++q) row[static_cast<size_t>(q)] = base[static_cast<size_t>(q)] + pond[static_cast<size_t>(q)];
            }
            cache.pop_last();
            cache.extend(row.data(), p, hidden.data(), logits.data());
        }
    };
    int p = 0;
    for (int32_t tok : prompt) feed(tok, p++);
    out.prompt_row_passes = cache.row_passes();
    for (int t = 0; t < max_new_tokens; ++t) {
        const int32_t next = argmax();
        out.ids.push_back(next);
        feed(next, p++);
    }
    out.gen_row_passes = cache.row_passes() - out.prompt_row_passes;
    return out;
}

}  // namespace plm2
