#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "plm2/model.hpp"
#include "plm2/rng.hpp"
#include "plm2/tensor.hpp"

namespace plm2 {

// ===========================================================================
// Latent-thought engine: sequential inference with per-token thought chains,
// and Jacobi-iteration parallel training over interleaved sequences.
// ===========================================================================

enum class GradMode { detach_all, full_unroll };
enum class FeedbackNorm { raw, layernorm };

inline const char* to_string(GradMode g) {
    return g == GradMode::detach_all ? "detach_all" : "full_unroll";
}
inline const char* to_string(FeedbackNorm f) { return f == FeedbackNorm::raw ? "raw" : "layernorm"; }

struct PonderConfig {
    int chain_length = 1;  // N thoughts per token; 0 degenerates to a vanilla LM
    std::vector<int> k_choices{2, 3, 4};
    GradMode grad_mode = GradMode::detach_all;
    PositionPolicy position_policy = PositionPolicy::reuse_token_position;
    FeedbackNorm feedback_norm = FeedbackNorm::raw;
    bool k_per_instance = false;  // sample K per window instead of per batch
    bool aux_token_loss = false;  // additionally supervise token slots (ablation)

    void validate() const {
        if (chain_length < 0) throw ConfigError("ponder.chain_length: must be >= 0");
        if (k_choices.empty()) throw ConfigError("ponder.k_choices: must be nonempty");
        for (int k : k_choices)
            if (k < 1) throw ConfigError("ponder.k_choices: iteration counts must be >= 1");
        if (k_per_instance && grad_mode == GradMode::full_unroll)
            throw ConfigError("ponder.k_per_instance: not supported with full_unroll");
    }
};

// Training-time sequence S^k for a batch of equal windows: token embeddings
// interleaved with current thought states, plus the bookkeeping that says
// which output refreshes which thought and where the loss reads.
struct InterleavedSequence {
    SequenceLayout layout;  // per window
    int batch = 1;
    std::vector<int32_t> token_ids;  // batch*T
    std::vector<int32_t> targets;    // batch*T, -1 where no successor exists
    Tensor thoughts;                 // [batch*T*N x d]; undefined when N == 0
    std::vector<int> position_ids;   // batch*slots
    std::vector<uint8_t> loss_mask;  // batch*slots; true at each token's final thought slot
    std::vector<int> update_src;     // per window, thought t <- output of slot update_src[t]
    std::vector<RowPick> pick;       // batch*slots row composition
    std::vector<RowSpan> spans;      // batch windows

    int rows() const { return batch * layout.slots(); }
    int thought_rows() const { return batch * layout.tokens * layout.thoughts_per_token; }

    // Global row of thought (window w, token i, chain j in [1,N]).
    int thought_row(int w, int i, int j) const {
        return (w * layout.tokens + i) * layout.thoughts_per_token + (j - 1);
    }
};

struct JacobiTrace {
    std::vector<std::vector<float>> snapshots;  // K+1 copies of the thought matrix
    std::vector<double> mse;                    // mse[k] = MSE(H^{k+1}, H^k)
    std::vector<int> frontier;                  // filled by diagnostics when an oracle is present
};

// ---------------------------------------------------------------------------
// interleave: build S^k bookkeeping for a batch of token windows.
//
// `token_ids` holds batch*T input tokens. `targets`, when given, holds the
// shifted successors (batch*T, -1 where absent); when empty, targets are
// derived within each window and the final token goes unsupervised.
// ---------------------------------------------------------------------------
inline InterleavedSequence interleave(std::span<const int32_t> token_ids, int batch,
                                      const Tensor& thoughts, const PonderConfig& cfg,
                                      std::span<const int32_t> targets = {}) {
    cfg.validate();
    if (batch < 1 || token_ids.empty() || static_cast<int>(token_ids.size()) % batch != 0)
        throw ShapeError("interleave: token_ids not divisible into windows");
    const int T = static_cast<int>(token_ids.size()) / batch;
    const int N = cfg.chain_length;

    InterleavedSequence seq;
    seq.layout = {T, N};
    seq.batch = batch;
    seq.token_ids.assign(token_ids.begin(), token_ids.end());
    if (!targets.empty()) {
        if (targets.size() != token_ids.size())
            throw ShapeError("interleave: targets length mismatch");
        seq.targets.assign(targets.begin(), targets.end());
    } else {
        seq.targets.assign(token_ids.size(), -1);
        for (int w = 0; w < batch; ++w)
            for (int i = 0; i + 1 < T; ++i)
                seq.targets[static_cast<size_t>(w * T + i)] = token_ids[static_cast<size_t>(w * T + i + 1)];
    }
    if (N > 0) {
        if (!thoughts.defined() || thoughts.dim(0) != batch * T * N)
            throw ShapeError("interleave: thoughts row count must be batch*T*N = " +
                             std::to_string(batch * T * N));
        seq.thoughts = thoughts;
    }

    const int L = seq.layout.slots();
    const std::vector<int> pos = assign_position_ids(seq.layout, cfg.position_policy);
    seq.position_ids.reserve(static_cast<size_t>(batch) * L);
    seq.loss_mask.assign(static_cast<size_t>(batch) * L, 0);
    seq.pick.resize(static_cast<size_t>(batch) * L);
    seq.spans.reserve(static_cast<size_t>(batch));
    for (int w = 0; w < batch; ++w) {
        seq.spans.push_back({w * L, L});
        seq.position_ids.insert(seq.position_ids.end(), pos.begin(), pos.end());
        for (int i = 0; i < T; ++i) {
            seq.pick[static_cast<size_t>(w * L + seq.layout.token_slot(i))] = {0, w * T + i};
            for (int j = 1; j <= N; ++j)
                seq.pick[static_cast<size_t>(w * L + seq.layout.thought_slot(i, j))] = {
                    1, seq.thought_row(w, i, j)};
            if (seq.targets[static_cast<size_t>(w * T + i)] >= 0) {
                const int loss_slot = N > 0 ? seq.layout.thought_slot(i, N) : seq.layout.token_slot(i);
                seq.loss_mask[static_cast<size_t>(w * L + loss_slot)] = 1;
            }
        }
    }
    seq.update_src.resize(static_cast<size_t>(T) * N);
    for (int i = 0; i < T; ++i)
        for (int j = 1; j <= N; ++j)
            seq.update_src[static_cast<size_t>(i * N + j - 1)] =
                j == 1 ? seq.layout.token_slot(i) : seq.layout.thought_slot(i, j - 1);
    return seq;
}

namespace detail {

// Thought rows as model inputs: optional row normalization (stabilizer flag).
inline Tensor thought_inputs(const Tensor& thoughts, const PonderConfig& cfg) {
    if (cfg.feedback_norm == FeedbackNorm::layernorm) return rownorm(thoughts);
    return thoughts;
}

inline Tensor interleaved_rows(const TransformerModel& model, const InterleavedSequence& seq,
                               const PonderConfig& cfg) {
    Tensor e = model.token_rows(seq.token_ids);
    Tensor x = seq.layout.thoughts_per_token > 0
                   ? compose_rows(e, thought_inputs(seq.thoughts, cfg), seq.pick)
                   : compose_rows(e, Tensor(), seq.pick);
    return model.add_positions(x, seq.position_ids);
}

// Rows of the stack output that refresh each thought next iteration.
inline std::vector<int> refresh_rows(const InterleavedSequence& seq) {
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(seq.thought_rows()));
    const int L = seq.layout.slots();
    for (int w = 0; w < seq.batch; ++w)
        for (int t = 0; t < seq.layout.tokens * seq.layout.thoughts_per_token; ++t)
            rows.push_back(w * L + seq.update_src[static_cast<size_t>(t)]);
    return rows;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// initial_states: single forward pass over the plain token sequence
// (iteration 0). Returns one state per token; chains replicate it.
// ---------------------------------------------------------------------------
inline Tensor initial_states(const TransformerModel& model, std::span<const int32_t> token_ids,
                             int batch = 1) {
    if (token_ids.empty()) throw ShapeError("initial_states: empty token sequence");
    const int T = static_cast<int>(token_ids.size()) / batch;
    std::vector<RowSpan> spans;
    std::vector<int> pos;
    pos.reserve(token_ids.size());
    for (int w = 0; w < batch; ++w) {
        spans.push_back({w * T, T});
        for (int i = 0; i < T; ++i) pos.push_back(i);
    }
    Tensor x = model.add_positions(model.token_rows(token_ids), pos);
    return model.stack_forward(x, spans, pos);
}

// Replicates per-token states into the N thought slots of each token.
inline Tensor replicate_states(const Tensor& per_token, int chain_length) {
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(per_token.dim(0)) * chain_length);
    for (int i = 0; i < per_token.dim(0); ++i)
        for (int j = 0; j < chain_length; ++j) rows.push_back(i);
    return gather_rows(per_token, rows);
}

// ---------------------------------------------------------------------------
// jacobi_iterate: K parallel refinement passes over the interleaved sequence.
// Every thought is refreshed from the output at its update-source slot, all
// simultaneously from the previous iterate. Under detach_all the refreshed
// states re-enter the next pass as constants.
// ---------------------------------------------------------------------------
inline JacobiTrace jacobi_iterate(const TransformerModel& model, InterleavedSequence& seq, int K,
                                  GradMode grad_mode, const PonderConfig& cfg) {
    if (K < 1) throw ValueError("jacobi_iterate: K must be >= 1");
    JacobiTrace trace;
    auto snapshot = [&seq]() {
        return seq.thoughts.defined()
                   ? std::vector<float>(seq.thoughts.data(), seq.thoughts.data() + seq.thoughts.numel())
                   : std::vector<float>();
    };
    trace.snapshots.push_back(snapshot());
    if (seq.thought_rows() == 0) {
        // Vanilla degeneration: nothing to refresh.
        trace.snapshots.resize(static_cast<size_t>(K) + 1);
        trace.mse.assign(static_cast<size_t>(K), 0.0);
        return trace;
    }
    const std::vector<int> rows = detail::refresh_rows(seq);
    for (int k = 1; k <= K; ++k) {
        Tensor refreshed;
        if (grad_mode == GradMode::detach_all) {
            NoGradGuard ng;
            Tensor x = detail::interleaved_rows(model, seq, cfg);
            Tensor h = model.stack_forward(x, seq.spans, seq.position_ids);
            refreshed = gather_rows(h, rows);
        } else {
            Tensor x = detail::interleaved_rows(model, seq, cfg);
            Tensor h = model.stack_forward(x, seq.spans, seq.position_ids);
            refreshed = gather_rows(h, rows);
        }
        if (!all_finite(refreshed))
            throw NumericError("jacobi_iterate: non-finite thought state at iteration " +
                               std::to_string(k));
        const auto& prev = trace.snapshots.back();
        double se = 0.0;
        for (size_t i = 0; i < refreshed.numel(); ++i) {
            const double diff = static_cast<double>(refreshed.data()[i]) - prev[i];
            se += diff * diff;
        }
        trace.mse.push_back(se / static_cast<double>(refreshed.numel()));
        seq.thoughts = refreshed;
        trace.snapshots.push_back(snapshot());
    }
    return trace;
}

// ---------------------------------------------------------------------------
// ponder_loss: forward S^K once more and read cross entropy at the final
// thought slot of each token (slot i predicts x_{i+1}).
// ---------------------------------------------------------------------------
inline Tensor ponder_loss(const TransformerModel& model, const InterleavedSequence& seq,
                          const PonderConfig& cfg) {
    Tensor x = detail::interleaved_rows(model, seq, cfg);
    Tensor h = model.stack_forward(x, seq.spans, seq.position_ids);

    std::vector<int> sel_rows;
    std::vector<int32_t> sel_targets;
    const int L = seq.layout.slots();
    for (int w = 0; w < seq.batch; ++w) {
        for (int s = 0; s < L; ++s) {
            const int row = w * L + s;
            const int owner = seq.layout.owner(s);
            const int32_t tgt = seq.targets[static_cast<size_t>(w * seq.layout.tokens + owner)];
            const bool main_loss = seq.loss_mask[static_cast<size_t>(row)] != 0;
            const bool aux = cfg.aux_token_loss && !seq.layout.is_thought(s) &&
                             seq.layout.thoughts_per_token > 0 && tgt >= 0;
            if (main_loss || aux) {
                sel_rows.push_back(row);
                sel_targets.push_back(tgt);
            }
        }
    }
    if (sel_rows.empty())
        throw ValueError("ponder_loss: no supervised slot (empty loss mask)");
    Tensor sel = gather_rows(h, sel_rows);
    Tensor logits = model.logits_of(sel);
    const std::vector<uint8_t> mask(sel_rows.size(), 1);
    return softmax_cross_entropy(logits, sel_targets, mask);
}

// ---------------------------------------------------------------------------
// train_step: sample K, build and refine the interleaved sequence, compute
// the ponder loss, and backpropagate. Parameter gradients are left on the
// model's registry tensors.
// ---------------------------------------------------------------------------
struct TrainStepResult {
    float loss = 0.0f;
    int k_used = 0;  // per-batch draw (max over windows when per-instance)
    JacobiTrace trace;
};

// Splits batch windows of (T+1) tokens into inputs and shifted targets.
inline void split_windows(std::span<const int32_t> window_tokens, int batch, int T,
                          std::vector<int32_t>& inputs, std::vector<int32_t>& targets) {
    if (static_cast<int>(window_tokens.size()) != batch * (T + 1))
        throw ShapeError("train_step: batch must hold windows of T+1 tokens");
    inputs.resize(static_cast<size_t>(batch) * T);
    targets.resize(static_cast<size_t>(batch) * T);
    for (int w = 0; w < batch; ++w) {
        const int32_t* win = window_tokens.data() + static_cast<size_t>(w) * (T + 1);
        for (int i = 0; i < T; ++i) {
            inputs[static_cast<size_t>(w * T + i)] = win[i];
            targets[static_cast<size_t>(w * T + i)] = win[i + 1];
        }
    }
}

// Forward + backward for the ponder objective with the K draws already
// fixed; the vanilla baseline enters here with N=0.
inline TrainStepResult ponder_objective(const TransformerModel& model,
                                        std::span<const int32_t> inputs,
                                        std::span<const int32_t> targets, int batch,
                                        const PonderConfig& cfg, std::span<const int> k_draws) {
    const int k_max = k_draws.empty() ? 1 : *std::max_element(k_draws.begin(), k_draws.end());
    TrainStepResult res;
    res.k_used = k_max;
    Tape tape;
    TapeScope scope(tape);
    InterleavedSequence seq;
    if (cfg.chain_length > 0 && cfg.grad_mode == GradMode::detach_all) {
        NoGradGuard ng;
        Tensor h0 = initial_states(model, inputs, batch);
        seq = interleave(inputs, batch, replicate_states(h0, cfg.chain_length), cfg, targets);
        res.trace = jacobi_iterate(model, seq, k_max, cfg.grad_mode, cfg);
        if (cfg.k_per_instance && static_cast<int>(k_draws.size()) == batch) {
            // Read each window's thoughts at its own K from the trace.
            Tensor mixed = Tensor::zeros(seq.thoughts.shape());
            const int per_w = seq.layout.tokens * seq.layout.thoughts_per_token;
            const int d = seq.thoughts.dim(1);
            for (int w = 0; w < batch; ++w) {
                const auto& snap = res.trace.snapshots[static_cast<size_t>(k_draws[static_cast<size_t>(w)])];
                std::copy(snap.begin() + static_cast<size_t>(w) * per_w * d,
                          snap.begin() + static_cast<size_t>(w + 1) * per_w * d,
                          mixed.mutable_data() + static_cast<size_t>(w) * per_w * d);
            }
            seq.thoughts = mixed;
        }
    } else if (cfg.chain_length > 0) {
        Tensor h0 = initial_states(model, inputs, batch);
        seq = interleave(inputs, batch, replicate_states(h0, cfg.chain_length), cfg, targets);
        res.trace = jacobi_iterate(model, seq, k_max, cfg.grad_mode, cfg);
    } else {
        seq = interleave(inputs, batch, Tensor(), cfg, targets);
    }
    Tensor loss = ponder_loss(model, seq, cfg);
    tape.backward(loss);
    res.loss = loss.item();
    return res;
}

// `window_tokens` holds batch windows of (T+1) tokens: T inputs + shifted targets.
inline TrainStepResult train_step(const TransformerModel& model,
                                  std::span<const int32_t> window_tokens, int batch, int window_len,
                                  const PonderConfig& cfg, Rng& k_rng) {
    cfg.validate();
    std::vector<int32_t> inputs, targets;
    split_windows(window_tokens, batch, window_len, inputs, targets);
    std::vector<int> k_draws;
    const int n_draws = cfg.k_per_instance ? batch : 1;
    for (int i = 0; i < n_draws; ++i)
        k_draws.push_back(cfg.k_choices[k_rng.next_below(cfg.k_choices.size())]);
    return ponder_objective(model, inputs, targets, batch, cfg, k_draws);
}

// ---------------------------------------------------------------------------
// sequential_infer: the deployment-time procedure. Tokens are processed left
// to right; each token's final hidden state re-enters as the next input slot,
// N times, before attention moves to the next token. KV-cached.
// ---------------------------------------------------------------------------
struct SequentialResult {
    Tensor slot_states;  // [(N+1)*T x d] final-layer state at every slot
    Tensor thoughts;     // [T*N x d] thought vectors as they were fed back
    Tensor loss_logits;  // [T x V] logits at each token's final thought slot
    Tensor next_logits;  // [V] logits predicting x_{T+1}
};

inline SequentialResult sequential_infer(const TransformerModel& model,
                                         std::span<const int32_t> token_ids,
                                         const PonderConfig& cfg, KVCache* reuse_cache = nullptr) {
    cfg.validate();
    if (token_ids.empty()) throw ShapeError("sequential_infer: empty token sequence");
    const auto& mc = model.config();
    const int T = static_cast<int>(token_ids.size());
    const int N = cfg.chain_length;
    const int d = mc.d_model;
    SequenceLayout layout{T, N};
    const std::vector<int> pos = assign_position_ids(layout, cfg.position_policy);
    model.check_positions(pos);

    SequentialResult res;
    res.slot_states = Tensor::zeros({layout.slots(), d});
    res.thoughts = Tensor::zeros({std::max(1, T * N), d});
    res.loss_logits = Tensor::zeros({T, mc.vocab_size});

    KVCache local(model);
    KVCache& cache = reuse_cache ? *reuse_cache : local;
    std::vector<float> row(static_cast<size_t>(d));
    const float* pe = mc.pos_encoding == PosEncoding::learned_absolute ? model.position_embedding().data() : nullptr;
    auto add_pos = [&](int p) {
        if (pe)
            for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] += pe[static_cast<size_t>(p) * d + j];
    };

    for (int i = 0; i < T; ++i) {
        const int s0 = layout.token_slot(i);
        const int32_t tok = token_ids[static_cast<size_t>(i)];
        if (tok < 0 || tok >= mc.vocab_size)
            throw ValueError("sequential_infer: token id out of range");
        std::memcpy(row.data(), model.token_embedding().data() + static_cast<size_t>(tok) * d,
                    sizeof(float) * static_cast<size_t>(d));
        add_pos(pos[static_cast<size_t>(s0)]);
        float* h_out = res.slot_states.mutable_data() + static_cast<size_t>(s0) * d;
        cache.extend(row.data(), pos[static_cast<size_t>(s0)], h_out,
                     N == 0 ? res.loss_logits.mutable_data() + static_cast<size_t>(i) * mc.vocab_size
                            : nullptr);
        const float* prev = h_out;
        for (int j = 1; j <= N; ++j) {
            const int sj = layout.thought_slot(i, j);
            std::memcpy(res.thoughts.mutable_data() + static_cast<size_t>(i * N + j - 1) * d, prev,
                        sizeof(float) * static_cast<size_t>(d));
            if (cfg.feedback_norm == FeedbackNorm::layernorm)
                kern::ln_row(prev, nullptr, nullptr, d, 1e-5f, row.data(), nullptr, nullptr);
            else
                std::memcpy(row.data(), prev, sizeof(float) * static_cast<size_t>(d));
            add_pos(pos[static_cast<size_t>(sj)]);
            float* hj = res.slot_states.mutable_data() + static_cast<size_t>(sj) * d;
            cache.extend(row.data(), pos[static_cast<size_t>(sj)], hj,
                         j == N ? res.loss_logits.mutable_data() + static_cast<size_t>(i) * mc.vocab_size
                                : nullptr);
            prev = hj;
        }
    }
    res.next_logits = gather_rows(res.loss_logits, std::vector<int>{T - 1});
    return res;
}

// ---------------------------------------------------------------------------
// generate: autoregressive decoding over sequential_infer steps.
// temperature <= 0 selects greedy argmax.
// ---------------------------------------------------------------------------
struct GenerateStats {
    uint64_t slot_extensions = 0;
    uint64_t tokens_generated = 0;
};

inline std::vector<int32_t> generate(const TransformerModel& model,
                                     std::span<const int32_t> prompt, int max_new_tokens,
                                     float temperature, const PonderConfig& cfg, Rng* rng = nullptr,
                                     GenerateStats* stats = nullptr) {
    cfg.validate();
    if (prompt.empty()) throw ValueError("generate: prompt must be nonempty");
    const auto& mc = model.config();
    const int N = cfg.chain_length;
    const int d = mc.d_model;
    const int slots_per_token = N + 1;
    const int64_t total_tokens = static_cast<int64_t>(prompt.size()) + max_new_tokens;
    if (total_tokens * slots_per_token > mc.max_seq_len)
        throw CapacityError("generate: " + std::to_string(total_tokens * slots_per_token) +
                            " slots exceed max_seq_len " + std::to_string(mc.max_seq_len));

    KVCache cache(model);
    std::vector<float> row(static_cast<size_t>(d));
    std::vector<float> hidden(static_cast<size_t>(d));
    std::vector<float> logits(static_cast<size_t>(mc.vocab_size));
    const float* pe = mc.pos_encoding == PosEncoding::learned_absolute ? model.position_embedding().data() : nullptr;

    auto feed_token = [&](int32_t tok, int token_index) {
        const int base_pos = cfg.position_policy == PositionPolicy::reuse_token_position
                                 ? token_index
                                 : token_index * slots_per_token;
        auto one = [&](int rel) {
            const int p = cfg.position_policy == PositionPolicy::reuse_token_position
                              ? base_pos
                              : base_pos + rel;
            if (pe)
                for (int j = 0; j < d; ++j) row[static_cast<size_t>(j)] += pe[static_cast<size_t>(p) * d + j];
            cache.extend(row.data(), p, hidden.data(), rel == N ? logits.data() : nullptr);
        };
        std::memcpy(row.data(), model.token_embedding().data() + static_cast<size_t>(tok) * d,
                    sizeof(float) * static_cast<size_t>(d));
        one(0);
        for (int j = 1; j <= N; ++j) {
            if (cfg.feedback_norm == FeedbackNorm::layernorm)
                kern::ln_row(hidden.data(), nullptr, nullptr, d, 1e-5f, row.data(), nullptr, nullptr);
            else
                std::memcpy(row.data(), hidden.data(), sizeof(float) * static_cast<size_t>(d));
            one(j);
        }
    };

    int token_index = 0;
    for (int32_t tok : prompt) feed_token(tok, token_index++);

    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(max_new_tokens));
    for (int t = 0; t < max_new_tokens; ++t) {
        int32_t next;
        if (temperature <= 0.0f) {
            next = 0;
            for (int j = 1; j < mc.vocab_size; ++j)
                if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(next)]) next = j;
        } else {
            if (!rng) throw ValueError("generate: temperature sampling needs an rng");
            double mx = logits[0];
            for (int j = 1; j < mc.vocab_size; ++j) mx = std::max(mx, static_cast<double>(logits[static_cast<size_t>(j)]));
            std::vector<double> p(static_cast<size_t>(mc.vocab_size));
            double denom = 0.0;
            for (int j = 0; j < mc.vocab_size; ++j) {
                p[static_cast<size_t>(j)] = std::exp((logits[static_cast<size_t>(j)] - mx) / temperature);
                denom += p[static_cast<size_t>(j)];
            }
            double u = rng->next_double() * denom;
            next = mc.vocab_size - 1;
            double acc = 0.0;
            for (int j = 0; j < mc.vocab_size; ++j) {
                acc += p[static_cast<size_t>(j)];
                if (u < acc) {
                    next = j;
                    break;
                }
            }
        }
        out.push_back(next);
        feed_token(next, token_index++);
    }
    if (stats) {
        stats->slot_extensions = cache.row_passes();
        stats->tokens_generated = static_cast<uint64_t>(max_new_tokens);
    }
    return out;
}

}  // namespace plm2
