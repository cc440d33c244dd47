#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "plm2/baselines.hpp"
#include "plm2/data.hpp"
#include "plm2/train.hpp"

namespace plm2 {

// ===========================================================================
// Measurement side: perplexity under each method's own inference procedure,
// Jacobi convergence diagnostics, relative-FLOPs accounting, ablation grids.
// ===========================================================================

struct EvalReport {
    std::string dataset;
    uint64_t token_count = 0;
    double mean_nll = 0.0;
    double perplexity = 1.0;
    double rel_flops = 1.0;
    double tokens_per_s = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["dataset"] = dataset;
        j["token_count"] = token_count;
        j["mean_nll"] = mean_nll;
        j["perplexity"] = perplexity;
        j["rel_flops"] = rel_flops;
        j["tokens_per_s"] = tokens_per_s;
        return j;
    }
};

namespace detail {

// Per-row NLL with the same max-subtraction + f64 accumulation as the loss.
inline void nll_rows(const Tensor& logits, std::span<const int32_t> targets,
                     std::vector<double>& out) {
    const int n = logits.dim(0), V = logits.dim(1);
    out.resize(static_cast<size_t>(n));
    const float* pl = logits.data();
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const float* row = pl + static_cast<size_t>(i) * V;
        float mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        out[static_cast<size_t>(i)] = std::log(denom) + static_cast<double>(mx) -
                                      static_cast<double>(row[targets[static_cast<size_t>(i)]]);
    }
}

// Teacher-forced ponder scoring of one window via cached sequential
// semantics (equals the interleaved fixed point by prefix-exactness).
inline void ponder_window_nll(const TransformerModel& model, std::span<const int32_t> window,
                              const PonderConfig& cfg, std::vector<double>& out) {
    const int T = static_cast<int>(window.size()) - 1;
    std::vector<int32_t> inputs(window.begin(), window.end() - 1);
    auto r = sequential_infer(model, inputs, cfg);
    std::vector<int32_t> targets(window.begin() + 1, window.end());
    nll_rows(r.loss_logits, targets, out);
    out.resize(static_cast<size_t>(T));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// perplexity: mean NLL and PPL over the held-out split, scored under the
// method's own inference procedure. Token NLLs accumulate in corpus order,
// so the result is independent of batching. When train-window hashes are
// given, any overlapping eval window raises a contamination error.
// ---------------------------------------------------------------------------
inline EvalReport perplexity(const TransformerModel& model, const Corpus& split, Method method,
                             const PonderConfig& pc, const BaselineConfig& bc, int window_len,
                             const std::unordered_set<uint64_t>* train_hashes = nullptr,
                             const std::string& dataset = "val", int chunk = 8) {
    const int T = window_len;
    const size_t stride = static_cast<size_t>(T) + 1;
    const size_t n_windows = split.size() / stride;
    if (n_windows == 0)
        throw CapacityError("perplexity: split of " + std::to_string(split.size()) +
                            " tokens holds no window of " + std::to_string(T + 1));
    if (train_hashes) {
        for (size_t w = 0; w < n_windows; ++w) {
            const uint64_t h = fnv1a64(split.tokens.data() + w * stride, stride * sizeof(int32_t));
            if (train_hashes->count(h))
                throw ValueError("perplexity: eval window " + std::to_string(w) +
                                 " overlaps a training window (contamination)");
        }
    }

    NoGradGuard ng;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<double>> per_window(n_windows);

    if (method == Method::ponder && pc.chain_length > 0) {
#pragma omp parallel for schedule(static)
        for (long long w = 0; w < static_cast<long long>(n_windows); ++w) {
            detail::ponder_window_nll(
                model, {split.tokens.data() + static_cast<size_t>(w) * stride, stride}, pc,
                per_window[static_cast<size_t>(w)]);
        }
    } else {
        // Batched teacher-forced scoring for the parallel methods.
        PonderConfig pause_cfg;
        pause_cfg.chain_length = bc.pauses;
        for (size_t base = 0; base < n_windows; base += static_cast<size_t>(chunk)) {
            const int B = static_cast<int>(std::min<size_t>(chunk, n_windows - base));
            std::vector<int32_t> inputs(static_cast<size_t>(B) * T);
            std::vector<int32_t> targets(static_cast<size_t>(B) * T);
            for (int b = 0; b < B; ++b) {
                const int32_t* win = split.tokens.data() + (base + static_cast<size_t>(b)) * stride;
                for (int i = 0; i < T; ++i) {
                    inputs[static_cast<size_t>(b * T + i)] = win[i];
                    targets[static_cast<size_t>(b * T + i)] = win[i + 1];
                }
            }
            std::vector<RowSpan> spans;
            std::vector<int> pos;
            for (int b = 0; b < B; ++b) {
                spans.push_back({b * T, T});
                for (int i = 0; i < T; ++i) pos.push_back(i);
            }
            Tensor logits;
            if (method == Method::pause && bc.pauses > 0) {
                Tensor rows = broadcast_row(model.pause_embedding(), B * T * bc.pauses);
                auto seq = interleave(inputs, B, rows, pause_cfg, targets);
                Tensor x = model.add_positions(
                    compose_rows(model.token_rows(inputs), rows, seq.pick), seq.position_ids);
                Tensor h = model.stack_forward(x, seq.spans, seq.position_ids);
                std::vector<int> rows_sel;
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < T; ++i)
                        rows_sel.push_back(b * seq.layout.slots() + seq.layout.thought_slot(i, bc.pauses));
                logits = model.logits_of(gather_rows(h, rows_sel));
            } else if (method == Method::pondering && bc.pondering_steps > 0) {
                Tensor e = model.token_rows(inputs);
                Tensor x0 = model.add_positions(e, pos);
                Tensor h = model.stack_forward(x0, spans, pos);
                for (int s = 0; s < bc.pondering_steps; ++s) {
                    Tensor probs = softmax_rows(model.logits_of(h));
                    Tensor pond = matmul(probs, model.token_embedding());
                    Tensor x = bc.pondering_replace ? model.add_positions(pond, pos) : add(x0, pond);
                    h = model.stack_forward(x, spans, pos);
                }
                logits = model.logits_of(h);
            } else {
                const int loops = method == Method::looped ? bc.loops : 1;
                Tensor x = model.add_positions(model.token_rows(inputs), pos);
                Tensor h = model.stack_forward(x, spans, pos, nullptr, loops);
                logits = model.logits_of(h);
            }
            std::vector<double> nll;
            detail::nll_rows(logits, targets, nll);
            for (int b = 0; b < B; ++b)
                per_window[base + static_cast<size_t>(b)] =
                    std::vector<double>(nll.begin() + static_cast<long>(b) * T,
                                        nll.begin() + static_cast<long>(b + 1) * T);
        }
    }

    double total = 0.0;
    uint64_t count = 0;
    for (const auto& w : per_window) {
        for (double v : w) {
            total += v;
            ++count;
        }
    }
    const auto t1 = std::chrono::steady_clock::now();
    EvalReport rep;
    rep.dataset = dataset;
    rep.token_count = count;
    rep.mean_nll = total / static_cast<double>(count);
    rep.perplexity = std::exp(rep.mean_nll);
    rep.rel_flops = flops_multiplier(method, bc, pc);
    const double secs = std::chrono::duration<double>(t1 - t0).count();
    rep.tokens_per_s = secs > 0 ? static_cast<double>(count) / secs : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// jacobi_mse_curve: per-iteration MSE between consecutive thought iterates,
// plus the prefix-exact frontier (tokens whose thoughts already equal the
// sequential oracle within 1e-4), averaged over up to four probe windows.
// ---------------------------------------------------------------------------

struct JacobiCurvePoint {
    int iteration = 0;
    double mse = std::numeric_limits<double>::quiet_NaN();  // NaN at iteration 0
    int frontier_tokens = 0;                                // min across probe windows
};

inline std::vector<JacobiCurvePoint> jacobi_mse_curve(const TransformerModel& model,
                                                      std::span<const int32_t> probe_tokens,
                                                      const PonderConfig& cfg, int k_max,
                                                      int window_len, int max_windows = 4) {
    if (k_max < 1) throw ValueError("jacobi_mse_curve: k_max must be >= 1");
    const int T = window_len;
    const int N = std::max(1, cfg.chain_length);
    PonderConfig pcfg = cfg;
    pcfg.chain_length = N;
    const size_t n_windows =
        std::min<size_t>(static_cast<size_t>(max_windows), probe_tokens.size() / static_cast<size_t>(T));
    if (n_windows == 0) throw CapacityError("jacobi_mse_curve: probe shorter than one window");

    NoGradGuard ng;
    const int d = model.config().d_model;
    std::vector<JacobiCurvePoint> curve(static_cast<size_t>(k_max) + 1);
    for (int k = 0; k <= k_max; ++k) curve[static_cast<size_t>(k)].iteration = k;
    std::vector<double> mse_sum(static_cast<size_t>(k_max) + 1, 0.0);
    std::vector<int> frontier_min(static_cast<size_t>(k_max) + 1, T);

    for (size_t w = 0; w < n_windows; ++w) {
        std::vector<int32_t> ids(probe_tokens.begin() + static_cast<long>(w) * T,
                                 probe_tokens.begin() + static_cast<long>(w + 1) * T);
        auto oracle = sequential_infer(model, ids, pcfg);
        Tensor h0 = initial_states(model, ids);
        auto seq = interleave(ids, 1, replicate_states(h0, N), pcfg);
        auto trace = jacobi_iterate(model, seq, k_max, GradMode::detach_all, pcfg);

        for (int k = 0; k <= k_max; ++k) {
            if (k > 0) mse_sum[static_cast<size_t>(k)] += trace.mse[static_cast<size_t>(k - 1)];
            const auto& snap = trace.snapshots[static_cast<size_t>(k)];
            int frontier = 0;
            for (int i = 0; i < T; ++i) {
                double diff = 0.0;
                for (int j = 0; j < N * d; ++j) {
                    const size_t idx = static_cast<size_t>(i) * N * d + static_cast<size_t>(j);
                    diff = std::max(diff, std::abs(static_cast<double>(snap[idx]) -
                                                   oracle.thoughts.data()[idx]));
                }
                if (diff < 1e-4)
                    frontier = i + 1;
                else
                    break;
            }
            frontier_min[static_cast<size_t>(k)] =
                std::min(frontier_min[static_cast<size_t>(k)], frontier);
        }
    }
    for (int k = 0; k <= k_max; ++k) {
        if (k > 0) curve[static_cast<size_t>(k)].mse = mse_sum[static_cast<size_t>(k)] / static_cast<double>(n_windows);
        curve[static_cast<size_t>(k)].frontier_tokens = frontier_min[static_cast<size_t>(k)];
    }
    return curve;
}

inline std::string jacobi_curve_csv(const std::vector<JacobiCurvePoint>& curve) {
    std::ostringstream os;
    os << "iteration,mse_vs_prev,frontier_tokens\n";
    for (const auto& p : curve) {
        os << p.iteration << ",";
        if (p.iteration > 0) os << std::scientific << p.mse;
        os << "," << p.frontier_tokens << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// flops_report: closed-form relative multiplier, analytic per-token FLOPs
// (2 * params per forward slot), measured stack-row passes per generated
// token, and timed greedy-generation throughput (first 10% discarded).
// ---------------------------------------------------------------------------

struct FlopsReport {
    double multiplier = 1.0;
    double per_token_flops = 0.0;
    double measured_rows_per_token = 0.0;
    double measured_tokens_per_s = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["multiplier"] = multiplier;
        j["per_token_flops"] = per_token_flops;
        j["measured_rows_per_token"] = measured_rows_per_token;
        j["measured_tokens_per_s"] = measured_tokens_per_s;
        return j;
    }
};

inline FlopsReport flops_report(Method method, const PonderConfig& pc, const BaselineConfig& bc,
                                const ModelConfig& mc, const TransformerModel* model = nullptr,
                                int measure_tokens = 32) {
    FlopsReport rep;
    rep.multiplier = flops_multiplier(method, bc, pc);
    const double params =
        static_cast<double>(TransformerModel::param_count(mc, method == Method::pause));
    rep.per_token_flops = 2.0 * params * rep.multiplier;
    if (model) {
        NoGradGuard ng;
        std::vector<int32_t> prompt{1, 2, 3};
        const int warm = std::max(1, measure_tokens / 10);
        auto counted = counted_decode(method, *model, prompt, measure_tokens, pc, bc);
        rep.measured_rows_per_token =
            static_cast<double>(counted.gen_row_passes) / measure_tokens;
        const auto t0 = std::chrono::steady_clock::now();
        counted_decode(method, *model, prompt, warm, pc, bc);
        const auto t1 = std::chrono::steady_clock::now();
        counted_decode(method, *model, prompt, measure_tokens, pc, bc);
        const auto t2 = std::chrono::steady_clock::now();
        const double tail = std::chrono::duration<double>(t2 - t1).count() -
                            std::chrono::duration<double>(t1 - t0).count();
        rep.measured_tokens_per_s = tail > 0 ? (measure_tokens - warm) / tail : 0.0;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// ablation_grid: train each config on the shared corpus and report final
// validation loss; the data behind the K / chain-length / position-policy
// ablation plots.
// ---------------------------------------------------------------------------

struct GridEntry {
    std::string label;
    TrainConfig config;
};

struct GridResult {
    std::string label;
    Method method = Method::vanilla;
    int chain_length = 0;
    double val_loss = 0.0;
    double val_ppl = 0.0;
};

inline std::vector<GridResult> ablation_grid(const std::vector<GridEntry>& entries,
                                             const Corpus& corpus, double val_fraction = 0.05) {
    std::vector<GridResult> out;
    for (const auto& e : entries) {
        auto split = split_corpus(corpus, val_fraction);
        TrainResult tr = train(e.config, split.train);
        auto loaded = load_checkpoint(tr.final_checkpoint);
        const auto hashes = window_hashes(split.train, e.config.window);
        EvalReport rep = perplexity(loaded.model, split.val, e.config.method, e.config.ponder,
                                    e.config.baseline, e.config.window, &hashes);
        GridResult r;
        r.label = e.label;
        r.method = e.config.method;
        r.chain_length = e.config.method == Method::ponder ? e.config.ponder.chain_length : 0;
        r.val_loss = rep.mean_nll;
        r.val_ppl = rep.perplexity;
        out.push_back(r);
    }
    return out;
}

inline std::string grid_csv(const std::vector<GridResult>& rows) {
    std::ostringstream os;
    os << "label,method,chain_length,val_loss,val_ppl\n";
    for (const auto& r : rows) {
        os << r.label << "," << to_string(r.method) << "," << r.chain_length << ","
           << std::setprecision(9) << r.val_loss << "," << r.val_ppl << "\n";
    }
    return os.str();
}

}  // namespace plm2
