#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "plm2/eval.hpp"

using namespace plm2;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.vocab_size = 256;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.max_seq_len = 128;
    c.init_std = 0.06f;
    return c;
}

Corpus text_corpus(int repeats, uint64_t seed = 3) {
    std::string text;
    const char* bits[] = {"alpha beta gamma. ", "one two three four. ", "the mill turns slowly. ",
                          "birds fly south in fall. "};
    Rng rng(seed);
    for (int i = 0; i < repeats; ++i) text += bits[rng.next_below(4)];
    return ingest_text(text);
}

}  // namespace

TEST_CASE("uniform-logit model scores PPL equal to the vocabulary size") {
    auto mc = small_config();
    mc.init_std = 0.0f;
    auto m = TransformerModel::init_params(mc, 1);
    auto corpus = text_corpus(200);
    PonderConfig pc;
    BaselineConfig bc;
    auto rep = perplexity(m, corpus, Method::vanilla, pc, bc, 32);
    REQUIRE(rep.perplexity == Catch::Approx(256.0).margin(1e-3));
    REQUIRE(rep.rel_flops == 1.0);
}

TEST_CASE("a memorized constant byte drives PPL toward one") {
    std::string text(4000, 'a');
    auto corpus = ingest_text(text);
    TrainConfig cfg;
    cfg.method = Method::vanilla;
    cfg.model = small_config();
    cfg.window = 16;
    cfg.batch_tokens = 64;
    cfg.total_tokens = 64 * 80;
    cfg.warmup_steps = 8;
    cfg.peak_lr = 3e-3;
    cfg.lr_floor = 3e-4;
    cfg.out_dir = (fs::temp_directory_path() / ("plm2-eval-memo-" + std::to_string(::getpid()))).string();
    auto res = train(cfg, corpus);
    auto loaded = load_checkpoint(res.final_checkpoint);
    PonderConfig pc;
    BaselineConfig bc;
    auto rep = perplexity(loaded.model, corpus, Method::vanilla, pc, bc, 16);
    REQUIRE(rep.perplexity < 1.05);
    std::error_code ec;
    fs::remove_all(cfg.out_dir, ec);
}

TEST_CASE("ponder with N=0 scores identically to vanilla") {
    auto m = TransformerModel::init_params(small_config(), 9);
    auto corpus = text_corpus(300);
    PonderConfig pc;
    pc.chain_length = 0;
    BaselineConfig bc;
    auto a = perplexity(m, corpus, Method::ponder, pc, bc, 32);
    auto b = perplexity(m, corpus, Method::vanilla, pc, bc, 32);
    REQUIRE(a.mean_nll == b.mean_nll);
    REQUIRE(a.token_count == b.token_count);
}

TEST_CASE("perplexity is invariant to the evaluation chunk size") {
    auto m = TransformerModel::init_params(small_config(), 21);
    auto corpus = text_corpus(300);
    PonderConfig pc;
    BaselineConfig bc;
    for (Method method : {Method::vanilla, Method::looped}) {
        auto a = perplexity(m, corpus, method, pc, bc, 32, nullptr, "val", 1);
        auto b = perplexity(m, corpus, method, pc, bc, 32, nullptr, "val", 8);
        REQUIRE(std::abs(a.mean_nll - b.mean_nll) <= 1e-6 * std::abs(a.mean_nll));
    }
}

TEST_CASE("ponder scoring matches an explicit interleaved fixed-point pass") {
    auto m = TransformerModel::init_params(small_config(), 33);
    PonderConfig pc;
    BaselineConfig bc;
    const int T = 12;
    auto corpus = text_corpus(40);
    corpus.tokens.resize(static_cast<size_t>(T) + 1);
    auto rep = perplexity(m, corpus, Method::ponder, pc, bc, T);

    // Oracle: run Jacobi to the fixed point (K = T), score masked slots.
    NoGradGuard ng;
    std::vector<int32_t> inputs(corpus.tokens.begin(), corpus.tokens.end() - 1);
    std::vector<int32_t> targets(corpus.tokens.begin() + 1, corpus.tokens.end());
    Tensor h0 = initial_states(m, inputs);
    auto seq = interleave(inputs, 1, replicate_states(h0, 1), pc, targets);
    jacobi_iterate(m, seq, T, GradMode::detach_all, pc);
    Tensor loss = ponder_loss(m, seq, pc);
    REQUIRE(rep.mean_nll == Catch::Approx(static_cast<double>(loss.item())).margin(1e-5));
}

TEST_CASE("contamination between train and eval windows is detected") {
    std::string pattern = "abcdefghijklmnopq";  // 17 bytes = one window at T=16
    std::string text;
    for (int i = 0; i < 40; ++i) text += pattern;
    auto corpus = ingest_text(text);
    auto split = split_corpus(corpus, 0.5);
    auto hashes = window_hashes(split.train, 16);
    auto m = TransformerModel::init_params(small_config(), 2);
    PonderConfig pc;
    BaselineConfig bc;
    REQUIRE_THROWS_AS(perplexity(m, split.val, Method::vanilla, pc, bc, 16, &hashes), ValueError);
}

TEST_CASE("jacobi curve reports frontier growth and fixed-point collapse") {
    auto m = TransformerModel::init_params(small_config(), 51);
    PonderConfig pc;
    auto corpus = text_corpus(60);
    const int T = 8, kmax = 10;
    auto curve = jacobi_mse_curve(m, corpus.tokens, pc, kmax, T, 2);
    REQUIRE(curve.size() == static_cast<size_t>(kmax) + 1);
    for (int k = 0; k <= kmax; ++k) {
        REQUIRE(curve[static_cast<size_t>(k)].iteration == k);
        REQUIRE(curve[static_cast<size_t>(k)].frontier_tokens >= std::min(T, k + 1));
    }
    // Past K = T the iterate sits at the fixed point: MSE collapses.
    REQUIRE(curve[static_cast<size_t>(kmax)].mse < 1e-8);
    REQUIRE(std::isnan(curve[0].mse));

    auto csv = jacobi_curve_csv(curve);
    REQUIRE(csv.find("iteration,mse_vs_prev,frontier_tokens") == 0);
    int lines = 0;
    for (char ch : csv)
        if (ch == '\n') ++lines;
    REQUIRE(lines == kmax + 2);  // header + kmax+1 rows
}

TEST_CASE("flops report: closed forms plus exact measured counts") {
    auto m = TransformerModel::init_params(small_config(), 61, true);
    PonderConfig pc;
    BaselineConfig bc;
    const auto& mc = m.config();

    auto rep = flops_report(Method::ponder, pc, bc, mc, &m, 10);
    REQUIRE(rep.multiplier == 2.0);
    REQUIRE(rep.measured_rows_per_token == 2.0);
    REQUIRE(rep.per_token_flops ==
            2.0 * static_cast<double>(TransformerModel::param_count(mc, false)) * 2.0);

    bc.loops = 4;
    rep = flops_report(Method::looped, pc, bc, mc, &m, 10);
    REQUIRE(rep.multiplier == 4.0);
    REQUIRE(rep.measured_rows_per_token == 4.0);

    rep = flops_report(Method::vanilla, pc, bc, mc, &m, 10);
    REQUIRE(rep.multiplier == 1.0);
    REQUIRE(rep.measured_rows_per_token == 1.0);
}

TEST_CASE("ablation grid trains each entry and emits one row per config") {
    // Sentence templates with injected digits so no two windows collide.
    std::string text;
    Rng rng(4);
    for (int i = 0; i < 700; ++i) {
        text += "item " + std::to_string(rng.next_below(100000)) + " maps to " +
                std::to_string(rng.next_below(1000)) + ". ";
    }
    auto corpus = ingest_text(text);
    const auto base_out = fs::temp_directory_path() / ("plm2-eval-grid-" + std::to_string(::getpid()));
    std::vector<GridEntry> entries;
    for (int n : {0, 1}) {
        TrainConfig cfg;
        cfg.method = n == 0 ? Method::vanilla : Method::ponder;
        cfg.ponder.chain_length = n;
        cfg.model = small_config();
        cfg.window = 32;
        cfg.batch_tokens = 128;
        cfg.total_tokens = 128 * 30;
        cfg.warmup_steps = 5;
        cfg.out_dir = (base_out / ("n" + std::to_string(n))).string();
        entries.push_back({"n=" + std::to_string(n), cfg});
    }
    auto rows = ablation_grid(entries, corpus);
    REQUIRE(rows.size() == 2);
    REQUIRE(rows[0].label == "n=0");
    REQUIRE(rows[1].chain_length == 1);
    for (const auto& r : rows) {
        REQUIRE(std::isfinite(r.val_loss));
        REQUIRE(r.val_ppl == Catch::Approx(std::exp(r.val_loss)).epsilon(1e-9));
    }
    auto csv = grid_csv(rows);
    REQUIRE(csv.find("label,method,chain_length,val_loss,val_ppl") == 0);
    std::error_code ec;
    fs::remove_all(base_out, ec);
}
