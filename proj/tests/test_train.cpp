#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "plm2/eval.hpp"
#include "plm2/train.hpp"

using namespace plm2;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("plm2-train-" + tag + "-" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

Corpus smoke_corpus() {
    std::string text;
    const char* bits[] = {"the cat sat on the mat. ", "a dog ran in the park. ",
                          "numbers count 1 2 3 4 5. ", "rivers flow to the sea. "};
    Rng rng(11);
    for (int i = 0; i < 900; ++i) text += bits[rng.next_below(4)];
    return ingest_text(text);
}

TrainConfig smoke_config(const std::string& out, Method method = Method::vanilla) {
    TrainConfig c;
    c.method = method;
    c.model.vocab_size = 256;
    c.model.d_model = 32;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.model.max_seq_len = 128;
    c.model.init_std = 0.06f;
    c.window = 32;
    c.batch_tokens = 128;
    c.total_tokens = 128 * 200;
    c.warmup_steps = 20;
    c.peak_lr = 2e-3;
    c.lr_floor = 2e-4;
    c.log_interval = 1;
    c.out_dir = out;
    return c;
}

}  // namespace

TEST_CASE("two hundred smoke steps reduce the loss") {
    TempDir tmp("smoke");
    auto corpus = smoke_corpus();
    auto cfg = smoke_config((tmp.path / "run").string());
    auto res = train(cfg, corpus);
    REQUIRE(res.metrics.size() == 200);
    double head = res.metrics.front().train_loss;
    double tail = 0.0;
    for (size_t i = res.metrics.size() - 10; i < res.metrics.size(); ++i)
        tail += res.metrics[i].train_loss;
    tail /= 10.0;
    INFO("head=" << head << " tail=" << tail);
    REQUIRE(tail < head);
    REQUIRE(fs::exists(res.final_checkpoint));

    // Ponder smoke: the same corpus trains under the latent-thought objective.
    auto pcfg = smoke_config((tmp.path / "ponder").string(), Method::ponder);
    pcfg.total_tokens = 128 * 60;
    auto pres = train(pcfg, corpus);
    REQUIRE(pres.metrics.back().train_loss < pres.metrics.front().train_loss);
}

TEST_CASE("learning rate schedule endpoints") {
    TrainConfig c;
    c.peak_lr = 3e-3;
    c.lr_floor = 3e-4;
    c.warmup_steps = 50;
    c.batch_tokens = 128;
    c.window = 32;
    c.total_tokens = 128 * 400;
    REQUIRE(lr_at(50, c) == 3e-3);
    REQUIRE(lr_at(400, c) == Catch::Approx(3e-4).margin(1e-12));
    REQUIRE(lr_at(1, c) == Catch::Approx(3e-3 / 50).margin(1e-12));
    REQUIRE(lr_at(225, c) == Catch::Approx(0.5 * (3e-3 + 3e-4)).margin(1e-9));
}

TEST_CASE("checkpoint save/load round trip is bitwise and idempotent") {
    TempDir tmp("ckpt");
    auto cfg = smoke_config((tmp.path / "run").string());
    auto model = TransformerModel::init_params(cfg.model, 5);
    AdamW opt;
    opt.attach(model.params());
    opt.first_moments()[2][3] = 0.25f;
    TrainState st;
    st.step = 17;
    st.tokens_seen = 1234;
    st.k_rng_state[0] = 99;

    const std::string p1 = (tmp.path / "a.plm2").string();
    const std::string p2 = (tmp.path / "b.plm2").string();
    save_checkpoint(p1, model, opt, st, cfg);
    auto loaded = load_checkpoint(p1);
    REQUIRE(loaded.state.step == 17);
    REQUIRE(loaded.state.tokens_seen == 1234);
    REQUIRE(loaded.state.k_rng_state[0] == 99);
    REQUIRE(loaded.optimizer.first_moments()[2][3] == 0.25f);
    for (size_t i = 0; i < model.params().size(); ++i) {
        const auto& a = model.params()[i].tensor;
        const auto& b = loaded.model.params()[i].tensor;
        REQUIRE(std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0);
    }
    save_checkpoint(p2, loaded.model, loaded.optimizer, loaded.state, loaded.config);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(s1 == s2);

    // Corrupted magic names offset 0.
    {
        std::fstream f(p1, std::ios::in | std::ios::out | std::ios::binary);
        f.put('Z');
    }
    try {
        load_checkpoint(p1);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        REQUIRE(std::string(e.what()).find("offset 0") != std::string::npos);
    }
}

TEST_CASE("resume reproduces the uninterrupted run bitwise") {
    TempDir tmp("resume");
    auto corpus = smoke_corpus();

    auto full_cfg = smoke_config((tmp.path / "full").string());
    full_cfg.total_tokens = 128 * 30;
    full_cfg.warmup_steps = 5;
    auto full = train(full_cfg, corpus);

    auto part_cfg = smoke_config((tmp.path / "part").string());
    part_cfg.total_tokens = 128 * 30;
    part_cfg.warmup_steps = 5;
    part_cfg.ckpt_interval = 20;
    auto part = train(part_cfg, corpus);
    const std::string mid = part_cfg.out_dir + "/ckpt-step-20.plm2";
    REQUIRE(fs::exists(mid));

    auto resumed_cfg = part_cfg;
    resumed_cfg.out_dir = (tmp.path / "resumed").string();
    // Resume config must match the checkpoint's; out_dir is not serialized.
    auto resumed = train(resumed_cfg, corpus, mid);

    REQUIRE(resumed.metrics.size() == 10);
    for (size_t i = 0; i < 10; ++i) {
        const auto& r = resumed.metrics[i];
        const auto& f = full.metrics[20 + i];
        REQUIRE(r.step == f.step);
        REQUIRE(r.train_loss == f.train_loss);
        REQUIRE(r.lr == f.lr);
        REQUIRE(r.tokens_seen == f.tokens_seen);
    }
}

TEST_CASE("fixed seed and threads reproduce the metrics stream bitwise") {
    TempDir tmp("det");
    auto corpus = smoke_corpus();
    auto run = [&](const std::string& name) {
        auto cfg = smoke_config((tmp.path / name).string(), Method::ponder);
        cfg.total_tokens = 128 * 25;
        cfg.warmup_steps = 5;
        return train(cfg, corpus);
    };
    auto a = run("a");
    auto b = run("b");
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i) {
        REQUIRE(a.metrics[i].train_loss == b.metrics[i].train_loss);
        REQUIRE(a.metrics[i].lr == b.metrics[i].lr);
        REQUIRE(a.metrics[i].tokens_seen == b.metrics[i].tokens_seen);
    }
}

TEST_CASE("non-finite loss aborts with the last good checkpoint path") {
    TempDir tmp("nan");
    auto corpus = smoke_corpus();
    auto cfg = smoke_config((tmp.path / "run").string());
    cfg.peak_lr = 1e9;  // forces an overflow within a few steps
    cfg.warmup_steps = 1;
    cfg.total_tokens = 128 * 50;
    try {
        train(cfg, corpus);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("last good checkpoint") != std::string::npos);
        const auto pos = msg.find(": ");
        const std::string path = msg.substr(msg.rfind(": ") + 2);
        REQUIRE(fs::exists(path));
    }
}

TEST_CASE("continual pretraining resets counters and works as a no-op at lr zero") {
    TempDir tmp("cpt");
    auto corpus = smoke_corpus();
    auto base_cfg = smoke_config((tmp.path / "base").string());
    base_cfg.total_tokens = 128 * 40;
    base_cfg.warmup_steps = 5;
    auto base = train(base_cfg, corpus);

    // lr = 0: every logged loss equals the frozen base model's loss on that
    // batch, i.e. pure evaluation of the base checkpoint.
    auto cpt_cfg = base_cfg;
    cpt_cfg.out_dir = (tmp.path / "cpt0").string();
    cpt_cfg.peak_lr = 0.0;
    cpt_cfg.lr_floor = 0.0;
    cpt_cfg.total_tokens = 128 * 8;
    cpt_cfg.warmup_steps = 2;
    auto cpt = continual_pretrain(base.final_checkpoint, cpt_cfg, corpus);
    REQUIRE(cpt.metrics.front().tokens_seen == 128);  // counting restarts at zero

    auto loaded = load_checkpoint(base.final_checkpoint);
    BatchStream stream(corpus, cpt_cfg.batch_windows(), cpt_cfg.window, cpt_cfg.seed);
    for (size_t i = 0; i < cpt.metrics.size(); ++i) {
        Batch batch = stream.next();
        const float direct = vanilla_step(loaded.model, batch.tokens, batch.batch, batch.window);
        REQUIRE(cpt.metrics[i].train_loss == direct);
    }

    // Method switch: ponder CPT from a vanilla base trains and logs.
    auto pcfg = base_cfg;
    pcfg.method = Method::ponder;
    pcfg.out_dir = (tmp.path / "cpt-ponder").string();
    pcfg.total_tokens = 128 * 6;
    pcfg.warmup_steps = 2;
    auto pres = continual_pretrain(base.final_checkpoint, pcfg, corpus);
    REQUIRE(pres.metrics.size() == 6);
    for (const auto& row : pres.metrics) REQUIRE(std::isfinite(row.train_loss));

    // Non-vanilla base is rejected.
    REQUIRE_THROWS_AS(continual_pretrain(pres.final_checkpoint, pcfg, corpus), ConfigError);
}

TEST_CASE("config validation names the offending key") {
    auto cfg = smoke_config("unused");
    cfg.batch_tokens = 100;  // not a multiple of window 32
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("train.batch_tokens") != std::string::npos);
    }
    cfg = smoke_config("unused");
    cfg.warmup_steps = 1000;
    try {
        cfg.validate();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("train.warmup_steps") != std::string::npos);
    }
}
