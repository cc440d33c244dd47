#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "plm2/common.hpp"
#include "plm2/rng.hpp"

namespace plm2 {

// ===========================================================================
// Corpus ingestion (byte- or char-level), deterministic shuffled batching
// into fixed-length windows, and the on-disk token cache.
// ===========================================================================

enum class VocabMode { bytes, chars };

inline const char* to_string(VocabMode v) { return v == VocabMode::bytes ? "bytes" : "chars"; }

constexpr int32_t kDocSeparatorByte = 0;  // inserted between documents

struct Corpus {
    VocabMode mode = VocabMode::bytes;
    int vocab_size = 256;
    std::vector<int32_t> tokens;
    std::vector<char> char_vocab;  // char mode: id -> character (separator = last id)
    std::vector<std::string> sources;

    size_t size() const { return tokens.size(); }
};

namespace detail {

inline std::vector<std::string> expand_paths(std::span<const std::string> paths) {
    namespace fs = std::filesystem;
    std::vector<std::string> files;
    for (const auto& p : paths) {
        std::error_code ec;
        if (fs::is_directory(p, ec)) {
            std::vector<std::string> in_dir;
            for (const auto& e : fs::directory_iterator(p, ec)) {
                if (e.is_regular_file()) in_dir.push_back(e.path().string());
            }
            std::sort(in_dir.begin(), in_dir.end());
            files.insert(files.end(), in_dir.begin(), in_dir.end());
        } else {
            files.push_back(p);
        }
    }
    return files;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read file: " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path);
    return data;
}

}  // namespace detail

// Byte mode maps byte -> id directly; documents are joined with a 0x00
// separator and document NUL bytes are dropped so the separator stays
// unambiguous. Char mode builds a sorted character vocabulary (ids 0..C-1)
// and reserves the final id C for the separator.
inline Corpus ingest(std::span<const std::string> paths, VocabMode mode = VocabMode::bytes) {
    const auto files = detail::expand_paths(paths);
    if (files.empty()) throw ValueError("ingest: no input files");
    std::vector<std::string> docs;
    docs.reserve(files.size());
    for (const auto& f : files) docs.push_back(detail::read_file(f));

    Corpus c;
    c.mode = mode;
    c.sources = files;
    if (mode == VocabMode::bytes) {
        c.vocab_size = 256;
        for (size_t i = 0; i < docs.size(); ++i) {
            if (i > 0) c.tokens.push_back(kDocSeparatorByte);
            for (unsigned char b : docs[i]) {
                if (b != 0) c.tokens.push_back(static_cast<int32_t>(b));
            }
        }
    } else {
        std::map<char, int32_t> vocab;
        for (const auto& d : docs)
            for (char ch : d) vocab.emplace(ch, 0);
        int32_t next = 0;
        for (auto& [ch, id] : vocab) {
            id = next++;
            c.char_vocab.push_back(ch);
        }
        c.vocab_size = next + 1;  // +1: separator
        const int32_t sep = next;
        for (size_t i = 0; i < docs.size(); ++i) {
            if (i > 0) c.tokens.push_back(sep);
            for (char ch : docs[i]) c.tokens.push_back(vocab[ch]);
        }
    }
    if (c.tokens.empty()) throw ValueError("ingest: empty corpus");
    return c;
}

inline Corpus ingest_text(const std::string& text, VocabMode mode = VocabMode::bytes) {
    namespace fs = std::filesystem;
    const auto tmp = fs::temp_directory_path() / ("plm2-ingest-" + std::to_string(fnv1a64(text.data(), std::min<size_t>(text.size(), 64))) + ".txt");
    {
        std::ofstream out(tmp, std::ios::binary);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
    }
    std::vector<std::string> paths{tmp.string()};
    Corpus c = ingest(paths, mode);
    std::error_code ec;
    fs::remove(tmp, ec);
    return c;
}

inline std::string detokenize(const Corpus& c, std::span<const int32_t> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int32_t id : ids) {
        if (c.mode == VocabMode::bytes) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        } else {
            if (id >= 0 && id < static_cast<int32_t>(c.char_vocab.size()))
                out.push_back(c.char_vocab[static_cast<size_t>(id)]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Token cache: 8-byte magic "PLM2TOK\0", u32 version, u32 vocab size, then
// the ids as little-endian u16.
// ---------------------------------------------------------------------------

constexpr char kTokenMagic[8] = {'P', 'L', 'M', '2', 'T', 'O', 'K', '\0'};
constexpr uint32_t kTokenCacheVersion = 1;

inline void save_token_cache(const std::string& path, const Corpus& c) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write token cache: " + path);
    out.write(kTokenMagic, 8);
    const uint32_t version = kTokenCacheVersion;
    const uint32_t vocab = static_cast<uint32_t>(c.vocab_size);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&vocab), 4);
    for (int32_t t : c.tokens) {
        const uint16_t v = static_cast<uint16_t>(t);
        out.write(reinterpret_cast<const char*>(&v), 2);
    }
    if (!out) throw IoError("write failed: " + path);
}

inline bool is_token_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return false;
    char magic[8] = {};
    in.read(magic, 8);
    return in && std::memcmp(magic, kTokenMagic, 8) == 0;
}

inline Corpus load_token_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read token cache: " + path);
    char magic[8] = {};
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kTokenMagic, 8) != 0)
        throw FormatError("token cache: bad magic at offset 0: " + path);
    uint32_t version = 0, vocab = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&vocab), 4);
    if (!in || version != kTokenCacheVersion)
        throw FormatError("token cache: unsupported version " + std::to_string(version));
    Corpus c;
    c.mode = vocab == 256 ? VocabMode::bytes : VocabMode::chars;
    c.vocab_size = static_cast<int>(vocab);
    c.sources = {path};
    uint16_t v = 0;
    while (in.read(reinterpret_cast<char*>(&v), 2)) c.tokens.push_back(static_cast<int32_t>(v));
    if (c.tokens.empty()) throw ValueError("token cache: empty corpus");
    return c;
}

// ---------------------------------------------------------------------------
// Deterministic shuffled batching. An epoch partitions the stream into
// non-overlapping (T+1)-token windows (inputs plus shifted targets), shuffles
// them by a permutation fully determined by (seed, epoch), and groups them
// into batches of B windows; the tail that fills neither a window nor a
// batch is dropped.
// ---------------------------------------------------------------------------

struct Batch {
    std::vector<int32_t> tokens;  // B * (T+1)
    int batch = 0;
    int window = 0;
    uint64_t epoch = 0;
    uint64_t index = 0;  // batch index within the epoch
};

class BatchStream {
public:
    BatchStream(const Corpus& corpus, int batch_windows, int window_len, uint64_t seed,
                uint64_t epoch = 0, uint64_t cursor = 0)
        : corpus_(&corpus), B_(batch_windows), T_(window_len), seed_(seed) {
        if (B_ < 1 || T_ < 1) throw ConfigError("batches: batch and window must be positive");
        windows_per_epoch_ = corpus.size() / static_cast<size_t>(T_ + 1);
        if (windows_per_epoch_ < static_cast<size_t>(B_))
            throw CapacityError("corpus of " + std::to_string(corpus.size()) +
                                " tokens is too small for " + std::to_string(B_) + " windows of " +
                                std::to_string(T_ + 1));
        seek(epoch, cursor);
    }

    uint64_t epoch() const { return epoch_; }
    uint64_t cursor() const { return cursor_; }
    size_t windows_per_epoch() const { return windows_per_epoch_; }
    size_t batches_per_epoch() const { return windows_per_epoch_ / static_cast<size_t>(B_); }

    void seek(uint64_t epoch, uint64_t cursor) {
        epoch_ = epoch;
        cursor_ = cursor;
        fill_perm();
    }

    Batch next() {
        if (cursor_ + static_cast<uint64_t>(B_) > windows_per_epoch_) {
            ++epoch_;
            cursor_ = 0;
            fill_perm();
        }
        Batch b;
        b.batch = B_;
        b.window = T_;
        b.epoch = epoch_;
        b.index = cursor_ / static_cast<uint64_t>(B_);
        b.tokens.reserve(static_cast<size_t>(B_) * (T_ + 1));
        for (int i = 0; i < B_; ++i) {
            const uint64_t w = perm_[static_cast<size_t>(cursor_ + i)];
            const size_t off = static_cast<size_t>(w) * (T_ + 1);
            b.tokens.insert(b.tokens.end(), corpus_->tokens.begin() + static_cast<long>(off),
                            corpus_->tokens.begin() + static_cast<long>(off + T_ + 1));
        }
        cursor_ += static_cast<uint64_t>(B_);
        return b;
    }

private:
    void fill_perm() {
        perm_.resize(windows_per_epoch_);
        for (size_t i = 0; i < windows_per_epoch_; ++i) perm_[i] = i;
        Rng rng = Rng(seed_).fork(epoch_ + 0x5eedu);
        for (size_t i = windows_per_epoch_; i > 1; --i) {
            const size_t j = static_cast<size_t>(rng.next_below(i));
            std::swap(perm_[i - 1], perm_[j]);
        }
    }

    const Corpus* corpus_;
    int B_, T_;
    uint64_t seed_;
    uint64_t epoch_ = 0, cursor_ = 0;
    size_t windows_per_epoch_ = 0;
    std::vector<uint64_t> perm_;
};

// ---------------------------------------------------------------------------
// Held-out split (final fraction by position) and window hashing for
// train/eval contamination checks.
// ---------------------------------------------------------------------------

struct CorpusSplit {
    Corpus train;
    Corpus val;
};

inline CorpusSplit split_corpus(const Corpus& c, double val_fraction) {
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
        throw ConfigError("data.val_fraction: must be in (0,1)");
    const size_t cut = static_cast<size_t>(static_cast<double>(c.size()) * (1.0 - val_fraction));
    if (cut == 0 || cut >= c.size()) throw CapacityError("split_corpus: corpus too small to split");
    CorpusSplit s;
    s.train = c;
    s.val = c;
    s.train.tokens.assign(c.tokens.begin(), c.tokens.begin() + static_cast<long>(cut));
    s.val.tokens.assign(c.tokens.begin() + static_cast<long>(cut), c.tokens.end());
    return s;
}

inline std::unordered_set<uint64_t> window_hashes(const Corpus& c, int window_len) {
    std::unordered_set<uint64_t> hashes;
    const size_t stride = static_cast<size_t>(window_len) + 1;
    for (size_t off = 0; off + stride <= c.size(); off += stride)
        hashes.insert(fnv1a64(c.tokens.data() + off, stride * sizeof(int32_t)));
    return hashes;
}

}  // namespace plm2
