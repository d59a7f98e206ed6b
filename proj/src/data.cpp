#include "matquant/data.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>

#include "matquant/errors.hpp"

namespace matquant {

namespace {

constexpr const char* kAlphabet = "abcdefghijklmnopqrstuvwxyz .,\n";

}  // namespace

std::string generate_markov_text(uint64_t seed, size_t n_bytes) {
    const std::string alphabet = kAlphabet;
    const int n = static_cast<int>(alphabet.size());
    constexpr int kPoolSize = 6;
    Rng rng(seed);

    // Each symbol gets a small successor pool, so even a bigram learner
    // makes quick progress; the (prev2, prev1) contexts then narrow the
    // pool further, leaving order-2 structure for the attention path.
    auto sample_distinct = [&rng, n](int k, const std::vector<int>& from) {
        std::vector<int> pool = from.empty() ? std::vector<int>() : from;
        if (pool.empty())
            for (int i = 0; i < n; ++i) pool.push_back(i);
        for (int j = 0; j < k; ++j) {
            size_t pick = static_cast<size_t>(j) +
                          rng.next_below(pool.size() - static_cast<size_t>(j));
            std::swap(pool[static_cast<size_t>(j)], pool[pick]);
        }
        pool.resize(static_cast<size_t>(k));
        return pool;
    };

    std::vector<std::vector<int>> pools(static_cast<size_t>(n));
    for (auto& pool : pools) pool = sample_distinct(kPoolSize, {});

    struct Row {
        std::array<int, 4> succ;
        std::array<double, 4> cum;
        int k;
    };
    std::vector<Row> table(static_cast<size_t>(n * n));
    for (int p2 = 0; p2 < n; ++p2) {
        for (int p1 = 0; p1 < n; ++p1) {
            Row& row = table[static_cast<size_t>(p2 * n + p1)];
            row.k = 2 + static_cast<int>(rng.next_below(3));
            auto picks = sample_distinct(row.k, pools[static_cast<size_t>(p1)]);
            static constexpr std::array<double, 4> profile{0.65, 0.22, 0.09, 0.04};
            double total = 0.0;
            for (int j = 0; j < row.k; ++j) total += profile[static_cast<size_t>(j)];
            double acc = 0.0;
            for (int j = 0; j < row.k; ++j) {
                row.succ[static_cast<size_t>(j)] = picks[static_cast<size_t>(j)];
                acc += profile[static_cast<size_t>(j)] / total;
                row.cum[static_cast<size_t>(j)] = acc;
            }
        }
    }

    std::string out;
    out.reserve(n_bytes);
    int p2 = 0, p1 = 1;
    for (size_t i = 0; i < n_bytes; ++i) {
        const Row& row = table[static_cast<size_t>(p2 * n + p1)];
        double u = rng.uniform();
        int next = row.succ[static_cast<size_t>(row.k - 1)];
        for (int j = 0; j < row.k; ++j) {
            if (u <= row.cum[static_cast<size_t>(j)]) {
                next = row.succ[static_cast<size_t>(j)];
                break;
            }
        }
        out.push_back(alphabet[static_cast<size_t>(next)]);
        p2 = p1;
        p1 = next;
    }
    return out;
}

Corpus corpus_from_bytes(const std::string& bytes, double train_fraction) {
    if (bytes.size() < 1024) throw ContractError("corpus too small to split");
    std::map<unsigned char, int> ids;
    for (unsigned char b : bytes) ids.emplace(b, 0);
    int next = 0;
    for (auto& [b, id] : ids) id = next++;

    Corpus c;
    c.n_symbols = next;
    c.tokens.reserve(bytes.size());
    for (unsigned char b : bytes) c.tokens.push_back(ids.at(b));
    c.train_end = static_cast<Index>(static_cast<double>(bytes.size()) * train_fraction);
    return c;
}

Corpus load_corpus(const std::string& path, double train_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open corpus file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return corpus_from_bytes(bytes, train_fraction);
}

Batch sample_batch(const Corpus& corpus, Index batch, Index seq, Rng& rng) {
    if (corpus.train_end <= seq + 1) throw ContractError("train split shorter than seq_len");
    Batch b;
    b.batch = batch;
    b.seq = seq;
    b.inputs.reserve(static_cast<size_t>(batch * seq));
    b.targets.reserve(static_cast<size_t>(batch * seq));
    for (Index i = 0; i < batch; ++i) {
        Index start = static_cast<Index>(rng.next_below(
            static_cast<uint64_t>(corpus.train_end - seq - 1)));
        for (Index t = 0; t < seq; ++t) {
            b.inputs.push_back(corpus.tokens[static_cast<size_t>(start + t)]);
            b.targets.push_back(corpus.tokens[static_cast<size_t>(start + t + 1)]);
        }
    }
    return b;
}

std::vector<Batch> eval_batches(const Corpus& corpus, Index batch, Index seq, int n_batches) {
    Index lo = corpus.train_end;
    Index span = corpus.size() - lo - seq - 1;
    Index windows = batch * n_batches;
    if (span <= 0 || windows <= 0) throw ContractError("eval split shorter than seq_len");
    Index stride = std::max<Index>(1, span / windows);
    std::vector<Batch> out;
    for (int bi = 0; bi < n_batches; ++bi) {
        Batch b;
        b.batch = batch;
        b.seq = seq;
        for (Index i = 0; i < batch; ++i) {
            Index start = lo + ((static_cast<Index>(bi) * batch + i) * stride) % span;
            for (Index t = 0; t < seq; ++t) {
                b.inputs.push_back(corpus.tokens[static_cast<size_t>(start + t)]);
                b.targets.push_back(corpus.tokens[static_cast<size_t>(start + t + 1)]);
            }
        }
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace matquant
