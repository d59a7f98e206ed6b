#pragma once

#include <string>
#include <vector>

#include "matquant/rng.hpp"
#include "matquant/tensor.hpp"

namespace matquant {

// Byte corpus remapped to dense symbol ids (sorted by byte value), split
// into a train prefix and a held-out eval suffix.
struct Corpus {
    std::vector<int> tokens;
    int n_symbols = 0;
    Index train_end = 0;

    Index size() const { return static_cast<Index>(tokens.size()); }
};

// Second-order Markov text over a small alphabet; deterministic in the seed.
// The repository ships the seed-42 output so losses are comparable across
// runs; `gen-corpus` regenerates it.
std::string generate_markov_text(uint64_t seed, size_t n_bytes);

Corpus corpus_from_bytes(const std::string& bytes, double train_fraction = 0.9);
Corpus load_corpus(const std::string& path, double train_fraction = 0.9);

struct Batch {
    std::vector<int> inputs;   // batch*seq token ids
    std::vector<int> targets;  // next-token ids, same length
    Index batch = 0;
    Index seq = 0;
};

// Random training windows.
Batch sample_batch(const Corpus& corpus, Index batch, Index seq, Rng& rng);

// Evenly spaced windows over the eval split; a pure function of the
// arguments so separate processes reproduce the same eval set.
std::vector<Batch> eval_batches(const Corpus& corpus, Index batch, Index seq, int n_batches);

}  // namespace matquant
