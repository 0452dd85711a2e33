#pragma once

// Synthetic labeled corpus with planted routing structure.
//
// Token 0 is reserved for padding. Tokens 1..vocab-1 are dealt round-robin
// (after a seeded shuffle) into `num_latent` groups, one group per latent
// expert. Every position of a sequence draws a latent expert; with
// probability beta the emitted token comes from that expert's group,
// otherwise from the whole vocabulary. Token frequencies are Zipf-like both
// within a group and globally. A sequence leans towards one dominant class
// (latent experts map to classes by `latent mod num_classes`) and its label
// is the majority class over its latent experts.

#include "sida/routing.hpp"
#include "sida/rng.hpp"

#include <nlohmann/json.hpp>

namespace sida {

inline constexpr TokenId kPadToken = 0;

struct CorpusSpec {
    std::size_t vocab_size = 512;
    std::size_t num_sequences = 2000;
    std::size_t min_length = 8;
    std::size_t max_length = 64;
    std::size_t num_classes = 2;
    std::size_t num_latent = 32;
    double beta = 0.9;
    double zipf_exponent = 1.0;
    double class_purity = 0.7;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Corpus {
    CorpusSpec spec;
    std::vector<Sequence> sequences;
    std::vector<std::size_t> labels;
    std::vector<std::vector<std::size_t>> latents;  // latent expert per position
    std::vector<std::size_t> token_group;           // group of each token id; token 0 maps to num_latent

    /// Slice [begin, end) as a new corpus (same spec).
    Corpus slice(std::size_t begin, std::size_t end) const;
};

Corpus generate_corpus(const CorpusSpec& spec);

/// Consecutive batches of `batch_size` sequences, ids starting at `first_id`.
std::vector<SequenceBatch> make_batches(const Corpus& corpus, std::size_t batch_size, std::uint64_t first_id = 0);

nlohmann::json corpus_spec_to_json(const CorpusSpec& spec);
CorpusSpec corpus_spec_from_json(const nlohmann::json& j, CorpusSpec defaults = {});
nlohmann::json corpus_to_json(const Corpus& corpus);
Corpus corpus_from_json(const nlohmann::json& j);

}  // namespace sida
