#pragma once

// Corruption probes for how many other tokens ("critical tokens") decide the
// expert a token is routed to.
//
// With c critical tokens among the L-1 others and m = floor(p L) of those
// others corrupted uniformly at random, the chance that at least one critical
// token is hit is
//     1 - C(L-1-c, m) / C(L-1, m).
// Measuring the empirical change rate over a grid of p and inverting this
// curve estimates c.

#include "sida/moe_model.hpp"
#include "sida/rng.hpp"
#include "sida/routing.hpp"

#include <nlohmann/json.hpp>

#include <optional>

namespace sida {

/// floor(p L), robust to p L landing a hair below an integer.
std::size_t corruption_count(std::size_t L, double p);

/// 1 - C(L-1-c, m) / C(L-1, m) with m = floor(p L); 1 when m > L-1-c.
double expected_change_prob(std::size_t L, std::size_t c, double p);

/// Replaces floor(p L) positions other than i, chosen uniformly, with tokens
/// drawn uniformly from 1..vocab-1 excluding the original and the token at i.
Sequence corrupt_tokens(const Sequence& seq, std::size_t i, double p, std::size_t vocab_size, Rng& rng);

struct PositionCorruption {
    std::optional<Sequence> sequence;  // empty when skipped
    std::size_t tries = 0;
};

/// Permutes the tokens at floor(p L) positions other than i (at least 2),
/// redrawing up to 100 times until none of them keeps its token. Skipped
/// when all chosen tokens are equal or no displacing draw was found.
PositionCorruption corrupt_positions(const Sequence& seq, std::size_t i, double p, Rng& rng);

/// Pads with the pad token or truncates to exactly L tokens.
Sequence fit_length(const Sequence& seq, std::size_t L);

/// Something that assigns token i of a sequence to an expert. Two calls
/// return equal values iff the selection is the same.
class ExpertSelector {
public:
    virtual ~ExpertSelector() = default;
    virtual std::uint64_t select(const Sequence& seq, std::size_t i) const = 0;
};

/// Top-1 router choice of a model at one MoE layer (0 = the first MoE layer,
/// which sits behind one attention layer).
class ModelSelector final : public ExpertSelector {
public:
    ModelSelector(const MoEModel& model, std::size_t layer);
    std::uint64_t select(const Sequence& seq, std::size_t i) const override;

private:
    const MoEModel& model_;
    std::size_t layer_;
};

/// Synthetic selector in which position i depends on its own token and on the
/// tokens at a fixed critical set C_i, and on nothing else. The selection is a
/// 64-bit digest, so any change to those tokens changes it.
class CriticalSetModel final : public ExpertSelector {
public:
    /// Draws |C_i| = c uniformly from [L] - {i} for every i.
    CriticalSetModel(std::size_t L, std::size_t c, Rng& rng);
    explicit CriticalSetModel(std::vector<std::vector<std::size_t>> critical_sets);
    std::uint64_t select(const Sequence& seq, std::size_t i) const override;
    const std::vector<std::size_t>& critical(std::size_t i) const { return sets_.at(i); }

private:
    std::vector<std::vector<std::size_t>> sets_;
};

enum class CorruptionMode { Token, Position };
std::string to_string(CorruptionMode m);
CorruptionMode corruption_mode_from_string(const std::string& s);

struct ChangeEstimate {
    double p_hat = 0.0;      // changes / used
    std::size_t used = 0;    // trials that produced a corrupted sequence
    std::size_t skipped = 0; // position-mode trials that could not displace
    std::size_t changes = 0;
};

/// Runs `trials` corruptions of token i, cycling through `probe_set` (each
/// sequence already of length L), and counts selection changes.
ChangeEstimate measure_p_hat(const ExpertSelector& selector, const std::vector<Sequence>& probe_set, std::size_t i, double p,
                             std::size_t trials, CorruptionMode mode, std::size_t vocab_size, Rng& rng);

/// argmin over integer c in [0, L-1] of the squared error against the
/// expected curve; ties go to the smaller c.
std::size_t estimate_c(const std::vector<double>& p_grid, const std::vector<double>& p_hat, std::size_t L);

struct ProbeConfig {
    std::size_t L = 64;
    std::vector<double> p_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::size_t positions = 100;
    std::size_t trials = 200;  // per (position, p)
    CorruptionMode mode = CorruptionMode::Token;
    std::uint64_t seed = 0;
};

struct ProbeReport {
    ProbeConfig config;
    std::vector<std::size_t> positions;
    std::vector<double> mean_p_hat;                   // per p, averaged over positions
    std::vector<std::vector<double>> p_hat;           // [position][p]
    std::vector<std::size_t> c_hat;                   // per position
    std::size_t c_hat_of_mean = 0;                    // estimate_c on mean_p_hat
    std::size_t skipped = 0;
};

/// Probes `config.positions` positions drawn uniformly without replacement
/// from [L] on one fixed probe set.
ProbeReport run_sparsity_probe(const ExpertSelector& selector, const std::vector<Sequence>& probe_set, std::size_t vocab_size,
                               const ProbeConfig& config);

nlohmann::json probe_report_to_json(const ProbeReport& report);

}  // namespace sida
