#include "sida/sparsity_probe.hpp"

#include "sida/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sida {
namespace {

constexpr std::size_t kMaxShuffleTries = 100;

// Positions other than i, m of them, uniformly.
std::vector<std::size_t> pick_others(std::size_t L, std::size_t i, std::size_t m, Rng& rng) {
    auto picks = rng.sample_without_replacement(L - 1, m);
    for (auto& p : picks)
        if (p >= i) ++p;
    return picks;
}

std::uint64_t fnv(std::uint64_t h, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xff;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

std::size_t corruption_count(std::size_t L, double p) {
    require(p > 0.0 && p <= 1.0, "corruption fraction p must be in (0, 1]");
    return static_cast<std::size_t>(std::floor(p * static_cast<double>(L) + 1e-9));
}

double expected_change_prob(std::size_t L, std::size_t c, double p) {
    require(L >= 1, "expected_change_prob: L must be >= 1");
    require(c <= L - 1, "expected_change_prob: c must be in [0, L-1]");
    const std::size_t m = corruption_count(L, p);
    const std::size_t others = L - 1;
    if (c == 0) return 0.0;
    if (m > others - c) return 1.0;
    // C(others-c, m) / C(others, m) = prod_{j<m} (others-c-j) / (others-j)
    double ratio = 1.0;
    for (std::size_t j = 0; j < m; ++j) ratio *= static_cast<double>(others - c - j) / static_cast<double>(others - j);
    return 1.0 - ratio;
}

Sequence corrupt_tokens(const Sequence& seq, std::size_t i, double p, std::size_t vocab_size, Rng& rng) {
    const std::size_t L = seq.size();
    require(L >= 2, "corrupt_tokens: need L >= 2");
    require(i < L, "corrupt_tokens: position out of range");
    require(vocab_size >= 3, "corrupt_tokens: vocab_size must be >= 3");
    const std::size_t m = corruption_count(L, p);
    require(m <= L - 1, "corrupt_tokens: floor(pL) exceeds L-1");
    Sequence out = seq;
    for (std::size_t pos : pick_others(L, i, m, rng)) {
        const TokenId orig = seq[pos], anchor = seq[i];
        std::size_t allowed = vocab_size - 1;  // ids 1..vocab-1
        if (orig != kPadToken && orig < vocab_size) --allowed;
        if (anchor != kPadToken && anchor < vocab_size && anchor != orig) --allowed;
        if (allowed == 0) throw ContractViolation("corrupt_tokens: vocabulary too small for a distinct replacement");
        TokenId t;
        do {
            t = static_cast<TokenId>(1 + rng.uniform_index(vocab_size - 1));
        } while (t == orig || t == anchor);
        out[pos] = t;
    }
    return out;
}

PositionCorruption corrupt_positions(const Sequence& seq, std::size_t i, double p, Rng& rng) {
    const std::size_t L = seq.size();
    require(i < L, "corrupt_positions: position out of range");
    const std::size_t m = corruption_count(L, p);
    require(m >= 2, "corrupt_positions: floor(pL) must be >= 2");
    require(m <= L - 1, "corrupt_positions: floor(pL) exceeds L-1");
    const auto picks = pick_others(L, i, m, rng);
    std::vector<TokenId> tokens;
    for (std::size_t pos : picks) tokens.push_back(seq[pos]);
    PositionCorruption out;
    if (std::all_of(tokens.begin(), tokens.end(), [&](TokenId t) { return t == tokens.front(); })) return out;
    std::vector<TokenId> shuffled = tokens;
    for (out.tries = 1; out.tries <= kMaxShuffleTries; ++out.tries) {
        rng.shuffle(shuffled);
        bool displaced = true;
        for (std::size_t k = 0; k < m && displaced; ++k) displaced = shuffled[k] != tokens[k];
        if (displaced) {
            Sequence s = seq;
            for (std::size_t k = 0; k < m; ++k) s[picks[k]] = shuffled[k];
            out.sequence = std::move(s);
            return out;
        }
    }
    out.tries = kMaxShuffleTries;
    return out;
}

Sequence fit_length(const Sequence& seq, std::size_t L) {
    Sequence out(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(std::min(L, seq.size())));
    out.resize(L, kPadToken);
    return out;
}

ModelSelector::ModelSelector(const MoEModel& model, std::size_t layer) : model_(model), layer_(layer) {
    require(layer < model.config().num_layers, "ModelSelector: layer out of range");
}

std::uint64_t ModelSelector::select(const Sequence& seq, std::size_t i) const {
    require(i < seq.size(), "ModelSelector: position out of range");
    SequenceBatch b;
    b.sequences = {seq};
    return model_.forward(b).trace.selections.top1(layer_, i);
}

CriticalSetModel::CriticalSetModel(std::size_t L, std::size_t c, Rng& rng) {
    require(L >= 1 && c <= L - 1, "CriticalSetModel: need c in [0, L-1]");
    for (std::size_t i = 0; i < L; ++i) {
        auto set = pick_others(L, i, c, rng);
        std::sort(set.begin(), set.end());
        sets_.push_back(std::move(set));
    }
}

CriticalSetModel::CriticalSetModel(std::vector<std::vector<std::size_t>> critical_sets) : sets_(std::move(critical_sets)) {
    for (std::size_t i = 0; i < sets_.size(); ++i)
        for (std::size_t j : sets_[i]) require(j < sets_.size() && j != i, "CriticalSetModel: bad critical position");
}

std::uint64_t CriticalSetModel::select(const Sequence& seq, std::size_t i) const {
    require(seq.size() == sets_.size() && i < seq.size(), "CriticalSetModel: sequence length mismatch");
    std::uint64_t h = fnv(1469598103934665603ull, seq[i]);
    for (std::size_t j : sets_[i]) h = fnv(fnv(h, j), seq[j]);
    return h;
}

std::string to_string(CorruptionMode m) { return m == CorruptionMode::Token ? "token" : "position"; }

CorruptionMode corruption_mode_from_string(const std::string& s) {
    if (s == "token") return CorruptionMode::Token;
    if (s == "position") return CorruptionMode::Position;
    throw ContractViolation("unknown corruption mode '" + s + "' (expected token or position)");
}

ChangeEstimate measure_p_hat(const ExpertSelector& selector, const std::vector<Sequence>& probe_set, std::size_t i, double p,
                             std::size_t trials, CorruptionMode mode, std::size_t vocab_size, Rng& rng) {
    require(trials >= 1, "measure_p_hat: trials must be >= 1");
    require(!probe_set.empty(), "measure_p_hat: empty probe set");
    ChangeEstimate est;
    std::vector<std::uint64_t> base(probe_set.size());
    std::vector<bool> have(probe_set.size(), false);
    for (std::size_t t = 0; t < trials; ++t) {
        const std::size_t s = t % probe_set.size();
        const Sequence& seq = probe_set[s];
        Sequence corrupted;
        if (mode == CorruptionMode::Token) {
            corrupted = corrupt_tokens(seq, i, p, vocab_size, rng);
        } else {
            auto r = corrupt_positions(seq, i, p, rng);
            if (!r.sequence) {
                ++est.skipped;
                continue;
            }
            corrupted = std::move(*r.sequence);
        }
        if (!have[s]) {
            base[s] = selector.select(seq, i);
            have[s] = true;
        }
        ++est.used;
        if (selector.select(corrupted, i) != base[s]) ++est.changes;
    }
    est.p_hat = est.used ? static_cast<double>(est.changes) / static_cast<double>(est.used) : 0.0;
    return est;
}

std::size_t estimate_c(const std::vector<double>& p_grid, const std::vector<double>& p_hat, std::size_t L) {
    require(p_grid.size() >= 2, "estimate_c: need at least 2 grid points");
    require(p_grid.size() == p_hat.size(), "estimate_c: grid and estimates differ in length");
    require(L >= 1, "estimate_c: L must be >= 1");
    std::size_t best = 0;
    double best_err = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < L; ++c) {
        double err = 0.0;
        for (std::size_t k = 0; k < p_grid.size(); ++k) {
            const double d = expected_change_prob(L, c, p_grid[k]) - p_hat[k];
            err += d * d;
        }
        if (err < best_err) {
            best_err = err;
            best = c;
        }
    }
    return best;
}

ProbeReport run_sparsity_probe(const ExpertSelector& selector, const std::vector<Sequence>& probe_set, std::size_t vocab_size,
                               const ProbeConfig& config) {
    require(config.positions >= 1 && config.positions <= config.L, "run_sparsity_probe: positions must be in [1, L]");
    for (const auto& s : probe_set) require(s.size() == config.L, "run_sparsity_probe: probe sequences must have length L");
    Rng rng(config.seed);
    ProbeReport r;
    r.config = config;
    r.positions = rng.sample_without_replacement(config.L, config.positions);
    r.mean_p_hat.assign(config.p_grid.size(), 0.0);
    for (std::size_t i : r.positions) {
        std::vector<double> row;
        for (double p : config.p_grid) {
            const auto est = measure_p_hat(selector, probe_set, i, p, config.trials, config.mode, vocab_size, rng);
            r.skipped += est.skipped;
            row.push_back(est.p_hat);
        }
        for (std::size_t k = 0; k < row.size(); ++k) r.mean_p_hat[k] += row[k] / static_cast<double>(config.positions);
        r.c_hat.push_back(estimate_c(config.p_grid, row, config.L));
        r.p_hat.push_back(std::move(row));
    }
    r.c_hat_of_mean = estimate_c(config.p_grid, r.mean_p_hat, config.L);
    return r;
}

nlohmann::json probe_report_to_json(const ProbeReport& r) {
    return {{"L", r.config.L},
            {"mode", to_string(r.config.mode)},
            {"trials", r.config.trials},
            {"seed", r.config.seed},
            {"p_grid", r.config.p_grid},
            {"positions", r.positions},
            {"mean_p_hat", r.mean_p_hat},
            {"p_hat", r.p_hat},
            {"c_hat", r.c_hat},
            {"c_hat_of_mean", r.c_hat_of_mean},
            {"skipped", r.skipped}};
}

}  // namespace sida
