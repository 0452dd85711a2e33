#include "oracles.hpp"

#include "sida/sparsity_probe.hpp"

#include <doctest.h>

#include <map>
#include <set>

using namespace sida;

namespace {

std::vector<Sequence> random_probe_set(std::size_t count, std::size_t L, std::size_t vocab, Rng& rng) {
    std::vector<Sequence> out;
    for (std::size_t s = 0; s < count; ++s) {
        Sequence seq(L);
        for (auto& t : seq) t = static_cast<TokenId>(1 + rng.uniform_index(vocab - 1));
        out.push_back(seq);
    }
    return out;
}

const std::vector<double> kGrid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

}  // namespace

TEST_CASE("expected change probability examples") {
    for (std::size_t L : {2u, 5u, 8u, 64u})
        for (double p : kGrid) CHECK(expected_change_prob(L, 0, p) == 0.0);
    CHECK(expected_change_prob(5, 1, 0.4) == doctest::Approx(0.5).epsilon(1e-15));
    for (std::size_t L : {2u, 5u, 64u})
        for (double p : kGrid)
            if (corruption_count(L, p) >= 1) CHECK(expected_change_prob(L, L - 1, p) == 1.0);
    CHECK(corruption_count(10, 0.3) == 3);  // 0.3 * 10 is 2.9999999999999996 in binary
    CHECK(corruption_count(64, 0.1) == 6);
    CHECK_THROWS_AS(expected_change_prob(5, 5, 0.4), ContractViolation);
    CHECK_THROWS_AS(expected_change_prob(5, 1, 0.0), ContractViolation);
    CHECK_THROWS_AS(expected_change_prob(5, 1, 1.5), ContractViolation);
}

TEST_CASE("expected change probability matches counting oracles") {
    // closed form via exact binomials
    for (int L : {8, 64})
        for (int c : {0, 1, 2, 4})
            for (double p : kGrid) {
                const int m = static_cast<int>(corruption_count(static_cast<std::size_t>(L), p));
                const long double num = test_oracles::binomial(L - 1 - c, m), den = test_oracles::binomial(L - 1, m);
                const double expected = static_cast<double>(1.0L - num / den);
                CHECK(expected_change_prob(static_cast<std::size_t>(L), static_cast<std::size_t>(c), p) ==
                      doctest::Approx(expected).epsilon(1e-12));
            }
    // exhaustive subset enumeration for small L
    for (int L = 2; L <= 13; ++L)
        for (int c = 0; c < L; ++c)
            for (double p : kGrid) {
                const int m = static_cast<int>(corruption_count(static_cast<std::size_t>(L), p));
                if (m > L - 1) continue;
                CHECK(expected_change_prob(static_cast<std::size_t>(L), static_cast<std::size_t>(c), p) ==
                      doctest::Approx(test_oracles::subset_hit_fraction(L - 1, c, m)).epsilon(1e-12));
            }
}

TEST_CASE("expected change probability is monotone in c and p") {
    for (std::size_t L : {8u, 17u, 64u}) {
        for (double p : kGrid)
            for (std::size_t c = 1; c < L; ++c) CHECK(expected_change_prob(L, c, p) >= expected_change_prob(L, c - 1, p));
        for (std::size_t c = 0; c < L; ++c)
            for (std::size_t k = 1; k < kGrid.size(); ++k)
                CHECK(expected_change_prob(L, c, kGrid[k]) >= expected_change_prob(L, c, kGrid[k - 1]));
    }
}

TEST_CASE("token corruption contract") {
    Rng rng(1);
    const Sequence seq{3, 4, 5, 6, 7, 8, 9, 10};
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t i = rng.uniform_index(8);
        const double p = kGrid[rng.uniform_index(kGrid.size())];
        const Sequence out = corrupt_tokens(seq, i, p, 12, rng);
        std::size_t changed = 0;
        for (std::size_t k = 0; k < 8; ++k)
            if (out[k] != seq[k]) {
                ++changed;
                CHECK(out[k] != seq[i]);
                CHECK(out[k] >= 1);
                CHECK(out[k] < 12);
            }
        CHECK(out[i] == seq[i]);
        CHECK(changed == corruption_count(8, p));
    }
    // floor(pL) = L-1 changes every other position
    const Sequence all = corrupt_tokens(seq, 2, 7.0 / 8.0, 12, rng);
    for (std::size_t k = 0; k < 8; ++k) CHECK((all[k] != seq[k]) == (k != 2));

    CHECK_THROWS_AS(corrupt_tokens(Sequence{1}, 0, 0.5, 10, rng), ContractViolation);
    CHECK_THROWS_AS(corrupt_tokens(seq, 0, 0.5, 2, rng), ContractViolation);
    // ids 1 and 2 only: a replacement differing from both does not exist
    CHECK_THROWS_AS(corrupt_tokens(Sequence{1, 2, 1, 2}, 0, 0.5, 3, rng), ContractViolation);
}

TEST_CASE("token corruption picks subsets uniformly") {
    // L=5, i=0, m=2: the 6 subsets of {1,2,3,4}
    Rng rng(2);
    const Sequence seq{1, 2, 3, 4, 5};
    std::map<unsigned, int> counts;
    const int draws = 10000;
    for (int t = 0; t < draws; ++t) {
        const Sequence out = corrupt_tokens(seq, 0, 0.4, 9, rng);
        unsigned mask = 0;
        for (unsigned k = 1; k < 5; ++k)
            if (out[k] != seq[k]) mask |= 1u << k;
        ++counts[mask];
    }
    REQUIRE(counts.size() == 6);
    double chi2 = 0.0;
    const double expected = draws / 6.0;
    for (const auto& [mask, n] : counts) chi2 += (n - expected) * (n - expected) / expected;
    // 5 degrees of freedom, 0.1% critical value
    CHECK(chi2 < 20.52);
}

TEST_CASE("position corruption contract") {
    Rng rng(3);
    const Sequence seq{11, 12, 13, 14, 15, 16, 17, 18, 19, 20};
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t i = rng.uniform_index(10);
        const double p = 0.2 + 0.1 * static_cast<double>(rng.uniform_index(8));
        const auto r = corrupt_positions(seq, i, p, rng);
        REQUIRE(r.sequence.has_value());
        const Sequence& out = *r.sequence;
        CHECK(out[i] == seq[i]);
        std::multiset<TokenId> a(seq.begin(), seq.end()), b(out.begin(), out.end());
        CHECK(a == b);
        std::size_t moved = 0;
        for (std::size_t k = 0; k < 10; ++k) moved += out[k] != seq[k];
        // all tokens distinct, so every chosen position is displaced
        CHECK(moved == corruption_count(10, p));
    }
    const Sequence flat{5, 5, 5, 5, 5, 7};
    const auto skipped = corrupt_positions(flat, 5, 0.5, rng);
    CHECK_FALSE(skipped.sequence.has_value());
    CHECK_THROWS_AS(corrupt_positions(seq, 0, 0.1, rng), ContractViolation);
}

TEST_CASE("critical set model") {
    const CriticalSetModel m({{2}, {}, {0, 1}});
    const Sequence s{1, 2, 3};
    CHECK(m.select(s, 1) == m.select(Sequence{9, 2, 9}, 1));
    CHECK(m.select(s, 0) != m.select(Sequence{1, 2, 4}, 0));
    CHECK(m.select(s, 0) == m.select(Sequence{1, 7, 3}, 0));
    CHECK_THROWS_AS(CriticalSetModel(std::vector<std::vector<std::size_t>>{{0}}), ContractViolation);
    Rng rng(4);
    const CriticalSetModel r(10, 3, rng);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(r.critical(i).size() == 3);
        CHECK(std::find(r.critical(i).begin(), r.critical(i).end(), i) == r.critical(i).end());
    }
}

TEST_CASE("monte carlo change rate matches the closed form") {
    Rng rng(5);
    for (std::size_t L : {8u, 64u})
        for (std::size_t c : {0u, 1u, 2u, 4u}) {
            const CriticalSetModel model(L, c, rng);
            const auto probe = random_probe_set(4, L, 50, rng);
            for (double p : kGrid) {
                const std::size_t i = rng.uniform_index(L);
                const std::size_t trials = 1500;
                const auto est = measure_p_hat(model, probe, i, p, trials, CorruptionMode::Token, 50, rng);
                const double P = expected_change_prob(L, c, p);
                const double se = std::sqrt(P * (1 - P) / static_cast<double>(trials));
                CHECK(std::abs(est.p_hat - P) <= 3 * se + 1e-12);
            }
        }
}

TEST_CASE("estimate_c inverts the closed form") {
    for (std::size_t L : {8u, 64u})
        for (std::size_t c = 0; c < (L == 8 ? 8u : 12u); ++c) {
            std::vector<double> curve;
            for (double p : kGrid) curve.push_back(expected_change_prob(L, c, p));
            CHECK(estimate_c(kGrid, curve, L) == c);
        }
    CHECK(estimate_c(kGrid, std::vector<double>(9, 0.0), 64) == 0);
    // curves for c = 1 and c = 2 coincide at L = 3 when m >= 2: the tie goes to 1
    CHECK(estimate_c({0.9, 1.0}, {1.0, 1.0}, 3) == 1);
    CHECK_THROWS_AS(estimate_c({0.5}, {0.5}, 8), ContractViolation);
}

TEST_CASE("probe recovers two planted critical tokens") {
    Rng rng(6);
    const std::size_t L = 16;
    const CriticalSetModel model(L, 2, rng);
    const auto probe = random_probe_set(8, L, 40, rng);
    ProbeConfig cfg;
    cfg.L = L;
    cfg.positions = L;
    cfg.trials = 400;
    cfg.seed = 7;
    const auto report = run_sparsity_probe(model, probe, 40, cfg);
    for (std::size_t c : report.c_hat) CHECK((c >= 1 && c <= 3));
    CHECK(report.c_hat_of_mean == 2);
    const auto j = probe_report_to_json(report);
    CHECK(j.at("c_hat").size() == L);
}

TEST_CASE("probing a model") {
    MoEConfig cfg;
    cfg.vocab_size = 20;
    cfg.d_model = 8;
    cfg.num_experts = 4;
    cfg.expert_hidden = 8;
    cfg.max_seq_len = 8;
    Rng rng(8);
    const MoEModel model(cfg, rng);
    const ModelSelector sel(model, 0);
    const auto probe = random_probe_set(10, 8, 20, rng);
    CHECK_THROWS_AS(measure_p_hat(sel, probe, 0, 0.5, 0, CorruptionMode::Token, 20, rng), ContractViolation);
    CHECK_THROWS_AS(ModelSelector(model, 2), ContractViolation);

    ProbeConfig pc;
    pc.L = 8;
    pc.positions = 8;
    pc.trials = 60;
    pc.p_grid = {0.25, 0.5, 0.75};
    pc.mode = CorruptionMode::Position;
    const auto report = run_sparsity_probe(sel, probe, 20, pc);
    // averaged over positions the change rate grows with p
    for (std::size_t k = 1; k < report.mean_p_hat.size(); ++k) CHECK(report.mean_p_hat[k] >= report.mean_p_hat[k - 1] - 0.02);
    for (std::size_t c : report.c_hat) CHECK(c <= 7);
}

TEST_CASE("fit length") {
    CHECK(fit_length({4, 5}, 4) == Sequence{4, 5, 0, 0});
    CHECK(fit_length({4, 5, 6}, 2) == Sequence{4, 5});
}
