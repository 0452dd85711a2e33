#include "grad_helpers.hpp"

#include "sida/corpus.hpp"
#include "sida/moe_model.hpp"

#include <doctest.h>

#include <set>
#include <sstream>

using namespace sida;

namespace {

MoEConfig tiny_config(std::size_t layers = 2, std::size_t experts = 3) {
    MoEConfig c;
    c.vocab_size = 7;
    c.d_model = 4;
    c.num_layers = layers;
    c.num_experts = experts;
    c.expert_hidden = 5;
    c.max_seq_len = 6;
    c.num_classes = 3;
    return c;
}

SequenceBatch batch_of(std::vector<Sequence> seqs, std::uint64_t id = 0) {
    SequenceBatch b;
    b.batch_id = id;
    b.sequences = std::move(seqs);
    return b;
}

Expert constant_expert(std::size_t d, std::size_t h, double out) {
    Expert e;
    e.w1 = Matrix::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(h));
    e.b1 = Matrix::Zero(1, static_cast<Eigen::Index>(h));
    e.w2 = Matrix::Zero(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(d));
    e.b2 = Matrix::Constant(1, static_cast<Eigen::Index>(d), out);
    return e;
}

}  // namespace

TEST_CASE("router_scores examples") {
    RowVector x = RowVector::Random(5);
    const Vector uniform = router_scores(x, Matrix::Zero(5, 4));
    for (int i = 0; i < 4; ++i) CHECK(uniform(i) == doctest::Approx(0.25).epsilon(1e-15));

    Matrix w = Matrix::Zero(3, 2);
    w(0, 0) = 1.0;
    w(0, 1) = -1.0;
    RowVector e1 = RowVector::Zero(3);
    e1(0) = 1.0;
    const Vector p = router_scores(e1, w);
    CHECK(std::abs(p(0) - 0.8808) < 1e-4);
    CHECK(std::abs(p(1) - 0.1192) < 1e-4);

    Rng rng(1);
    Matrix r(5, 6);
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
    const Vector composed = softmax((x * r).transpose());
    CHECK((router_scores(x, r) - composed).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(router_scores(RowVector::Zero(4), r), ContractViolation);
}

TEST_CASE("moe_layer_forward examples") {
    Rng rng(2);
    MoEModel model(tiny_config(1, 4), rng);
    auto& experts = model.blocks[0].experts;
    RowVector x(4);
    x << 0.3, -0.2, 0.5, 1.0;

    const std::vector<ExpertChoice> single{{3, 0.7}};
    const RowVector v = experts[3].forward(x);
    CHECK((moe_layer_forward(x, single, experts) - 0.7 * v).cwiseAbs().maxCoeff() < 1e-15);

    experts[2] = experts[1];
    const std::vector<ExpertChoice> twin{{1, 0.5}, {2, 0.5}};
    CHECK((moe_layer_forward(x, twin, experts) - experts[1].forward(x)).cwiseAbs().maxCoeff() < 1e-15);

    // soft routing over all experts vs. a dense evaluation of every expert
    const Vector alpha = softmax(Vector::Random(4));
    std::vector<ExpertChoice> all;
    RowVector dense = RowVector::Zero(4);
    for (std::size_t i = 0; i < 4; ++i) {
        all.push_back({i, alpha(static_cast<Eigen::Index>(i))});
        const Matrix hidden = ((x * experts[i].w1) + experts[i].b1).cwiseMax(0.0);
        dense += alpha(static_cast<Eigen::Index>(i)) * (hidden * experts[i].w2 + experts[i].b2);
    }
    CHECK((moe_layer_forward(x, all, experts) - dense).cwiseAbs().maxCoeff() < 1e-12);

    std::vector<std::size_t> counts(4, 0);
    moe_layer_forward(x, single, experts, &counts);
    CHECK(counts == std::vector<std::size_t>{0, 0, 0, 1});

    const std::vector<ExpertChoice> bad{{4, 1.0}};
    CHECK_THROWS_AS(moe_layer_forward(x, bad, experts), ContractViolation);
    CHECK_THROWS_AS(moe_layer_forward(x, std::vector<ExpertChoice>{}, experts), ContractViolation);
}

TEST_CASE("model_forward router and external modes") {
    Rng rng(3);
    SUBCASE("single expert: modes agree") {
        MoEModel model(tiny_config(1, 1), rng);
        const auto batch = batch_of({{1, 2, 3}, {4, 5}});
        ExpertHashTable table{0, RoutingGrid(1, 5)};
        for (std::size_t t = 0; t < 5; ++t) table.entries.at(0, t) = {{0, 1.0}};
        const auto a = model.forward(batch);
        const auto b = model.forward(batch, table);
        for (std::size_t s = 0; s < 2; ++s) CHECK((a.logits[s] - b.logits[s]).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("external mode replaying the router's trace is exact") {
        MoEModel model(tiny_config(2, 3), rng);
        const auto batch = batch_of({{1, 2, 3, 4}, {6, 5, 0}, {2}});
        const auto routed = model.forward(batch);
        const auto replay = model.forward(batch, table_from_trace(0, routed.trace));
        for (std::size_t s = 0; s < 3; ++s) CHECK((routed.logits[s] - replay.logits[s]).cwiseAbs().maxCoeff() <= 1e-9);
        CHECK(!replay.trace.has_router_probs());
    }
    SUBCASE("zero head gives uniform logits") {
        MoEModel model(tiny_config(), rng);
        model.classifier.setZero();
        const auto out = model.forward(batch_of({{1, 2, 3}}));
        CHECK(out.logits[0].cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("missing hash-table entry names the location") {
        MoEModel model(tiny_config(2, 3), rng);
        ExpertHashTable table{0, RoutingGrid(2, 3)};
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t t = 0; t < 3; ++t) table.entries.at(l, t) = {{0, 0.5}};
        table.entries.at(1, 2).clear();
        try {
            model.forward(batch_of({{1, 2, 3}}), table);
            FAIL("expected an error");
        } catch (const ContractViolation& e) {
            CHECK(std::string(e.what()).find("layer 1, token 2") != std::string::npos);
        }
    }
    SUBCASE("bad token or length is rejected") {
        MoEModel model(tiny_config(), rng);
        CHECK_THROWS_AS(model.forward(batch_of({{7}})), ContractViolation);
        CHECK_THROWS_AS(model.forward(batch_of({{1, 1, 1, 1, 1, 1, 1}})), ContractViolation);
    }
}

TEST_CASE("router-mode invariants") {
    Rng rng(4);
    MoEConfig cfg = tiny_config(2, 5);
    cfg.routing_k = 2;
    MoEModel model(cfg, rng);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Sequence> seqs;
        const std::size_t nseq = 1 + rng.uniform_index(3);
        for (std::size_t s = 0; s < nseq; ++s) {
            Sequence seq(1 + rng.uniform_index(6));
            for (auto& t : seq) t = static_cast<TokenId>(rng.uniform_index(7));
            seqs.push_back(seq);
        }
        const auto batch = batch_of(seqs);
        ExpertEvalCounts counts;
        ForwardOptions opts;
        opts.expert_evals = &counts;
        const auto out = model.forward(batch, opts);
        const auto again = model.forward(batch);
        for (std::size_t l = 0; l < 2; ++l) {
            std::vector<std::size_t> expected(5, 0);
            for (std::size_t t = 0; t < batch.total_tokens(); ++t) {
                const auto& entry = out.trace.selections.at(l, t);
                CHECK(entry.size() == 2);
                IndexList ids;
                for (const auto& c : entry) {
                    ids.push_back(c.expert);
                    ++expected[c.expert];
                    CHECK(c.alpha == out.trace.probs(l, t)(static_cast<Eigen::Index>(c.expert)));
                }
                CHECK(ids == topk(out.trace.probs(l, t), 2));
            }
            CHECK(counts[l] == expected);  // nothing outside I was evaluated
        }
        for (std::size_t s = 0; s < nseq; ++s) CHECK((out.logits[s].array() == again.logits[s].array()).all());
    }
}

TEST_CASE("distinct experts bounded by tokens and K under top-1") {
    Rng rng(5);
    MoEModel model(tiny_config(2, 3), rng);
    for (int trial = 0; trial < 20; ++trial) {
        Sequence seq(1 + rng.uniform_index(6));
        for (auto& t : seq) t = static_cast<TokenId>(rng.uniform_index(7));
        const auto out = model.forward(batch_of({seq}));
        for (std::size_t l = 0; l < 2; ++l) CHECK(out.trace.selections.distinct_experts(l).size() <= std::min<std::size_t>(seq.size(), 3));
    }
}

TEST_CASE("full model loss gradient matches finite differences") {
    Rng rng(6);
    MoEConfig cfg = tiny_config(2, 3);
    MoEModel model(cfg, rng);
    const std::vector<Sequence> seqs{{1, 2, 3, 4}, {5, 6, 2}};
    const std::vector<std::size_t> labels{2, 0};
    const double coeff = 0.3;
    auto params = model.parameters();
    auto f = [&](const Matrix& flat, Matrix* grad) {
        MoEModel probe = model;
        test_grad::scatter(flat, probe.parameters());
        if (grad) {
            MoEModel g = MoEModel::zeros(cfg);
            const auto loss = moe_loss_and_grad(probe, seqs, labels, coeff, &g);
            *grad = test_grad::flatten(g.parameters());
            return loss.total(coeff);
        }
        return moe_loss_and_grad(probe, seqs, labels, coeff, nullptr).total(coeff);
    };
    CHECK(grad_check(f, test_grad::flatten(params), 1e-5) < 1e-4);

    // with router supervision toward per-token target experts
    const std::vector<std::vector<std::size_t>> targets{{0, 2, 1, 1}, {2, 0, 0}};
    const double route = 0.7;
    auto g = [&](const Matrix& flat, Matrix* grad) {
        MoEModel probe = model;
        test_grad::scatter(flat, probe.parameters());
        MoEModel acc = MoEModel::zeros(cfg);
        const auto loss = moe_loss_and_grad(probe, seqs, labels, coeff, grad ? &acc : nullptr, targets, route);
        if (grad) *grad = test_grad::flatten(acc.parameters());
        return loss.total(coeff, route);
    };
    CHECK(grad_check(g, test_grad::flatten(params), 1e-5) < 1e-4);
    const auto l = moe_loss_and_grad(model, seqs, labels, coeff, nullptr, targets, route);
    CHECK(l.route > 0.0);
    const std::vector<std::vector<std::size_t>> bad{{0, 3, 1, 1}, {2, 0, 0}};
    CHECK_THROWS_AS(moe_loss_and_grad(model, seqs, labels, coeff, nullptr, bad, route), ContractViolation);
}

TEST_CASE("load balance loss") {
    // perfectly uniform routing: K * sum (1/K)(1/K) = 1
    const std::size_t K = 4;
    std::vector<Vector> probs(K, Vector::Constant(4, 0.25));
    std::vector<RoutingEntry> sel;
    for (std::size_t i = 0; i < K; ++i) sel.push_back({{i, 0.25}});
    CHECK(load_balance_loss(probs, sel, K) == doctest::Approx(1.0).epsilon(1e-15));

    // everything to expert 0 with certainty: K * 1 * 1 = K
    std::vector<Vector> peaked(3, Vector::Unit(4, 0));
    std::vector<RoutingEntry> collapsed(3, RoutingEntry{{0, 1.0}});
    CHECK(load_balance_loss(peaked, collapsed, K) == doctest::Approx(4.0));
}

TEST_CASE("training reduces loss with a single expert and no balance term") {
    MoEConfig cfg = tiny_config(1, 1);
    cfg.vocab_size = 12;
    cfg.d_model = 8;
    cfg.num_classes = 2;
    Rng rng(7);
    std::vector<Sequence> seqs;
    std::vector<std::size_t> labels;
    for (int i = 0; i < 64; ++i) {
        const std::size_t label = rng.uniform_index(2);
        Sequence s(4);
        for (auto& t : s) t = static_cast<TokenId>(label * 6 + rng.uniform_index(6));
        seqs.push_back(s);
        labels.push_back(label);
    }
    TrainConfig train;
    train.epochs = 25;
    train.batch_size = 16;
    train.balance_coeff = 0.0;
    train.seed = 1;
    TrainReport report;
    const MoEModel model = train_toy_moe(cfg, seqs, labels, train, &report);
    REQUIRE(report.steps.size() == 100);
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
        first += report.steps[static_cast<std::size_t>(i)].ce;
        last += report.steps[report.steps.size() - 1 - static_cast<std::size_t>(i)].ce;
    }
    CHECK(last < first);
    CHECK(report.train_accuracy > 0.9);

    TrainReport again;
    const MoEModel model2 = train_toy_moe(cfg, seqs, labels, train, &again);
    CHECK((model2.classifier.array() == model.classifier.array()).all());
}

TEST_CASE("training on the planted corpus fits the task") {
    CorpusSpec spec;
    spec.num_sequences = 400;
    spec.max_length = 24;
    spec.beta = 0.9;
    spec.num_latent = 8;
    spec.seed = 3;
    const Corpus corpus = generate_corpus(spec);
    MoEConfig cfg;
    cfg.d_model = 32;
    cfg.expert_hidden = 32;
    cfg.num_experts = 8;
    TrainConfig train;
    train.epochs = 6;
    train.seed = 2;
    TrainReport report;
    train_toy_moe(cfg, corpus.sequences, corpus.labels, train, &report);
    CHECK(report.train_accuracy >= 0.9);
}

TEST_CASE("sequence sparsity") {
    ActivationTrace trace;
    trace.selections = RoutingGrid(1, 5);
    for (std::size_t t = 0; t < 5; ++t) trace.selections.at(0, t) = {{0, 0.9}};
    CHECK(sequence_sparsity(trace, 8)[0] == doctest::Approx(7.0 / 8.0));

    ActivationTrace spread;
    spread.selections = RoutingGrid(1, 8);
    for (std::size_t t = 0; t < 8; ++t) spread.selections.at(0, t) = {{t, 0.5}};
    CHECK(sequence_sparsity(spread, 8)[0] == 0.0);

    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        ActivationTrace r;
        const std::size_t n = 1 + rng.uniform_index(40), K = 16;
        r.selections = RoutingGrid(2, n);
        std::set<std::size_t> used[2];
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t t = 0; t < n; ++t) {
                const std::size_t e = rng.uniform_index(K);
                r.selections.at(l, t) = {{e, 0.5}};
                used[l].insert(e);
            }
        const auto sp = sequence_sparsity(r, K);
        for (std::size_t l = 0; l < 2; ++l) CHECK(sp[l] == doctest::Approx(1.0 - static_cast<double>(used[l].size()) / K));
    }
}

TEST_CASE("selection overhead probe") {
    Rng rng(9);
    MoEConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 32;
    cfg.expert_hidden = 64;
    cfg.max_seq_len = 32;
    Sequence seq(32);
    for (auto& t : seq) t = static_cast<TokenId>(rng.uniform_index(64));
    const auto batch = batch_of({seq});

    cfg.num_experts = 1;
    const auto single = selection_overhead_probe(MoEModel(cfg, rng), batch, 20);
    CHECK(single.fraction() > 0.0);
    CHECK(single.fraction() < 0.25);

    std::vector<double> fractions;
    for (std::size_t k : {8, 32, 128}) {
        cfg.num_experts = k;
        const MoEModel m(cfg, rng);
        std::vector<double> runs;
        for (int rep = 0; rep < 5; ++rep) runs.push_back(selection_overhead_probe(m, batch, 20).fraction());
        std::sort(runs.begin(), runs.end());
        fractions.push_back(runs[2]);
        CHECK(runs[2] > 0.0);
        CHECK(runs[2] < 1.0);
    }
    CHECK(fractions[0] < fractions[1]);
    CHECK(fractions[1] < fractions[2]);
}

TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(10);
    const MoEModel model(tiny_config(), rng);
    std::stringstream buf;
    write_checkpoint(buf, model.to_checkpoint());
    const std::string bytes = buf.str();
    CHECK(bytes.substr(0, 8) == "SIDAMOE1");
    const MoEModel back = MoEModel::from_checkpoint(read_checkpoint(buf, kMoEMagic));
    CHECK(back.config() == model.config());
    const auto a = model.named_parameters();
    const auto b = back.named_parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(std::memcmp(a[i].second->data(), b[i].second->data(), sizeof(double) * static_cast<std::size_t>(a[i].second->size())) == 0);
    }
    std::stringstream again;
    write_checkpoint(again, back.to_checkpoint());
    CHECK(again.str() == bytes);

    std::stringstream wrong(bytes);
    CHECK_THROWS_AS(read_checkpoint(wrong, kPredictorMagic), CheckpointError);
}

TEST_CASE("expert bytes are uniform and accounted") {
    Rng rng(11);
    const MoEModel model(tiny_config(2, 3), rng);
    for (const auto& b : model.blocks)
        for (const auto& e : b.experts) CHECK(e.bytes() == model.expert_bytes());
    CHECK(model.expert_bytes() == (4 * 5 + 5 + 5 * 4 + 4) * sizeof(double));
    CHECK(model.total_expert_bytes() == model.expert_bytes() * 6);
    CHECK(model.router_bytes() == 2 * 4 * 3 * sizeof(double));
}
