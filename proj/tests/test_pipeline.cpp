#include "sida/pipeline.hpp"

#include <doctest.h>

#include <atomic>
#include <thread>

using namespace sida;
using namespace std::chrono_literals;

namespace {

ExpertHashTable empty_table(std::uint64_t id) { return ExpertHashTable{id, RoutingGrid(1, 1)}; }

MoEModel small_model(std::size_t K = 6, std::uint64_t seed = 3) {
    MoEConfig cfg;
    cfg.vocab_size = 30;
    cfg.d_model = 8;
    cfg.num_layers = 2;
    cfg.num_experts = K;
    cfg.expert_hidden = 12;
    cfg.max_seq_len = 16;
    cfg.num_classes = 3;
    Rng rng(seed);
    return MoEModel(cfg, rng);
}

std::vector<SequenceBatch> stream(std::size_t n, std::size_t per_batch, std::uint64_t seed, bool labeled = true) {
    Rng rng(seed);
    std::vector<SequenceBatch> out;
    for (std::size_t i = 0; i < n; ++i) {
        SequenceBatch b;
        b.batch_id = i;
        for (std::size_t s = 0; s < per_batch; ++s) {
            Sequence seq(1 + rng.uniform_index(16));
            for (auto& t : seq) t = static_cast<TokenId>(1 + rng.uniform_index(29));
            b.sequences.push_back(seq);
            if (labeled) b.labels.push_back(rng.uniform_index(3));
        }
        out.push_back(std::move(b));
    }
    return out;
}

ServeConfig unlimited() { return ServeConfig{}; }

}  // namespace

TEST_CASE("queue basics") {
    CHECK_THROWS_AS(HashTableQueue(0), ContractViolation);
    HashTableQueue q(3);
    CHECK(q.push(empty_table(0)));
    CHECK(q.push(empty_table(2)));
    CHECK_THROWS_AS(q.push(empty_table(2)), ContractViolation);
    CHECK(q.pop(0, 1s)->batch_id == 0);
    CHECK_THROWS_AS(q.pop(1, 1s), ContractViolation);
    CHECK(q.pop(2, 1s)->batch_id == 2);
    double waited = 0.0;
    CHECK_FALSE(q.pop(3, 20ms, &waited).has_value());
    CHECK(waited >= 0.015);
    CHECK(q.idle_events() == 1);
    q.close();
    CHECK_FALSE(q.push(empty_table(5)));
    CHECK_FALSE(q.pop(3, 1s).has_value());
}

TEST_CASE("queue preserves order across threads and applies backpressure") {
    HashTableQueue q(2);
    std::atomic<std::size_t> max_ahead{0};
    std::atomic<std::size_t> consumed{0};
    std::thread producer([&] {
        for (std::uint64_t i = 0; i < 300; ++i) {
            q.push(empty_table(i));
            max_ahead = std::max<std::size_t>(max_ahead, i + 1 - consumed);
        }
    });
    for (std::uint64_t i = 0; i < 300; ++i) {
        const auto t = q.pop(i, 5s);
        REQUIRE(t.has_value());
        CHECK(t->batch_id == i);
        ++consumed;
        if (i % 50 == 0) std::this_thread::sleep_for(1ms);
    }
    producer.join();
    CHECK(q.pushed() == 300);
    CHECK(q.popped() == 300);
    // one item may be in the consumer's hands besides the two queued
    CHECK(max_ahead <= 3);
}

TEST_CASE("close wakes a blocked consumer") {
    HashTableQueue q(1);
    std::thread closer([&] {
        q.wait_for_consumer();
        q.close();
    });
    CHECK_FALSE(q.pop(0, 10s).has_value());
    closer.join();
}

TEST_CASE("oracle hash with unlimited budget reproduces standard inference") {
    const MoEModel model = small_model();
    const auto batches = stream(200, 2, 1);
    const auto standard = serve_standard(model, batches, unlimited());
    const auto oracle = serve_sida(model, oracle_hash(model), batches, unlimited(), ServeMode::Oracle);
    REQUIRE(oracle.logits.size() == 200);
    double worst = 0.0;
    for (std::size_t b = 0; b < 200; ++b)
        for (std::size_t s = 0; s < oracle.logits[b].size(); ++s)
            worst = std::max(worst, (oracle.logits[b][s] - standard.logits[b][s]).cwiseAbs().maxCoeff());
    CHECK(worst <= 1e-9);
    CHECK(fidelity(oracle, standard) == 1.0);
    CHECK(oracle.hit_rate == 1.0);
    CHECK(oracle.predictions == standard.predictions);
    CHECK(oracle.peak_fast_tier_bytes <= oracle.budget_bytes);
}

TEST_CASE("single batch idles once at startup") {
    const MoEModel model = small_model();
    const auto report = serve_sida(model, oracle_hash(model), stream(1, 1, 2), unlimited());
    CHECK(report.idle_events == 1);
    // fresh fast tier, budget covers everything: only used experts are resident
    CHECK(report.batches[0].utilization == 1.0);
    CHECK(report.batches[0].evictions == 0);
}

TEST_CASE("outputs do not depend on scheduling or budget") {
    const MoEModel model = small_model();
    Rng rng(5);
    PredictorConfig pc;
    pc.compress_dim = 4;
    pc.lstm_hidden = 6;
    const PredictorNet net(pc, 8, 2, 6, rng);
    const auto batches = stream(40, 2, 3);
    ServeConfig tight;
    tight.budget.fast_tier_bytes = 6 * model.expert_bytes();  // one full layer
    tight.eval_top_k = 1;
    tight.queue_capacity = 1;
    const auto reference = serve_sida(model, predictor_hash(net, model, 1), batches, unlimited());
    for (int run = 0; run < 5; ++run) {
        const auto r = serve_sida(model, predictor_hash(net, model, 1), batches, run % 2 ? tight : unlimited());
        CHECK(r.logits == reference.logits);
        CHECK(r.peak_fast_tier_bytes <= r.budget_bytes);
    }
    ServeConfig top2;
    top2.eval_top_k = 2;
    top2.budget.fast_tier_bytes = 6 * model.expert_bytes();
    const auto r = serve_sida(model, predictor_hash(net, model, 2), stream(5, 1, 9), top2);
    CHECK(r.peak_fast_tier_bytes <= 6 * model.expert_bytes());
}

TEST_CASE("full top-k hash gives soft routing over the predictor distribution") {
    const MoEModel model = small_model(4);
    Rng rng(6);
    PredictorConfig pc;
    pc.compress_dim = 4;
    pc.lstm_hidden = 6;
    const PredictorNet net(pc, 8, 2, 4, rng);
    const auto batches = stream(6, 2, 4);
    ServeConfig cfg;
    cfg.eval_top_k = 4;
    const auto r = serve_sida(model, predictor_hash(net, model, 4), batches, cfg);
    const InputEmbedder embed(model);
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const auto table = build_hash_table(net, embed, batches[b], 4);
        // every entry lists all experts and their alphas form the full distribution
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t t = 0; t < table.entries.num_tokens(); ++t) {
                double sum = 0.0;
                for (const auto& c : table.entries.at(l, t)) sum += c.alpha;
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
            }
        CHECK(r.logits[b] == model.forward(batches[b], table).logits);
    }
    CHECK(r.hit_rate == 1.0);
}

TEST_CASE("standard mode under a finite budget") {
    const MoEModel model = small_model();
    const auto batches = stream(30, 1, 7);
    ServeConfig finite;
    finite.budget.fast_tier_bytes = 6 * model.expert_bytes();
    finite.router_delay = 200us;
    ServeConfig open;
    open.router_delay = 200us;
    const auto a = serve_standard(model, batches, finite);
    const auto b = serve_standard(model, batches, open);
    double ta = 0.0, tb = 0.0, la = 0.0, lb = 0.0;
    for (const auto& rec : a.batches) {
        ta += rec.exposed_transfer_s;
        la += rec.latency_s;
        CHECK(rec.selection_s >= 2 * 200e-6);
    }
    for (const auto& rec : b.batches) {
        tb += rec.exposed_transfer_s;
        lb += rec.latency_s;
    }
    CHECK(ta > tb);
    CHECK(a.peak_fast_tier_bytes <= a.budget_bytes);
    CHECK(a.logits == b.logits);
    CHECK(la >= lb);
}

TEST_CASE("sida overlaps selection overhead that standard pays inline") {
    const MoEModel model = small_model(8);
    const auto batches = stream(60, 1, 8);
    auto gap_at = [&](std::chrono::nanoseconds delay) {
        ServeConfig cfg;
        cfg.router_delay = delay;
        cfg.score_hit_rate = false;
        const auto s = serve_sida(model, oracle_hash(model), batches, cfg);
        const auto d = serve_standard(model, batches, cfg);
        return s.throughput / d.throughput;
    };
    const double small = gap_at(500us);
    const double large = gap_at(3ms);
    CHECK(small >= 1.0);
    CHECK(large > small);
}

TEST_CASE("errors") {
    const MoEModel model = small_model();
    ServeConfig tiny;
    tiny.budget.fast_tier_bytes = model.expert_bytes() - 1;
    CHECK_THROWS_AS(serve_sida(model, oracle_hash(model), stream(2, 1, 1), tiny), UnservableError);
    CHECK_THROWS_AS(serve_standard(model, stream(2, 1, 1), tiny), UnservableError);
    ServeConfig no_queue;
    no_queue.queue_capacity = 0;
    CHECK_THROWS_AS(serve_sida(model, oracle_hash(model), stream(2, 1, 1), no_queue), ContractViolation);
    // working set of one layer larger than the tier
    ServeConfig one;
    one.budget.fast_tier_bytes = model.expert_bytes();
    std::vector<SequenceBatch> wide = stream(1, 4, 10);
    CHECK_THROWS_AS(serve_sida(model, oracle_hash(model), wide, one), UnservableError);
    // failing hash worker
    HashBuilder broken = [](const SequenceBatch& b) -> ExpertHashTable {
        if (b.batch_id == 3) throw std::runtime_error("hash worker failed");
        return table_from_trace(b.batch_id, small_model().forward(b).trace);
    };
    CHECK_THROWS_WITH(serve_sida(model, broken, stream(5, 1, 1), unlimited()), "hash worker failed");
    // non-increasing ids
    auto bad = stream(3, 1, 1);
    bad[2].batch_id = 1;
    CHECK_THROWS_AS(serve_standard(model, bad, unlimited()), ContractViolation);
}

TEST_CASE("fidelity") {
    ServingReport a, b;
    a.batches.push_back(BatchRecord{});
    a.batches[0].samples = 10;
    b.batches = a.batches;
    a.accuracy = 0.8;
    b.accuracy = 0.8;
    CHECK(fidelity(a, b) == 1.0);
    a.accuracy = 0.6;
    CHECK(fidelity(a, b) == doctest::Approx(0.75));
    b.accuracy = 0.0;
    CHECK_THROWS_AS(fidelity(a, b), NumericError);
    b.accuracy = -1.0;
    CHECK_THROWS_AS(fidelity(a, b), ContractViolation);
}

TEST_CASE("report serialization") {
    const MoEModel model = small_model();
    const auto batches = stream(3, 2, 11);
    const auto r = serve_standard(model, batches, unlimited());
    const auto j = report_to_json(r);
    CHECK(j.at("schema_version") == kServingReportSchemaVersion);
    CHECK(j.at("mode") == "standard");
    CHECK(j.at("batches").size() == 3);
    CHECK(j.at("aggregate").at("samples") == 6);
    CHECK(j.at("aggregate").at("hit_rate").is_null());
    CHECK(j.at("aggregate").at("throughput").get<double>() > 0.0);
    const std::string csv = report_to_csv(r);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK(csv.rfind("mode,batch_id,", 0) == 0);
    CHECK(serve_mode_from_string("oracle") == ServeMode::Oracle);
    CHECK_THROWS_AS(serve_mode_from_string("fast"), ContractViolation);
}
