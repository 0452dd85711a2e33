#include "schema_check.hpp"

#include "sida/bench.hpp"

#include <doctest.h>

#include <chrono>
#include <fstream>

using namespace sida;

namespace {

BenchConfig tiny_config() {
    BenchConfig c = bench_config_from_json(nlohmann::json{{"seed", 5}});
    c.corpus.vocab_size = 64;
    c.corpus.num_sequences = 120;
    c.corpus.min_length = 4;
    c.corpus.max_length = 16;
    c.corpus.num_latent = 8;
    c.corpus.num_classes = 2;
    c.model.vocab_size = 64;
    c.model.d_model = 8;
    c.model.expert_hidden = 8;
    c.model.max_seq_len = 16;
    c.model.num_classes = 2;
    c.train.epochs = 2;
    c.predictor.compress_dim = 4;
    c.predictor.lstm_hidden = 6;
    c.predictor.max_steps = 30;
    c.predictor.batch_size = 16;
    c.predictor.lr = 1e-2;
    c.predictor.eval_every = 10;
    c.experts_grid = {4, 8};
    c.budget_fractions = {0.5, 1.0};
    c.serve_samples = 20;
    c.serve_batch_size = 2;
    c.length_buckets = {4, 8, 16};
    c.sequences_per_bucket = 10;
    c.probe.L = 8;
    c.probe.positions = 3;
    c.probe.trials = 20;
    c.probe_sequences = 4;
    return c;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("tiny benchmark completes and matches the published schema") {
    const auto t0 = std::chrono::steady_clock::now();
    const BenchBundle b = run_benchmark(tiny_config());
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(elapsed < 300.0);
    INFO(b.report["errors"].dump());
    CHECK(b.complete());

    const auto problems = test_schema::validate(test_schema::load_schema("bench_bundle.schema.json"), b.report);
    for (const auto& p : problems) FAIL_CHECK(p);

    const auto& serving = b.report["serving"];
    REQUIRE(serving.size() == 2 * 2 * 3);
    for (const auto& row : serving) {
        if (row["mode"] == "oracle") {
            CHECK(row["fidelity"].get<double>() == 1.0);
            CHECK(row["hit_rate"].get<double>() == 1.0);
        }
        if (row["mode"] == "sida") CHECK(row["hit_rate"].is_number());
        CHECK(row["peak_fast_tier_bytes"].get<std::size_t>() <= row["budget_bytes"].get<std::size_t>());
    }
    CHECK(b.report["models"].size() == 2);
    CHECK(b.report["series"]["reduction_vs_length"].size() == 2 * 3);
    CHECK(b.report["sparsity_probe"]["c_hat"].size() == 3);

    CHECK(lines(b.csv.at("serving.csv")) == 1 + 12);
    CHECK(lines(b.csv.at("latency_breakdown.csv")) == 1 + 12);
    CHECK(lines(b.csv.at("throughput_vs_budget.csv")) == 1 + 12);
    CHECK(lines(b.csv.at("reduction_vs_length.csv")) == 1 + 6);
    CHECK(lines(b.csv.at("sparsity_vs_length.csv")) == 1 + 6);
    CHECK(lines(b.csv.at("probe.csv")) == 1 + 9);

    const auto dir = std::filesystem::temp_directory_path() / "sida_test_bench_bundle";
    std::filesystem::remove_all(dir);
    write_bundle(b, dir);
    for (const char* f : {"bundle.json", "errors.json", "serving.csv", "latency_breakdown.csv", "throughput_vs_budget.csv",
                          "reduction_vs_length.csv", "sparsity_vs_length.csv", "probe.csv"})
        CHECK(std::filesystem::exists(dir / f));
    std::ifstream in(dir / "bundle.json");
    CHECK(nlohmann::json::parse(in)["status"] == "complete");
}

TEST_CASE("failing cells yield a partial bundle with an error manifest") {
    BenchConfig c = tiny_config();
    c.experts_grid = {8};
    c.budget_fractions = {0.01, 1.0};  // 1% cannot hold one expert
    c.run_probe = false;
    const BenchBundle b = run_benchmark(c);
    CHECK_FALSE(b.complete());
    CHECK(b.report["status"] == "partial");
    const auto& errors = b.report["errors"];
    REQUIRE(errors.size() == 3);
    for (const auto& e : errors) CHECK(e["stage"].get<std::string>().find("budget=0.01") != std::string::npos);
    CHECK(b.report["serving"].size() == 3);
    CHECK(b.report["series"]["sparsity_vs_length"].size() == 3);
    CHECK(b.report["sparsity_probe"].is_null());
    const auto problems = test_schema::validate(test_schema::load_schema("bench_bundle.schema.json"), b.report);
    for (const auto& p : problems) FAIL_CHECK(p);
}

TEST_CASE("benchmark results are reproducible from the seed") {
    BenchConfig c = tiny_config();
    c.experts_grid = {4};
    c.budget_fractions = {1.0};
    const BenchBundle a = run_benchmark(c), b = run_benchmark(c);
    CHECK(a.report["models"] == b.report["models"]);
    CHECK(a.report["series"]["reduction_vs_length"] == b.report["series"]["reduction_vs_length"]);
    CHECK(a.report["sparsity_probe"] == b.report["sparsity_probe"]);
    for (std::size_t i = 0; i < a.report["serving"].size(); ++i) {
        CHECK(a.report["serving"][i]["accuracy"] == b.report["serving"][i]["accuracy"]);
        CHECK(a.report["serving"][i]["hit_rate"] == b.report["serving"][i]["hit_rate"]);
        CHECK(a.report["serving"][i]["loads"] == b.report["serving"][i]["loads"]);
    }
}

TEST_CASE("config json") {
    const BenchConfig c = tiny_config();
    const auto j = bench_config_to_json(c);
    CHECK(bench_config_to_json(bench_config_from_json(j)) == j);

    const BenchConfig seeded = bench_config_from_json({{"seed", 7}});
    CHECK(seeded.corpus.seed == 7);
    CHECK(seeded.train.seed == 8);
    CHECK(seeded.predictor.seed == 9);
    CHECK(seeded.probe.seed == 10);
    const BenchConfig pinned = bench_config_from_json({{"seed", 7}, {"corpus", {{"seed", 100}}}});
    CHECK(pinned.corpus.seed == 100);
    CHECK(pinned.train.seed == 8);

    const BenchConfig served = bench_config_from_json({{"serve", {{"router_delay_ms", 1.5}, {"prefetch", "whole_batch"}}}});
    CHECK(served.serve.router_delay == std::chrono::microseconds(1500));
    CHECK(served.serve.prefetch == PrefetchMode::WholeBatch);
    CHECK_THROWS_AS(bench_config_from_json({{"serve", {{"prefetch", "eager"}}}}), ContractViolation);
    CHECK_THROWS_AS(bench_config_from_json({{"probe", {{"mode", "swap"}}}}), ContractViolation);

    BenchConfig bad = tiny_config();
    bad.budget_fractions = {1.5};
    CHECK_THROWS_AS(run_benchmark(bad), ContractViolation);
    bad = tiny_config();
    bad.length_buckets = {32};
    CHECK_THROWS_AS(run_benchmark(bad), ContractViolation);
}

TEST_CASE("length profile follows the counting formula") {
    const BenchConfig c = tiny_config();
    MoEConfig mc = c.model;
    mc.num_experts = 8;
    Rng rng(3);
    const MoEModel model(mc, rng);
    const auto profile = length_profile(model, c.corpus, {4, 16}, 6);
    REQUIRE(profile.size() == 2);
    for (const auto& pt : profile) {
        const auto seqs = fixed_length_sequences(c.corpus, pt.length, 6);
        double reduction = 0.0, idle = 0.0;
        for (const auto& s : seqs) {
            CHECK(s.size() == pt.length);
            SequenceBatch b;
            b.sequences = {s};
            const auto trace = model.forward(b).trace;
            std::size_t used = 0;
            for (std::size_t l = 0; l < mc.num_layers; ++l) {
                std::set<std::size_t> distinct;
                for (std::size_t t = 0; t < s.size(); ++t) distinct.insert(trace.selections.top1(l, t));
                used += distinct.size();
                idle += (1.0 - static_cast<double>(distinct.size()) / 8.0) / static_cast<double>(mc.num_layers);
            }
            reduction += 1.0 - static_cast<double>(used) / static_cast<double>(mc.num_layers * 8);
        }
        CHECK(pt.mean_memory_reduction == doctest::Approx(reduction / 6).epsilon(1e-12));
        CHECK(pt.mean_idle_fraction == doctest::Approx(idle / 6).epsilon(1e-12));
    }
}

TEST_CASE("serving report matches its schema") {
    MoEConfig mc;
    mc.vocab_size = 20;
    mc.d_model = 8;
    mc.num_experts = 4;
    mc.expert_hidden = 8;
    mc.max_seq_len = 8;
    Rng rng(4);
    const MoEModel model(mc, rng);
    std::vector<SequenceBatch> batches;
    for (std::uint64_t i = 0; i < 4; ++i) batches.push_back({i, {{1, 2, 3}, {4, 5}}, {0, 1}});
    const auto schema = test_schema::load_schema("serving_report.schema.json");
    for (const auto& r : {serve_standard(model, batches, {}), serve_sida(model, oracle_hash(model), batches, {}, ServeMode::Oracle)}) {
        const auto problems = test_schema::validate(schema, report_to_json(r));
        for (const auto& p : problems) FAIL_CHECK(p);
    }
    // the checker itself rejects a broken document
    auto broken = report_to_json(serve_standard(model, batches, {}));
    broken["mode"] = "turbo";
    broken["aggregate"].erase("throughput");
    CHECK(test_schema::validate(schema, broken).size() == 2);
}
