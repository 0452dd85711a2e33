#pragma once

// End-to-end benchmark orchestration: corpus, teacher training, predictor
// training, the serving grid {standard, oracle, sida} x budget x K, memory and
// sparsity profiles over sequence length, and the corruption probe.
//
// Stages run sequentially. A failing stage or grid cell is recorded in the
// bundle's error list and the remaining independent work still runs, so a
// failed run still yields a partial bundle.

#include "sida/corpus.hpp"
#include "sida/moe_model.hpp"
#include "sida/pipeline.hpp"
#include "sida/predictor.hpp"
#include "sida/sparsity_probe.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>

namespace sida {

inline constexpr int kBenchBundleSchemaVersion = 1;

/// Predictor settings that converge at desk scale within a few minutes.
inline PredictorConfig desk_predictor_defaults() {
    PredictorConfig p;
    p.lr = 1e-2;
    p.batch_size = 32;
    p.max_steps = 1000;
    p.eval_every = 250;
    return p;
}

/// Serving with the injected per-router selection overhead switched on.
inline ServeConfig desk_serve_defaults() {
    ServeConfig s;
    s.router_delay = std::chrono::milliseconds(1);
    return s;
}

struct BenchConfig {
    std::uint64_t seed = 0;
    CorpusSpec corpus;
    double heldout_fraction = 0.2;
    MoEConfig model;  // num_experts is overridden by experts_grid
    TrainConfig train;
    PredictorConfig predictor = desk_predictor_defaults();
    std::vector<std::size_t> experts_grid{8};
    std::vector<double> budget_fractions{0.5, 0.75, 1.0};  // of total expert bytes
    std::size_t serve_samples = 200;                        // taken from the held-out split, cycled if short
    std::size_t serve_batch_size = 1;
    ServeConfig serve = desk_serve_defaults();
    std::vector<std::size_t> length_buckets{8, 32, 64};
    std::size_t sequences_per_bucket = 64;
    bool run_probe = true;
    ProbeConfig probe;
    std::size_t probe_sequences = 32;
    std::size_t probe_layer = 0;

    /// Rejects inconsistent settings before any work starts.
    void validate() const;
};

/// Every key is optional and falls back to `defaults`. `seed` propagates to
/// the corpus, training, predictor and probe unless they set their own.
BenchConfig bench_config_from_json(const nlohmann::json& j, BenchConfig defaults = {});
nlohmann::json bench_config_to_json(const BenchConfig& config);

nlohmann::json moe_config_to_json(const MoEConfig& c);
MoEConfig moe_config_from_json(const nlohmann::json& j, MoEConfig defaults = {});
nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});
nlohmann::json predictor_config_to_json(const PredictorConfig& c);
PredictorConfig predictor_config_from_json(const nlohmann::json& j, PredictorConfig defaults = {});
nlohmann::json serve_config_to_json(const ServeConfig& c);
ServeConfig serve_config_from_json(const nlohmann::json& j, ServeConfig defaults = {});
nlohmann::json probe_config_to_json(const ProbeConfig& c);
ProbeConfig probe_config_from_json(const nlohmann::json& j, ProbeConfig defaults = {});

/// Per-length profile of one model, measured on fixed-length sequences drawn
/// from the corpus distribution and served one sequence per batch.
struct LengthPoint {
    std::size_t length = 0;
    std::size_t sequences = 0;
    double mean_memory_reduction = 0.0;  // 1 - required / total expert bytes
    double mean_idle_fraction = 0.0;     // 1 - distinct experts / K, averaged over layers
};

/// Sequences of exactly `length` tokens drawn from `spec`'s distribution.
std::vector<Sequence> fixed_length_sequences(CorpusSpec spec, std::size_t length, std::size_t count);

std::vector<LengthPoint> length_profile(const MoEModel& model, const CorpusSpec& spec, const std::vector<std::size_t>& buckets,
                                        std::size_t sequences_per_bucket);

struct BenchBundle {
    nlohmann::json report;                   // the bundle document
    std::map<std::string, std::string> csv;  // file name -> contents
    bool complete() const { return report.value("status", "") == "complete"; }
};

BenchBundle run_benchmark(const BenchConfig& config);

/// Writes bundle.json and every CSV table into `dir`, creating it.
void write_bundle(const BenchBundle& bundle, const std::filesystem::path& dir);

}  // namespace sida
