#pragma once

// Serving loops. SiDA mode runs two workers: the hash worker builds an expert
// hash table per batch and pushes it to a bounded queue; the inference worker
// pops tables in batch_id order, plans and applies expert placement, and runs
// the model with the table in place of its routers. Standard mode is a single
// sequential loop that routes, then loads the selected experts reactively.
//
// Compute time is measured wall time. Transfer time is simulated by the
// offload cost model and reported separately; latency adds only the transfer
// time that is not hidden behind compute.

#include "sida/moe_model.hpp"
#include "sida/offload.hpp"
#include "sida/predictor.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <string>

namespace sida {

inline constexpr int kServingReportSchemaVersion = 1;

/// Bounded FIFO of hash tables between exactly one producer and one consumer.
class HashTableQueue {
public:
    explicit HashTableQueue(std::size_t capacity = 8);

    std::size_t capacity() const { return capacity_; }
    /// Blocks while full. Batch ids must strictly increase. Returns false if
    /// the queue was closed.
    bool push(ExpertHashTable table);
    /// Waits for the table of `batch_id`. Returns nullopt on timeout or when
    /// the queue was closed and drained. Throws ContractViolation if a
    /// different batch is at the head. `waited_s` receives the blocking time.
    std::optional<ExpertHashTable> pop(std::uint64_t batch_id, std::chrono::duration<double> timeout, double* waited_s = nullptr);
    void close();

    /// Pops that found the queue empty and had to wait.
    std::size_t idle_events() const;
    std::size_t pushed() const;
    std::size_t popped() const;
    /// Blocks until the consumer is waiting inside pop(), has popped, or the
    /// queue is closed.
    void wait_for_consumer() const;

private:
    std::size_t capacity_;
    mutable std::mutex mu_;
    mutable std::condition_variable not_empty_, not_full_, consumer_waiting_;
    std::deque<ExpertHashTable> items_;
    std::optional<std::uint64_t> last_pushed_;
    bool closed_ = false;
    bool consumer_blocked_ = false;
    std::size_t idle_ = 0, pushed_ = 0, popped_ = 0;
};

enum class ServeMode { Sida, Standard, Oracle };
std::string to_string(ServeMode m);
ServeMode serve_mode_from_string(const std::string& s);

struct ServeConfig {
    MemoryBudget budget;            // fast_tier_bytes = 0 means unlimited
    std::size_t eval_top_k = 1;
    std::size_t queue_capacity = 8;
    PrefetchMode prefetch = PrefetchMode::PerLayer;
    std::chrono::nanoseconds router_delay{0};  // standard mode only
    double pop_timeout_s = 60.0;
    /// Re-runs the teacher after serving to score the tables. Not timed.
    bool score_hit_rate = true;
};

struct BatchRecord {
    std::uint64_t batch_id = 0;
    std::size_t samples = 0;
    std::size_t tokens = 0;
    double latency_s = 0.0;             // compute_s + exposed_transfer_s
    double compute_s = 0.0;             // measured forward wall time
    double queue_wait_s = 0.0;          // SiDA: time blocked on the queue
    double selection_s = 0.0;           // standard: routing incl. injected delay; SiDA: hash build (other worker)
    double transfer_s = 0.0;            // simulated, all loads
    double exposed_transfer_s = 0.0;    // simulated, not hidden by compute
    std::size_t loads = 0;
    std::size_t evictions = 0;
    double utilization = 0.0;
    double memory_reduction = 0.0;
    std::size_t correct = 0;
};

struct ServingReport {
    ServeMode mode = ServeMode::Standard;
    std::size_t budget_bytes = 0;
    std::size_t total_expert_bytes = 0;
    std::size_t eval_top_k = 0;
    std::vector<BatchRecord> batches;
    std::vector<std::vector<Vector>> logits;  // per batch, per sequence
    std::vector<std::vector<std::size_t>> predictions;
    double wall_s = 0.0;             // real elapsed time of the serving loop
    double total_s = 0.0;            // wall_s + sum of exposed transfer
    double throughput = 0.0;         // samples / total_s
    double hit_rate = -1.0;          // top-1 teacher expert within predicted top-k; -1 when not scored
    double hit_rate_top1 = -1.0;
    double accuracy = -1.0;          // -1 when unlabeled
    double mean_utilization = 0.0;
    double mean_memory_reduction = 0.0;
    std::size_t peak_fast_tier_bytes = 0;
    std::size_t idle_events = 0;
    std::size_t samples() const;
};

using HashBuilder = std::function<ExpertHashTable(const SequenceBatch&)>;

/// Hash builder backed by a trained predictor.
HashBuilder predictor_hash(const PredictorNet& net, const MoEModel& model, std::size_t eval_top_k);
/// Hash builder that runs the model's own routers (upper bound).
HashBuilder oracle_hash(const MoEModel& model);

ServingReport serve_sida(const MoEModel& model, const HashBuilder& hash, const std::vector<SequenceBatch>& batches,
                         const ServeConfig& config, ServeMode mode = ServeMode::Sida);
ServingReport serve_standard(const MoEModel& model, const std::vector<SequenceBatch>& batches, const ServeConfig& config);

/// Ratio of classification accuracies. Throws if the reference is 0 or the
/// runs were not on the same labeled samples.
double fidelity(const ServingReport& sida, const ServingReport& reference);

nlohmann::json report_to_json(const ServingReport& report);
/// One row per batch, with a header line.
std::string report_to_csv(const ServingReport& report);

}  // namespace sida
