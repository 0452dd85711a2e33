#pragma once

// Two-tier expert memory simulator: a bounded fast tier holding whole experts,
// FIFO eviction, and a linear transfer cost model (bytes / bandwidth plus a
// fixed per-transfer latency). Nothing is actually copied; only residency and
// simulated seconds are tracked.

#include "sida/moe_model.hpp"
#include "sida/routing.hpp"

#include <compare>
#include <cstdint>
#include <deque>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

namespace sida {

/// Budget too small for the required working set.
class UnservableError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ExpertKey {
    std::size_t layer = 0;
    std::size_t expert = 0;
    auto operator<=>(const ExpertKey&) const = default;
};

struct MemoryBudget {
    std::size_t fast_tier_bytes = 0;
    double bandwidth_bytes_per_s = 16e9;
    double per_transfer_latency_s = 50e-6;

    void validate() const;
    double transfer_seconds(std::size_t bytes, std::size_t transfers) const {
        return static_cast<double>(bytes) / bandwidth_bytes_per_s + per_transfer_latency_s * static_cast<double>(transfers);
    }
};

/// Byte size of every (layer, expert).
struct ExpertSizes {
    std::vector<std::vector<std::size_t>> bytes;  // [layer][expert]

    static ExpertSizes uniform(std::size_t num_layers, std::size_t num_experts, std::size_t expert_bytes);
    static ExpertSizes from_model(const MoEModel& model);

    std::size_t num_layers() const { return bytes.size(); }
    std::size_t of(const ExpertKey& k) const;
    std::size_t largest() const;
    std::size_t total() const;
};

class ResidencyState {
public:
    ResidencyState() = default;
    explicit ResidencyState(std::size_t capacity_bytes) : capacity_(capacity_bytes) {}

    std::size_t capacity() const { return capacity_; }
    std::size_t used_bytes() const { return used_; }
    std::size_t peak_bytes() const { return peak_; }
    bool contains(const ExpertKey& k) const { return resident_.count(k) != 0; }
    std::size_t size() const { return resident_.size(); }
    /// Arrival order, oldest first.
    const std::deque<ExpertKey>& fifo_order() const { return fifo_; }
    const std::map<ExpertKey, std::size_t>& resident() const { return resident_; }

    /// Throws ContractViolation on duplicate or over-capacity loads.
    void load(const ExpertKey& k, std::size_t bytes);
    /// Throws ContractViolation if `k` is not resident.
    void evict(const ExpertKey& k);
    /// Order-sensitive digest of the FIFO queue.
    std::uint64_t fingerprint() const;
    void check_invariants() const;

    bool operator==(const ResidencyState& o) const { return capacity_ == o.capacity_ && resident_ == o.resident_ && fifo_ == o.fifo_; }

private:
    std::size_t capacity_ = 0;
    std::size_t used_ = 0;
    std::size_t peak_ = 0;
    std::map<ExpertKey, std::size_t> resident_;
    std::deque<ExpertKey> fifo_;
};

struct PlacementStep {
    enum class Kind { Load, Evict };
    Kind kind = Kind::Load;
    ExpertKey key;
    std::size_t bytes = 0;
    std::size_t for_layer = 0;  // layer whose loads triggered this step
    bool in_use = false;        // evicts an expert an earlier layer of the same pass needs
    bool operator==(const PlacementStep&) const = default;
};

struct PlacementPlan {
    std::vector<PlacementStep> steps;  // execution order
    std::vector<ExpertKey> loads;
    std::vector<ExpertKey> evictions;
    std::size_t load_bytes = 0;
    double estimated_transfer_s = 0.0;
    std::uint64_t origin = 0;  // fingerprint of the state the plan was made from

    bool empty() const { return steps.empty(); }
    /// Bytes and transfer count of the loads issued for `layer`.
    std::pair<std::size_t, std::size_t> layer_loads(std::size_t layer) const;
    bool operator==(const PlacementPlan&) const = default;
};

/// (layer, expert) pairs named by the table, grouped by layer, ascending.
std::vector<std::vector<std::size_t>> required_experts(const ExpertHashTable& table);

/// Plans loads for every layer of `table`, in layer order. Eviction takes, in
/// turn: the oldest resident the table does not need; the oldest needed
/// resident of an earlier (completed) layer; the oldest needed resident of a
/// later layer, which is then reloaded when its layer comes up. Throws
/// UnservableError when one layer's working set exceeds the fast tier.
PlacementPlan plan_placement(const ExpertHashTable& table, const ResidencyState& state, const MemoryBudget& budget,
                             const ExpertSizes& sizes);

/// Same rule for one layer's selection only, with no knowledge of later
/// layers; earlier layers of the same pass count as completed.
PlacementPlan plan_layer(std::size_t layer, const std::vector<std::size_t>& experts, const ResidencyState& state,
                         const MemoryBudget& budget, const ExpertSizes& sizes);

/// Executes the plan step by step, checking the budget after every step.
/// Returns simulated seconds. Throws ContractViolation on mismatch.
double apply_plan(ResidencyState& state, const PlacementPlan& plan);

/// Bytes of resident `activated` experts / used bytes.
double effective_utilization(const ResidencyState& state, const std::set<ExpertKey>& activated);

std::size_t required_expert_bytes(const ExpertHashTable& table, const ExpertSizes& sizes);
/// 1 - required expert bytes / total expert bytes.
double memory_reduction(const ExpertHashTable& table, const ExpertSizes& sizes);

/// Per-batch timeline of a plan overlapped with per-layer compute.
struct TransferTimeline {
    double total_s = 0.0;           // simulated end-to-end
    double compute_s = 0.0;         // sum of compute durations
    double transfer_s = 0.0;        // sum of transfer durations
    double exposed_transfer_s = 0.0;  // total_s - compute_s
};

enum class PrefetchMode { PerLayer, WholeBatch };

/// Transfers run on one serial channel. PerLayer: loads for layer l issue once
/// compute of layer l-2 is done, i.e. they overlap compute of layer l-1.
/// WholeBatch: every load issues at time 0. An eviction of an expert required
/// by layer j waits for compute of layer j to finish. Compute of layer l starts
/// once layer l-1 is done and its own loads have landed. `pre_s` (embedding)
/// and `post_s` (pooling, head) run before and after the layers.
TransferTimeline simulate_timeline(const PlacementPlan& plan, const MemoryBudget& budget, std::span<const double> layer_compute_s,
                                   double pre_s, double post_s, PrefetchMode mode = PrefetchMode::PerLayer);

}  // namespace sida
