#include "sida/offload.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>

namespace sida {
namespace {

std::string key_str(const ExpertKey& k) { return "(layer " + std::to_string(k.layer) + ", expert " + std::to_string(k.expert) + ")"; }

// Eviction tiers, tried in order; each picks the oldest matching resident.
std::optional<ExpertKey> pick_victim(const ResidencyState& state, const std::set<ExpertKey>& needed, std::size_t layer) {
    for (const auto& k : state.fifo_order())
        if (!needed.count(k)) return k;
    for (const auto& k : state.fifo_order())
        if (k.layer < layer) return k;
    for (const auto& k : state.fifo_order())
        if (k.layer > layer) return k;
    return std::nullopt;
}

void plan_into(PlacementPlan& plan, ResidencyState& scratch, std::size_t layer, const std::vector<std::size_t>& experts,
               const std::set<ExpertKey>& needed, const ExpertSizes& sizes) {
    for (std::size_t e : experts) {
        const ExpertKey key{layer, e};
        if (scratch.contains(key)) continue;
        const std::size_t bytes = sizes.of(key);
        if (bytes > scratch.capacity())
            throw UnservableError("expert " + key_str(key) + " needs " + std::to_string(bytes) + " bytes but the fast tier holds " +
                                  std::to_string(scratch.capacity()));
        while (scratch.used_bytes() + bytes > scratch.capacity()) {
            const auto victim = pick_victim(scratch, needed, layer);
            if (!victim)
                throw UnservableError("working set of layer " + std::to_string(layer) + " exceeds the fast tier of " +
                                      std::to_string(scratch.capacity()) + " bytes");
            const std::size_t vb = scratch.resident().at(*victim);
            scratch.evict(*victim);
            plan.steps.push_back({PlacementStep::Kind::Evict, *victim, vb, layer, needed.count(*victim) && victim->layer < layer});
            plan.evictions.push_back(*victim);
        }
        scratch.load(key, bytes);
        plan.steps.push_back({PlacementStep::Kind::Load, key, bytes, layer, false});
        plan.loads.push_back(key);
        plan.load_bytes += bytes;
    }
}

void finish(PlacementPlan& plan, const MemoryBudget& budget) {
    plan.estimated_transfer_s = plan.loads.empty() ? 0.0 : budget.transfer_seconds(plan.load_bytes, plan.loads.size());
}

void check_budget_matches(const ResidencyState& state, const MemoryBudget& budget) {
    budget.validate();
    require(state.capacity() == budget.fast_tier_bytes, "residency state capacity does not match the budget");
}

}  // namespace

void MemoryBudget::validate() const {
    require(bandwidth_bytes_per_s > 0.0, "MemoryBudget: bandwidth must be > 0");
    require(per_transfer_latency_s >= 0.0, "MemoryBudget: latency must be >= 0");
}

ExpertSizes ExpertSizes::uniform(std::size_t num_layers, std::size_t num_experts, std::size_t expert_bytes) {
    ExpertSizes s;
    s.bytes.assign(num_layers, std::vector<std::size_t>(num_experts, expert_bytes));
    return s;
}

ExpertSizes ExpertSizes::from_model(const MoEModel& model) {
    ExpertSizes s;
    for (const auto& block : model.blocks) {
        std::vector<std::size_t> layer;
        for (const auto& e : block.experts) layer.push_back(e.bytes());
        s.bytes.push_back(std::move(layer));
    }
    return s;
}

std::size_t ExpertSizes::of(const ExpertKey& k) const {
    require(k.layer < bytes.size() && k.expert < bytes[k.layer].size(), "ExpertSizes: unknown expert " + key_str(k));
    return bytes[k.layer][k.expert];
}

std::size_t ExpertSizes::largest() const {
    std::size_t m = 0;
    for (const auto& l : bytes)
        for (std::size_t b : l) m = std::max(m, b);
    return m;
}

std::size_t ExpertSizes::total() const {
    std::size_t t = 0;
    for (const auto& l : bytes) t = std::accumulate(l.begin(), l.end(), t);
    return t;
}

void ResidencyState::load(const ExpertKey& k, std::size_t bytes) {
    require(!contains(k), "load: expert " + key_str(k) + " is already resident");
    require(used_ + bytes <= capacity_, "load: expert " + key_str(k) + " would exceed the fast tier");
    resident_.emplace(k, bytes);
    fifo_.push_back(k);
    used_ += bytes;
    peak_ = std::max(peak_, used_);
}

void ResidencyState::evict(const ExpertKey& k) {
    const auto it = resident_.find(k);
    require(it != resident_.end(), "evict: expert " + key_str(k) + " is not resident");
    used_ -= it->second;
    resident_.erase(it);
    fifo_.erase(std::find(fifo_.begin(), fifo_.end(), k));
}

std::uint64_t ResidencyState::fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    };
    mix(capacity_);
    for (const auto& k : fifo_) {
        mix(k.layer);
        mix(k.expert);
    }
    return h;
}

void ResidencyState::check_invariants() const {
    std::size_t sum = 0;
    for (const auto& [k, b] : resident_) sum += b;
    require(sum == used_, "residency: used_bytes out of sync");
    require(used_ <= capacity_, "residency: over capacity");
    require(fifo_.size() == resident_.size(), "residency: FIFO size mismatch");
    for (const auto& k : fifo_) require(resident_.count(k) == 1, "residency: FIFO names a non-resident expert");
}

std::pair<std::size_t, std::size_t> PlacementPlan::layer_loads(std::size_t layer) const {
    std::size_t bytes = 0, count = 0;
    for (const auto& s : steps)
        if (s.kind == PlacementStep::Kind::Load && s.for_layer == layer) {
            bytes += s.bytes;
            ++count;
        }
    return {bytes, count};
}

std::vector<std::vector<std::size_t>> required_experts(const ExpertHashTable& table) {
    std::vector<std::vector<std::size_t>> out(table.entries.num_layers());
    for (std::size_t l = 0; l < table.entries.num_layers(); ++l) {
        std::set<std::size_t> s;
        for (std::size_t t = 0; t < table.entries.num_tokens(); ++t)
            for (const auto& c : table.entries.at(l, t)) s.insert(c.expert);
        out[l].assign(s.begin(), s.end());
    }
    return out;
}

PlacementPlan plan_placement(const ExpertHashTable& table, const ResidencyState& state, const MemoryBudget& budget,
                             const ExpertSizes& sizes) {
    check_budget_matches(state, budget);
    const auto required = required_experts(table);
    std::set<ExpertKey> needed;
    for (std::size_t l = 0; l < required.size(); ++l)
        for (std::size_t e : required[l]) needed.insert({l, e});
    PlacementPlan plan;
    plan.origin = state.fingerprint();
    ResidencyState scratch = state;
    for (std::size_t l = 0; l < required.size(); ++l) plan_into(plan, scratch, l, required[l], needed, sizes);
    finish(plan, budget);
    return plan;
}

PlacementPlan plan_layer(std::size_t layer, const std::vector<std::size_t>& experts, const ResidencyState& state,
                         const MemoryBudget& budget, const ExpertSizes& sizes) {
    check_budget_matches(state, budget);
    std::set<ExpertKey> needed;
    for (std::size_t e : experts) needed.insert({layer, e});
    PlacementPlan plan;
    plan.origin = state.fingerprint();
    ResidencyState scratch = state;
    plan_into(plan, scratch, layer, experts, needed, sizes);
    finish(plan, budget);
    return plan;
}

double apply_plan(ResidencyState& state, const PlacementPlan& plan) {
    require(plan.origin == state.fingerprint(), "apply_plan: plan was made from a different residency state");
    for (const auto& s : plan.steps) {
        if (s.kind == PlacementStep::Kind::Load)
            state.load(s.key, s.bytes);
        else
            state.evict(s.key);
    }
    return plan.estimated_transfer_s;
}

double effective_utilization(const ResidencyState& state, const std::set<ExpertKey>& activated) {
    require(state.used_bytes() > 0, "effective_utilization: fast tier is empty");
    std::size_t bytes = 0;
    for (const auto& k : activated) {
        const auto it = state.resident().find(k);
        require(it != state.resident().end(), "effective_utilization: activated expert " + key_str(k) + " is not resident");
        bytes += it->second;
    }
    return static_cast<double>(bytes) / static_cast<double>(state.used_bytes());
}

std::size_t required_expert_bytes(const ExpertHashTable& table, const ExpertSizes& sizes) {
    const auto required = required_experts(table);
    std::size_t bytes = 0;
    for (std::size_t l = 0; l < required.size(); ++l)
        for (std::size_t e : required[l]) bytes += sizes.of({l, e});
    return bytes;
}

double memory_reduction(const ExpertHashTable& table, const ExpertSizes& sizes) {
    const std::size_t total = sizes.total();
    require(total > 0, "memory_reduction: model has no expert bytes");
    return 1.0 - static_cast<double>(required_expert_bytes(table, sizes)) / static_cast<double>(total);
}

TransferTimeline simulate_timeline(const PlacementPlan& plan, const MemoryBudget& budget, std::span<const double> layer_compute_s,
                                   double pre_s, double post_s, PrefetchMode mode) {
    const std::size_t L = layer_compute_s.size();
    std::vector<double> compute_end(L, 0.0);
    double channel = 0.0;
    TransferTimeline tl;
    std::size_t next = 0;
    for (std::size_t l = 0; l < L; ++l) {
        double issue = 0.0;
        if (mode == PrefetchMode::PerLayer && l >= 2) issue = compute_end[l - 2];
        double loads_done = 0.0;
        for (; next < plan.steps.size() && plan.steps[next].for_layer == l; ++next) {
            const auto& s = plan.steps[next];
            if (s.kind == PlacementStep::Kind::Evict) {
                if (s.in_use) channel = std::max(channel, compute_end[s.key.layer]);
                continue;
            }
            const double d = budget.transfer_seconds(s.bytes, 1);
            channel = std::max(channel, issue) + d;
            tl.transfer_s += d;
            loads_done = channel;
        }
        const double prev_end = l == 0 ? pre_s : compute_end[l - 1];
        compute_end[l] = std::max(prev_end, loads_done) + layer_compute_s[l];
    }
    require(next == plan.steps.size(), "simulate_timeline: plan steps are not in layer order or name unknown layers");
    tl.compute_s = pre_s + post_s + std::accumulate(layer_compute_s.begin(), layer_compute_s.end(), 0.0);
    tl.total_s = (L == 0 ? pre_s : compute_end[L - 1]) + post_s;
    tl.exposed_transfer_s = std::max(0.0, tl.total_s - tl.compute_s);
    return tl;
}

}  // namespace sida
