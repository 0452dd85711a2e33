#pragma once

// Types shared by the MoE model, the expert predictor and the serving loop:
// token batches, recorded router activity, and per-batch expert hash tables.
//
// Tokens inside a batch are addressed by a flat index: sequence 0 occupies
// [0, len0), sequence 1 occupies [len0, len0 + len1), and so on.

#include "sida/numkit.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <vector>

namespace sida {

using TokenId = std::uint32_t;
using Sequence = std::vector<TokenId>;

struct SequenceBatch {
    std::uint64_t batch_id = 0;
    std::vector<Sequence> sequences;
    std::vector<std::size_t> labels;  // empty when unlabeled

    std::size_t size() const { return sequences.size(); }
    std::size_t total_tokens() const;
    /// Flat index of the first token of each sequence.
    std::vector<std::size_t> offsets() const;
};

struct ExpertChoice {
    std::size_t expert = 0;
    double alpha = 0.0;

    bool operator==(const ExpertChoice&) const = default;
};

/// Selected experts for one (layer, token), ordered by alpha descending.
using RoutingEntry = std::vector<ExpertChoice>;

/// Grid of routing entries indexed by (layer, flat token).
class RoutingGrid {
public:
    RoutingGrid() = default;
    RoutingGrid(std::size_t num_layers, std::size_t num_tokens)
        : num_layers_(num_layers), num_tokens_(num_tokens), entries_(num_layers * num_tokens) {}

    std::size_t num_layers() const { return num_layers_; }
    std::size_t num_tokens() const { return num_tokens_; }

    RoutingEntry& at(std::size_t layer, std::size_t token) { return entries_.at(layer * num_tokens_ + token); }
    const RoutingEntry& at(std::size_t layer, std::size_t token) const { return entries_.at(layer * num_tokens_ + token); }

    /// Highest-alpha expert at (layer, token).
    std::size_t top1(std::size_t layer, std::size_t token) const;

    /// Distinct experts referenced in `layer`, ascending.
    IndexList distinct_experts(std::size_t layer) const;

    bool operator==(const RoutingGrid&) const = default;

private:
    std::size_t num_layers_ = 0;
    std::size_t num_tokens_ = 0;
    std::vector<RoutingEntry> entries_;
};

/// What the model actually did for one batch. In router mode `router_probs`
/// holds the full softmax over experts for every (layer, token); in external
/// mode it is empty and `selections` echoes the supplied table.
struct ActivationTrace {
    RoutingGrid selections;
    std::vector<Vector> router_probs;  // layer-major, same indexing as selections

    const Vector& probs(std::size_t layer, std::size_t token) const {
        return router_probs.at(layer * selections.num_tokens() + token);
    }
    bool has_router_probs() const { return !router_probs.empty(); }
};

/// Predicted (expert, alpha) lists for every (layer, token) of one batch.
struct ExpertHashTable {
    std::uint64_t batch_id = 0;
    RoutingGrid entries;

    std::size_t num_layers() const { return entries.num_layers(); }
    std::size_t num_tokens() const { return entries.num_tokens(); }
};

/// Build a table that replays a router-mode trace (the oracle hash).
ExpertHashTable table_from_trace(std::uint64_t batch_id, const ActivationTrace& trace);

/// {"batch_id": n, "entries": [[layer, token, [[expert, alpha], ...]], ...]}
nlohmann::json hash_table_to_json(const ExpertHashTable& table);
ExpertHashTable hash_table_from_json(const nlohmann::json& j);

}  // namespace sida
