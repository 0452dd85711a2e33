#include "sida/routing.hpp"

#include <algorithm>

namespace sida {

std::size_t SequenceBatch::total_tokens() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
}

std::vector<std::size_t> SequenceBatch::offsets() const {
    std::vector<std::size_t> out;
    out.reserve(sequences.size());
    std::size_t n = 0;
    for (const auto& s : sequences) {
        out.push_back(n);
        n += s.size();
    }
    return out;
}

std::size_t RoutingGrid::top1(std::size_t layer, std::size_t token) const {
    const auto& entry = at(layer, token);
    require(!entry.empty(), "routing entry is empty at layer " + std::to_string(layer) + ", token " + std::to_string(token));
    return entry.front().expert;
}

IndexList RoutingGrid::distinct_experts(std::size_t layer) const {
    IndexList out;
    for (std::size_t t = 0; t < num_tokens_; ++t)
        for (const auto& c : at(layer, t)) out.push_back(c.expert);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

ExpertHashTable table_from_trace(std::uint64_t batch_id, const ActivationTrace& trace) {
    return ExpertHashTable{batch_id, trace.selections};
}

nlohmann::json hash_table_to_json(const ExpertHashTable& table) {
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t l = 0; l < table.num_layers(); ++l)
        for (std::size_t t = 0; t < table.num_tokens(); ++t) {
            nlohmann::json choices = nlohmann::json::array();
            for (const auto& c : table.entries.at(l, t)) choices.push_back({c.expert, c.alpha});
            entries.push_back({l, t, std::move(choices)});
        }
    return {{"batch_id", table.batch_id}, {"entries", std::move(entries)}};
}

ExpertHashTable hash_table_from_json(const nlohmann::json& j) {
    ExpertHashTable table;
    table.batch_id = j.at("batch_id").get<std::uint64_t>();
    const auto& entries = j.at("entries");
    std::size_t layers = 0, tokens = 0;
    for (const auto& e : entries) {
        layers = std::max(layers, e.at(0).get<std::size_t>() + 1);
        tokens = std::max(tokens, e.at(1).get<std::size_t>() + 1);
    }
    table.entries = RoutingGrid(layers, tokens);
    for (const auto& e : entries) {
        auto& entry = table.entries.at(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
        for (const auto& c : e.at(2)) entry.push_back({c.at(0).get<std::size_t>(), c.at(1).get<double>()});
    }
    return table;
}

}  // namespace sida
