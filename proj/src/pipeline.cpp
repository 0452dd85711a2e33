#include "sida/pipeline.hpp"

#include <exception>
#include <numeric>
#include <sstream>
#include <thread>

namespace sida {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void check_stream(const std::vector<SequenceBatch>& batches) {
    for (std::size_t i = 1; i < batches.size(); ++i)
        require(batches[i].batch_id > batches[i - 1].batch_id, "serve: batch ids must strictly increase");
    for (const auto& b : batches) require(b.labels.empty() || b.labels.size() == b.size(), "serve: labels do not match sequences");
}

MemoryBudget resolve_budget(const ServeConfig& config, const ExpertSizes& sizes) {
    MemoryBudget budget = config.budget;
    if (budget.fast_tier_bytes == 0) budget.fast_tier_bytes = sizes.total();
    budget.validate();
    if (budget.fast_tier_bytes < sizes.largest())
        throw UnservableError("fast tier of " + std::to_string(budget.fast_tier_bytes) + " bytes cannot hold one expert of " +
                              std::to_string(sizes.largest()) + " bytes");
    return budget;
}

std::size_t count_correct(const SequenceBatch& b, const std::vector<Vector>& logits, std::vector<std::size_t>& predictions) {
    std::size_t correct = 0;
    for (std::size_t s = 0; s < logits.size(); ++s) {
        predictions.push_back(argmax(logits[s]));
        if (!b.labels.empty() && predictions.back() == b.labels[s]) ++correct;
    }
    return correct;
}

// Experts the batch used that are resident right now.
std::set<ExpertKey> resident_used(const RoutingGrid& grid, const ResidencyState& state) {
    std::set<ExpertKey> out;
    for (std::size_t l = 0; l < grid.num_layers(); ++l)
        for (std::size_t e : grid.distinct_experts(l))
            if (state.contains({l, e})) out.insert({l, e});
    return out;
}

void finalize(ServingReport& r, const std::vector<SequenceBatch>& batches, const ResidencyState& state) {
    double exposed = 0.0, util = 0.0, reduction = 0.0;
    std::size_t correct = 0;
    for (const auto& rec : r.batches) {
        exposed += rec.exposed_transfer_s;
        util += rec.utilization;
        reduction += rec.memory_reduction;
        correct += rec.correct;
    }
    const std::size_t n = r.samples();
    r.total_s = r.wall_s + exposed;
    r.throughput = r.total_s > 0 ? static_cast<double>(n) / r.total_s : 0.0;
    if (!r.batches.empty()) {
        r.mean_utilization = util / static_cast<double>(r.batches.size());
        r.mean_memory_reduction = reduction / static_cast<double>(r.batches.size());
    }
    const bool labeled = !batches.empty() && std::all_of(batches.begin(), batches.end(), [](const auto& b) { return !b.labels.empty(); });
    if (labeled && n > 0) r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    r.peak_fast_tier_bytes = state.peak_bytes();
}

void score_tables(ServingReport& r, const MoEModel& model, const std::vector<SequenceBatch>& batches,
                  const std::vector<ExpertHashTable>& tables, std::size_t k) {
    std::vector<ActivationTrace> traces;
    for (const auto& b : batches) traces.push_back(model.forward(b).trace);
    r.hit_rate = hash_hit_rate(tables, traces, k);
    r.hit_rate_top1 = hash_hit_rate(tables, traces, 1);
}

}  // namespace

HashTableQueue::HashTableQueue(std::size_t capacity) : capacity_(capacity) {
    require(capacity >= 1, "HashTableQueue: capacity must be >= 1");
}

bool HashTableQueue::push(ExpertHashTable table) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    require(!last_pushed_ || table.batch_id > *last_pushed_, "HashTableQueue: batch ids must strictly increase");
    last_pushed_ = table.batch_id;
    items_.push_back(std::move(table));
    ++pushed_;
    not_empty_.notify_one();
    return true;
}

std::optional<ExpertHashTable> HashTableQueue::pop(std::uint64_t batch_id, std::chrono::duration<double> timeout, double* waited_s) {
    const auto t0 = Clock::now();
    std::unique_lock lock(mu_);
    if (items_.empty() && !closed_) {
        ++idle_;
        consumer_blocked_ = true;
        consumer_waiting_.notify_all();
        not_empty_.wait_for(lock, timeout, [&] { return closed_ || !items_.empty(); });
        consumer_blocked_ = false;
    }
    if (waited_s) *waited_s = seconds_since(t0);
    if (items_.empty()) return std::nullopt;
    require(items_.front().batch_id == batch_id, "HashTableQueue: expected batch " + std::to_string(batch_id) + " at the head, found " +
                                                     std::to_string(items_.front().batch_id));
    ExpertHashTable out = std::move(items_.front());
    items_.pop_front();
    ++popped_;
    not_full_.notify_one();
    consumer_waiting_.notify_all();
    return out;
}

void HashTableQueue::close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
    consumer_waiting_.notify_all();
}

std::size_t HashTableQueue::idle_events() const {
    std::lock_guard lock(mu_);
    return idle_;
}

std::size_t HashTableQueue::pushed() const {
    std::lock_guard lock(mu_);
    return pushed_;
}

std::size_t HashTableQueue::popped() const {
    std::lock_guard lock(mu_);
    return popped_;
}

void HashTableQueue::wait_for_consumer() const {
    std::unique_lock lock(mu_);
    consumer_waiting_.wait(lock, [&] { return consumer_blocked_ || popped_ > 0 || closed_; });
}

std::string to_string(ServeMode m) {
    switch (m) {
        case ServeMode::Sida: return "sida";
        case ServeMode::Standard: return "standard";
        case ServeMode::Oracle: return "oracle";
    }
    return "unknown";
}

ServeMode serve_mode_from_string(const std::string& s) {
    if (s == "sida") return ServeMode::Sida;
    if (s == "standard") return ServeMode::Standard;
    if (s == "oracle") return ServeMode::Oracle;
    throw ContractViolation("unknown serve mode '" + s + "' (expected sida, standard or oracle)");
}

std::size_t ServingReport::samples() const {
    std::size_t n = 0;
    for (const auto& b : batches) n += b.samples;
    return n;
}

HashBuilder predictor_hash(const PredictorNet& net, const MoEModel& model, std::size_t eval_top_k) {
    require(eval_top_k >= 1 && eval_top_k <= net.num_experts(), "predictor_hash: eval_top_k must be in [1, K]");
    require(net.num_experts() == model.config().num_experts && net.num_moe_layers() == model.config().num_layers &&
                net.d_model() == model.config().d_model,
            "predictor_hash: predictor shape does not match the model");
    return [&net, embed = InputEmbedder(model), eval_top_k](const SequenceBatch& b) { return build_hash_table(net, embed, b, eval_top_k); };
}

HashBuilder oracle_hash(const MoEModel& model) {
    return [&model](const SequenceBatch& b) { return table_from_trace(b.batch_id, model.forward(b).trace); };
}

ServingReport serve_sida(const MoEModel& model, const HashBuilder& hash, const std::vector<SequenceBatch>& batches,
                         const ServeConfig& config, ServeMode mode) {
    check_stream(batches);
    const ExpertSizes sizes = ExpertSizes::from_model(model);
    const MemoryBudget budget = resolve_budget(config, sizes);
    HashTableQueue queue(config.queue_capacity);

    ServingReport report;
    report.mode = mode;
    report.budget_bytes = budget.fast_tier_bytes;
    report.total_expert_bytes = sizes.total();
    report.eval_top_k = config.eval_top_k;
    ResidencyState state(budget.fast_tier_bytes);
    if (batches.empty()) return report;

    std::vector<double> build_s(batches.size(), 0.0);
    std::vector<ExpertHashTable> tables;
    std::exception_ptr hash_error, infer_error;
    const auto timeout = std::chrono::duration<double>(config.pop_timeout_s);

    const auto start = Clock::now();
    std::thread inference([&] {
        try {
            for (const auto& b : batches) {
                double waited = 0.0;
                auto table = queue.pop(b.batch_id, timeout, &waited);
                if (!table) throw std::runtime_error("serve_sida: no hash table for batch " + std::to_string(b.batch_id));
                const auto t0 = Clock::now();
                const PlacementPlan plan = plan_placement(*table, state, budget, sizes);
                apply_plan(state, plan);
                const ForwardResult res = model.forward(b, *table);
                BatchRecord rec;
                rec.compute_s = seconds_since(t0);
                std::vector<double> layer_s;
                for (const auto& t : res.timing) layer_s.push_back(t.mixing_s + t.routing_s + t.experts_s);
                const double other = std::max(0.0, rec.compute_s - std::accumulate(layer_s.begin(), layer_s.end(), 0.0));
                const TransferTimeline tl = simulate_timeline(plan, budget, layer_s, 0.0, other, config.prefetch);
                rec.batch_id = b.batch_id;
                rec.samples = b.size();
                rec.tokens = b.total_tokens();
                rec.queue_wait_s = waited;
                rec.transfer_s = tl.transfer_s;
                rec.exposed_transfer_s = tl.exposed_transfer_s;
                rec.latency_s = rec.compute_s + rec.exposed_transfer_s;
                rec.loads = plan.loads.size();
                rec.evictions = plan.evictions.size();
                rec.utilization = effective_utilization(state, resident_used(table->entries, state));
                rec.memory_reduction = memory_reduction(*table, sizes);
                report.predictions.emplace_back();
                rec.correct = count_correct(b, res.logits, report.predictions.back());
                report.logits.push_back(res.logits);
                report.batches.push_back(rec);
                tables.push_back(std::move(*table));
            }
        } catch (...) {
            infer_error = std::current_exception();
            queue.close();
        }
    });
    queue.wait_for_consumer();
    std::thread hasher([&] {
        try {
            for (std::size_t i = 0; i < batches.size(); ++i) {
                const auto t0 = Clock::now();
                ExpertHashTable table = hash(batches[i]);
                table.batch_id = batches[i].batch_id;
                build_s[i] = seconds_since(t0);
                if (!queue.push(std::move(table))) return;
            }
        } catch (...) {
            hash_error = std::current_exception();
            queue.close();
        }
    });
    hasher.join();
    inference.join();
    report.wall_s = seconds_since(start);
    if (hash_error) std::rethrow_exception(hash_error);
    if (infer_error) std::rethrow_exception(infer_error);

    for (std::size_t i = 0; i < report.batches.size(); ++i) report.batches[i].selection_s = build_s[i];
    report.idle_events = queue.idle_events();
    finalize(report, batches, state);
    if (config.score_hit_rate) score_tables(report, model, batches, tables, config.eval_top_k);
    return report;
}

ServingReport serve_standard(const MoEModel& model, const std::vector<SequenceBatch>& batches, const ServeConfig& config) {
    check_stream(batches);
    const ExpertSizes sizes = ExpertSizes::from_model(model);
    const MemoryBudget budget = resolve_budget(config, sizes);

    ServingReport report;
    report.mode = ServeMode::Standard;
    report.budget_bytes = budget.fast_tier_bytes;
    report.total_expert_bytes = sizes.total();
    report.eval_top_k = model.config().routing_k;
    ResidencyState state(budget.fast_tier_bytes);

    const auto start = Clock::now();
    for (const auto& b : batches) {
        BatchRecord rec;
        ForwardOptions opt;
        opt.router_delay = config.router_delay;
        opt.on_layer_routed = [&](std::size_t layer, const RoutingGrid& selections) {
            const PlacementPlan plan = plan_layer(layer, selections.distinct_experts(layer), state, budget, sizes);
            rec.transfer_s += apply_plan(state, plan);
            rec.loads += plan.loads.size();
            rec.evictions += plan.evictions.size();
        };
        const auto t0 = Clock::now();
        const ForwardResult res = model.forward(b, opt);
        rec.compute_s = seconds_since(t0);
        rec.batch_id = b.batch_id;
        rec.samples = b.size();
        rec.tokens = b.total_tokens();
        for (const auto& t : res.timing) rec.selection_s += t.routing_s;
        // reactive loads sit on the critical path
        rec.exposed_transfer_s = rec.transfer_s;
        rec.latency_s = rec.compute_s + rec.exposed_transfer_s;
        rec.utilization = effective_utilization(state, resident_used(res.trace.selections, state));
        rec.memory_reduction = memory_reduction(table_from_trace(b.batch_id, res.trace), sizes);
        report.predictions.emplace_back();
        rec.correct = count_correct(b, res.logits, report.predictions.back());
        report.logits.push_back(res.logits);
        report.batches.push_back(rec);
    }
    report.wall_s = seconds_since(start);
    finalize(report, batches, state);
    return report;
}

double fidelity(const ServingReport& sida, const ServingReport& reference) {
    require(sida.accuracy >= 0.0 && reference.accuracy >= 0.0, "fidelity: both runs need labeled samples");
    require(sida.samples() == reference.samples(), "fidelity: runs cover different sample counts");
    if (!(reference.accuracy > 0.0)) throw NumericError("fidelity: reference accuracy is zero");
    return sida.accuracy / reference.accuracy;
}

nlohmann::json report_to_json(const ServingReport& r) {
    nlohmann::json batches = nlohmann::json::array();
    for (const auto& b : r.batches)
        batches.push_back({{"batch_id", b.batch_id},
                           {"samples", b.samples},
                           {"tokens", b.tokens},
                           {"latency_s", b.latency_s},
                           {"compute_s", b.compute_s},
                           {"queue_wait_s", b.queue_wait_s},
                           {"selection_s", b.selection_s},
                           {"transfer_s", b.transfer_s},
                           {"exposed_transfer_s", b.exposed_transfer_s},
                           {"loads", b.loads},
                           {"evictions", b.evictions},
                           {"utilization", b.utilization},
                           {"memory_reduction", b.memory_reduction},
                           {"correct", b.correct}});
    auto opt = [](double v) { return v < 0 ? nlohmann::json(nullptr) : nlohmann::json(v); };
    return {{"schema_version", kServingReportSchemaVersion},
            {"mode", to_string(r.mode)},
            {"budget_bytes", r.budget_bytes},
            {"total_expert_bytes", r.total_expert_bytes},
            {"eval_top_k", r.eval_top_k},
            {"aggregate",
             {{"samples", r.samples()},
              {"wall_s", r.wall_s},
              {"total_s", r.total_s},
              {"throughput", r.throughput},
              {"hit_rate", opt(r.hit_rate)},
              {"hit_rate_top1", opt(r.hit_rate_top1)},
              {"accuracy", opt(r.accuracy)},
              {"mean_utilization", r.mean_utilization},
              {"mean_memory_reduction", r.mean_memory_reduction},
              {"peak_fast_tier_bytes", r.peak_fast_tier_bytes},
              {"idle_events", r.idle_events}}},
            {"batches", std::move(batches)}};
}

std::string report_to_csv(const ServingReport& r) {
    std::ostringstream out;
    out.precision(9);
    out << "mode,batch_id,samples,tokens,latency_s,compute_s,queue_wait_s,selection_s,transfer_s,exposed_transfer_s,loads,evictions,"
           "utilization,memory_reduction,correct\n";
    for (const auto& b : r.batches)
        out << to_string(r.mode) << ',' << b.batch_id << ',' << b.samples << ',' << b.tokens << ',' << b.latency_s << ',' << b.compute_s << ','
            << b.queue_wait_s << ',' << b.selection_s << ',' << b.transfer_s << ',' << b.exposed_transfer_s << ',' << b.loads << ','
            << b.evictions << ',' << b.utilization << ',' << b.memory_reduction << ',' << b.correct << '\n';
    return out.str();
}

}  // namespace sida
