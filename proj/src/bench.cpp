#include "sida/bench.hpp"

#include <chrono>
#include <functional>
#include <optional>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sida {
namespace {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

json or_null(double v) { return v < 0 ? json(nullptr) : json(v); }

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(10) << v;
    return s.str();
}

std::string fmt_opt(double v) { return v < 0 ? "" : fmt(v); }

// Route targets for K experts from the corpus latents.
std::vector<std::vector<std::size_t>> route_targets(const Corpus& c, std::size_t K) {
    std::vector<std::vector<std::size_t>> out = c.latents;
    for (auto& seq : out)
        for (auto& e : seq) e %= K;
    return out;
}

std::vector<SequenceBatch> serve_stream(const Corpus& heldout, std::size_t samples, std::size_t batch_size) {
    require(!heldout.sequences.empty(), "bench: held-out split is empty");
    Corpus stream;
    for (std::size_t i = 0; i < samples; ++i) {
        const std::size_t j = i % heldout.sequences.size();
        stream.sequences.push_back(heldout.sequences[j]);
        stream.labels.push_back(heldout.labels[j]);
    }
    return make_batches(stream, batch_size);
}

struct CellRow {
    std::size_t K = 0;
    std::string mode;
    double fraction = 0.0;
    ServingReport report;
    double fidelity = -1.0;
};

double mean_of(const ServingReport& r, double BatchRecord::*field) {
    if (r.batches.empty()) return 0.0;
    double s = 0.0;
    for (const auto& b : r.batches) s += b.*field;
    return s / static_cast<double>(r.batches.size());
}

std::size_t sum_of(const ServingReport& r, std::size_t BatchRecord::*field) {
    std::size_t s = 0;
    for (const auto& b : r.batches) s += b.*field;
    return s;
}

json cell_to_json(const CellRow& c) {
    const auto& r = c.report;
    return {{"num_experts", c.K},
            {"mode", c.mode},
            {"budget_fraction", c.fraction},
            {"budget_bytes", r.budget_bytes},
            {"samples", r.samples()},
            {"throughput", r.throughput},
            {"total_s", r.total_s},
            {"wall_s", r.wall_s},
            {"mean_latency_s", mean_of(r, &BatchRecord::latency_s)},
            {"latency_breakdown",
             {{"compute_s", mean_of(r, &BatchRecord::compute_s)},
              {"exposed_transfer_s", mean_of(r, &BatchRecord::exposed_transfer_s)},
              {"selection_s", mean_of(r, &BatchRecord::selection_s)},
              {"queue_wait_s", mean_of(r, &BatchRecord::queue_wait_s)}}},
            {"hit_rate", or_null(r.hit_rate)},
            {"accuracy", or_null(r.accuracy)},
            {"fidelity", or_null(c.fidelity)},
            {"mean_utilization", r.mean_utilization},
            {"mean_memory_reduction", r.mean_memory_reduction},
            {"peak_fast_tier_bytes", r.peak_fast_tier_bytes},
            {"loads", sum_of(r, &BatchRecord::loads)},
            {"evictions", sum_of(r, &BatchRecord::evictions)},
            {"idle_events", r.idle_events}};
}

}  // namespace

void BenchConfig::validate() const {
    corpus.validate();
    model.validate();
    require(heldout_fraction > 0.0 && heldout_fraction < 1.0, "bench: heldout_fraction must be in (0, 1)");
    require(!experts_grid.empty(), "bench: experts_grid is empty");
    for (std::size_t K : experts_grid) require(K >= 1, "bench: every K must be >= 1");
    require(!budget_fractions.empty(), "bench: budget_fractions is empty");
    for (double f : budget_fractions) require(f > 0.0 && f <= 1.0, "bench: budget fractions must be in (0, 1]");
    require(serve_samples >= 1 && serve_batch_size >= 1, "bench: serve_samples and serve_batch_size must be >= 1");
    require(model.max_seq_len >= corpus.max_length, "bench: model.max_seq_len must cover corpus.max_length");
    for (std::size_t L : length_buckets) require(L >= 1 && L <= model.max_seq_len, "bench: length buckets must be in [1, max_seq_len]");
    require(probe_layer < model.num_layers, "bench: probe_layer out of range");
    require(!run_probe || probe.L <= model.max_seq_len, "bench: probe.L exceeds max_seq_len");
    require(model.num_classes == corpus.num_classes, "bench: model.num_classes must equal corpus.num_classes");
    require(model.vocab_size == corpus.vocab_size, "bench: model.vocab_size must equal corpus.vocab_size");
}

json moe_config_to_json(const MoEConfig& c) {
    return {{"vocab_size", c.vocab_size},       {"d_model", c.d_model},         {"num_layers", c.num_layers},
            {"num_experts", c.num_experts},     {"expert_hidden", c.expert_hidden}, {"max_seq_len", c.max_seq_len},
            {"routing_k", c.routing_k},         {"num_classes", c.num_classes}};
}

MoEConfig moe_config_from_json(const json& j, MoEConfig c) {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_experts = j.value("num_experts", c.num_experts);
    c.expert_hidden = j.value("expert_hidden", c.expert_hidden);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.routing_k = j.value("routing_k", c.routing_k);
    c.num_classes = j.value("num_classes", c.num_classes);
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},       {"batch_size", c.batch_size},       {"lr", c.lr},
            {"weight_decay", c.weight_decay}, {"balance_coeff", c.balance_coeff}, {"clip_norm", c.clip_norm},
            {"route_supervision", c.route_supervision}, {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.balance_coeff = j.value("balance_coeff", c.balance_coeff);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.route_supervision = j.value("route_supervision", c.route_supervision);
    c.seed = j.value("seed", c.seed);
    return c;
}

json predictor_config_to_json(const PredictorConfig& c) {
    return {{"compress_dim", c.compress_dim}, {"lstm_hidden", c.lstm_hidden}, {"top_T", c.top_T},
            {"lambda", c.lambda},             {"lr", c.lr},                   {"batch_size", c.batch_size},
            {"max_steps", c.max_steps},       {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm},
            {"eval_every", c.eval_every},     {"seed", c.seed}};
}

PredictorConfig predictor_config_from_json(const json& j, PredictorConfig c) {
    c.compress_dim = j.value("compress_dim", c.compress_dim);
    c.lstm_hidden = j.value("lstm_hidden", c.lstm_hidden);
    c.top_T = j.value("top_T", c.top_T);
    c.lambda = j.value("lambda", c.lambda);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
    return c;
}

json serve_config_to_json(const ServeConfig& c) {
    return {{"budget_bytes", c.budget.fast_tier_bytes},
            {"bandwidth_bytes_per_s", c.budget.bandwidth_bytes_per_s},
            {"per_transfer_latency_s", c.budget.per_transfer_latency_s},
            {"eval_top_k", c.eval_top_k},
            {"queue_capacity", c.queue_capacity},
            {"prefetch", c.prefetch == PrefetchMode::PerLayer ? "per_layer" : "whole_batch"},
            {"router_delay_ms", std::chrono::duration<double, std::milli>(c.router_delay).count()},
            {"pop_timeout_s", c.pop_timeout_s},
            {"score_hit_rate", c.score_hit_rate}};
}

ServeConfig serve_config_from_json(const json& j, ServeConfig c) {
    c.budget.fast_tier_bytes = j.value("budget_bytes", c.budget.fast_tier_bytes);
    c.budget.bandwidth_bytes_per_s = j.value("bandwidth_bytes_per_s", c.budget.bandwidth_bytes_per_s);
    c.budget.per_transfer_latency_s = j.value("per_transfer_latency_s", c.budget.per_transfer_latency_s);
    c.eval_top_k = j.value("eval_top_k", c.eval_top_k);
    c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
    if (j.contains("prefetch")) {
        const auto p = j.at("prefetch").get<std::string>();
        require(p == "per_layer" || p == "whole_batch", "serve: prefetch must be per_layer or whole_batch");
        c.prefetch = p == "per_layer" ? PrefetchMode::PerLayer : PrefetchMode::WholeBatch;
    }
    if (j.contains("router_delay_ms"))
        c.router_delay = std::chrono::nanoseconds(static_cast<std::int64_t>(j.at("router_delay_ms").get<double>() * 1e6));
    c.pop_timeout_s = j.value("pop_timeout_s", c.pop_timeout_s);
    c.score_hit_rate = j.value("score_hit_rate", c.score_hit_rate);
    return c;
}

json probe_config_to_json(const ProbeConfig& c) {
    return {{"L", c.L}, {"p_grid", c.p_grid}, {"positions", c.positions}, {"trials", c.trials}, {"mode", to_string(c.mode)}, {"seed", c.seed}};
}

ProbeConfig probe_config_from_json(const json& j, ProbeConfig c) {
    c.L = j.value("L", c.L);
    c.p_grid = j.value("p_grid", c.p_grid);
    c.positions = j.value("positions", c.positions);
    c.trials = j.value("trials", c.trials);
    if (j.contains("mode")) c.mode = corruption_mode_from_string(j.at("mode").get<std::string>());
    c.seed = j.value("seed", c.seed);
    return c;
}

BenchConfig bench_config_from_json(const json& j, BenchConfig c) {
    c.seed = j.value("seed", c.seed);
    // derived seeds first, so explicit per-stage seeds below win
    c.corpus.seed = c.seed;
    c.train.seed = c.seed + 1;
    c.predictor.seed = c.seed + 2;
    c.probe.seed = c.seed + 3;
    if (j.contains("corpus")) c.corpus = corpus_spec_from_json(j.at("corpus"), c.corpus);
    if (j.contains("model")) c.model = moe_config_from_json(j.at("model"), c.model);
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
    if (j.contains("predictor")) c.predictor = predictor_config_from_json(j.at("predictor"), c.predictor);
    if (j.contains("serve")) c.serve = serve_config_from_json(j.at("serve"), c.serve);
    if (j.contains("probe")) c.probe = probe_config_from_json(j.at("probe"), c.probe);
    c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
    c.experts_grid = j.value("experts_grid", c.experts_grid);
    c.budget_fractions = j.value("budget_fractions", c.budget_fractions);
    c.serve_samples = j.value("serve_samples", c.serve_samples);
    c.serve_batch_size = j.value("serve_batch_size", c.serve_batch_size);
    c.length_buckets = j.value("length_buckets", c.length_buckets);
    c.sequences_per_bucket = j.value("sequences_per_bucket", c.sequences_per_bucket);
    c.run_probe = j.value("run_probe", c.run_probe);
    c.probe_sequences = j.value("probe_sequences", c.probe_sequences);
    c.probe_layer = j.value("probe_layer", c.probe_layer);
    return c;
}

json bench_config_to_json(const BenchConfig& c) {
    return {{"seed", c.seed},
            {"corpus", corpus_spec_to_json(c.corpus)},
            {"heldout_fraction", c.heldout_fraction},
            {"model", moe_config_to_json(c.model)},
            {"train", train_config_to_json(c.train)},
            {"predictor", predictor_config_to_json(c.predictor)},
            {"experts_grid", c.experts_grid},
            {"budget_fractions", c.budget_fractions},
            {"serve_samples", c.serve_samples},
            {"serve_batch_size", c.serve_batch_size},
            {"serve", serve_config_to_json(c.serve)},
            {"length_buckets", c.length_buckets},
            {"sequences_per_bucket", c.sequences_per_bucket},
            {"run_probe", c.run_probe},
            {"probe", probe_config_to_json(c.probe)},
            {"probe_sequences", c.probe_sequences},
            {"probe_layer", c.probe_layer}};
}

std::vector<Sequence> fixed_length_sequences(CorpusSpec spec, std::size_t length, std::size_t count) {
    spec.min_length = length;
    spec.max_length = length;
    spec.num_sequences = count;
    spec.seed ^= 0x1E7Full * length;
    return generate_corpus(spec).sequences;
}

std::vector<LengthPoint> length_profile(const MoEModel& model, const CorpusSpec& spec, const std::vector<std::size_t>& buckets,
                                        std::size_t sequences_per_bucket) {
    require(sequences_per_bucket >= 1, "length_profile: sequences_per_bucket must be >= 1");
    const ExpertSizes sizes = ExpertSizes::from_model(model);
    const double K = static_cast<double>(model.config().num_experts);
    std::vector<LengthPoint> out;
    for (std::size_t L : buckets) {
        require(L <= model.config().max_seq_len, "length_profile: bucket longer than max_seq_len");
        LengthPoint pt;
        pt.length = L;
        std::uint64_t id = 0;
        for (const Sequence& s : fixed_length_sequences(spec, L, sequences_per_bucket)) {
            SequenceBatch b;
            b.batch_id = id++;
            b.sequences = {s};
            const ActivationTrace trace = model.forward(b).trace;
            pt.mean_memory_reduction += memory_reduction(table_from_trace(b.batch_id, trace), sizes);
            double idle = 0.0;
            for (std::size_t l = 0; l < trace.selections.num_layers(); ++l)
                idle += 1.0 - static_cast<double>(trace.selections.distinct_experts(l).size()) / K;
            pt.mean_idle_fraction += idle / static_cast<double>(trace.selections.num_layers());
            ++pt.sequences;
        }
        pt.mean_memory_reduction /= static_cast<double>(pt.sequences);
        pt.mean_idle_fraction /= static_cast<double>(pt.sequences);
        out.push_back(pt);
    }
    return out;
}

BenchBundle run_benchmark(const BenchConfig& config) {
    config.validate();
    BenchBundle bundle;
    json stages = json::array(), errors = json::array(), models = json::array(), cells_json = json::array();
    json throughput_series = json::array(), reduction_series = json::array(), sparsity_series = json::array();
    json probe_json = nullptr;
    std::vector<CellRow> cells;

    auto stage = [&](const std::string& name, const std::function<void()>& body) {
        const auto t0 = Clock::now();
        bool ok = true;
        try {
            body();
        } catch (const std::exception& e) {
            ok = false;
            errors.push_back({{"stage", name}, {"error", e.what()}});
        }
        stages.push_back({{"name", name}, {"seconds", seconds_since(t0)}, {"ok", ok}});
        return ok;
    };

    Corpus train, heldout;
    const bool have_corpus = stage("corpus", [&] {
        const Corpus corpus = generate_corpus(config.corpus);
        const auto split = static_cast<std::size_t>(static_cast<double>(corpus.sequences.size()) * (1.0 - config.heldout_fraction));
        require(split >= 1 && split < corpus.sequences.size(), "bench: split leaves an empty train or held-out set");
        train = corpus.slice(0, split);
        heldout = corpus.slice(split, corpus.sequences.size());
    });

    bool probed = false;
    for (std::size_t K : config.experts_grid) {
        if (!have_corpus) break;
        const std::string tag = "K=" + std::to_string(K);
        MoEConfig mc = config.model;
        mc.num_experts = K;
        MoEModel model;
        json model_json = {{"num_experts", K}};
        const bool have_model = stage("train_moe " + tag, [&] {
            TrainReport rep;
            const auto targets = route_targets(train, K);
            model = train_toy_moe(mc, train.sequences, train.labels, config.train, &rep, targets);
            model_json["train_accuracy"] = rep.train_accuracy;
            model_json["heldout_accuracy"] = classification_accuracy(model, heldout.sequences, heldout.labels);
            model_json["expert_bytes"] = model.expert_bytes();
            model_json["total_expert_bytes"] = model.total_expert_bytes();
        });
        if (!have_model) {
            models.push_back(model_json);
            continue;
        }
        PredictorNet net;
        const bool have_predictor = stage("train_predictor " + tag, [&] {
            PredictorTrainReport rep;
            net = train_predictor(config.predictor, train.sequences, heldout.sequences, model, &rep);
            model_json["predictor"] = {{"heldout_top1", rep.heldout_top1},
                                       {"heldout_top3", rep.heldout_top3},
                                       {"steps", rep.steps},
                                       {"parameter_bytes", net.parameter_count() * sizeof(double)},
                                       {"final_loss", rep.loss_curve.empty() ? 0.0 : rep.loss_curve.back().total}};
        });
        models.push_back(model_json);

        const auto batches = serve_stream(heldout, config.serve_samples, config.serve_batch_size);
        for (double frac : config.budget_fractions) {
            ServeConfig sc = config.serve;
            sc.budget.fast_tier_bytes = static_cast<std::size_t>(frac * static_cast<double>(model.total_expert_bytes()));
            const std::string where = tag + " budget=" + fmt(frac);
            std::optional<ServingReport> standard;
            stage("serve standard " + where, [&] {
                standard = serve_standard(model, batches, sc);
                cells.push_back({K, "standard", frac, *standard, 1.0});
            });
            auto run_hash = [&](ServeMode mode, const HashBuilder& hash) {
                stage("serve " + to_string(mode) + " " + where, [&] {
                    CellRow row{K, to_string(mode), frac, serve_sida(model, hash, batches, sc, mode), -1.0};
                    if (standard && standard->accuracy > 0.0) row.fidelity = fidelity(row.report, *standard);
                    cells.push_back(std::move(row));
                });
            };
            run_hash(ServeMode::Oracle, oracle_hash(model));
            if (have_predictor) run_hash(ServeMode::Sida, predictor_hash(net, model, sc.eval_top_k));
        }

        stage("length_profile " + tag, [&] {
            for (const auto& pt : length_profile(model, config.corpus, config.length_buckets, config.sequences_per_bucket)) {
                reduction_series.push_back({{"num_experts", K}, {"length", pt.length}, {"sequences", pt.sequences},
                                            {"mean_memory_reduction", pt.mean_memory_reduction}});
                sparsity_series.push_back({{"num_experts", K}, {"length", pt.length}, {"sequences", pt.sequences},
                                           {"mean_idle_fraction", pt.mean_idle_fraction}});
            }
        });

        if (config.run_probe && !probed) {
            probed = true;
            stage("sparsity_probe " + tag, [&] {
                std::vector<Sequence> probe_set;
                for (const auto& s : heldout.sequences) {
                    if (probe_set.size() == config.probe_sequences) break;
                    probe_set.push_back(fit_length(s, config.probe.L));
                }
                const ModelSelector selector(model, config.probe_layer);
                probe_json = probe_report_to_json(run_sparsity_probe(selector, probe_set, config.corpus.vocab_size, config.probe));
                probe_json["num_experts"] = K;
                probe_json["layer"] = config.probe_layer;
            });
        }
    }

    for (const auto& c : cells) {
        cells_json.push_back(cell_to_json(c));
        throughput_series.push_back({{"num_experts", c.K}, {"mode", c.mode}, {"budget_fraction", c.fraction}, {"throughput", c.report.throughput}});
    }

    json& r = bundle.report;
    r["schema_version"] = kBenchBundleSchemaVersion;
    r["status"] = errors.empty() ? "complete" : "partial";
    r["config"] = bench_config_to_json(config);
    r["stages"] = stages;
    r["models"] = models;
    r["serving"] = cells_json;
    r["series"] = {{"throughput_vs_budget", throughput_series},
                   {"reduction_vs_length", reduction_series},
                   {"sparsity_vs_length", sparsity_series}};
    r["sparsity_probe"] = probe_json;
    r["errors"] = errors;

    std::ostringstream serving;
    serving << "num_experts,mode,budget_fraction,budget_bytes,samples,throughput,total_s,wall_s,mean_latency_s,hit_rate,accuracy,"
               "fidelity,mean_utilization,mean_memory_reduction,peak_fast_tier_bytes,loads,evictions,idle_events\n";
    std::ostringstream latency;
    latency << "num_experts,mode,budget_fraction,compute_s,exposed_transfer_s,selection_s,queue_wait_s\n";
    for (const auto& c : cells) {
        const auto& p = c.report;
        serving << c.K << ',' << c.mode << ',' << fmt(c.fraction) << ',' << p.budget_bytes << ',' << p.samples() << ',' << fmt(p.throughput)
                << ',' << fmt(p.total_s) << ',' << fmt(p.wall_s) << ',' << fmt(mean_of(p, &BatchRecord::latency_s)) << ','
                << fmt_opt(p.hit_rate) << ',' << fmt_opt(p.accuracy) << ',' << fmt_opt(c.fidelity) << ',' << fmt(p.mean_utilization) << ','
                << fmt(p.mean_memory_reduction) << ',' << p.peak_fast_tier_bytes << ',' << sum_of(p, &BatchRecord::loads) << ','
                << sum_of(p, &BatchRecord::evictions) << ',' << p.idle_events << '\n';
        latency << c.K << ',' << c.mode << ',' << fmt(c.fraction) << ',' << fmt(mean_of(p, &BatchRecord::compute_s)) << ','
                << fmt(mean_of(p, &BatchRecord::exposed_transfer_s)) << ',' << fmt(mean_of(p, &BatchRecord::selection_s)) << ','
                << fmt(mean_of(p, &BatchRecord::queue_wait_s)) << '\n';
    }
    std::ostringstream throughput;
    throughput << "num_experts,budget_fraction,mode,throughput\n";
    for (const auto& c : cells) throughput << c.K << ',' << fmt(c.fraction) << ',' << c.mode << ',' << fmt(c.report.throughput) << '\n';
    std::ostringstream reduction, sparsity;
    reduction << "num_experts,length,sequences,mean_memory_reduction\n";
    for (const auto& p : reduction_series)
        reduction << p["num_experts"].get<std::size_t>() << ',' << p["length"].get<std::size_t>() << ',' << p["sequences"].get<std::size_t>()
                  << ',' << fmt(p["mean_memory_reduction"].get<double>()) << '\n';
    sparsity << "num_experts,length,sequences,mean_idle_fraction\n";
    for (const auto& p : sparsity_series)
        sparsity << p["num_experts"].get<std::size_t>() << ',' << p["length"].get<std::size_t>() << ',' << p["sequences"].get<std::size_t>()
                 << ',' << fmt(p["mean_idle_fraction"].get<double>()) << '\n';

    bundle.csv["serving.csv"] = serving.str();
    bundle.csv["latency_breakdown.csv"] = latency.str();
    bundle.csv["throughput_vs_budget.csv"] = throughput.str();
    bundle.csv["reduction_vs_length.csv"] = reduction.str();
    bundle.csv["sparsity_vs_length.csv"] = sparsity.str();
    if (!probe_json.is_null()) {
        std::ostringstream probe;
        probe << "p,mean_p_hat\n";
        const auto grid = probe_json["p_grid"].get<std::vector<double>>();
        const auto mean = probe_json["mean_p_hat"].get<std::vector<double>>();
        for (std::size_t k = 0; k < grid.size(); ++k) probe << fmt(grid[k]) << ',' << fmt(mean[k]) << '\n';
        bundle.csv["probe.csv"] = probe.str();
    }
    return bundle;
}

void write_bundle(const BenchBundle& bundle, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto write = [&](const std::string& name, const std::string& text) {
        std::ofstream out(dir / name);
        if (!out) throw std::runtime_error("bench: cannot write " + (dir / name).string());
        out << text;
    };
    write("bundle.json", bundle.report.dump(2) + "\n");
    write("errors.json", bundle.report.at("errors").dump(2) + "\n");
    for (const auto& [name, text] : bundle.csv) write(name, text);
}

}  // namespace sida
