// Command-line driver: corpus generation, teacher and predictor training,
// tracing, sparsity probing, serving and the benchmark grid.
//
// Every subcommand reads the same nested JSON config (see README); flags
// override the relevant fields. SIDA_SEED, when set, replaces every seed.
//
// Exit codes: 0 success, 1 runtime failure, 2 bad usage or contract
// violation, 3 benchmark finished with a partial bundle.

#include "sida/bench.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

using namespace sida;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return json::parse(in);
}

void write_text(const std::string& path, const std::string& text) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Config file (optional) with SIDA_SEED applied on top.
BenchConfig load_config(const std::string& path) {
    json j = path.empty() ? json::object() : read_json(path);
    if (const char* env = std::getenv("SIDA_SEED")) {
        const std::string s(env);
        std::size_t used = 0;
        unsigned long long seed = 0;
        try {
            seed = std::stoull(s, &used);
        } catch (const std::logic_error&) {
            used = 0;
        }
        if (s.empty() || used != s.size() || s[0] == '-') throw ContractViolation("SIDA_SEED must be an unsigned integer, got '" + s + "'");
        j["seed"] = seed;
        for (const char* section : {"corpus", "train", "predictor", "probe"})
            if (j.contains(section)) j[section].erase("seed");
    }
    return bench_config_from_json(j);
}

struct Split {
    Corpus train, heldout;
};

Split split_corpus(const Corpus& c, double heldout_fraction) {
    const auto cut = static_cast<std::size_t>(static_cast<double>(c.sequences.size()) * (1.0 - heldout_fraction));
    require(cut >= 1 && cut < c.sequences.size(), "corpus too small to split into train and held-out parts");
    return {c.slice(0, cut), c.slice(cut, c.sequences.size())};
}

Corpus pick_split(const Corpus& c, const std::string& which, double heldout_fraction) {
    if (which == "all") return c;
    const Split s = split_corpus(c, heldout_fraction);
    return which == "train" ? s.train : s.heldout;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sida: expert-activation prediction and offloaded MoE serving"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "generate the planted synthetic corpus");
    std::string gen_out;
    gen->add_option("--out", gen_out, "corpus JSON output")->required();

    // train-moe
    auto* tm = app.add_subcommand("train-moe", "train the teacher MoE classifier");
    std::string tm_corpus, tm_out, tm_report;
    std::size_t tm_experts = 0;
    tm->add_option("--corpus", tm_corpus, "corpus JSON")->required()->check(CLI::ExistingFile);
    tm->add_option("--out", tm_out, "checkpoint output")->required();
    tm->add_option("--experts", tm_experts, "number of experts per layer (default: config)");
    tm->add_option("--report", tm_report, "training report JSON");

    // trace
    auto* tr = app.add_subcommand("trace", "record router activations as per-batch expert hash tables");
    std::string tr_ckpt, tr_corpus, tr_out, tr_split = "all";
    std::size_t tr_batch = 1;
    tr->add_option("--checkpoint", tr_ckpt, "MoE checkpoint")->required()->check(CLI::ExistingFile);
    tr->add_option("--corpus", tr_corpus, "corpus JSON")->required()->check(CLI::ExistingFile);
    tr->add_option("--out", tr_out, "trace JSON output")->required();
    tr->add_option("--split", tr_split, "train, heldout or all")->check(CLI::IsMember({"train", "heldout", "all"}));
    tr->add_option("--batch-size", tr_batch, "sequences per batch")->check(CLI::PositiveNumber);

    // train-predictor
    auto* tp = app.add_subcommand("train-predictor", "distill the expert predictor from a teacher checkpoint");
    std::string tp_ckpt, tp_corpus, tp_out, tp_report;
    tp->add_option("--checkpoint", tp_ckpt, "teacher MoE checkpoint")->required()->check(CLI::ExistingFile);
    tp->add_option("--corpus", tp_corpus, "corpus JSON")->required()->check(CLI::ExistingFile);
    tp->add_option("--out", tp_out, "predictor checkpoint output")->required();
    tp->add_option("--report", tp_report, "training report JSON");

    // probe-sparsity
    auto* ps = app.add_subcommand("probe-sparsity", "estimate critical-token counts by corruption");
    std::string ps_ckpt, ps_corpus, ps_out, ps_mode;
    std::size_t ps_layer = 0;
    ps->add_option("--checkpoint", ps_ckpt, "MoE checkpoint")->required()->check(CLI::ExistingFile);
    ps->add_option("--corpus", ps_corpus, "corpus JSON")->required()->check(CLI::ExistingFile);
    ps->add_option("--out", ps_out, "probe report JSON")->required();
    ps->add_option("--mode", ps_mode, "token or position (default: config)")->check(CLI::IsMember({"token", "position"}));
    auto* ps_layer_opt = ps->add_option("--layer", ps_layer, "MoE layer to probe (default: config)");

    // serve
    auto* sv = app.add_subcommand("serve", "serve a corpus split in sida, standard or oracle mode");
    std::string sv_mode = "sida", sv_ckpt, sv_pred, sv_corpus, sv_report, sv_csv, sv_split = "heldout";
    std::size_t sv_budget = 0, sv_topk = 0, sv_batch = 0;
    double sv_bandwidth = 0, sv_latency = -1, sv_delay_ms = -1;
    sv->add_option("--mode", sv_mode, "sida, standard or oracle")->check(CLI::IsMember({"sida", "standard", "oracle"}));
    sv->add_option("--checkpoint", sv_ckpt, "MoE checkpoint")->required()->check(CLI::ExistingFile);
    sv->add_option("--predictor", sv_pred, "predictor checkpoint (sida mode)")->check(CLI::ExistingFile);
    sv->add_option("--corpus", sv_corpus, "corpus JSON")->required()->check(CLI::ExistingFile);
    sv->add_option("--split", sv_split, "train, heldout or all")->check(CLI::IsMember({"train", "heldout", "all"}));
    sv->add_option("--budget-bytes", sv_budget, "fast-tier capacity in bytes, 0 = unlimited");
    sv->add_option("--top-k", sv_topk, "experts evaluated per token from the hash table");
    sv->add_option("--batch-size", sv_batch, "sequences per batch (default: config)");
    sv->add_option("--bandwidth", sv_bandwidth, "transfer bandwidth in bytes/s")->check(CLI::PositiveNumber);
    sv->add_option("--latency", sv_latency, "per-transfer latency in seconds")->check(CLI::NonNegativeNumber);
    sv->add_option("--router-delay-ms", sv_delay_ms, "injected per-router selection overhead")->check(CLI::NonNegativeNumber);
    sv->add_option("--report", sv_report, "serving report JSON")->required();
    sv->add_option("--csv", sv_csv, "per-batch CSV");

    // bench
    auto* bn = app.add_subcommand("bench", "run the full benchmark grid");
    std::string bn_out;
    bn->add_option("--out", bn_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;  // --help exits 0
    }

    try {
        const BenchConfig cfg = load_config(config_path);

        if (*gen) {
            const Corpus c = generate_corpus(cfg.corpus);
            write_json(gen_out, corpus_to_json(c));
            std::cout << "wrote " << c.sequences.size() << " sequences to " << gen_out << "\n";
        } else if (*tm) {
            const Corpus c = corpus_from_json(read_json(tm_corpus));
            const Split s = split_corpus(c, cfg.heldout_fraction);
            MoEConfig mc = cfg.model;
            if (tm_experts) mc.num_experts = tm_experts;
            mc.vocab_size = c.spec.vocab_size;
            mc.num_classes = c.spec.num_classes;
            mc.max_seq_len = std::max(mc.max_seq_len, c.spec.max_length);
            std::vector<std::vector<std::size_t>> targets = s.train.latents;
            for (auto& seq : targets)
                for (auto& e : seq) e %= mc.num_experts;
            TrainReport rep;
            const MoEModel model = train_toy_moe(mc, s.train.sequences, s.train.labels, cfg.train, &rep, targets);
            model.save(tm_out);
            const double heldout = classification_accuracy(model, s.heldout.sequences, s.heldout.labels);
            std::cout << "train accuracy " << rep.train_accuracy << ", held-out accuracy " << heldout << "\n";
            if (!tm_report.empty()) {
                json curve = json::array();
                for (const auto& st : rep.steps) curve.push_back({{"step", st.step}, {"ce", st.ce}, {"balance", st.balance}});
                write_json(tm_report, {{"model", moe_config_to_json(mc)},
                                       {"train", train_config_to_json(cfg.train)},
                                       {"train_accuracy", rep.train_accuracy},
                                       {"heldout_accuracy", heldout},
                                       {"expert_bytes", model.expert_bytes()},
                                       {"total_expert_bytes", model.total_expert_bytes()},
                                       {"loss_curve", curve}});
            }
        } else if (*tr) {
            const MoEModel model = MoEModel::load(tr_ckpt);
            const Corpus c = pick_split(corpus_from_json(read_json(tr_corpus)), tr_split, cfg.heldout_fraction);
            json tables = json::array();
            for (const auto& b : make_batches(c, tr_batch)) tables.push_back(hash_table_to_json(table_from_trace(b.batch_id, model.forward(b).trace)));
            write_json(tr_out, {{"num_layers", model.config().num_layers}, {"num_experts", model.config().num_experts}, {"tables", tables}});
            std::cout << "traced " << tables.size() << " batches\n";
        } else if (*tp) {
            const MoEModel model = MoEModel::load(tp_ckpt);
            const Split s = split_corpus(corpus_from_json(read_json(tp_corpus)), cfg.heldout_fraction);
            PredictorTrainReport rep;
            const PredictorNet net = train_predictor(cfg.predictor, s.train.sequences, s.heldout.sequences, model, &rep);
            net.save(tp_out);
            std::cout << "held-out hit rate top-1 " << rep.heldout_top1 << ", top-3 " << rep.heldout_top3 << "\n";
            if (!tp_report.empty()) {
                json curve = json::array();
                for (const auto& p : rep.loss_curve) curve.push_back({{"step", p.step}, {"ce", p.ce}, {"tkd", p.tkd}, {"total", p.total}});
                write_json(tp_report, {{"predictor", predictor_config_to_json(cfg.predictor)},
                                       {"T", rep.T},
                                       {"lambda", rep.lambda},
                                       {"steps", rep.steps},
                                       {"heldout_top1", rep.heldout_top1},
                                       {"heldout_top3", rep.heldout_top3},
                                       {"parameter_bytes", net.parameter_count() * sizeof(double)},
                                       {"loss_curve", curve}});
            }
        } else if (*ps) {
            const MoEModel model = MoEModel::load(ps_ckpt);
            const Corpus c = corpus_from_json(read_json(ps_corpus));
            ProbeConfig pc = cfg.probe;
            if (!ps_mode.empty()) pc.mode = corruption_mode_from_string(ps_mode);
            const std::size_t layer = ps_layer_opt->count() ? ps_layer : cfg.probe_layer;
            const Corpus held = pick_split(c, "heldout", cfg.heldout_fraction);
            std::vector<Sequence> probe_set;
            for (const auto& s : held.sequences) {
                if (probe_set.size() == cfg.probe_sequences) break;
                probe_set.push_back(fit_length(s, pc.L));
            }
            const ModelSelector selector(model, layer);
            json report = probe_report_to_json(run_sparsity_probe(selector, probe_set, c.spec.vocab_size, pc));
            report["layer"] = layer;
            write_json(ps_out, report);
            std::cout << "c_hat of the mean curve: " << report["c_hat_of_mean"] << "\n";
        } else if (*sv) {
            const MoEModel model = MoEModel::load(sv_ckpt);
            const Corpus c = pick_split(corpus_from_json(read_json(sv_corpus)), sv_split, cfg.heldout_fraction);
            const auto batches = make_batches(c, sv_batch ? sv_batch : cfg.serve_batch_size);
            ServeConfig sc = cfg.serve;
            if (sv->count("--budget-bytes")) sc.budget.fast_tier_bytes = sv_budget;
            if (sv_topk) sc.eval_top_k = sv_topk;
            if (sv_bandwidth > 0) sc.budget.bandwidth_bytes_per_s = sv_bandwidth;
            if (sv_latency >= 0) sc.budget.per_transfer_latency_s = sv_latency;
            if (sv_delay_ms >= 0) sc.router_delay = std::chrono::nanoseconds(static_cast<std::int64_t>(sv_delay_ms * 1e6));
            const ServeMode mode = serve_mode_from_string(sv_mode);
            ServingReport report;
            if (mode == ServeMode::Standard) {
                report = serve_standard(model, batches, sc);
            } else if (mode == ServeMode::Oracle) {
                report = serve_sida(model, oracle_hash(model), batches, sc, ServeMode::Oracle);
            } else {
                if (sv_pred.empty()) throw ContractViolation("serve --mode sida needs --predictor");
                const PredictorNet net = PredictorNet::load(sv_pred);
                report = serve_sida(model, predictor_hash(net, model, sc.eval_top_k), batches, sc, ServeMode::Sida);
            }
            write_json(sv_report, report_to_json(report));
            if (!sv_csv.empty()) write_text(sv_csv, report_to_csv(report));
            std::cout << to_string(mode) << ": " << report.samples() << " samples, throughput " << report.throughput << "/s\n";
        } else if (*bn) {
            const BenchBundle bundle = run_benchmark(cfg);
            write_bundle(bundle, bn_out);
            std::cout << "bundle " << bundle.report["status"].get<std::string>() << " in " << bn_out << "\n";
            if (!bundle.complete()) {
                for (const auto& e : bundle.report["errors"]) std::cerr << "error in " << e["stage"] << ": " << e["error"] << "\n";
                return 3;
            }
        }
    } catch (const ContractViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "error: bad JSON: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
