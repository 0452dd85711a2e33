#include "sida/moe_model.hpp"

#include <map>
#include <thread>

namespace sida {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Matrix randn(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
    return m;
}

struct ExpertCache {
    std::size_t expert = 0;
    std::vector<std::size_t> rows;  // token rows routed here
    std::vector<double> alphas;
    Matrix input;  // gathered h rows
    Matrix pre;    // input * w1 + b1
    Matrix out;    // f(input)
};

struct BlockCache {
    Matrix x, q, k, v, attn, mixed, h;
    Matrix probs;  // n x K router probabilities
    std::vector<RoutingEntry> selections;
    std::vector<ExpertCache> experts;
};

struct SequenceCache {
    std::vector<BlockCache> blocks;
    Matrix final;
    RowVector pooled;
    Vector class_probs;
};

/// Self-attention mixing with a residual: h = x + softmax(q k^T / sqrt(d)) v wo.
Matrix mix(const MoEBlock& block, const Matrix& x, BlockCache* cache) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
    Matrix q = x * block.wq;
    Matrix k = x * block.wk;
    Matrix v = x * block.wv;
    Matrix attn = softmax_rows((q * k.transpose()) * scale);
    Matrix mixed = attn * v;
    Matrix h = x + mixed * block.wo;
    if (cache) {
        cache->x = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->mixed = std::move(mixed);
        cache->h = h;
    }
    return h;
}

/// Router softmax and top-k for every row of h.
std::vector<RoutingEntry> route(const MoEBlock& block, const Matrix& h, std::size_t k, Matrix* probs_out) {
    const Matrix logits = h * block.router;
    Matrix probs(logits.rows(), logits.cols());
    std::vector<RoutingEntry> selections(static_cast<std::size_t>(h.rows()));
    for (Eigen::Index t = 0; t < h.rows(); ++t) {
        probs.row(t) = softmax(logits.row(t).transpose()).transpose();
        const Vector p = probs.row(t).transpose();
        for (std::size_t e : topk(p, k)) selections[static_cast<std::size_t>(t)].push_back({e, p(static_cast<Eigen::Index>(e))});
    }
    if (probs_out) *probs_out = std::move(probs);
    return selections;
}

/// y_t = sum_{(i, alpha) in selections[t]} alpha * f_i(h_t), evaluated expert by expert in ascending id.
Matrix apply_experts(const MoEBlock& block, const Matrix& h, std::span<const RoutingEntry> selections,
                     std::vector<std::size_t>* eval_counts, std::vector<ExpertCache>* cache) {
    const std::size_t num_experts = block.experts.size();
    std::map<std::size_t, ExpertCache> groups;
    for (std::size_t t = 0; t < selections.size(); ++t) {
        for (const auto& c : selections[t]) {
            if (c.expert >= num_experts)
                throw ContractViolation("expert id " + std::to_string(c.expert) + " out of range for K=" + std::to_string(num_experts));
            if (!(c.alpha >= 0.0)) throw ContractViolation("negative or NaN alpha for expert " + std::to_string(c.expert));
            auto& g = groups[c.expert];
            g.expert = c.expert;
            g.rows.push_back(t);
            g.alphas.push_back(c.alpha);
        }
    }
    Matrix y = Matrix::Zero(h.rows(), h.cols());
    for (auto& [id, g] : groups) {
        const Expert& e = block.experts[id];
        g.input.resize(static_cast<Eigen::Index>(g.rows.size()), h.cols());
        for (std::size_t r = 0; r < g.rows.size(); ++r) g.input.row(static_cast<Eigen::Index>(r)) = h.row(static_cast<Eigen::Index>(g.rows[r]));
        g.pre = (g.input * e.w1).rowwise() + e.b1.row(0);
        g.out = (g.pre.cwiseMax(0.0) * e.w2).rowwise() + e.b2.row(0);
        for (std::size_t r = 0; r < g.rows.size(); ++r)
            y.row(static_cast<Eigen::Index>(g.rows[r])) += g.alphas[r] * g.out.row(static_cast<Eigen::Index>(r));
        if (eval_counts) (*eval_counts)[id] += g.rows.size();
        if (cache) cache->push_back(std::move(g));
    }
    return y;
}

SequenceCache forward_sequence_cached(const MoEModel& model, const Sequence& seq) {
    const auto& cfg = model.config();
    SequenceCache cache;
    cache.blocks.resize(cfg.num_layers);
    Matrix x = model.embed(seq);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const MoEBlock& block = model.blocks[l];
        BlockCache& bc = cache.blocks[l];
        Matrix h = mix(block, x, &bc);
        bc.selections = route(block, h, cfg.routing_k, &bc.probs);
        Matrix y = apply_experts(block, h, bc.selections, nullptr, &bc.experts);
        x = h + y;
    }
    cache.final = x;
    cache.pooled = x.colwise().mean();
    cache.class_probs = softmax((cache.pooled * model.classifier).transpose());
    return cache;
}

void backward_sequence(const MoEModel& model, const Sequence& seq, const SequenceCache& cache, const RowVector& d_logits,
                       const std::vector<Vector>& d_router_probs_per_layer, const std::vector<Matrix>& d_probs_per_token, MoEModel& grad) {
    const auto& cfg = model.config();
    const auto n = static_cast<Eigen::Index>(seq.size());
    grad.classifier += cache.pooled.transpose() * d_logits;
    const RowVector d_pooled = d_logits * model.classifier.transpose();
    Matrix dx = d_pooled.replicate(n, 1) / static_cast<double>(n);

    for (std::size_t li = cfg.num_layers; li-- > 0;) {
        const MoEBlock& block = model.blocks[li];
        MoEBlock& gb = grad.blocks[li];
        const BlockCache& bc = cache.blocks[li];
        Matrix dh = dx;  // residual around the MoE layer
        Matrix d_probs = Matrix::Zero(bc.probs.rows(), bc.probs.cols());
        // balance-loss gradient enters uniformly for every token
        for (Eigen::Index t = 0; t < n; ++t) d_probs.row(t) = d_router_probs_per_layer[li].transpose();
        if (!d_probs_per_token.empty()) d_probs += d_probs_per_token[li];

        for (const auto& g : bc.experts) {
            const Expert& e = block.experts[g.expert];
            Expert& ge = gb.experts[g.expert];
            const auto rows = static_cast<Eigen::Index>(g.rows.size());
            Matrix d_out(rows, dx.cols());
            for (Eigen::Index r = 0; r < rows; ++r) {
                const auto t = static_cast<Eigen::Index>(g.rows[static_cast<std::size_t>(r)]);
                d_out.row(r) = g.alphas[static_cast<std::size_t>(r)] * dx.row(t);
                d_probs(t, static_cast<Eigen::Index>(g.expert)) += dx.row(t).dot(g.out.row(r));
            }
            const Matrix act = g.pre.cwiseMax(0.0);
            ge.w2 += act.transpose() * d_out;
            ge.b2 += d_out.colwise().sum();
            Matrix d_pre = (d_out * e.w2.transpose()).cwiseProduct((g.pre.array() > 0.0).cast<double>().matrix());
            ge.w1 += g.input.transpose() * d_pre;
            ge.b1 += d_pre.colwise().sum();
            const Matrix d_in = d_pre * e.w1.transpose();
            for (Eigen::Index r = 0; r < rows; ++r) dh.row(static_cast<Eigen::Index>(g.rows[static_cast<std::size_t>(r)])) += d_in.row(r);
        }

        const Matrix d_router_logits = softmax_rows_backward(bc.probs, d_probs);
        gb.router += bc.h.transpose() * d_router_logits;
        dh += d_router_logits * block.router.transpose();

        // mixing attention
        const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        gb.wo += bc.mixed.transpose() * dh;
        const Matrix d_mixed = dh * block.wo.transpose();
        const Matrix d_attn = d_mixed * bc.v.transpose();
        const Matrix d_v = bc.attn.transpose() * d_mixed;
        const Matrix d_scores = softmax_rows_backward(bc.attn, d_attn) * scale;
        const Matrix d_q = d_scores * bc.k;
        const Matrix d_k = d_scores.transpose() * bc.q;
        gb.wq += bc.x.transpose() * d_q;
        gb.wk += bc.x.transpose() * d_k;
        gb.wv += bc.x.transpose() * d_v;
        dx = dh + d_q * block.wq.transpose() + d_k * block.wk.transpose() + d_v * block.wv.transpose();
    }
    for (Eigen::Index t = 0; t < n; ++t) {
        grad.token_embeddings.row(static_cast<Eigen::Index>(seq[static_cast<std::size_t>(t)])) += dx.row(t);
        grad.position_embeddings.row(t) += dx.row(t);
    }
}

std::vector<std::pair<std::string, ConfigValue>> config_block(const MoEConfig& c) {
    auto i = [](std::size_t v) { return ConfigValue(static_cast<std::int64_t>(v)); };
    return {{"vocab_size", i(c.vocab_size)},   {"d_model", i(c.d_model)},         {"num_layers", i(c.num_layers)},
            {"num_experts", i(c.num_experts)}, {"expert_hidden", i(c.expert_hidden)}, {"max_seq_len", i(c.max_seq_len)},
            {"routing_k", i(c.routing_k)},     {"num_classes", i(c.num_classes)}};
}

}  // namespace

void MoEConfig::validate() const {
    require(vocab_size >= 1 && d_model >= 1 && num_layers >= 1 && num_experts >= 1 && expert_hidden >= 1 && max_seq_len >= 1 &&
                num_classes >= 1,
            "MoEConfig: all sizes must be >= 1");
    require(routing_k >= 1 && routing_k <= num_experts, "MoEConfig: routing_k must be in [1, num_experts]");
}

Matrix Expert::forward(const Matrix& x) const {
    return ((x * w1).rowwise() + b1.row(0)).cwiseMax(0.0) * w2 + b2.replicate(x.rows(), 1);
}

RowVector moe_layer_forward(const RowVector& x, std::span<const ExpertChoice> choices, std::span<const Expert> experts,
                            std::vector<std::size_t>* eval_counts) {
    require(!choices.empty(), "moe_layer_forward: empty expert set");
    RowVector y = RowVector::Zero(x.size());
    for (const auto& c : choices) {
        require(c.expert < experts.size(), "moe_layer_forward: expert id " + std::to_string(c.expert) + " out of range");
        require(c.alpha >= 0.0, "moe_layer_forward: negative alpha");
        const Expert& e = experts[c.expert];
        y += c.alpha * (((x * e.w1) + e.b1).cwiseMax(0.0) * e.w2 + e.b2);
        if (eval_counts) ++(*eval_counts)[c.expert];
    }
    return y;
}

Vector router_scores(const RowVector& x, const Matrix& router) {
    require(x.size() == router.rows(), "router_scores: embedding dim " + std::to_string(x.size()) + " != router rows " +
                                           std::to_string(router.rows()));
    return softmax((x * router).transpose());
}

MoEModel::MoEModel(const MoEConfig& config) : config_(config) {
    config_.validate();
    const auto d = static_cast<Eigen::Index>(config.d_model);
    const auto h = static_cast<Eigen::Index>(config.expert_hidden);
    const auto k = static_cast<Eigen::Index>(config.num_experts);
    token_embeddings = Matrix::Zero(static_cast<Eigen::Index>(config.vocab_size), d);
    position_embeddings = Matrix::Zero(static_cast<Eigen::Index>(config.max_seq_len), d);
    blocks.resize(config.num_layers);
    for (auto& b : blocks) {
        b.wq = b.wk = b.wv = b.wo = Matrix::Zero(d, d);
        b.router = Matrix::Zero(d, k);
        b.experts.resize(config.num_experts);
        for (auto& e : b.experts) {
            e.w1 = Matrix::Zero(d, h);
            e.b1 = Matrix::Zero(1, h);
            e.w2 = Matrix::Zero(h, d);
            e.b2 = Matrix::Zero(1, d);
        }
    }
    classifier = Matrix::Zero(d, static_cast<Eigen::Index>(config.num_classes));
}

MoEModel MoEModel::zeros(const MoEConfig& config) { return MoEModel(config); }

MoEModel::MoEModel(const MoEConfig& config, Rng& rng) : MoEModel(config) {
    const auto d = static_cast<double>(config.d_model);
    const auto h = static_cast<double>(config.expert_hidden);
    const auto di = static_cast<Eigen::Index>(config.d_model);
    token_embeddings = randn(token_embeddings.rows(), di, 1.0, rng);
    position_embeddings = randn(position_embeddings.rows(), di, 0.5, rng);
    for (auto& b : blocks) {
        b.wq = randn(di, di, 1.0 / std::sqrt(d), rng);
        b.wk = randn(di, di, 1.0 / std::sqrt(d), rng);
        b.wv = randn(di, di, 1.0 / std::sqrt(d), rng);
        b.wo = randn(di, di, 0.5 / std::sqrt(d), rng);
        b.router = randn(di, b.router.cols(), 1.0 / std::sqrt(d), rng);
        for (auto& e : b.experts) {
            e.w1 = randn(e.w1.rows(), e.w1.cols(), std::sqrt(2.0 / d), rng);
            e.w2 = randn(e.w2.rows(), e.w2.cols(), 0.5 / std::sqrt(h), rng);
        }
    }
    classifier = randn(di, classifier.cols(), 0.1 / std::sqrt(d), rng);
}

Matrix MoEModel::embed(const Sequence& seq) const {
    require(!seq.empty(), "embed: empty sequence");
    require(seq.size() <= config_.max_seq_len,
            "embed: sequence length " + std::to_string(seq.size()) + " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    Matrix x(static_cast<Eigen::Index>(seq.size()), static_cast<Eigen::Index>(config_.d_model));
    for (std::size_t t = 0; t < seq.size(); ++t) {
        require(seq[t] < config_.vocab_size, "embed: token id " + std::to_string(seq[t]) + " >= vocab_size");
        const auto row = static_cast<Eigen::Index>(t);
        x.row(row) = token_embeddings.row(static_cast<Eigen::Index>(seq[t])) + position_embeddings.row(row);
    }
    return x;
}

ForwardResult MoEModel::forward(const SequenceBatch& batch, const ForwardOptions& options) const {
    return forward_impl(batch, nullptr, options);
}

ForwardResult MoEModel::forward(const SequenceBatch& batch, const ExpertHashTable& table, const ForwardOptions& options) const {
    return forward_impl(batch, &table, options);
}

ForwardResult MoEModel::forward_impl(const SequenceBatch& batch, const ExpertHashTable* table, const ForwardOptions& options) const {
    const std::size_t num_tokens = batch.total_tokens();
    const auto offsets = batch.offsets();
    ForwardResult result;
    result.trace.selections = RoutingGrid(config_.num_layers, num_tokens);
    if (!table) result.trace.router_probs.resize(config_.num_layers * num_tokens);
    result.timing.resize(config_.num_layers);
    if (table) {
        require(table->num_layers() == config_.num_layers,
                "hash table covers " + std::to_string(table->num_layers()) + " layers, model has " + std::to_string(config_.num_layers));
        for (std::size_t l = 0; l < config_.num_layers; ++l)
            for (std::size_t t = 0; t < num_tokens; ++t)
                if (t >= table->num_tokens() || table->entries.at(l, t).empty())
                    throw ContractViolation("hash table has no entry for (layer " + std::to_string(l) + ", token " + std::to_string(t) + ")");
    }
    if (options.expert_evals) options.expert_evals->assign(config_.num_layers, std::vector<std::size_t>(config_.num_experts, 0));

    std::vector<Matrix> states;
    states.reserve(batch.size());
    for (const auto& seq : batch.sequences) states.push_back(embed(seq));

    std::vector<Matrix> mixed(batch.size());
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        const MoEBlock& block = blocks[l];
        LayerTiming& timing = result.timing[l];

        auto t0 = Clock::now();
        for (std::size_t s = 0; s < batch.size(); ++s) mixed[s] = mix(block, states[s], nullptr);
        timing.mixing_s = seconds_since(t0);

        t0 = Clock::now();
        if (!table) {
            if (options.router_delay.count() > 0) std::this_thread::sleep_for(options.router_delay);
            for (std::size_t s = 0; s < batch.size(); ++s) {
                Matrix probs;
                auto sel = route(block, mixed[s], config_.routing_k, &probs);
                for (std::size_t t = 0; t < sel.size(); ++t) {
                    result.trace.selections.at(l, offsets[s] + t) = std::move(sel[t]);
                    result.trace.router_probs[l * num_tokens + offsets[s] + t] = probs.row(static_cast<Eigen::Index>(t)).transpose();
                }
            }
        } else {
            for (std::size_t t = 0; t < num_tokens; ++t) result.trace.selections.at(l, t) = table->entries.at(l, t);
        }
        timing.routing_s = seconds_since(t0);

        if (options.on_layer_routed) options.on_layer_routed(l, result.trace.selections);

        t0 = Clock::now();
        std::vector<std::size_t>* counts = options.expert_evals ? &(*options.expert_evals)[l] : nullptr;
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const std::size_t n = batch.sequences[s].size();
            std::vector<RoutingEntry> sel(n);
            for (std::size_t t = 0; t < n; ++t) sel[t] = result.trace.selections.at(l, offsets[s] + t);
            states[s] = mixed[s] + apply_experts(block, mixed[s], sel, counts, nullptr);
        }
        timing.experts_s = seconds_since(t0);
    }
    for (const auto& x : states) result.logits.push_back((x.colwise().mean() * classifier).transpose());
    return result;
}

std::size_t MoEModel::expert_bytes() const { return blocks.front().experts.front().bytes(); }

std::size_t MoEModel::total_expert_bytes() const { return expert_bytes() * config_.num_experts * config_.num_layers; }

std::size_t MoEModel::router_bytes() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += static_cast<std::size_t>(b.router.size());
    return n * sizeof(double);
}

std::size_t MoEModel::non_expert_bytes() const {
    std::size_t n = 0;
    for (const auto& [name, m] : named_parameters()) n += static_cast<std::size_t>(m->size());
    return n * sizeof(double) - total_expert_bytes();
}

std::vector<std::pair<std::string, Matrix*>> MoEModel::named_parameters() {
    std::vector<std::pair<std::string, Matrix*>> out;
    out.emplace_back("token_embeddings", &token_embeddings);
    out.emplace_back("position_embeddings", &position_embeddings);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        auto& b = blocks[l];
        out.emplace_back(p + "wq", &b.wq);
        out.emplace_back(p + "wk", &b.wk);
        out.emplace_back(p + "wv", &b.wv);
        out.emplace_back(p + "wo", &b.wo);
        out.emplace_back(p + "router", &b.router);
        for (std::size_t e = 0; e < b.experts.size(); ++e) {
            const std::string q = p + "expert" + std::to_string(e) + ".";
            out.emplace_back(q + "w1", &b.experts[e].w1);
            out.emplace_back(q + "b1", &b.experts[e].b1);
            out.emplace_back(q + "w2", &b.experts[e].w2);
            out.emplace_back(q + "b2", &b.experts[e].b2);
        }
    }
    out.emplace_back("classifier", &classifier);
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> MoEModel::named_parameters() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [name, m] : const_cast<MoEModel*>(this)->named_parameters()) out.emplace_back(name, m);
    return out;
}

std::vector<Matrix*> MoEModel::parameters() {
    std::vector<Matrix*> out;
    for (auto& [name, m] : named_parameters()) out.push_back(m);
    return out;
}

void MoEModel::set_zero() {
    for (Matrix* m : parameters()) m->setZero();
}

Checkpoint MoEModel::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.magic = std::string(kMoEMagic);
    ckpt.config = config_block(config_);
    for (const auto& [name, m] : named_parameters()) ckpt.tensors.push_back({name, *m});
    return ckpt;
}

MoEModel MoEModel::from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.magic != kMoEMagic) throw CheckpointError("not an MoE checkpoint: magic " + ckpt.magic);
    MoEConfig cfg;
    auto u = [&](const char* key) { return static_cast<std::size_t>(ckpt.config_int(key)); };
    cfg.vocab_size = u("vocab_size");
    cfg.d_model = u("d_model");
    cfg.num_layers = u("num_layers");
    cfg.num_experts = u("num_experts");
    cfg.expert_hidden = u("expert_hidden");
    cfg.max_seq_len = u("max_seq_len");
    cfg.routing_k = u("routing_k");
    cfg.num_classes = u("num_classes");
    MoEModel model(cfg);
    for (auto& [name, m] : model.named_parameters()) *m = ckpt.tensor(name, m->rows(), m->cols());
    return model;
}

void MoEModel::save(const std::filesystem::path& path) const { save_checkpoint(path, to_checkpoint()); }

MoEModel MoEModel::load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path, kMoEMagic)); }

double load_balance_loss(std::span<const Vector> router_probs, std::span<const RoutingEntry> selections, std::size_t num_experts) {
    require(router_probs.size() == selections.size() && !selections.empty(), "load_balance_loss: mismatched or empty inputs");
    Vector fraction = Vector::Zero(static_cast<Eigen::Index>(num_experts));
    Vector mean_prob = Vector::Zero(static_cast<Eigen::Index>(num_experts));
    std::size_t picks = 0;
    for (std::size_t t = 0; t < selections.size(); ++t) {
        for (const auto& c : selections[t]) {
            fraction(static_cast<Eigen::Index>(c.expert)) += 1.0;
            ++picks;
        }
        mean_prob += router_probs[t];
    }
    fraction /= static_cast<double>(picks);
    mean_prob /= static_cast<double>(selections.size());
    return static_cast<double>(num_experts) * fraction.dot(mean_prob);
}

LossBreakdown moe_loss_and_grad(const MoEModel& model, std::span<const Sequence> sequences, std::span<const std::size_t> labels,
                                double balance_coeff, MoEModel* grad, RouteTargets route_targets, double route_coeff) {
    require(sequences.size() == labels.size() && !sequences.empty(), "moe_loss_and_grad: need matching non-empty sequences/labels");
    require(route_targets.empty() || route_targets.size() == sequences.size(), "moe_loss_and_grad: one route target list per sequence");
    const auto& cfg = model.config();
    const std::size_t B = sequences.size();
    std::vector<SequenceCache> caches;
    caches.reserve(B);
    for (const auto& s : sequences) caches.push_back(forward_sequence_cached(model, s));

    LossBreakdown loss;
    // balance loss per layer over all tokens in the minibatch, averaged over layers
    const auto K = static_cast<Eigen::Index>(cfg.num_experts);
    std::vector<Vector> d_probs(cfg.num_layers, Vector::Zero(K));
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        Vector fraction = Vector::Zero(K), mean_prob = Vector::Zero(K);
        std::size_t tokens = 0, picks = 0;
        for (const auto& c : caches) {
            const auto& bc = c.blocks[l];
            mean_prob += bc.probs.colwise().sum().transpose();
            tokens += static_cast<std::size_t>(bc.probs.rows());
            for (const auto& sel : bc.selections)
                for (const auto& ch : sel) {
                    fraction(static_cast<Eigen::Index>(ch.expert)) += 1.0;
                    ++picks;
                }
        }
        fraction /= static_cast<double>(picks);
        mean_prob /= static_cast<double>(tokens);
        loss.balance += static_cast<double>(K) * fraction.dot(mean_prob) / static_cast<double>(cfg.num_layers);
        d_probs[l] = balance_coeff * static_cast<double>(K) * fraction / static_cast<double>(tokens) / static_cast<double>(cfg.num_layers);
    }

    // router cross-entropy, averaged over every (layer, token) in the minibatch
    std::vector<std::vector<Matrix>> d_route(B);
    if (!route_targets.empty()) {
        std::size_t count = 0;
        for (const auto& s : sequences) count += s.size() * cfg.num_layers;
        const double w = route_coeff / static_cast<double>(count);
        for (std::size_t b = 0; b < B; ++b) {
            require(route_targets[b].size() == sequences[b].size(), "moe_loss_and_grad: route targets must match sequence length");
            for (std::size_t l = 0; l < cfg.num_layers; ++l) {
                const Matrix& probs = caches[b].blocks[l].probs;
                Matrix d = Matrix::Zero(probs.rows(), probs.cols());
                for (Eigen::Index t = 0; t < probs.rows(); ++t) {
                    const auto e = static_cast<Eigen::Index>(route_targets[b][static_cast<std::size_t>(t)]);
                    require(e < K, "moe_loss_and_grad: route target out of range");
                    const double pe = std::max(probs(t, e), 1e-300);
                    loss.route -= std::log(pe) / static_cast<double>(count);
                    d(t, e) = -w / pe;
                }
                d_route[b].push_back(std::move(d));
            }
        }
    }

    for (std::size_t b = 0; b < B; ++b) {
        const std::size_t label = labels[b];
        require(label < cfg.num_classes, "moe_loss_and_grad: label out of range");
        const Vector& p = caches[b].class_probs;
        loss.ce += -std::log(std::max(p(static_cast<Eigen::Index>(label)), 1e-300)) / static_cast<double>(B);
        if (argmax(p) == label) ++loss.correct;
        if (grad) {
            RowVector d_logits = p.transpose() / static_cast<double>(B);
            d_logits(static_cast<Eigen::Index>(label)) -= 1.0 / static_cast<double>(B);
            backward_sequence(model, sequences[b], caches[b], d_logits, d_probs, d_route[b], *grad);
        }
    }
    return loss;
}

void train_moe_inplace(MoEModel& model, const std::vector<Sequence>& sequences, const std::vector<std::size_t>& labels,
                       const TrainConfig& train, TrainReport* report, RouteTargets route_targets) {
    require(sequences.size() == labels.size() && !sequences.empty(), "train_toy_moe: need labeled corpus");
    require(route_targets.empty() || route_targets.size() == sequences.size(), "train_toy_moe: one route target list per sequence");
    require(train.batch_size >= 1, "train_toy_moe: batch_size must be >= 1");
    Rng rng(train.seed ^ 0x5EEDF00DULL);
    AdamW opt({.lr = train.lr, .weight_decay = train.weight_decay});
    MoEModel grad = MoEModel::zeros(model.config());
    auto params = model.parameters();
    auto grads_mut = grad.parameters();
    std::vector<const Matrix*> grads(grads_mut.begin(), grads_mut.end());

    std::vector<std::size_t> order(sequences.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t step = 0;
    TrainStep last{};
    for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += train.batch_size) {
            const std::size_t end = std::min(order.size(), start + train.batch_size);
            std::vector<Sequence> seqs;
            std::vector<std::size_t> labs;
            std::vector<std::vector<std::size_t>> targets;
            for (std::size_t i = start; i < end; ++i) {
                seqs.push_back(sequences[order[i]]);
                labs.push_back(labels[order[i]]);
                if (!route_targets.empty()) targets.push_back(route_targets[order[i]]);
            }
            grad.set_zero();
            const LossBreakdown loss = moe_loss_and_grad(model, seqs, labs, train.balance_coeff, &grad, targets, train.route_supervision);
            if (!std::isfinite(loss.total(train.balance_coeff, train.route_supervision)))
                throw DivergenceError("train_toy_moe diverged at step " + std::to_string(step) + " (seed " + std::to_string(train.seed) +
                                      "): loss is not finite");
            if (train.clip_norm > 0) clip_global_norm(grads_mut, train.clip_norm);
            opt.step(params, grads);
            last = {step, loss.ce, loss.balance, static_cast<double>(loss.correct) / static_cast<double>(seqs.size())};
            if (report) report->steps.push_back(last);
            ++step;
        }
    }
    if (report) {
        report->final_ce = last.ce;
        report->final_balance = last.balance;
        report->train_accuracy = classification_accuracy(model, sequences, labels);
    }
}

MoEModel train_toy_moe(const MoEConfig& config, const std::vector<Sequence>& sequences, const std::vector<std::size_t>& labels,
                       const TrainConfig& train, TrainReport* report, RouteTargets route_targets) {
    Rng rng(train.seed);
    MoEModel model(config, rng);
    train_moe_inplace(model, sequences, labels, train, report, route_targets);
    return model;
}

double classification_accuracy(const MoEModel& model, const std::vector<Sequence>& sequences, const std::vector<std::size_t>& labels) {
    require(sequences.size() == labels.size() && !sequences.empty(), "classification_accuracy: need labeled sequences");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < sequences.size(); ++i) {
        SequenceBatch batch{i, {sequences[i]}, {}};
        if (argmax(model.forward(batch).logits.front()) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(sequences.size());
}

std::vector<double> sequence_sparsity(const ActivationTrace& trace, std::size_t num_experts) {
    std::vector<double> out;
    for (std::size_t l = 0; l < trace.selections.num_layers(); ++l) {
        const double active = static_cast<double>(trace.selections.distinct_experts(l).size());
        out.push_back(1.0 - active / static_cast<double>(num_experts));
    }
    return out;
}

SelectionOverhead selection_overhead_probe(const MoEModel& model, const SequenceBatch& batch, std::size_t repetitions) {
    require(repetitions >= 1, "selection_overhead_probe: repetitions must be >= 1");
    SelectionOverhead out;
    for (std::size_t r = 0; r < repetitions; ++r) {
        const auto t0 = Clock::now();
        const ForwardResult res = model.forward(batch);
        out.total_s += seconds_since(t0);
        for (const auto& t : res.timing) out.selection_s += t.routing_s;
    }
    out.total_s /= static_cast<double>(repetitions);
    out.selection_s /= static_cast<double>(repetitions);
    return out;
}

}  // namespace sida
