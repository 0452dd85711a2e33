#include "sida/predictor.hpp"

namespace sida {
namespace {

Matrix randn(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
    return m;
}

Matrix rand_uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
}

Matrix sigmoid_m(const Matrix& x) { return x.unaryExpr([](double v) { return sigmoid(v); }); }

}  // namespace

void PredictorConfig::validate(std::size_t num_experts) const {
    require(compress_dim >= 1 && lstm_hidden >= 1, "PredictorConfig: dimensions must be >= 1");
    require(top_T >= 1, "PredictorConfig: top_T must be >= 1");
    require(effective_T(num_experts) >= 1 && effective_T(num_experts) <= num_experts, "PredictorConfig: T must be in [1, K]");
    require(lambda >= 0.0, "PredictorConfig: lambda must be >= 0");
    require(batch_size >= 1, "PredictorConfig: batch_size must be >= 1");
}

Matrix LstmLayer::forward(const Matrix& x, LstmCache* cache) const {
    const auto n = x.rows();
    const auto H = static_cast<Eigen::Index>(hidden());
    const Matrix projected = (x * w_in).rowwise() + bias.row(0);
    Matrix i(n, H), f(n, H), g(n, H), o(n, H), cell(n, H), cell_tanh(n, H), out(n, H);
    RowVector h = RowVector::Zero(H), c = RowVector::Zero(H);
    for (Eigen::Index t = 0; t < n; ++t) {
        const RowVector gates = projected.row(t) + h * w_rec;
        i.row(t) = sigmoid_m(gates.segment(0, H));
        f.row(t) = sigmoid_m(gates.segment(H, H));
        g.row(t) = gates.segment(2 * H, H).array().tanh();
        o.row(t) = sigmoid_m(gates.segment(3 * H, H));
        c = f.row(t).cwiseProduct(c) + i.row(t).cwiseProduct(g.row(t));
        cell.row(t) = c;
        cell_tanh.row(t) = c.array().tanh();
        h = o.row(t).cwiseProduct(cell_tanh.row(t));
        out.row(t) = h;
    }
    if (cache) {
        cache->input = x;
        cache->i = std::move(i);
        cache->f = std::move(f);
        cache->g = std::move(g);
        cache->o = std::move(o);
        cache->cell = std::move(cell);
        cache->cell_tanh = std::move(cell_tanh);
        cache->out = out;
    }
    return out;
}

Matrix LstmLayer::backward(const LstmCache& cache, const Matrix& d_out, LstmLayer& grad) const {
    const auto n = d_out.rows();
    const auto H = static_cast<Eigen::Index>(hidden());
    Matrix d_gates(n, 4 * H);
    RowVector dh_next = RowVector::Zero(H), dc_next = RowVector::Zero(H);
    for (Eigen::Index t = n - 1; t >= 0; --t) {
        const RowVector dh = d_out.row(t) + dh_next;
        const auto o = cache.o.row(t).array();
        const auto i = cache.i.row(t).array();
        const auto f = cache.f.row(t).array();
        const auto g = cache.g.row(t).array();
        const auto tc = cache.cell_tanh.row(t).array();
        const Eigen::ArrayXXd dc = (dh.array() * o * (1.0 - tc * tc) + dc_next.array()).matrix();
        const Eigen::ArrayXXd prev_c = t > 0 ? Eigen::ArrayXXd(cache.cell.row(t - 1).array()) : Eigen::ArrayXXd::Zero(1, H);
        d_gates.block(t, 0, 1, H) = (dc * g * i * (1.0 - i)).matrix();
        d_gates.block(t, H, 1, H) = (dc * prev_c * f * (1.0 - f)).matrix();
        d_gates.block(t, 2 * H, 1, H) = (dc * i * (1.0 - g * g)).matrix();
        d_gates.block(t, 3 * H, 1, H) = (dh.array() * tc * o * (1.0 - o)).matrix();
        dc_next = (dc * f).matrix();
        dh_next = d_gates.row(t) * w_rec.transpose();
        if (t > 0) grad.w_rec += cache.out.row(t - 1).transpose() * d_gates.row(t);
    }
    grad.w_in += cache.input.transpose() * d_gates;
    grad.bias += d_gates.colwise().sum();
    return d_gates * w_in.transpose();
}

Matrix sparse_attention_forward(const Matrix& h, AttentionCache* cache) {
    require(h.rows() >= 1, "sparse attention: empty sequence");
    Matrix scores = h * h.transpose();
    Matrix weights = sparsemax_rows(scores);
    Matrix out = weights * h + h;
    if (cache) {
        cache->values = h;
        cache->weights = std::move(weights);
        cache->scores = std::move(scores);
    }
    return out;
}

Matrix sparse_attention_backward(const AttentionCache& cache, const Matrix& d_out) {
    const Matrix& h = cache.values;
    const Matrix d_weights = d_out * h.transpose();
    const Matrix d_scores = sparsemax_rows_backward(cache.weights, d_weights);
    return d_out + cache.weights.transpose() * d_out + (d_scores + d_scores.transpose()) * h;
}

PredictorNet::PredictorNet(const PredictorConfig& config, std::size_t d_model, std::size_t num_moe_layers, std::size_t num_experts,
                           Rng& rng)
    : config_(config) {
    config.validate(num_experts);
    require(d_model >= 1 && num_moe_layers >= 1 && num_experts >= 1, "PredictorNet: sizes must be >= 1");
    const auto d = static_cast<Eigen::Index>(d_model);
    const auto C = static_cast<Eigen::Index>(config.compress_dim);
    const auto H = static_cast<Eigen::Index>(config.lstm_hidden);
    const auto K = static_cast<Eigen::Index>(num_experts);
    compress_w = randn(d, C, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    compress_b = Matrix::Zero(1, C);
    Eigen::Index in = C;
    const double bound = 1.0 / std::sqrt(static_cast<double>(H));
    for (auto& layer : lstm) {
        layer.w_in = rand_uniform(in, 4 * H, bound, rng);
        layer.w_rec = rand_uniform(H, 4 * H, bound, rng);
        layer.bias = Matrix::Zero(1, 4 * H);
        layer.bias.block(0, H, 1, H).setOnes();  // forget gate
        in = H;
    }
    for (std::size_t l = 0; l < num_moe_layers; ++l) {
        head_w.push_back(randn(H, K, 1.0 / std::sqrt(static_cast<double>(H)), rng));
        head_b.push_back(Matrix::Zero(1, K));
    }
}

PredictorNet PredictorNet::zeros_like(const PredictorNet& other) {
    PredictorNet out = other;
    out.set_zero();
    return out;
}

PredictorOutput PredictorNet::forward(const Matrix& embeddings) const {
    Cache cache;
    return forward_cached(embeddings, cache);
}

PredictorOutput PredictorNet::forward_cached(const Matrix& embeddings, Cache& cache) const {
    require(embeddings.rows() >= 1, "predictor_forward: empty sequence");
    require(embeddings.cols() == compress_w.rows(), "predictor_forward: embedding dim mismatch");
    cache.embeddings = embeddings;
    const Matrix z = (embeddings * compress_w).rowwise() + compress_b.row(0);
    const Matrix h1 = lstm[0].forward(z, &cache.lstm[0]);
    const Matrix h2 = lstm[1].forward(h1, &cache.lstm[1]);
    cache.residual = sparse_attention_forward(h2, &cache.attention);
    PredictorOutput out;
    for (std::size_t l = 0; l < head_w.size(); ++l) out.logits.push_back((cache.residual * head_w[l]).rowwise() + head_b[l].row(0));
    out.attention = cache.attention.weights;
    out.scores = cache.attention.scores;
    return out;
}

void PredictorNet::backward(const Cache& cache, const std::vector<Matrix>& d_logits, PredictorNet& grad) const {
    require(d_logits.size() == head_w.size(), "predictor backward: one gradient per MoE layer expected");
    Matrix d_residual = Matrix::Zero(cache.residual.rows(), cache.residual.cols());
    for (std::size_t l = 0; l < head_w.size(); ++l) {
        grad.head_w[l] += cache.residual.transpose() * d_logits[l];
        grad.head_b[l] += d_logits[l].colwise().sum();
        d_residual += d_logits[l] * head_w[l].transpose();
    }
    const Matrix d_h2 = sparse_attention_backward(cache.attention, d_residual);
    const Matrix d_h1 = lstm[1].backward(cache.lstm[1], d_h2, grad.lstm[1]);
    const Matrix d_z = lstm[0].backward(cache.lstm[0], d_h1, grad.lstm[0]);
    grad.compress_w += cache.embeddings.transpose() * d_z;
    grad.compress_b += d_z.colwise().sum();
}

std::size_t PredictorNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, m] : named_parameters()) n += static_cast<std::size_t>(m->size());
    return n;
}

std::vector<std::pair<std::string, Matrix*>> PredictorNet::named_parameters() {
    std::vector<std::pair<std::string, Matrix*>> out;
    out.emplace_back("compress_w", &compress_w);
    out.emplace_back("compress_b", &compress_b);
    for (std::size_t i = 0; i < PredictorConfig::lstm_layers; ++i) {
        const std::string p = "lstm" + std::to_string(i) + ".";
        out.emplace_back(p + "w_in", &lstm[i].w_in);
        out.emplace_back(p + "w_rec", &lstm[i].w_rec);
        out.emplace_back(p + "bias", &lstm[i].bias);
    }
    for (std::size_t l = 0; l < head_w.size(); ++l) {
        out.emplace_back("head" + std::to_string(l) + ".w", &head_w[l]);
        out.emplace_back("head" + std::to_string(l) + ".b", &head_b[l]);
    }
    return out;
}

std::vector<std::pair<std::string, const Matrix*>> PredictorNet::named_parameters() const {
    std::vector<std::pair<std::string, const Matrix*>> out;
    for (auto& [name, m] : const_cast<PredictorNet*>(this)->named_parameters()) out.emplace_back(name, m);
    return out;
}

std::vector<Matrix*> PredictorNet::parameters() {
    std::vector<Matrix*> out;
    for (auto& [name, m] : named_parameters()) out.push_back(m);
    return out;
}

void PredictorNet::set_zero() {
    for (Matrix* m : parameters()) m->setZero();
}

Checkpoint PredictorNet::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.magic = std::string(kPredictorMagic);
    auto i = [](std::size_t v) { return ConfigValue(static_cast<std::int64_t>(v)); };
    ckpt.config = {{"d_model", i(d_model())},
                   {"num_moe_layers", i(num_moe_layers())},
                   {"num_experts", i(num_experts())},
                   {"compress_dim", i(config_.compress_dim)},
                   {"lstm_hidden", i(config_.lstm_hidden)},
                   {"lstm_layers", i(PredictorConfig::lstm_layers)},
                   {"top_T", i(config_.top_T)},
                   {"lambda", ConfigValue(config_.lambda)},
                   {"lr", ConfigValue(config_.lr)},
                   {"batch_size", i(config_.batch_size)},
                   {"max_steps", i(config_.max_steps)},
                   {"seed", i(static_cast<std::size_t>(config_.seed))}};
    for (const auto& [name, m] : named_parameters()) ckpt.tensors.push_back({name, *m});
    return ckpt;
}

PredictorNet PredictorNet::from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.magic != kPredictorMagic) throw CheckpointError("not a predictor checkpoint: magic " + ckpt.magic);
    if (ckpt.config_int("lstm_layers") != static_cast<std::int64_t>(PredictorConfig::lstm_layers))
        throw CheckpointError("predictor checkpoint: unsupported lstm_layers");
    PredictorConfig cfg;
    cfg.compress_dim = static_cast<std::size_t>(ckpt.config_int("compress_dim"));
    cfg.lstm_hidden = static_cast<std::size_t>(ckpt.config_int("lstm_hidden"));
    cfg.top_T = static_cast<std::size_t>(ckpt.config_int("top_T"));
    cfg.lambda = ckpt.config_real("lambda");
    cfg.lr = ckpt.config_real("lr");
    cfg.batch_size = static_cast<std::size_t>(ckpt.config_int("batch_size"));
    cfg.max_steps = static_cast<std::size_t>(ckpt.config_int("max_steps"));
    cfg.seed = static_cast<std::uint64_t>(ckpt.config_int("seed"));
    Rng rng(0);
    PredictorNet net(cfg, static_cast<std::size_t>(ckpt.config_int("d_model")), static_cast<std::size_t>(ckpt.config_int("num_moe_layers")),
                     static_cast<std::size_t>(ckpt.config_int("num_experts")), rng);
    for (auto& [name, m] : net.named_parameters()) *m = ckpt.tensor(name, m->rows(), m->cols());
    return net;
}

void PredictorNet::save(const std::filesystem::path& path) const { save_checkpoint(path, to_checkpoint()); }

PredictorNet PredictorNet::load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path, kPredictorMagic)); }

Matrix InputEmbedder::operator()(const Sequence& seq) const {
    require(!seq.empty(), "InputEmbedder: empty sequence");
    require(static_cast<Eigen::Index>(seq.size()) <= position_.rows(), "InputEmbedder: sequence longer than max_seq_len");
    Matrix x(static_cast<Eigen::Index>(seq.size()), token_.cols());
    for (std::size_t t = 0; t < seq.size(); ++t) {
        require(static_cast<Eigen::Index>(seq[t]) < token_.rows(), "InputEmbedder: token id out of range");
        x.row(static_cast<Eigen::Index>(t)) = token_.row(static_cast<Eigen::Index>(seq[t])) + position_.row(static_cast<Eigen::Index>(t));
    }
    return x;
}

double tkd_loss(const Vector& student_logits, const Vector& teacher_probs, std::size_t T, Vector* grad) {
    require(student_logits.size() == teacher_probs.size(), "tkd_loss: size mismatch");
    require(T >= 1 && T <= static_cast<std::size_t>(teacher_probs.size()), "tkd_loss: T must be in [1, K]");
    const IndexList support = topk(teacher_probs, T);
    double teacher_mass = 0.0;
    double max_logit = -std::numeric_limits<double>::infinity();
    for (std::size_t j : support) {
        teacher_mass += teacher_probs(static_cast<Eigen::Index>(j));
        max_logit = std::max(max_logit, student_logits(static_cast<Eigen::Index>(j)));
    }
    if (!(teacher_mass > 0.0)) throw NumericError("tkd_loss: teacher has zero mass on its top-T experts");
    // softmax over the restricted logits equals renormalized restricted softmax
    double student_norm = 0.0;
    for (std::size_t j : support) student_norm += std::exp(student_logits(static_cast<Eigen::Index>(j)) - max_logit);
    if (!(student_norm > 0.0)) throw NumericError("tkd_loss: student has zero mass on the teacher's top-T experts");
    const double log_norm = max_logit + std::log(student_norm);

    double loss = 0.0;
    if (grad) *grad = Vector::Zero(student_logits.size());
    for (std::size_t j : support) {
        const auto idx = static_cast<Eigen::Index>(j);
        const double q = teacher_probs(idx) / teacher_mass;
        const double log_r = student_logits(idx) - log_norm;
        if (q > 0.0) loss += q * (std::log(q) - log_r);
        if (grad) (*grad)(idx) = std::exp(log_r) - q;
    }
    return loss;
}

double cross_entropy(const Vector& student_logits, std::size_t target, Vector* grad) {
    require(target < static_cast<std::size_t>(student_logits.size()), "cross_entropy: target out of range");
    const Vector logp = log_softmax(student_logits);
    if (grad) {
        *grad = logp.array().exp().matrix();
        (*grad)(static_cast<Eigen::Index>(target)) -= 1.0;
    }
    return -logp(static_cast<Eigen::Index>(target));
}

TeacherTargets teacher_targets(const MoEModel& teacher, const Sequence& seq) {
    SequenceBatch batch;
    batch.sequences = {seq};
    const ForwardResult res = teacher.forward(batch);
    TeacherTargets out;
    const auto n = static_cast<Eigen::Index>(seq.size());
    const auto K = static_cast<Eigen::Index>(teacher.config().num_experts);
    for (std::size_t l = 0; l < teacher.config().num_layers; ++l) {
        Matrix p(n, K);
        for (Eigen::Index t = 0; t < n; ++t) p.row(t) = res.trace.probs(l, static_cast<std::size_t>(t)).transpose();
        out.probs.push_back(std::move(p));
    }
    return out;
}

PredictorLoss predictor_loss(const PredictorNet& net, std::span<const Matrix> embeddings, std::span<const TeacherTargets> targets,
                             double lambda, std::size_t T, PredictorNet* grad) {
    require(embeddings.size() == targets.size() && !embeddings.empty(), "predictor_loss: need matching non-empty inputs");
    std::size_t pairs = 0;
    for (std::size_t s = 0; s < embeddings.size(); ++s) {
        require(targets[s].probs.size() == net.num_moe_layers(), "predictor_loss: teacher trace does not cover every layer");
        pairs += static_cast<std::size_t>(embeddings[s].rows()) * net.num_moe_layers();
    }
    const double scale = 1.0 / static_cast<double>(pairs);
    PredictorLoss loss;
    loss.lambda = lambda;
    PredictorNet::Cache cache;
    Vector g_ce, g_tkd;
    for (std::size_t s = 0; s < embeddings.size(); ++s) {
        const PredictorOutput out = net.forward_cached(embeddings[s], cache);
        std::vector<Matrix> d_logits;
        for (std::size_t l = 0; l < net.num_moe_layers(); ++l) {
            const Matrix& teacher = targets[s].probs[l];
            require(teacher.rows() == out.logits[l].rows(), "predictor_loss: teacher trace does not cover every token");
            Matrix d(out.logits[l].rows(), out.logits[l].cols());
            for (Eigen::Index t = 0; t < teacher.rows(); ++t) {
                const Vector z = out.logits[l].row(t).transpose();
                const Vector q = teacher.row(t).transpose();
                loss.ce += scale * cross_entropy(z, argmax(q), grad ? &g_ce : nullptr);
                loss.tkd += scale * tkd_loss(z, q, T, grad ? &g_tkd : nullptr);
                if (grad) d.row(t) = (scale * (lambda * g_ce + g_tkd)).transpose();
            }
            d_logits.push_back(std::move(d));
        }
        if (grad) net.backward(cache, d_logits, *grad);
    }
    return loss;
}

ExpertHashTable build_hash_table(const PredictorNet& net, const InputEmbedder& embed, const SequenceBatch& batch, std::size_t eval_top_k) {
    require(eval_top_k >= 1 && eval_top_k <= net.num_experts(), "build_hash_table: eval_top_k must be in [1, K]");
    ExpertHashTable table;
    table.batch_id = batch.batch_id;
    table.entries = RoutingGrid(net.num_moe_layers(), batch.total_tokens());
    const auto offsets = batch.offsets();
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const PredictorOutput out = net.forward(embed(batch.sequences[s]));
        for (std::size_t l = 0; l < net.num_moe_layers(); ++l)
            for (Eigen::Index t = 0; t < out.logits[l].rows(); ++t) {
                const Vector p = softmax(out.logits[l].row(t).transpose());
                auto& entry = table.entries.at(l, offsets[s] + static_cast<std::size_t>(t));
                for (std::size_t e : topk(p, eval_top_k)) entry.push_back({e, p(static_cast<Eigen::Index>(e))});
            }
    }
    return table;
}

double hash_hit_rate(std::span<const ExpertHashTable> tables, std::span<const ActivationTrace> traces, std::size_t k) {
    require(k >= 1, "hash_hit_rate: k must be >= 1");
    if (tables.size() != traces.size()) throw ContractViolation("hash_hit_rate: coverage mismatch (tables vs traces)");
    std::size_t hits = 0, total = 0;
    for (std::size_t b = 0; b < tables.size(); ++b) {
        const RoutingGrid& pred = tables[b].entries;
        const RoutingGrid& truth = traces[b].selections;
        if (pred.num_layers() != truth.num_layers() || pred.num_tokens() != truth.num_tokens())
            throw ContractViolation("hash_hit_rate: coverage mismatch in batch " + std::to_string(tables[b].batch_id));
        for (std::size_t l = 0; l < truth.num_layers(); ++l)
            for (std::size_t t = 0; t < truth.num_tokens(); ++t) {
                const std::size_t target = truth.top1(l, t);
                const auto& entry = pred.at(l, t);
                const std::size_t upto = std::min(k, entry.size());
                for (std::size_t j = 0; j < upto; ++j)
                    if (entry[j].expert == target) {
                        ++hits;
                        break;
                    }
                ++total;
            }
    }
    require(total > 0, "hash_hit_rate: nothing to score");
    return static_cast<double>(hits) / static_cast<double>(total);
}

PredictorNet train_predictor(const PredictorConfig& config, const std::vector<Sequence>& train, const std::vector<Sequence>& heldout,
                             const MoEModel& teacher, PredictorTrainReport* report) {
    const auto& mcfg = teacher.config();
    config.validate(mcfg.num_experts);
    require(!train.empty(), "train_predictor: empty training split");
    const std::size_t T = config.effective_T(mcfg.num_experts);
    Rng rng(config.seed);
    PredictorNet net(config, mcfg.d_model, mcfg.num_layers, mcfg.num_experts, rng);
    PredictorNet grad = PredictorNet::zeros_like(net);

    const InputEmbedder embed(teacher);
    std::vector<Matrix> embeddings;
    std::vector<TeacherTargets> targets;
    embeddings.reserve(train.size());
    targets.reserve(train.size());
    for (const auto& s : train) {
        embeddings.push_back(embed(s));
        targets.push_back(teacher_targets(teacher, s));
    }
    const std::size_t eval_n = std::min<std::size_t>(train.size(), 128);
    const std::span<const Matrix> eval_x(embeddings.data(), eval_n);
    const std::span<const TeacherTargets> eval_y(targets.data(), eval_n);

    AdamW opt({.lr = config.lr, .weight_decay = config.weight_decay});
    auto params = net.parameters();
    auto grads_mut = grad.parameters();
    std::vector<const Matrix*> grads(grads_mut.begin(), grads_mut.end());
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    std::vector<Matrix> batch_x;
    std::vector<TeacherTargets> batch_y;

    auto record = [&](std::size_t step) {
        if (!report) return;
        const PredictorLoss l = predictor_loss(net, eval_x, eval_y, config.lambda, T);
        report->loss_curve.push_back({step, l.ce, l.tkd, l.total()});
    };
    for (std::size_t step = 0; step < config.max_steps; ++step) {
        if (config.eval_every > 0 && step % config.eval_every == 0) record(step);
        batch_x.clear();
        batch_y.clear();
        for (std::size_t b = 0; b < std::min(config.batch_size, train.size()); ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch_x.push_back(embeddings[order[cursor]]);
            batch_y.push_back(targets[order[cursor]]);
            ++cursor;
        }
        grad.set_zero();
        const PredictorLoss loss = predictor_loss(net, batch_x, batch_y, config.lambda, T, &grad);
        if (!std::isfinite(loss.total()))
            throw NumericError("train_predictor: non-finite loss at step " + std::to_string(step) + " (seed " + std::to_string(config.seed) +
                               ", ce " + std::to_string(loss.ce) + ", tkd " + std::to_string(loss.tkd) + ")");
        if (config.clip_norm > 0) clip_global_norm(grads_mut, config.clip_norm);
        opt.step(params, grads);
    }
    record(config.max_steps);

    if (report) {
        report->lambda = config.lambda;
        report->T = T;
        report->steps = config.max_steps;
        if (!heldout.empty()) {
            std::vector<ExpertHashTable> tables;
            std::vector<ActivationTrace> traces;
            for (std::size_t i = 0; i < heldout.size(); ++i) {
                SequenceBatch b{i, {heldout[i]}, {}};
                tables.push_back(build_hash_table(net, embed, b, std::min<std::size_t>(3, mcfg.num_experts)));
                traces.push_back(teacher.forward(b).trace);
            }
            report->heldout_top1 = hash_hit_rate(tables, traces, 1);
            report->heldout_top3 = hash_hit_rate(tables, traces, 3);
        }
    }
    return net;
}

}  // namespace sida
