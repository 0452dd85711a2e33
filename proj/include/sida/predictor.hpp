#pragma once

// Offline-trained expert predictor ("hash function").
//
// Input embeddings (token + position, n x d_model) go through
//   compress:  z = x Wc + bc                              (n x compress_dim)
//   lstm1, lstm2 (unidirectional)                         (n x hidden)
//   sparse self-attention: w = sparsemax_rows(h h^T), c = w h
//   residual: r = c + h
//   per-MoE-layer heads: logits_l = r W_l + b_l           (n x K)
// Keys, queries and values are all the LSTM output; the score is the plain
// dot product.
//
// Training minimizes lambda * CE(student, teacher top-1) + TKD_T(student,
// teacher), both averaged over every (layer, token) pair in the minibatch.

#include "sida/checkpoint.hpp"
#include "sida/moe_model.hpp"
#include "sida/optim.hpp"
#include "sida/rng.hpp"
#include "sida/routing.hpp"

namespace sida {

struct PredictorConfig {
    std::size_t compress_dim = 16;
    std::size_t lstm_hidden = 24;
    static constexpr std::size_t lstm_layers = 2;
    std::size_t top_T = 30;
    double lambda = 0.005;
    double lr = 5e-5;
    std::size_t batch_size = 64;
    std::size_t max_steps = 2000;
    double weight_decay = 0.01;
    double clip_norm = 5.0;
    std::size_t eval_every = 50;
    std::uint64_t seed = 0;

    /// Truncation actually used for K experts: min(top_T, K).
    std::size_t effective_T(std::size_t num_experts) const { return std::min(top_T, num_experts); }
    void validate(std::size_t num_experts) const;
};

struct LstmCache {
    Matrix input;                // n x in
    Matrix i, f, g, o;           // gate activations, n x H each
    Matrix cell, cell_tanh, out; // n x H
};

/// One LSTM layer, gate order (input, forget, cell, output).
struct LstmLayer {
    Matrix w_in;   // in x 4H
    Matrix w_rec;  // H x 4H
    Matrix bias;   // 1 x 4H

    std::size_t hidden() const { return static_cast<std::size_t>(w_rec.rows()); }
    Matrix forward(const Matrix& x, LstmCache* cache = nullptr) const;
    /// Accumulates parameter gradients into `grad` and returns d(input).
    Matrix backward(const LstmCache& cache, const Matrix& d_out, LstmLayer& grad) const;
};

struct AttentionCache {
    Matrix values;   // h
    Matrix weights;  // sparsemax rows
    Matrix scores;   // h h^T
};

/// r = sparsemax_rows(h h^T) h + h.
Matrix sparse_attention_forward(const Matrix& h, AttentionCache* cache = nullptr);
/// d(h) given d(r).
Matrix sparse_attention_backward(const AttentionCache& cache, const Matrix& d_out);

struct PredictorOutput {
    std::vector<Matrix> logits;  // per MoE layer, n x K
    Matrix attention;            // n x n sparsemax weights
    Matrix scores;               // n x n raw dot products
};

class PredictorNet {
public:
    PredictorNet() = default;
    PredictorNet(const PredictorConfig& config, std::size_t d_model, std::size_t num_moe_layers, std::size_t num_experts, Rng& rng);
    static PredictorNet zeros_like(const PredictorNet& other);

    const PredictorConfig& config() const { return config_; }
    std::size_t d_model() const { return static_cast<std::size_t>(compress_w.rows()); }
    std::size_t num_moe_layers() const { return head_w.size(); }
    std::size_t num_experts() const { return static_cast<std::size_t>(head_w.front().cols()); }

    Matrix compress_w, compress_b;
    LstmLayer lstm[PredictorConfig::lstm_layers];
    std::vector<Matrix> head_w, head_b;

    PredictorOutput forward(const Matrix& embeddings) const;

    std::size_t parameter_count() const;
    std::vector<std::pair<std::string, Matrix*>> named_parameters();
    std::vector<std::pair<std::string, const Matrix*>> named_parameters() const;
    std::vector<Matrix*> parameters();
    void set_zero();

    Checkpoint to_checkpoint() const;
    static PredictorNet from_checkpoint(const Checkpoint& ckpt);
    void save(const std::filesystem::path& path) const;
    static PredictorNet load(const std::filesystem::path& path);

    struct Cache {
        Matrix embeddings;
        LstmCache lstm[PredictorConfig::lstm_layers];
        AttentionCache attention;
        Matrix residual;
    };
    PredictorOutput forward_cached(const Matrix& embeddings, Cache& cache) const;
    /// Accumulates parameter gradients for d(logits) into `grad`.
    void backward(const Cache& cache, const std::vector<Matrix>& d_logits, PredictorNet& grad) const;

private:
    PredictorConfig config_;
};

/// Token + position embeddings copied out of a model, so the predictor side
/// never reads the model's blocks or routers.
class InputEmbedder {
public:
    InputEmbedder() = default;
    explicit InputEmbedder(const MoEModel& model)
        : token_(model.token_embeddings), position_(model.position_embeddings) {}
    Matrix operator()(const Sequence& seq) const;

private:
    Matrix token_, position_;
};

/// KL(q || r) where q and r are the teacher distribution and softmax(student)
/// restricted to the teacher's top-T experts and renormalized.
double tkd_loss(const Vector& student_logits, const Vector& teacher_probs, std::size_t T, Vector* grad = nullptr);

/// -log softmax(student)[target].
double cross_entropy(const Vector& student_logits, std::size_t target, Vector* grad = nullptr);

/// Teacher router probabilities for one sequence, per layer (n x K).
struct TeacherTargets {
    std::vector<Matrix> probs;
};
TeacherTargets teacher_targets(const MoEModel& teacher, const Sequence& seq);

struct PredictorLoss {
    double ce = 0.0;   // mean over (layer, token)
    double tkd = 0.0;  // mean over (layer, token)
    double lambda = 0.0;
    double total() const { return lambda * ce + tkd; }
};

/// lambda * mean CE + mean TKD over a minibatch; accumulates gradients when
/// `grad` is non-null.
PredictorLoss predictor_loss(const PredictorNet& net, std::span<const Matrix> embeddings, std::span<const TeacherTargets> targets,
                             double lambda, std::size_t T, PredictorNet* grad = nullptr);

/// Top-k (expert, alpha) per (layer, token), alpha = student softmax value.
ExpertHashTable build_hash_table(const PredictorNet& net, const InputEmbedder& embed, const SequenceBatch& batch, std::size_t eval_top_k);

/// Fraction of (layer, token) whose teacher top-1 expert is among the first k
/// predicted experts.
double hash_hit_rate(std::span<const ExpertHashTable> tables, std::span<const ActivationTrace> traces, std::size_t k);

struct LossPoint {
    std::size_t step = 0;
    double ce = 0.0;
    double tkd = 0.0;
    double total = 0.0;
};

struct PredictorTrainReport {
    std::vector<LossPoint> loss_curve;  // on a fixed evaluation subset of the training split
    double heldout_top1 = 0.0;
    double heldout_top3 = 0.0;
    double lambda = 0.0;
    std::size_t T = 0;
    std::size_t steps = 0;
};

/// Trains with AdamW. `heldout` may be empty, in which case hit rates stay 0.
PredictorNet train_predictor(const PredictorConfig& config, const std::vector<Sequence>& train, const std::vector<Sequence>& heldout,
                             const MoEModel& teacher, PredictorTrainReport* report = nullptr);

}  // namespace sida
