#pragma once

// Desk-scale stacked MoE classifier.
//
// Per block: single-head self-attention mixing with a residual, then an MoE
// layer with a residual. The MoE layer evaluates, per token, only the experts
// in the selected set I and returns sum_{i in I} alpha_i * f_i(x). Selections
// come either from the block's router (softmax over W_r^T x, top routing_k) or
// from an externally supplied expert hash table, in which case the router is
// never touched. Final embeddings are mean-pooled and fed to a linear head.
//
// No layer norm or dropout: keeps every path exactly differentiable for the
// finite-difference checks.

#include "sida/checkpoint.hpp"
#include "sida/optim.hpp"
#include "sida/routing.hpp"
#include "sida/rng.hpp"

#include <chrono>
#include <functional>
#include <optional>
#include <span>

namespace sida {

struct MoEConfig {
    std::size_t vocab_size = 512;
    std::size_t d_model = 64;
    std::size_t num_layers = 2;
    std::size_t num_experts = 8;
    std::size_t expert_hidden = 128;
    std::size_t max_seq_len = 64;
    std::size_t routing_k = 1;
    std::size_t num_classes = 2;

    void validate() const;
    bool operator==(const MoEConfig&) const = default;
};

/// Two-layer ReLU MLP: d_model -> hidden -> d_model.
struct Expert {
    Matrix w1;  // d x h
    Matrix b1;  // 1 x h
    Matrix w2;  // h x d
    Matrix b2;  // 1 x d

    /// Applies the expert to every row of `x`.
    Matrix forward(const Matrix& x) const;
    std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
    std::size_t bytes() const { return parameter_count() * sizeof(double); }
};

struct MoEBlock {
    Matrix wq, wk, wv, wo;  // d x d each
    Matrix router;          // d x K
    std::vector<Expert> experts;
};

/// Per-expert evaluation counters, one vector per layer.
using ExpertEvalCounts = std::vector<std::vector<std::size_t>>;

struct LayerTiming {
    double mixing_s = 0.0;
    double routing_s = 0.0;  // router matmul + softmax + top-k, plus any injected delay
    double experts_s = 0.0;
};

struct ForwardOptions {
    ExpertEvalCounts* expert_evals = nullptr;
    /// Sleep injected once per router invocation (one per layer per batch).
    std::chrono::nanoseconds router_delay{0};
    /// Called after experts for `layer` are known and before they run.
    std::function<void(std::size_t layer, const RoutingGrid& selections)> on_layer_routed;
};

struct ForwardResult {
    std::vector<Vector> logits;  // one per sequence
    ActivationTrace trace;
    std::vector<LayerTiming> timing;
};

/// Output of an MoE layer for one token: sum over `choices` of alpha * f(x).
/// Only experts named in `choices` are evaluated.
RowVector moe_layer_forward(const RowVector& x, std::span<const ExpertChoice> choices, std::span<const Expert> experts,
                            std::vector<std::size_t>* eval_counts = nullptr);

/// softmax(W_r^T x).
Vector router_scores(const RowVector& x, const Matrix& router);

class MoEModel {
public:
    MoEModel() = default;
    /// Random initialization.
    MoEModel(const MoEConfig& config, Rng& rng);
    /// All-zero parameters of the right shapes (gradient accumulator).
    static MoEModel zeros(const MoEConfig& config);

    const MoEConfig& config() const { return config_; }

    Matrix token_embeddings;     // vocab x d
    Matrix position_embeddings;  // L x d
    std::vector<MoEBlock> blocks;
    Matrix classifier;  // d x classes

    /// Input embeddings (token + position) for one sequence, n x d.
    Matrix embed(const Sequence& seq) const;

    ForwardResult forward(const SequenceBatch& batch, const ForwardOptions& options = {}) const;
    ForwardResult forward(const SequenceBatch& batch, const ExpertHashTable& table, const ForwardOptions& options = {}) const;

    std::size_t expert_bytes() const;  // one expert
    std::size_t total_expert_bytes() const;
    std::size_t router_bytes() const;  // all layers
    std::size_t non_expert_bytes() const;

    std::vector<std::pair<std::string, Matrix*>> named_parameters();
    std::vector<std::pair<std::string, const Matrix*>> named_parameters() const;
    std::vector<Matrix*> parameters();

    void set_zero();

    Checkpoint to_checkpoint() const;
    static MoEModel from_checkpoint(const Checkpoint& ckpt);
    void save(const std::filesystem::path& path) const;
    static MoEModel load(const std::filesystem::path& path);

private:
    explicit MoEModel(const MoEConfig& config);
    ForwardResult forward_impl(const SequenceBatch& batch, const ExpertHashTable* table, const ForwardOptions& options) const;

    MoEConfig config_;
};

/// Load-balance auxiliary loss K * sum_i f_i * P_i for one layer, where f_i is
/// the fraction of selections going to expert i and P_i the mean router
/// probability of expert i.
double load_balance_loss(std::span<const Vector> router_probs, std::span<const RoutingEntry> selections, std::size_t num_experts);

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    double lr = 2e-3;
    double weight_decay = 0.01;
    double balance_coeff = 0.01;
    double clip_norm = 5.0;
    /// Weight of the router cross-entropy toward per-token target experts;
    /// only used when targets are supplied.
    double route_supervision = 1.0;
    std::uint64_t seed = 0;
};

/// Target expert per token, one list per sequence; applied to every layer.
using RouteTargets = std::span<const std::vector<std::size_t>>;

struct TrainStep {
    std::size_t step = 0;
    double ce = 0.0;
    double balance = 0.0;
    double accuracy = 0.0;
};

struct TrainReport {
    std::vector<TrainStep> steps;
    double final_ce = 0.0;
    double final_balance = 0.0;
    double train_accuracy = 0.0;
};

/// Thrown when the training loss stops being finite.
class DivergenceError : public NumericError {
public:
    using NumericError::NumericError;
};

/// Loss and parameter gradient of CE + balance_coeff * balance over a
/// minibatch of labeled sequences. `grad` must have the model's shapes.
struct LossBreakdown {
    double ce = 0.0;
    double balance = 0.0;
    double route = 0.0;  // mean over (layer, token) of -log p_router[target]
    std::size_t correct = 0;
    double total(double balance_coeff, double route_coeff = 0.0) const { return ce + balance_coeff * balance + route_coeff * route; }
};
LossBreakdown moe_loss_and_grad(const MoEModel& model, std::span<const Sequence> sequences, std::span<const std::size_t> labels,
                                double balance_coeff, MoEModel* grad, RouteTargets route_targets = {}, double route_coeff = 0.0);

/// Trains with AdamW on classification CE plus the load-balance loss, plus
/// router supervision when `route_targets` is non-empty.
MoEModel train_toy_moe(const MoEConfig& config, const std::vector<Sequence>& sequences, const std::vector<std::size_t>& labels,
                       const TrainConfig& train, TrainReport* report = nullptr, RouteTargets route_targets = {});
void train_moe_inplace(MoEModel& model, const std::vector<Sequence>& sequences, const std::vector<std::size_t>& labels,
                       const TrainConfig& train, TrainReport* report = nullptr, RouteTargets route_targets = {});

double classification_accuracy(const MoEModel& model, const std::vector<Sequence>& sequences, const std::vector<std::size_t>& labels);

/// Per layer: 1 - |distinct activated experts| / K.
std::vector<double> sequence_sparsity(const ActivationTrace& trace, std::size_t num_experts);

struct SelectionOverhead {
    double total_s = 0.0;      // mean forward wall time per repetition
    double selection_s = 0.0;  // mean routing + selection time per repetition
    double fraction() const { return total_s > 0 ? selection_s / total_s : 0.0; }
};

/// Times router-mode forward passes and splits out the routing/selection part.
SelectionOverhead selection_overhead_probe(const MoEModel& model, const SequenceBatch& batch, std::size_t repetitions);

}  // namespace sida
