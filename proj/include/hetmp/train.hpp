#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hetmp/engine.hpp"
#include "hetmp/graph.hpp"
#include "hetmp/sampling.hpp"

namespace hetmp {

struct FlagConfig {
  std::size_t steps = 3;     // M
  double step_size = 1e-3;   // alpha
  void validate() const;
  bool operator==(const FlagConfig&) const = default;
};

struct TrainConfig {
  double lr = 0.004;
  double weight_decay = 0.0;
  std::size_t batch_size = 1024;
  double dropout_p = 0.5;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::vector<std::size_t> fanouts{10, 10};
  std::optional<FlagConfig> flag;
  bool ft_enabled = false;
  bool feature_trainable = true;
  std::uint64_t seed = 0;
  // Type carrying labels and splits; empty picks the only labeled type.
  std::string target_type;
  // Real elapsed time in history records. Off by default so histories are
  // reproducible byte for byte.
  bool history_wall_time = false;

  void validate() const;
};

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t step = 0;
};

struct TrainState {
  HeteroSchema schema;
  ModelConfig model;
  TypeId target = 0;
  std::uint64_t seed = 0;
  ModelParams<float> params;  // embeddings defined for featureless types
  ModelParams<float> best;    // snapshot at the best validation epoch
  AdamState adam;             // one slot per params.named() entry
  std::size_t epoch = 0;      // completed epochs
  double best_valid = -1.0;
  std::size_t best_epoch = 0;
  std::size_t since_best = 0;
  bool stopped = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;  // full-batch, eval mode, end of epoch
  double valid_acc = 0.0;
  double test_acc = 0.0;
  std::int64_t wall_ms = 0;
};

/// Per-type mean of neighbor features, propagated round by round from featured
/// types along relations whose source type is already covered. Featured types
/// return their own features; unreachable nodes get zero rows.
std::vector<FeatureMatrix> ft_prepropagate(const HeteroGraph& graph);

/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta). Parameters
/// without requires_grad or without a gradient are left alone.
struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};
void adamw_step(AdamState& state, std::span<Tensor<float>> params, double lr, double weight_decay,
                AdamHyper hyper = {});

/// Labeled type to train on (throws when absent or ambiguous).
TypeId resolve_target(const HeteroGraph& graph, const std::string& name);

TrainState init_state(const HeteroGraph& graph, const ModelConfig& model, const TrainConfig& config);

/// Per-type input tables: given features, or the state's embedding tables.
std::vector<Tensor<float>> input_tables(const TrainState& state, const HeteroGraph& graph);

/// Trainable tensors of the state, in params.named() order.
std::vector<Tensor<float>> trainable(const TrainState& state);

/// Cross-entropy over the batch seeds (all of the target type).
Tensor<float> batch_loss(const TrainState& state, const HeteroGraph& graph,
                         std::span<const Tensor<float>> tables, const MiniBatch& batch,
                         ForwardOptions options, std::span<const Tensor<float>> perturb = {});

/// One plain AdamW step on a sampled batch; returns the pre-step loss.
float train_step(TrainState& state, const HeteroGraph& graph, std::span<const Tensor<float>> tables,
                 const MiniBatch& batch, const TrainConfig& config, std::uint64_t key);

/// FLAG: M ascent steps on an input perturbation, parameter gradients averaged
/// over the M forwards, then one optimizer step. Returns the mean loss.
float flag_perturb_train_step(TrainState& state, const HeteroGraph& graph,
                              std::span<const Tensor<float>> tables, const MiniBatch& batch,
                              const TrainConfig& config, const FlagConfig& flag, std::uint64_t key,
                              std::vector<Tensor<float>>* final_delta = nullptr);

/// Full-batch eval-mode logits for the target type.
Tensor<float> target_logits(const ModelParams<float>& params, const TrainState& state,
                            const HeteroGraph& graph);

double accuracy(const Tensor<float>& logits, const HeteroGraph& graph, TypeId target, Split split);

/// Full-batch accuracy of the state's current parameters on one split.
double evaluate(const TrainState& state, const HeteroGraph& graph, Split split);

/// Runs one epoch (shuffle, batches, eval, early-stop bookkeeping).
EpochRecord run_epoch(TrainState& state, const HeteroGraph& graph, const TrainConfig& config);

struct FitResult {
  TrainState state;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const TrainState&, const EpochRecord&)>;

FitResult fit(const HeteroGraph& graph, const ModelConfig& model, const TrainConfig& config,
              const EpochCallback& on_epoch = {});

/// Continues a run until it stops; history holds the new epochs only.
FitResult resume(TrainState state, const HeteroGraph& graph, const TrainConfig& config,
                 const EpochCallback& on_epoch = {});

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void checkpoint_save(const TrainState& state, const std::filesystem::path& path);
TrainState checkpoint_load(const std::filesystem::path& path);

// --- gradient check ---------------------------------------------------------

struct GroupCheck {
  std::string group;
  std::size_t entries = 0;
  double worst_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double tolerance = 1e-3;
  bool passed() const;
};

/// 12-node, 3-type built-in graph (paper/author/field, reverse relations added);
/// only "paper" has features and labels.
HeteroGraph grad_check_graph();

/// Central finite differences (64-bit) over every parameter group of a 2-layer
/// model built from `proto`, including the featureless types' embeddings.
GradCheckReport check_grad(const LayerConfig& proto, std::uint64_t seed = 1, double h = 1e-5,
                           double tolerance = 1e-3);

}  // namespace hetmp
