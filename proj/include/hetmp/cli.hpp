#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetmp/data_io.hpp"
#include "hetmp/engine.hpp"
#include "hetmp/train.hpp"

namespace hetmp::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a command needs. Built from defaults, then a config file, then
/// overrides (later assignments win).
struct RunConfig {
  // data: a graph directory, or a synthetic preset when empty
  std::string dataset;
  std::string synth = "overfit_300";  // overfit_300 | mag_shaped
  std::optional<std::size_t> synth_nodes;
  std::optional<std::size_t> synth_classes;
  std::optional<std::size_t> synth_feature_dim;
  std::optional<double> synth_class_signal;
  std::uint64_t synth_seed = 0;

  // model knobs
  IntraAggregation intra = IntraAggregation::kSimAttn;
  InterAggregation inter = InterAggregation::kSim;
  bool norm = true;
  NodeWeights node_weights = NodeWeights::kPerType;
  CoefficientMode coefficients = CoefficientMode::kSumNormalize;
  std::size_t hidden = 64;
  std::size_t layers = 2;

  // train; `train.flag` is ignored, the two fields below decide it
  TrainConfig train = default_train();
  bool flag_enabled = true;
  FlagConfig flag;
  bool reverse = true;  // add reverse relations after loading
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};  // ablate only

  static TrainConfig default_train();
  void validate() const;
};

/// TrainConfig with FLAG resolved and a single fanout broadcast to every layer.
TrainConfig train_config(const RunConfig& rc);

/// key = value lines; '#' starts a comment; blank lines are ignored.
std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text,
                                                          const std::string& source);

void apply(RunConfig& rc, const std::string& key, const std::string& value);

/// Defaults, then `file` (if non-empty), then `overrides` in order. Validates.
RunConfig load_config(const std::filesystem::path& file,
                      const std::vector<std::pair<std::string, std::string>>& overrides = {});

/// Canonical key = value text that load_config reads back to the same config.
std::string dump_config(const RunConfig& rc);

/// Knobs -> layer prototype. The Norm knob selects the MsgNorm + LayerNorm update.
LayerConfig layer_proto(const RunConfig& rc);
ModelConfig model_config(const RunConfig& rc, std::size_t in_dim, std::size_t num_classes);

SynthSpec synth_spec(const RunConfig& rc);
/// Dataset or synthetic graph with reverse relations added.
HeteroGraph load_dataset(const RunConfig& rc);
std::size_t input_dim(const HeteroGraph& graph);

struct AblationRow {
  std::string name;
  bool sim_attn, sim, norm, ft, flag;
};
/// R-GCN, R-GCN(1+), R-GCN(2+), R-GCN(3+), R-GSN(1+), R-GSN(2+), R-GSN(3+).
const std::vector<AblationRow>& ablation_rows();
RunConfig with_knobs(RunConfig rc, const AblationRow& row);

/// Adds {"ladders": [...], "violations": [...]} to a build_report() result: each
/// ladder lists its rungs in order and flags any rung whose mean validation
/// accuracy is below the previous rung's.
nlohmann::json ablation_report(std::span<const RunRecord> runs);

// Commands. Each returns a process exit code; errors propagate as exceptions.
int cmd_train(const RunConfig& rc, const std::filesystem::path& out, std::ostream& log);
int cmd_eval(const RunConfig& rc, const std::filesystem::path& checkpoint, std::ostream& out);
int cmd_ablate(const RunConfig& rc, const std::filesystem::path& out, std::ostream& log,
               bool report_only = false);
int cmd_params(const RunConfig& rc, bool mag_dims, std::ostream& out);
int cmd_gen_synth(const RunConfig& rc, const std::filesystem::path& out, std::ostream& log);
int cmd_check_grad(const RunConfig& rc, bool corrupt_backward, std::ostream& out);

/// Full command-line entry point (used by tools/hetmp).
int run(int argc, char** argv);

}  // namespace hetmp::cli
