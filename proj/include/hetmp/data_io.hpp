#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hetmp/graph.hpp"
#include "hetmp/train.hpp"

namespace hetmp {

/// Load/parse failure. The message starts with "<file>:<line>:" when a line is known.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- on-disk graphs ------------------------------------------------------------
//
// <dir>/schema.json            {"node_types", "relations", "node_counts",
//                               "feature_dims", "num_classes"}
// <dir>/<type>.feat.bin        "HGF1", u32 rows, u32 cols, f32 LE row-major
// <dir>/<type>.labels.csv      node_index,class
// <dir>/<type>.split.csv       node_index,{train|valid|test}
// <dir>/<src>__<name>__<dst>.edges.csv   src_index,dst_index
//
// Blank lines and lines starting with '#' are ignored in CSV files.

HeteroGraph load_graph(const std::filesystem::path& dir);
void save_graph(const HeteroGraph& graph, const std::filesystem::path& dir);

FeatureMatrix read_features(const std::filesystem::path& file);
void write_features(const FeatureMatrix& m, const std::filesystem::path& file);

// --- ogbn-mag shape ---------------------------------------------------------------

/// paper, author, institution, field_of_study with the four forward relations.
HeteroSchema mag_schema();
/// 736,389 / 1,134,649 / 8,740 / 59,965 in mag_schema() type order.
std::vector<std::size_t> mag_node_counts();
/// Forward edge counts in mag_schema() relation order.
std::vector<std::size_t> mag_edge_counts();
inline constexpr std::size_t kMagInputDim = 128;
inline constexpr std::size_t kMagHiddenDim = 64;
inline constexpr std::size_t kMagClasses = 349;

// --- synthetic graphs --------------------------------------------------------------

struct SynthSpec {
  HeteroSchema schema;                   // forward relations only
  std::vector<std::size_t> node_counts;  // per type
  std::vector<std::size_t> edge_counts;  // per relation
  std::string labeled_type = "paper";
  std::size_t num_classes = 4;
  std::size_t feature_dim = 16;
  // 0: features and edges independent of the labels; 1: strongest coupling.
  double class_signal = 0.5;
  std::uint64_t seed = 0;

  void validate() const;

  /// 300 nodes over paper / author / field.
  static SynthSpec overfit_300();
  /// mag schema and proportions scaled to about `total_nodes` (every type >= 2).
  static SynthSpec mag_shaped(std::size_t total_nodes, std::size_t num_classes = 8,
                              std::size_t feature_dim = 32, double class_signal = 0.5,
                              std::uint64_t seed = 0);
};

/// Every node carries a latent class (balanced per type). Labeled-type features
/// are N(3 * class_signal * mu_c, I) with unit random class directions mu_c. Each
/// edge picks a uniform destination and, with probability class_signal, a source
/// of the same latent class (otherwise a uniform source). Splits are 60/20/20
/// per class. Reverse relations are not added.
HeteroGraph generate_synthetic(const SynthSpec& spec);

// --- histories and reports ---------------------------------------------------------

nlohmann::json to_json(const EpochRecord& r);
void write_history(const std::vector<EpochRecord>& history, const std::filesystem::path& file);
std::vector<EpochRecord> read_history(const std::filesystem::path& file);

struct RunRecord {
  std::string config;  // row name; rows keep first-appearance order
  std::uint64_t seed = 0;
  std::uint64_t params = 0;
  std::vector<EpochRecord> history;
};

/// Best validation epoch (first one on ties) and the test accuracy there.
struct BestEpoch {
  std::size_t epoch = 0;
  double valid_acc = 0.0;
  double test_acc = 0.0;
};
BestEpoch best_epoch(const std::vector<EpochRecord>& history);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population (divides by n)
};
MeanStd mean_std(std::span<const double> xs);

/// {"rows": [{"config", "runs", "seeds", "params", "valid": {mean, std},
/// "test": {mean, std}, "best_epochs"}]}
nlohmann::json build_report(std::span<const RunRecord> runs);
/// Pretty-printed build_report(); throws DataError on write failure.
void emit_report(std::span<const RunRecord> runs, const std::filesystem::path& file);

/// Writes `text` to `file` via a temporary and rename.
void write_text_file(const std::filesystem::path& file, const std::string& text);

}  // namespace hetmp
