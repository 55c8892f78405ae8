#include "hetmp/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "hetmp/ops.hpp"
#include "hetmp/serialize.hpp"

namespace hetmp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& want) {
  throw ConfigError("config: '" + key + "' = '" + value + "': expected " + want);
}

template <typename V>
V parse_num(const std::string& key, const std::string& value) {
  V v{};
  auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || end != value.data() + value.size() || value.empty()) {
    bad_value(key, value, std::is_floating_point_v<V> ? "a number" : "a non-negative integer");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  bad_value(key, value, "true or false");
}

template <typename V>
std::vector<V> parse_list(const std::string& key, const std::string& value) {
  std::vector<V> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_num<V>(key, trim(item)));
  if (out.empty()) bad_value(key, value, "a comma-separated list");
  return out;
}

// Shortest round-trip text for a double.
std::string num(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename V>
std::string join(const std::vector<V>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

std::string fanout_text(const std::vector<std::size_t>& f) {
  std::string s;
  for (std::size_t i = 0; i < f.size(); ++i)
    s += (i ? "," : "") + (f[i] == kUnlimitedFanout ? std::string("all") : std::to_string(f[i]));
  return s;
}

std::string slug(const std::string& name) {
  std::string s;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c))) s += static_cast<char>(std::tolower(c));
    else if (c == '+') s += "p";
    else if (!s.empty() && s.back() != '_') s += '_';
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

struct Flags {
  std::unique_ptr<bool[]> data;
  std::size_t n = 0;
  std::span<const bool> span() const { return {data.get(), n}; }
};

Flags feature_flags(const HeteroGraph& g) {
  Flags f{std::make_unique<bool[]>(g.schema.node_types.size()), g.schema.node_types.size()};
  for (std::size_t t = 0; t < f.n; ++t) f.data[t] = g.features[t].has_value();
  return f;
}

ParamCounts count_for(const RunConfig& rc, const HeteroGraph& g) {
  const auto model = model_config(rc, input_dim(g), g.num_classes);
  const auto flags = feature_flags(g);
  return param_count(model, g.schema, g.node_counts, flags.span(), input_dim(g));
}

json counts_json(const ParamCounts& c) {
  return {{"w_rel", c.w_rel},   {"w_node", c.w_node},   {"attn", c.attn},
          {"ln_in", c.ln_in},   {"ln_out", c.ln_out},   {"msgnorm", c.msgnorm},
          {"embeddings", c.embeddings}, {"total", c.total()}};
}

std::string with_commas(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

std::string pct(double x) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(2) << 100.0 * x;
  return o.str();
}

void log_epoch(std::ostream& log, const std::string& prefix, const EpochRecord& r) {
  log << prefix << "epoch " << r.epoch << "  loss " << std::fixed << std::setprecision(4)
      << r.train_loss << "  train " << pct(r.train_acc) << "  valid " << pct(r.valid_acc)
      << "  test " << pct(r.test_acc) << "\n"
      << std::defaultfloat;
}

TrainState best_state(TrainState s) {
  s.params = s.best;
  return s;
}

}  // namespace

// --- configuration ---------------------------------------------------------------

TrainConfig RunConfig::default_train() {
  TrainConfig c;
  c.lr = 0.004;
  c.batch_size = 1024;
  c.dropout_p = 0.5;
  c.max_epochs = 100;
  c.patience = 10;
  c.fanouts = {10, 10};
  c.ft_enabled = true;
  c.feature_trainable = true;
  return c;
}

TrainConfig train_config(const RunConfig& rc) {
  TrainConfig c = rc.train;
  c.flag = rc.flag_enabled ? std::optional<FlagConfig>(rc.flag) : std::nullopt;
  if (c.fanouts.size() == 1) c.fanouts.assign(rc.layers, c.fanouts.front());
  return c;
}

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  check(train.lr > 0.0 && std::isfinite(train.lr), "lr must be > 0");
  check(train.weight_decay >= 0.0, "weight_decay must be >= 0");
  check(train.batch_size >= 1, "batch_size must be >= 1");
  check(train.dropout_p >= 0.0 && train.dropout_p < 1.0, "dropout must lie in [0, 1)");
  check(train.patience >= 1, "patience must be >= 1");
  check(train.max_epochs >= 1, "max_epochs must be >= 1");
  check(layers == 0 || train.fanouts.size() == 1 || train.fanouts.size() == layers,
        "fanout needs one value or one per layer (" + std::to_string(layers) + ")");
  for (auto f : train.fanouts) check(f >= 1, "fanout values must be >= 1");
  check(flag.steps >= 1, "flag.steps must be >= 1");
  check(flag.step_size > 0.0, "flag.alpha must be > 0");
  check(hidden >= 1, "hidden must be >= 1");
  check(synth == "overfit_300" || synth == "mag_shaped", "synth must be overfit_300 or mag_shaped");
  check(!synth_class_signal || (*synth_class_signal >= 0.0 && *synth_class_signal <= 1.0),
        "synth.class_signal must lie in [0, 1]");
  check(!synth_nodes || *synth_nodes >= 4, "synth.nodes must be >= 4");
  check(!synth_classes || *synth_classes >= 2, "synth.classes must be >= 2");
  check(!synth_feature_dim || *synth_feature_dim >= 1, "synth.feature_dim must be >= 1");
  check(!seeds.empty(), "seeds must not be empty");
  try {
    auto proto = layer_proto(*this);
    proto.in_dim = proto.out_dim = 1;
    proto.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

std::vector<std::pair<std::string, std::string>> parse_kv(const std::string& text,
                                                          const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

void apply(RunConfig& rc, const std::string& key, const std::string& v) {
  auto& t = rc.train;
  if (key == "dataset") rc.dataset = v;
  else if (key == "synth") rc.synth = v;
  else if (key == "synth.nodes") rc.synth_nodes = parse_num<std::size_t>(key, v);
  else if (key == "synth.classes") rc.synth_classes = parse_num<std::size_t>(key, v);
  else if (key == "synth.feature_dim") rc.synth_feature_dim = parse_num<std::size_t>(key, v);
  else if (key == "synth.class_signal") rc.synth_class_signal = parse_num<double>(key, v);
  else if (key == "synth.seed") rc.synth_seed = parse_num<std::uint64_t>(key, v);
  else if (key == "model") {
    if (v == "rgsn") rc.intra = IntraAggregation::kSimAttn, rc.inter = InterAggregation::kSim, rc.norm = true;
    else if (v == "rgcn") rc.intra = IntraAggregation::kMean, rc.inter = InterAggregation::kSum, rc.norm = false;
    else bad_value(key, v, "rgsn or rgcn");
  } else if (key == "intra") {
    if (v == "mean") rc.intra = IntraAggregation::kMean;
    else if (v == "simattn" || v == "sim-attn") rc.intra = IntraAggregation::kSimAttn;
    else bad_value(key, v, "mean or simattn");
  } else if (key == "inter") {
    if (v == "sum") rc.inter = InterAggregation::kSum;
    else if (v == "sim") rc.inter = InterAggregation::kSim;
    else bad_value(key, v, "sum or sim");
  } else if (key == "norm") rc.norm = parse_bool(key, v);
  else if (key == "node_weights") {
    if (v == "shared") rc.node_weights = NodeWeights::kShared;
    else if (v == "per-type") rc.node_weights = NodeWeights::kPerType;
    else bad_value(key, v, "shared or per-type");
  } else if (key == "coefficients") {
    if (v == "sum") rc.coefficients = CoefficientMode::kSumNormalize;
    else if (v == "softmax") rc.coefficients = CoefficientMode::kSoftmax;
    else bad_value(key, v, "sum or softmax");
  } else if (key == "hidden") rc.hidden = parse_num<std::size_t>(key, v);
  else if (key == "layers") rc.layers = parse_num<std::size_t>(key, v);
  else if (key == "lr") t.lr = parse_num<double>(key, v);
  else if (key == "weight_decay") t.weight_decay = parse_num<double>(key, v);
  else if (key == "batch_size") t.batch_size = parse_num<std::size_t>(key, v);
  else if (key == "dropout") t.dropout_p = parse_num<double>(key, v);
  else if (key == "max_epochs") t.max_epochs = parse_num<std::size_t>(key, v);
  else if (key == "patience") t.patience = parse_num<std::size_t>(key, v);
  else if (key == "fanout") {
    t.fanouts.clear();
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      t.fanouts.push_back(item == "all" ? kUnlimitedFanout : parse_num<std::size_t>(key, item));
    }
    if (t.fanouts.empty()) bad_value(key, v, "a comma-separated list");
  } else if (key == "flag") rc.flag_enabled = parse_bool(key, v);
  else if (key == "flag.steps") rc.flag.steps = parse_num<std::size_t>(key, v);
  else if (key == "flag.alpha") rc.flag.step_size = parse_num<double>(key, v);
  else if (key == "ft") t.ft_enabled = parse_bool(key, v);
  else if (key == "feature_trainable") t.feature_trainable = parse_bool(key, v);
  else if (key == "seed") t.seed = parse_num<std::uint64_t>(key, v);
  else if (key == "target") t.target_type = v;
  else if (key == "reverse") rc.reverse = parse_bool(key, v);
  else if (key == "seeds") rc.seeds = parse_list<std::uint64_t>(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig load_config(const fs::path& file,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig rc;
  if (!file.empty()) {
    std::ifstream f(file);
    if (!f) throw ConfigError("config: cannot open " + file.string());
    std::stringstream ss;
    ss << f.rdbuf();
    const std::string text = ss.str();
    const auto pairs = parse_kv(text, file.string());
    // Recover line numbers for value errors.
    std::istringstream lines(text);
    std::string line;
    std::size_t line_no = 0, next = 0;
    while (next < pairs.size() && std::getline(lines, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (trim(hash == std::string::npos ? line : line.substr(0, hash)).empty()) continue;
      try {
        apply(rc, pairs[next].first, pairs[next].second);
      } catch (const ConfigError& e) {
        throw ConfigError(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
      ++next;
    }
    // Dataset paths are relative to the config file.
    if (!rc.dataset.empty() && fs::path(rc.dataset).is_relative()) {
      rc.dataset = (file.parent_path() / rc.dataset).lexically_normal().string();
    }
  }
  for (const auto& [k, v] : overrides) apply(rc, k, v);
  rc.validate();
  return rc;
}

std::string dump_config(const RunConfig& rc) {
  const auto& t = rc.train;
  std::ostringstream o;
  auto kv = [&](const std::string& k, const std::string& v) { o << k << " = " << v << "\n"; };
  o << "# data\n";
  if (!rc.dataset.empty()) kv("dataset", rc.dataset);
  kv("synth", rc.synth);
  if (rc.synth_nodes) kv("synth.nodes", std::to_string(*rc.synth_nodes));
  if (rc.synth_classes) kv("synth.classes", std::to_string(*rc.synth_classes));
  if (rc.synth_feature_dim) kv("synth.feature_dim", std::to_string(*rc.synth_feature_dim));
  if (rc.synth_class_signal) kv("synth.class_signal", num(*rc.synth_class_signal));
  kv("synth.seed", std::to_string(rc.synth_seed));
  kv("reverse", rc.reverse ? "true" : "false");
  o << "# model\n";
  kv("intra", rc.intra == IntraAggregation::kMean ? "mean" : "simattn");
  kv("inter", rc.inter == InterAggregation::kSum ? "sum" : "sim");
  kv("norm", rc.norm ? "true" : "false");
  kv("node_weights", rc.node_weights == NodeWeights::kShared ? "shared" : "per-type");
  kv("coefficients", rc.coefficients == CoefficientMode::kSumNormalize ? "sum" : "softmax");
  kv("hidden", std::to_string(rc.hidden));
  kv("layers", std::to_string(rc.layers));
  o << "# training\n";
  kv("lr", num(t.lr));
  kv("weight_decay", num(t.weight_decay));
  kv("batch_size", std::to_string(t.batch_size));
  kv("dropout", num(t.dropout_p));
  kv("max_epochs", std::to_string(t.max_epochs));
  kv("patience", std::to_string(t.patience));
  kv("fanout", fanout_text(t.fanouts));
  kv("flag", rc.flag_enabled ? "true" : "false");
  kv("flag.steps", std::to_string(rc.flag.steps));
  kv("flag.alpha", num(rc.flag.step_size));
  kv("ft", t.ft_enabled ? "true" : "false");
  kv("feature_trainable", t.feature_trainable ? "true" : "false");
  kv("seed", std::to_string(t.seed));
  if (!t.target_type.empty()) kv("target", t.target_type);
  kv("seeds", join(rc.seeds));
  return o.str();
}

LayerConfig layer_proto(const RunConfig& rc) {
  LayerConfig l = rc.norm ? rgsn_layer() : rgcn_layer();
  l.intra = rc.intra;
  l.inter = rc.inter;
  l.norm_enabled = rc.norm;
  l.update = rc.norm ? UpdateRule::kRgsn : UpdateRule::kRgcn;
  l.node_weights = rc.node_weights;
  l.coefficients = rc.coefficients;
  return l;
}

ModelConfig model_config(const RunConfig& rc, std::size_t in_dim, std::size_t num_classes) {
  std::vector<std::size_t> dims{in_dim};
  for (std::size_t k = 0; k < rc.layers; ++k) dims.push_back(k + 1 == rc.layers ? num_classes : rc.hidden);
  auto m = ModelConfig::stack(layer_proto(rc), dims, rc.train.dropout_p);
  m.num_classes = num_classes;
  return m;
}

SynthSpec synth_spec(const RunConfig& rc) {
  SynthSpec s = rc.synth == "mag_shaped" ? SynthSpec::mag_shaped(rc.synth_nodes.value_or(2000))
                                          : SynthSpec::overfit_300();
  if (rc.synth == "overfit_300" && rc.synth_nodes) {
    throw ConfigError("config: synth.nodes applies to mag_shaped only");
  }
  if (rc.synth_classes) s.num_classes = *rc.synth_classes;
  if (rc.synth_feature_dim) s.feature_dim = *rc.synth_feature_dim;
  if (rc.synth_class_signal) s.class_signal = *rc.synth_class_signal;
  s.seed = rc.synth_seed;
  return s;
}

HeteroGraph load_dataset(const RunConfig& rc) {
  HeteroGraph g = rc.dataset.empty() ? generate_synthetic(synth_spec(rc)) : load_graph(rc.dataset);
  return rc.reverse ? add_reverse_relations(g) : g;
}

std::size_t input_dim(const HeteroGraph& graph) {
  for (const auto& f : graph.features)
    if (f) return f->cols;
  throw std::invalid_argument("graph has no node features");
}

// --- ablation ---------------------------------------------------------------------

const std::vector<AblationRow>& ablation_rows() {
  static const std::vector<AblationRow> rows{
      {"R-GCN", false, false, false, false, false},
      {"R-GCN(1+)", false, false, true, false, false},
      {"R-GCN(2+)", false, false, true, true, false},
      {"R-GCN(3+)", false, false, true, true, true},
      {"R-GSN(1+)", true, true, true, false, false},
      {"R-GSN(2+)", true, true, true, true, false},
      {"R-GSN(3+)", true, true, true, true, true},
  };
  return rows;
}

RunConfig with_knobs(RunConfig rc, const AblationRow& row) {
  rc.intra = row.sim_attn ? IntraAggregation::kSimAttn : IntraAggregation::kMean;
  rc.inter = row.sim ? InterAggregation::kSim : InterAggregation::kSum;
  rc.norm = row.norm;
  rc.train.ft_enabled = row.ft;
  rc.flag_enabled = row.flag;
  return rc;
}

json ablation_report(std::span<const RunRecord> runs) {
  json report = build_report(runs);
  std::map<std::string, double> valid;
  for (const auto& r : report["rows"]) valid[r["config"]] = r["valid"]["mean"];
  const std::vector<std::pair<std::string, std::vector<std::string>>> ladders{
      {"R-GCN", {"R-GCN", "R-GCN(1+)", "R-GCN(2+)", "R-GCN(3+)"}},
      {"R-GSN", {"R-GSN(1+)", "R-GSN(2+)", "R-GSN(3+)"}},
  };
  json out_ladders = json::array(), violations = json::array();
  for (const auto& [name, rungs] : ladders) {
    std::vector<std::string> present;
    for (const auto& r : rungs)
      if (valid.count(r)) present.push_back(r);
    bool monotone = true;
    for (std::size_t i = 1; i < present.size(); ++i) {
      const double prev = valid[present[i - 1]], cur = valid[present[i]];
      if (cur < prev) {
        monotone = false;
        violations.push_back({{"ladder", name},
                              {"rung", present[i]},
                              {"previous", present[i - 1]},
                              {"valid_mean", cur},
                              {"previous_valid_mean", prev},
                              {"delta", cur - prev}});
      }
    }
    out_ladders.push_back({{"ladder", name}, {"rungs", present}, {"monotone", monotone}});
  }
  report["ladders"] = out_ladders;
  report["violations"] = violations;
  return report;
}

// --- commands ---------------------------------------------------------------------

int cmd_train(const RunConfig& rc, const fs::path& out, std::ostream& log) {
  const auto graph = load_dataset(rc);
  const auto model = model_config(rc, input_dim(graph), graph.num_classes);
  const auto tc = train_config(rc);
  const auto params = count_for(rc, graph);
  log << "training " << model.layers.size() << "-layer model, " << with_commas(params.total())
      << " parameters, seed " << tc.seed << "\n";

  const auto start = std::chrono::steady_clock::now();
  json timing = json::array();
  auto last = start;
  auto result = fit(graph, model, tc, [&](const TrainState&, const EpochRecord& r) {
    const auto now = std::chrono::steady_clock::now();
    timing.push_back({{"epoch", r.epoch},
                      {"wall_ms", std::chrono::duration_cast<std::chrono::milliseconds>(now - last).count()}});
    last = now;
    log_epoch(log, "", r);
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  fs::create_directories(out);
  write_text_file(out / "config.cfg", dump_config(rc));
  write_history(result.history, out / "history.jsonl");
  checkpoint_save(result.state, out / "last.ckpt");
  const auto best = best_state(result.state);
  checkpoint_save(best, out / "best.ckpt");

  const std::vector<RunRecord> runs{{"train", tc.seed, params.total(), result.history}};
  json report = build_report(runs);
  report["params"] = counts_json(params);
  report["best"] = {{"epoch", result.state.best_epoch},
                    {"train_acc", evaluate(best, graph, Split::kTrain)},
                    {"valid_acc", evaluate(best, graph, Split::kValid)},
                    {"test_acc", evaluate(best, graph, Split::kTest)}};
  write_text_file(out / "report.json", report.dump(2) + "\n");
  write_text_file(out / "timing.json", json{{"total_s", seconds}, {"epochs", timing}}.dump(2) + "\n");
  log << "best epoch " << result.state.best_epoch << "  valid " << pct(report["best"]["valid_acc"])
      << "  test " << pct(report["best"]["test_acc"]) << "  (" << std::fixed << std::setprecision(1)
      << seconds << " s)\n"
      << std::defaultfloat;
  return 0;
}

int cmd_eval(const RunConfig& rc, const fs::path& checkpoint, std::ostream& out) {
  const auto graph = load_dataset(rc);
  const auto state = checkpoint_load(checkpoint);
  if (!(state.schema == graph.schema)) {
    throw std::invalid_argument("checkpoint schema does not match the dataset");
  }
  json r = {{"checkpoint", checkpoint.string()}, {"epoch", state.epoch}};
  for (auto [name, split] : {std::pair{"train", Split::kTrain}, {"valid", Split::kValid}, {"test", Split::kTest}})
    r[std::string(name) + "_acc"] = evaluate(state, graph, split);
  out << r.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const RunConfig& rc, const fs::path& out, std::ostream& log, bool report_only) {
  const auto graph = load_dataset(rc);
  std::vector<RunRecord> runs;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& row : ablation_rows()) {
    const RunConfig knobs = with_knobs(rc, row);
    const auto params = count_for(knobs, graph).total();
    for (auto seed : rc.seeds) {
      const fs::path dir = out / "runs" / slug(row.name) / ("seed" + std::to_string(seed));
      RunRecord rec{row.name, seed, params, {}};
      if (report_only) {
        rec.history = read_history(dir / "history.jsonl");
      } else {
        RunConfig run = knobs;
        run.train.seed = seed;
        auto tc = train_config(run);
        auto model = model_config(run, input_dim(graph), graph.num_classes);
        rec.history = fit(graph, model, tc).history;
        fs::create_directories(dir);
        write_history(rec.history, dir / "history.jsonl");
        const auto b = best_epoch(rec.history);
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log << row.name << " seed " << seed << ": best epoch " << b.epoch << "  valid "
            << pct(b.valid_acc) << "  test " << pct(b.test_acc) << "  [" << std::fixed
            << std::setprecision(0) << elapsed << " s]\n"
            << std::defaultfloat;
      }
      runs.push_back(std::move(rec));
    }
  }

  json report = ablation_report(runs);
  for (std::size_t i = 0; i < report["rows"].size(); ++i) {
    const auto& row = ablation_rows()[i];
    report["rows"][i]["knobs"] = {{"sim_attn", row.sim_attn}, {"sim", row.sim}, {"norm", row.norm},
                                  {"ft", row.ft},             {"flag", row.flag}};
  }
  fs::create_directories(out);
  if (!report_only) write_text_file(out / "config.cfg", dump_config(rc));
  write_text_file(out / "report.json", report.dump(2) + "\n");
  std::string csv = "config,seed,best_epoch,valid_acc,test_acc\n";
  for (const auto& r : runs) {
    const auto b = best_epoch(r.history);
    csv += r.config + "," + std::to_string(r.seed) + "," + std::to_string(b.epoch) + "," +
           num(b.valid_acc) + "," + num(b.test_acc) + "\n";
  }
  write_text_file(out / "per_seed.csv", csv);

  log << "\n" << std::left << std::setw(12) << "method" << " SIM-ATTN SIM Norm FT FLAG "
      << std::right << std::setw(10) << "params" << "  valid          test\n";
  auto mark = [](bool b) { return b ? "x" : "-"; };
  for (std::size_t i = 0; i < report["rows"].size(); ++i) {
    const auto& row = ablation_rows()[i];
    const auto& r = report["rows"][i];
    log << std::left << std::setw(12) << row.name << " " << std::setw(8) << mark(row.sim_attn) << " "
        << std::setw(3) << mark(row.sim) << " " << std::setw(4) << mark(row.norm) << " "
        << std::setw(2) << mark(row.ft) << " " << std::setw(4) << mark(row.flag) << " " << std::right
        << std::setw(10) << r["params"].get<std::uint64_t>() << "  " << pct(r["valid"]["mean"])
        << " +- " << pct(r["valid"]["std"]) << "  " << pct(r["test"]["mean"]) << " +- "
        << pct(r["test"]["std"]) << "\n";
  }
  for (const auto& v : report["violations"]) {
    log << "ladder " << v["ladder"].get<std::string>() << ": " << v["rung"].get<std::string>()
        << " is below " << v["previous"].get<std::string>() << " by "
        << pct(-v["delta"].get<double>()) << " points (mean valid)\n";
  }
  if (report["violations"].empty()) log << "both ladders are monotone in mean validation accuracy\n";
  return 0;
}

int cmd_params(const RunConfig& rc, bool mag_dims, std::ostream& out) {
  HeteroGraph shape;
  std::size_t in_dim, classes;
  if (mag_dims) {
    // Schema only; node counts are used as numbers, nothing is allocated per node.
    auto g = HeteroGraph::with_schema(mag_schema(), {1, 1, 1, 1});
    shape = rc.reverse ? add_reverse_relations(g) : g;
    shape.node_counts = mag_node_counts();
    shape.features[0] = FeatureMatrix{0, kMagInputDim, {}};
    in_dim = kMagInputDim;
    classes = kMagClasses;
  } else {
    shape = load_dataset(rc);
    in_dim = input_dim(shape);
    classes = shape.num_classes;
  }
  RunConfig sized = rc;
  if (mag_dims && rc.hidden == RunConfig{}.hidden) sized.hidden = kMagHiddenDim;
  const auto flags = feature_flags(shape);
  auto count = [&](const RunConfig& c) {
    return param_count(model_config(c, in_dim, classes), shape.schema, shape.node_counts,
                       flags.span(), in_dim);
  };
  const auto c = count(sized);
  out << (mag_dims ? "ogbn-mag dimensions" : "dataset") << ": " << shape.schema.node_types.size()
      << " node types, " << shape.schema.relations.size() << " relations, input " << in_dim
      << ", hidden " << sized.hidden << ", classes " << classes << "\n";
  const std::vector<std::pair<std::string, std::uint64_t>> groups{
      {"w_rel", c.w_rel},   {"w_node", c.w_node},   {"attn", c.attn},
      {"ln_in", c.ln_in},   {"ln_out", c.ln_out},   {"msgnorm", c.msgnorm},
      {"embeddings", c.embeddings}};
  for (const auto& [name, v] : groups)
    out << "  " << std::left << std::setw(12) << name << std::right << std::setw(14) << with_commas(v) << "\n";
  out << "  " << std::left << std::setw(12) << "total" << std::right << std::setw(14)
      << with_commas(c.total()) << "\n\nablation rows:\n";
  for (const auto& row : ablation_rows()) {
    out << "  " << std::left << std::setw(12) << row.name << std::right << std::setw(14)
        << with_commas(count(with_knobs(sized, row)).total()) << "\n";
  }
  return 0;
}

int cmd_gen_synth(const RunConfig& rc, const fs::path& out, std::ostream& log) {
  const auto spec = synth_spec(rc);
  const auto g = generate_synthetic(spec);
  save_graph(g, out);
  log << "wrote " << g.total_nodes() << " nodes over " << g.schema.node_types.size() << " types to "
      << out.string() << "\n";
  return 0;
}

int cmd_check_grad(const RunConfig& rc, bool corrupt_backward, std::ostream& out) {
  const auto proto = layer_proto(rc);
  testing::set_corrupt_backward(corrupt_backward);
  GradCheckReport report;
  try {
    report = check_grad(proto);
  } catch (...) {
    testing::set_corrupt_backward(false);
    throw;
  }
  testing::set_corrupt_backward(false);
  out << "finite-difference check, 2-layer model on the built-in 12-node graph (tolerance "
      << report.tolerance << ")\n";
  for (const auto& g : report.groups) {
    out << "  " << std::left << std::setw(10) << g.group << std::right << std::setw(6) << g.entries
        << " entries  worst rel. error " << std::scientific << std::setprecision(2)
        << g.worst_rel_error << std::defaultfloat << "  " << (g.passed ? "PASS" : "FAIL") << "\n";
  }
  out << (report.passed() ? "PASS" : "FAIL") << "\n";
  return report.passed() ? 0 : 1;
}

// --- entry point --------------------------------------------------------------------

int run(int argc, char** argv) {
  CLI::App app{"Heterogeneous message-passing GNN toolkit (R-GCN / R-GSN)"};
  app.require_subcommand(1);

  struct Common {
    std::string config;
    std::vector<std::string> set;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::string> fanout, intra, inter;
    std::optional<std::size_t> flag_steps;
    std::optional<double> flag_alpha;
    bool no_norm = false, no_ft = false, no_flag = false;
  };
  auto common = std::make_shared<Common>();
  auto add_common = [&](CLI::App* sub, bool with_out) {
    sub->add_option("--config,-c", common->config, "key = value config file");
    sub->add_option("--set", common->set, "override, key=value (repeatable)");
    sub->add_option("--seed", common->seed, "run seed");
    if (with_out) sub->add_option("--out,-o", common->out, "output directory")->required();
    sub->add_option("--fanout", common->fanout, "per-layer fanouts, e.g. 10,10 or all");
    sub->add_option("--flag-steps", common->flag_steps, "FLAG ascent steps M");
    sub->add_option("--flag-alpha", common->flag_alpha, "FLAG step size alpha");
    sub->add_flag("--no-norm", common->no_norm, "disable the Norm knob");
    sub->add_flag("--no-ft", common->no_ft, "disable feature pre-propagation");
    sub->add_flag("--no-flag", common->no_flag, "disable FLAG");
    sub->add_option("--intra", common->intra, "mean | simattn")->check(CLI::IsMember({"mean", "simattn"}));
    sub->add_option("--inter", common->inter, "sum | sim")->check(CLI::IsMember({"sum", "sim"}));
  };

  auto* train = app.add_subcommand("train", "train one model and write history, checkpoints, report");
  add_common(train, true);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured dataset");
  add_common(eval, false);
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  auto* ablate = app.add_subcommand("ablate", "run the seven ablation rows over several seeds");
  add_common(ablate, true);
  std::string seeds;
  bool report_only = false;
  ablate->add_option("--seeds", seeds, "comma-separated seeds (default from config)");
  ablate->add_flag("--report-only", report_only, "rebuild the report from stored histories");
  auto* params = app.add_subcommand("params", "print parameter counts per group");
  add_common(params, false);
  bool mag_dims = false;
  params->add_flag("--mag-dims", mag_dims, "use ogbn-mag schema sizes (nothing is allocated)");
  auto* gen = app.add_subcommand("gen-synth", "write a synthetic graph directory");
  add_common(gen, true);
  auto* grad = app.add_subcommand("check-grad", "finite-difference gradient check");
  add_common(grad, false);
  bool corrupt = false;
  grad->add_flag("--corrupt-backward", corrupt, "negative control: perturb one backward rule");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& s : common->set) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      std::cerr << "error: --set expects key=value, got '" << s << "'\n";
      return 2;
    }
    overrides.emplace_back(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  if (common->seed) overrides.emplace_back("seed", std::to_string(*common->seed));
  if (common->fanout) overrides.emplace_back("fanout", *common->fanout);
  if (common->flag_steps) overrides.emplace_back("flag.steps", std::to_string(*common->flag_steps));
  if (common->flag_alpha) overrides.emplace_back("flag.alpha", num(*common->flag_alpha));
  if (common->no_norm) overrides.emplace_back("norm", "false");
  if (common->no_ft) overrides.emplace_back("ft", "false");
  if (common->no_flag) overrides.emplace_back("flag", "false");
  if (common->intra) overrides.emplace_back("intra", *common->intra);
  if (common->inter) overrides.emplace_back("inter", *common->inter);
  if (!seeds.empty()) overrides.emplace_back("seeds", seeds);

  RunConfig rc;
  try {
    rc = load_config(common->config, overrides);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  if (const char* det = std::getenv("HETMP_DETERMINISTIC"); det && std::string(det) == "1") {
    std::cerr << "deterministic mode (all reductions are sequential)\n";
  }

  try {
    if (*train) return cmd_train(rc, common->out, std::cerr);
    if (*eval) return cmd_eval(rc, checkpoint, std::cout);
    if (*ablate) return cmd_ablate(rc, common->out, std::cerr, report_only);
    if (*params) return cmd_params(rc, mag_dims, std::cout);
    if (*gen) return cmd_gen_synth(rc, common->out, std::cerr);
    if (*grad) return cmd_check_grad(rc, corrupt, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace hetmp::cli
