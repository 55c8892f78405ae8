#pragma once

#include <json.hpp>

#include "hetmp/engine.hpp"
#include "hetmp/graph.hpp"

// JSON forms of schemas and model configurations (nlohmann ADL hooks).
namespace hetmp {

NLOHMANN_JSON_SERIALIZE_ENUM(IntraAggregation, {{IntraAggregation::kMean, "mean"},
                                                {IntraAggregation::kSimAttn, "sim-attn"}})
NLOHMANN_JSON_SERIALIZE_ENUM(InterAggregation, {{InterAggregation::kSum, "sum"},
                                                {InterAggregation::kSim, "sim"}})
NLOHMANN_JSON_SERIALIZE_ENUM(UpdateRule, {{UpdateRule::kRgcn, "rgcn"}, {UpdateRule::kRgsn, "rgsn"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::kRelu, "relu"},
                                          {Activation::kIdentity, "identity"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NodeWeights, {{NodeWeights::kShared, "shared"},
                                           {NodeWeights::kPerType, "per-type"}})
NLOHMANN_JSON_SERIALIZE_ENUM(CoefficientMode, {{CoefficientMode::kSumNormalize, "sum"},
                                               {CoefficientMode::kSoftmax, "softmax"}})

inline void to_json(nlohmann::json& j, const Relation& r) {
  j = nlohmann::json::array({r.src_type, r.name, r.dst_type});
}
inline void from_json(const nlohmann::json& j, Relation& r) {
  if (!j.is_array() || j.size() != 3) throw SchemaError("relation must be [src, name, dst]");
  r = {j[0].get<std::string>(), j[1].get<std::string>(), j[2].get<std::string>()};
}

inline void to_json(nlohmann::json& j, const HeteroSchema& s) {
  j = {{"node_types", s.node_types}, {"relations", s.relations}};
}
inline void from_json(const nlohmann::json& j, HeteroSchema& s) {
  j.at("node_types").get_to(s.node_types);
  j.at("relations").get_to(s.relations);
}

inline void to_json(nlohmann::json& j, const LayerConfig& l) {
  j = {{"intra", l.intra},       {"inter", l.inter},
       {"update", l.update},     {"norm", l.norm_enabled},
       {"activation", l.activation}, {"node_weights", l.node_weights},
       {"coefficients", l.coefficients}, {"in_dim", l.in_dim},
       {"out_dim", l.out_dim}};
}
inline void from_json(const nlohmann::json& j, LayerConfig& l) {
  j.at("intra").get_to(l.intra);
  j.at("inter").get_to(l.inter);
  j.at("update").get_to(l.update);
  j.at("norm").get_to(l.norm_enabled);
  j.at("activation").get_to(l.activation);
  j.at("node_weights").get_to(l.node_weights);
  j.at("coefficients").get_to(l.coefficients);
  j.at("in_dim").get_to(l.in_dim);
  j.at("out_dim").get_to(l.out_dim);
}

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = {{"layers", m.layers}, {"dropout", m.dropout_p}, {"num_classes", m.num_classes}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  j.at("layers").get_to(m.layers);
  j.at("dropout").get_to(m.dropout_p);
  j.at("num_classes").get_to(m.num_classes);
}

}  // namespace hetmp
