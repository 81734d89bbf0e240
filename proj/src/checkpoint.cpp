#include "cakes/checkpoint.hpp"

namespace cakes {

namespace {

constexpr const char* kFinalFormat = "cakes-final-v1";
constexpr const char* kSupernetFormat = "cakes-supernet-v1";

std::vector<double> number_array(const Json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where, "expected an array of numbers");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = config::get_double(v[i], where);
  return out;
}

}  // namespace

Json network_state_to_json(Network& net) {
  Json params = Json::object(), stats = Json::object();
  for (const auto& p : net.parameters()) {
    Json e;
    e["shape"] = p.tensor.shape();
    e["values"] = std::vector<double>(p.tensor.values().begin(), p.tensor.values().end());
    params[p.name] = e;
  }
  for (const auto& s : net.norm_stats()) {
    Json e;
    e["mean"] = s.stats->running_mean;
    e["var"] = s.stats->running_var;
    stats[s.name] = e;
  }
  Json j;
  j["params"] = params;
  j["stats"] = stats;
  return j;
}

void load_network_state(Network& net, const Json& state) {
  config::reject_unknown(state, "state", {"params", "stats"});
  const Json& params = config::require(state, "state", "params");
  const Json& stats = config::require(state, "state", "stats");
  auto ps = net.parameters();
  auto ss = net.norm_stats();
  if (params.size() != ps.size()) throw ConfigError("state.params", "parameter count differs from the network");
  if (stats.size() != ss.size()) throw ConfigError("state.stats", "statistics count differs from the network");
  for (auto& p : ps) {
    const std::string where = "state.params." + p.name;
    if (!params.contains(p.name)) throw ConfigError(where, "missing");
    const Json& e = params[p.name];
    config::reject_unknown(e, where, {"shape", "values"});
    if (e["shape"].get<Shape>() != p.tensor.shape()) throw ConfigError(where, "shape mismatch");
    auto values = number_array(config::require(e, where, "values"), where + ".values");
    if (values.size() != p.tensor.size()) throw ConfigError(where, "value count mismatch");
    std::copy(values.begin(), values.end(), p.tensor.mutable_values().begin());
  }
  for (auto& s : ss) {
    const std::string where = "state.stats." + s.name;
    if (!stats.contains(s.name)) throw ConfigError(where, "missing");
    const Json& e = stats[s.name];
    config::reject_unknown(e, where, {"mean", "var"});
    auto mean = number_array(config::require(e, where, "mean"), where + ".mean");
    auto var = number_array(config::require(e, where, "var"), where + ".var");
    if (mean.size() != s.stats->running_mean.size() || var.size() != s.stats->running_var.size())
      throw ConfigError(where, "channel count mismatch");
    s.stats->running_mean = mean;
    s.stats->running_var = var;
  }
}

Json final_checkpoint_to_json(const BackboneSpec& spec, const ReplacementConfig& cfg, Network& net) {
  Json j;
  j["format"] = kFinalFormat;
  j["backbone"] = backbone_to_json(spec);
  j["config"] = replacement_to_json(cfg);
  j["state"] = network_state_to_json(net);
  return j;
}

FinalCheckpoint final_checkpoint_from_json(const Json& doc) {
  config::reject_unknown(doc, "", {"format", "backbone", "config", "state"});
  if (config::get_string(config::require(doc, "", "format"), "format") != kFinalFormat)
    throw ConfigError("format", std::string("expected ") + kFinalFormat);
  FinalCheckpoint c;
  c.backbone = backbone_from_json(config::require(doc, "", "backbone"));
  c.config = replacement_from_json(config::require(doc, "", "config"));
  c.config.validate(c.backbone);
  c.state = config::require(doc, "", "state");
  return c;
}

Network restore_final_network(const FinalCheckpoint& ckpt) {
  Network net = build_final_network(ckpt.backbone, ckpt.config, 0);
  load_network_state(net, ckpt.state);
  return net;
}

Json supernet_checkpoint_to_json(SuperNet& net) {
  Json j;
  j["format"] = kSupernetFormat;
  j["mode"] = std::string(to_string(net.mode()));
  j["candidates"] = net.candidates().names();
  j["backbone"] = backbone_to_json(net.spec());
  j["state"] = network_state_to_json(net.network());
  return j;
}

}  // namespace cakes
