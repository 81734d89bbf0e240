#include "cakes/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

namespace cakes {

// ------------------------------------------------------------------ config

void SearchConfig::validate(const SubKernelSet& set) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda", "must be finite and non-negative");
  if (beta) {
    if (mode != SearchMode::CostPriority) throw ConfigError("beta", "only meaningful for cost priority");
    if (beta->size() != set.size())
      throw ConfigError("beta", "expected " + std::to_string(set.size()) + " weights, one per candidate");
    for (double b : *beta)
      if (!(b >= 0.0) || !std::isfinite(b)) throw ConfigError("beta", "weights must be finite and non-negative");
  }
  if (train.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (!(train.optimizer.learning_rate > 0.0)) throw ConfigError("optimizer.learning_rate", "must be positive");
}

std::vector<double> SearchConfig::resolved_beta(const SubKernelSet& set) const {
  return beta ? *beta : cost_beta(set);
}

Json sgd_to_json(const SgdSettings& s) {
  Json j;
  j["learning_rate"] = s.learning_rate;
  j["momentum"] = s.momentum;
  j["weight_decay"] = s.weight_decay;
  j["power"] = s.power;
  return j;
}

SgdSettings sgd_from_json(const Json& doc, const std::string& where) {
  config::reject_unknown(doc, where, {"learning_rate", "momentum", "weight_decay", "power"});
  SgdSettings s;
  if (doc.contains("learning_rate")) s.learning_rate = config::get_double(doc["learning_rate"], where + ".learning_rate");
  if (doc.contains("momentum")) s.momentum = config::get_double(doc["momentum"], where + ".momentum");
  if (doc.contains("weight_decay")) s.weight_decay = config::get_double(doc["weight_decay"], where + ".weight_decay");
  if (doc.contains("power")) s.power = config::get_double(doc["power"], where + ".power");
  if (!(s.learning_rate > 0.0)) throw ConfigError(where + ".learning_rate", "must be positive");
  if (s.momentum < 0.0 || s.momentum >= 1.0) throw ConfigError(where + ".momentum", "must lie in [0, 1)");
  if (s.weight_decay < 0.0) throw ConfigError(where + ".weight_decay", "must be non-negative");
  return s;
}

namespace {

std::uint64_t get_seed(const Json& v, const std::string& where) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
    throw ConfigError(where, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

}  // namespace

Json search_config_to_json(const SearchConfig& c) {
  Json j;
  j["mode"] = std::string(to_string(c.mode));
  j["lambda"] = c.lambda;
  if (c.beta) j["beta"] = *c.beta;
  j["iterations"] = c.train.iterations;
  j["batch_size"] = c.train.batch_size;
  j["optimizer"] = sgd_to_json(c.train.optimizer);
  j["seed"] = c.train.seed;
  j["augment"] = c.train.augment;
  return j;
}

SearchConfig search_config_from_json(const Json& doc) {
  using namespace config;
  reject_unknown(doc, "", {"mode", "lambda", "beta", "iterations", "batch_size", "optimizer", "seed", "augment"});
  SearchConfig c;
  c.mode = search_mode_from_string(get_string(require(doc, "", "mode"), "mode"));
  if (doc.contains("lambda")) c.lambda = get_double(doc["lambda"], "lambda");
  if (doc.contains("beta")) {
    if (!doc["beta"].is_array()) throw ConfigError("beta", "expected an array of numbers");
    std::vector<double> b;
    for (std::size_t i = 0; i < doc["beta"].size(); ++i)
      b.push_back(get_double(doc["beta"][i], "beta[" + std::to_string(i) + "]"));
    c.beta = b;
    if (c.mode != SearchMode::CostPriority) throw ConfigError("beta", "only meaningful for cost priority");
  }
  if (doc.contains("iterations")) c.train.iterations = get_size(doc["iterations"], "iterations");
  if (doc.contains("batch_size")) c.train.batch_size = get_size(doc["batch_size"], "batch_size");
  if (doc.contains("optimizer")) c.train.optimizer = sgd_from_json(doc["optimizer"], "optimizer");
  if (doc.contains("seed")) c.train.seed = get_seed(doc["seed"], "seed");
  if (doc.contains("augment")) c.train.augment = get_bool(doc["augment"], "augment");
  if (!(c.lambda >= 0.0)) throw ConfigError("lambda", "must be non-negative");
  if (c.train.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  return c;
}

Json final_train_config_to_json(const FinalTrainConfig& c) {
  Json j;
  j["iterations"] = c.train.iterations;
  j["batch_size"] = c.train.batch_size;
  j["optimizer"] = sgd_to_json(c.train.optimizer);
  j["seed"] = c.train.seed;
  j["augment"] = c.train.augment;
  Json inf;
  inf["sliding_window"] = c.inference.sliding_window;
  inf["patch"] = config::triple_to_json(c.inference.patch);
  inf["stride"] = config::triple_to_json(c.inference.stride);
  j["inference"] = inf;
  return j;
}

FinalTrainConfig final_train_config_from_json(const Json& doc) {
  using namespace config;
  reject_unknown(doc, "", {"iterations", "batch_size", "optimizer", "seed", "augment", "inference"});
  FinalTrainConfig c;
  if (doc.contains("iterations")) c.train.iterations = get_size(doc["iterations"], "iterations");
  if (doc.contains("batch_size")) c.train.batch_size = get_size(doc["batch_size"], "batch_size");
  if (doc.contains("optimizer")) c.train.optimizer = sgd_from_json(doc["optimizer"], "optimizer");
  if (doc.contains("seed")) c.train.seed = get_seed(doc["seed"], "seed");
  if (doc.contains("augment")) c.train.augment = get_bool(doc["augment"], "augment");
  if (doc.contains("inference")) {
    const Json& inf = doc["inference"];
    reject_unknown(inf, "inference", {"sliding_window", "patch", "stride"});
    if (inf.contains("sliding_window")) c.inference.sliding_window = get_bool(inf["sliding_window"], "inference.sliding_window");
    if (inf.contains("patch")) c.inference.patch = get_triple(inf["patch"], "inference.patch");
    if (inf.contains("stride")) c.inference.stride = get_triple(inf["stride"], "inference.stride");
  }
  if (c.train.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  return c;
}

// ------------------------------------------------------------------ penalty

Tensor penalty_loss(const std::vector<Tensor>& alphas, std::span<const double> weights, double lambda) {
  if (alphas.size() != weights.size()) throw ShapeError("penalty_loss: one weight per tensor required");
  Tensor total = Tensor::scalar(0.0);
  if (lambda == 0.0) return total;
  for (std::size_t t = 0; t < alphas.size(); ++t) {
    const std::vector<double> w(alphas[t].size(), weights[t]);
    total = add(total, weighted_abs_sum(alphas[t], w));
  }
  return scale(total, lambda);
}

Tensor penalty_loss(const SuperNet& net, std::span<const double> beta, double lambda) {
  const std::size_t n = net.candidates().size();
  if (beta.size() != n) throw ShapeError("penalty_loss: beta needs one weight per candidate");
  auto alphas = net.path_weight_tensors();
  std::vector<double> weights(alphas.size());
  for (std::size_t t = 0; t < alphas.size(); ++t) weights[t] = beta[t % n];
  return penalty_loss(alphas, weights, lambda);
}

// ------------------------------------------------------------------ search

namespace {

std::vector<Tensor> tensors_of(Network& net) {
  std::vector<Tensor> out;
  for (auto& p : net.parameters()) out.push_back(p.tensor);
  return out;
}

}  // namespace

SearchResult run_performance_priority(SuperNet& net, const Dataset& data, const SearchConfig& cfg) {
  if (net.mode() != SearchMode::PerformancePriority)
    throw std::logic_error("performance-priority search needs a performance-mode supernet");
  cfg.validate(net.candidates());
  auto forward = [&](const Tensor& x, std::size_t it) {
    const PathSample sample = net.sample_path(derive_seed(cfg.train.seed, 0x5a17 + it));
    return net.forward_single_path(x, sample);
  };
  SearchResult r;
  r.log = run_training(tensors_of(net.network()), forward, {}, data, cfg.train);
  r.alpha = net.read_path_weights();
  return r;
}

SearchResult run_cost_priority(SuperNet& net, const Dataset& data, const SearchConfig& cfg) {
  if (net.mode() != SearchMode::CostPriority) throw std::logic_error("cost-priority search needs a cost-mode supernet");
  cfg.validate(net.candidates());
  const std::vector<double> beta = cfg.resolved_beta(net.candidates());
  auto forward = [&](const Tensor& x, std::size_t) { return net.forward_all_paths(x); };
  PenaltyFn penalty = [&] { return penalty_loss(net, beta, cfg.lambda); };
  SearchResult r;
  r.log = run_training(tensors_of(net.network()), forward, penalty, data, cfg.train);
  r.alpha = net.read_path_weights();
  return r;
}

SearchResult run_search(SuperNet& net, const Dataset& data, const SearchConfig& cfg) {
  if (cfg.mode != net.mode()) throw ConfigError("mode", "search mode differs from the supernet's mode");
  return cfg.mode == SearchMode::CostPriority ? run_cost_priority(net, data, cfg)
                                              : run_performance_priority(net, data, cfg);
}

// ------------------------------------------------------------------ configurations

const LayerChoice& ReplacementConfig::at(const std::string& layer) const {
  for (const auto& l : layers)
    if (l.layer == layer) return l;
  throw ConfigError(layer, "layer missing from replacement config");
}

void ReplacementConfig::validate(const BackboneSpec& spec) const {
  const auto repl = spec.replaceable();
  if (layers.size() != repl.size())
    throw ConfigError("config", "expected " + std::to_string(repl.size()) + " replaceable layers, got " +
                                    std::to_string(layers.size()));
  for (std::size_t i = 0; i < repl.size(); ++i) {
    const ConvSpec& c = *repl[i];
    const LayerChoice& l = layers[i];
    if (l.layer != c.name) throw ConfigError(l.layer, "expected replaceable layer '" + c.name + "' at this position");
    if (l.p3d) {
      if (!l.shapes.empty()) throw ConfigError(l.layer, "p3d layers carry no per-channel shapes");
      continue;
    }
    if (l.shapes.size() != c.out_channels)
      throw ConfigError(l.layer, "expected " + std::to_string(c.out_channels) + " channel shapes, got " +
                                     std::to_string(l.shapes.size()));
    for (const auto& s : l.shapes)
      if (!s.fits_within(c.kernel)) throw ConfigError(l.layer, "shape " + s.str() + " exceeds " + c.kernel.str());
  }
}

Json replacement_to_json(const ReplacementConfig& c) {
  Json j = Json::object();
  for (const auto& l : c.layers) {
    if (l.p3d) {
      j[l.layer] = "p3d";
      continue;
    }
    Json arr = Json::array();
    for (const auto& s : l.shapes) arr.push_back(s.str());
    j[l.layer] = arr;
  }
  return j;
}

ReplacementConfig replacement_from_json(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("config", "expected an object mapping layer names to shapes");
  ReplacementConfig c;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    LayerChoice l;
    l.layer = it.key();
    if (it->is_string()) {
      if (it->get<std::string>() != "p3d") throw ConfigError(l.layer, "expected a shape list or \"p3d\"");
      l.p3d = true;
    } else if (it->is_array()) {
      for (std::size_t i = 0; i < it->size(); ++i) {
        const std::string where = l.layer + "[" + std::to_string(i) + "]";
        try {
          l.shapes.push_back(KernelShape::parse(config::get_string((*it)[i], where)));
        } catch (const ShapeError& e) {
          throw ConfigError(where, e.what());
        }
      }
    } else {
      throw ConfigError(l.layer, "expected a shape list or \"p3d\"");
    }
    c.layers.push_back(std::move(l));
  }
  return c;
}

std::size_t select_candidate(std::span<const double> alpha, const SubKernelSet& set) {
  if (alpha.size() != set.size()) throw ShapeError("select_candidate: one value per candidate required");
  std::size_t best = 0;
  for (std::size_t i = 1; i < alpha.size(); ++i) {
    const double a = std::abs(alpha[i]), b = std::abs(alpha[best]);
    if (a > b || (a == b && set[i].volume() < set[best].volume())) best = i;
  }
  return best;
}

ReplacementConfig finalize(const AlphaSnapshot& alpha, const SubKernelSet& set) {
  if (alpha.candidates != set.names()) throw ConfigError("candidates", "alpha candidates differ from the set");
  ReplacementConfig c;
  for (std::size_t l = 0; l < alpha.layers.size(); ++l) {
    LayerChoice choice;
    choice.layer = alpha.layers[l];
    for (const auto& channel : alpha.values[l]) choice.shapes.push_back(set[select_candidate(channel, set)]);
    c.layers.push_back(std::move(choice));
  }
  return c;
}

std::string_view to_string(ManualScheme s) {
  switch (s) {
    case ManualScheme::Uniform: return "uniform";
    case ManualScheme::Pure2D: return "pure2d";
    case ManualScheme::Pure1D: return "pure1d";
    case ManualScheme::Temporal1D: return "temporal1d";
    case ManualScheme::Full3D: return "full3d";
    case ManualScheme::P3D: return "p3d";
  }
  return "?";
}

ManualScheme manual_scheme_from_string(std::string_view s) {
  for (ManualScheme m : {ManualScheme::Uniform, ManualScheme::Pure2D, ManualScheme::Pure1D, ManualScheme::Temporal1D,
                         ManualScheme::Full3D, ManualScheme::P3D})
    if (to_string(m) == s) return m;
  throw ConfigError("scheme", "unknown scheme '" + std::string(s) + "'");
}

ReplacementConfig manual_config(const BackboneSpec& spec, const SubKernelSet& set, ManualScheme scheme) {
  ReplacementConfig c;
  for (const ConvSpec* conv : spec.replaceable()) {
    const KernelShape& k = conv->kernel;
    LayerChoice l;
    l.layer = conv->name;
    std::vector<KernelShape> cycle;
    switch (scheme) {
      case ManualScheme::Uniform: cycle = set.candidates(); break;
      case ManualScheme::Pure2D: cycle = {KernelShape(1, k.h, k.w)}; break;
      case ManualScheme::Temporal1D: cycle = {KernelShape(k.d, 1, 1)}; break;
      case ManualScheme::Full3D: cycle = {k}; break;
      case ManualScheme::Pure1D:
        cycle = {KernelShape(1, 1, k.w), KernelShape(1, k.h, 1), KernelShape(k.d, 1, 1)};
        break;
      case ManualScheme::P3D: l.p3d = true; break;
    }
    for (const auto& s : cycle)
      if (!set.contains(s))
        throw ConfigError("scheme", std::string(to_string(scheme)) + " needs " + s.str() + ", which is not a candidate");
    for (std::size_t ch = 0; !l.p3d && ch < conv->out_channels; ++ch) l.shapes.push_back(cycle[ch % cycle.size()]);
    c.layers.push_back(std::move(l));
  }
  return c;
}

Network build_final_network(const BackboneSpec& spec, const ReplacementConfig& cfg, std::uint64_t seed) {
  spec.validate();
  cfg.validate(spec);
  auto factory = [&](const ConvSpec& conv, std::size_t index, Rng& rng) -> std::unique_ptr<Module> {
    const LayerChoice& l = cfg.layers.at(index);
    if (l.p3d) return std::make_unique<P3DConv>(conv, rng);
    return std::make_unique<GroupedConv>(conv, l.shapes, rng);
  };
  return Network(spec, seed, factory);
}

// ------------------------------------------------------------------ accounting

CostReport cost_report(const BackboneSpec& spec, const ReplacementConfig& cfg, const CostModel& model) {
  spec.validate();
  cfg.validate(spec);
  CostReport r;
  const auto geometry = spec.geometry();
  auto bias_terms = [](const ConvSpec& c, std::int64_t voxels) {
    return c.has_bias() ? std::pair<std::int64_t, std::int64_t>{static_cast<std::int64_t>(c.out_channels),
                                                               static_cast<std::int64_t>(c.out_channels) * voxels}
                        : std::pair<std::int64_t, std::int64_t>{0, 0};
  };
  for (const ConvGeometry& g : geometry) {
    const ConvSpec& c = *g.conv;
    const auto Ci = static_cast<std::int64_t>(c.in_channels), Co = static_cast<std::int64_t>(c.out_channels);
    const auto voxels = static_cast<std::int64_t>(g.output_voxels());
    LayerCost lc;
    lc.name = c.name;
    lc.replaceable = c.replaceable;
    lc.channels = c.out_channels;
    std::vector<KernelShape> shapes(c.out_channels, c.kernel);
    if (c.replaceable) {
      const LayerChoice& choice = cfg.at(c.name);
      lc.p3d = choice.p3d;
      if (!choice.p3d) shapes = choice.shapes;
    }
    if (lc.p3d) {
      const KernelShape spatial(1, c.kernel.h, c.kernel.w), temporal(c.kernel.d, 1, 1);
      const auto mid_voxels = static_cast<std::int64_t>(g.input_dims.d * g.output_dims.h * g.output_dims.w);
      lc.params = param_count(spatial, Ci, Co) + param_count(temporal, Co, Co);
      lc.flops = flop_count(spatial, Ci, Co, mid_voxels, model) + flop_count(temporal, Co, Co, voxels, model);
      lc.shape_counts = {{spatial.str(), c.out_channels}, {temporal.str(), c.out_channels}};
      r.class_counts[static_cast<int>(KernelClass::Conv2D)] += c.out_channels;
      r.class_counts[static_cast<int>(KernelClass::Conv1D)] += c.out_channels;
      for (int a = 0; a < 3; ++a) r.axis_counts[a] += c.out_channels;
      r.replaced_channels += 2 * c.out_channels;
    } else {
      std::map<std::string, std::size_t> index;
      for (const auto& s : shapes) {
        lc.params += param_count(s, Ci, 1);
        lc.flops += flop_count(s, Ci, 1, voxels, model);
        auto [it, fresh] = index.emplace(s.str(), lc.shape_counts.size());
        if (fresh) lc.shape_counts.push_back({s.str(), 0});
        ++lc.shape_counts[it->second].second;
        if (c.replaceable) {
          ++r.class_counts[static_cast<int>(s.kernel_class())];
          for (int a = 0; a < 3; ++a) r.axis_counts[a] += s.extent(a) > 1;
          ++r.replaced_channels;
        }
      }
      const auto [bp, bf] = bias_terms(c, voxels);
      lc.params += bp;
      lc.flops += bf;
    }
    if (c.replaceable) {
      r.replaceable_params += lc.params;
      r.replaceable_flops += lc.flops;
    }
    r.total_params += lc.params;
    r.total_flops += lc.flops;
    r.layers.push_back(std::move(lc));
  }
  for (const auto& layer : spec.layers) {
    if (layer.kind != LayerSpec::Kind::Linear) continue;
    const auto in = static_cast<std::int64_t>(layer.linear.in_features);
    const auto out = static_cast<std::int64_t>(layer.linear.out_features);
    LayerCost lc;
    lc.name = layer.linear.name;
    lc.channels = layer.linear.out_features;
    lc.params = in * out + out;
    lc.flops = model.flops_per_mac * in * out + out;
    r.total_params += lc.params;
    r.total_flops += lc.flops;
    r.layers.push_back(std::move(lc));
  }
  return r;
}

namespace {

constexpr const char* kClassKeys[] = {"pointwise", "1d", "2d", "3d"};
constexpr const char* kAxisKeys[] = {"d", "h", "w"};

}  // namespace

Json cost_report_to_json(const CostReport& r) {
  Json j;
  j["total_params"] = r.total_params;
  j["total_flops"] = r.total_flops;
  j["replaceable_params"] = r.replaceable_params;
  j["replaceable_flops"] = r.replaceable_flops;
  j["replaced_channels"] = r.replaced_channels;
  Json cls, ax;
  for (int k = 0; k < 4; ++k) cls[kClassKeys[k]] = r.class_counts[k];
  for (int a = 0; a < 3; ++a) ax[kAxisKeys[a]] = r.axis_counts[a];
  j["class_counts"] = cls;
  j["axis_counts"] = ax;
  Json layers = Json::array();
  for (const auto& l : r.layers) {
    Json e;
    e["name"] = l.name;
    e["replaceable"] = l.replaceable;
    e["p3d"] = l.p3d;
    e["channels"] = l.channels;
    e["params"] = l.params;
    e["flops"] = l.flops;
    Json counts = Json::object();
    for (const auto& [shape, n] : l.shape_counts) counts[shape] = n;
    e["shapes"] = counts;
    layers.push_back(e);
  }
  j["layers"] = layers;
  return j;
}

CostReport cost_report_from_json(const Json& doc) {
  using namespace config;
  reject_unknown(doc, "", {"total_params", "total_flops", "replaceable_params", "replaceable_flops",
                           "replaced_channels", "class_counts", "axis_counts", "layers"});
  auto get_i64 = [](const Json& v, const std::string& where) {
    if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
    return v.get<std::int64_t>();
  };
  CostReport r;
  r.total_params = get_i64(require(doc, "", "total_params"), "total_params");
  r.total_flops = get_i64(require(doc, "", "total_flops"), "total_flops");
  r.replaceable_params = get_i64(require(doc, "", "replaceable_params"), "replaceable_params");
  r.replaceable_flops = get_i64(require(doc, "", "replaceable_flops"), "replaceable_flops");
  r.replaced_channels = get_size(require(doc, "", "replaced_channels"), "replaced_channels");
  const Json& cls = require(doc, "", "class_counts");
  reject_unknown(cls, "class_counts", {"pointwise", "1d", "2d", "3d"});
  for (int k = 0; k < 4; ++k)
    r.class_counts[k] = get_size(require(cls, "class_counts", kClassKeys[k]), std::string("class_counts.") + kClassKeys[k]);
  const Json& ax = require(doc, "", "axis_counts");
  reject_unknown(ax, "axis_counts", {"d", "h", "w"});
  for (int a = 0; a < 3; ++a)
    r.axis_counts[a] = get_size(require(ax, "axis_counts", kAxisKeys[a]), std::string("axis_counts.") + kAxisKeys[a]);
  const Json& layers = require(doc, "", "layers");
  if (!layers.is_array()) throw ConfigError("layers", "expected an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layers[" + std::to_string(i) + "]";
    const Json& e = layers[i];
    reject_unknown(e, where, {"name", "replaceable", "p3d", "channels", "params", "flops", "shapes"});
    LayerCost l;
    l.name = get_string(require(e, where, "name"), where + ".name");
    l.replaceable = get_bool(require(e, where, "replaceable"), where + ".replaceable");
    l.p3d = get_bool(require(e, where, "p3d"), where + ".p3d");
    l.channels = get_size(require(e, where, "channels"), where + ".channels");
    l.params = get_i64(require(e, where, "params"), where + ".params");
    l.flops = get_i64(require(e, where, "flops"), where + ".flops");
    const Json& shapes = require(e, where, "shapes");
    if (!shapes.is_object()) throw ConfigError(where + ".shapes", "expected an object");
    for (auto it = shapes.begin(); it != shapes.end(); ++it)
      l.shape_counts.push_back({it.key(), get_size(*it, where + ".shapes." + it.key())});
    r.layers.push_back(std::move(l));
  }
  return r;
}

std::string cost_report_csv(const CostReport& r) {
  std::string out = "layer,replaceable,p3d,channels,params,flops,shapes\n";
  for (const auto& l : r.layers) {
    std::string shapes;
    for (const auto& [s, n] : l.shape_counts) shapes += (shapes.empty() ? "" : " ") + s + ":" + std::to_string(n);
    out += l.name + "," + (l.replaceable ? "1" : "0") + "," + (l.p3d ? "1" : "0") + "," + std::to_string(l.channels) +
           "," + std::to_string(l.params) + "," + std::to_string(l.flops) + "," + shapes + "\n";
  }
  out += "total,,,," + std::to_string(r.total_params) + "," + std::to_string(r.total_flops) + ",\n";
  return out;
}

}  // namespace cakes
