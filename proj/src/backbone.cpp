#include "cakes/backbone.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace cakes {

namespace config {

void reject_unknown(const Json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where, "expected an object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where.empty() ? key : where + "." + key, "unknown field");
  }
}

const Json& require(const Json& obj, const std::string& where, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ConfigError(where.empty() ? key : where + "." + key, "missing required field");
  return *it;
}

std::size_t get_size(const Json& v, const std::string& where) {
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(where, "expected a non-negative integer");
  return v.get<std::size_t>();
}

double get_double(const Json& v, const std::string& where) {
  if (!v.is_number()) throw ConfigError(where, "expected a number");
  return v.get<double>();
}

bool get_bool(const Json& v, const std::string& where) {
  if (!v.is_boolean()) throw ConfigError(where, "expected a boolean");
  return v.get<bool>();
}

std::string get_string(const Json& v, const std::string& where) {
  if (!v.is_string()) throw ConfigError(where, "expected a string");
  return v.get<std::string>();
}

Triple get_triple(const Json& v, const std::string& where) {
  if (v.is_number_integer()) {
    std::size_t s = get_size(v, where);
    return {s, s, s};
  }
  if (!v.is_array() || v.size() != 3) throw ConfigError(where, "expected an integer or [d, h, w]");
  return {get_size(v[0], where + "[0]"), get_size(v[1], where + "[1]"), get_size(v[2], where + "[2]")};
}

Json triple_to_json(const Triple& t) { return Json::array({t.d, t.h, t.w}); }

Json read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, "cannot open file");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path, std::string("invalid JSON: ") + e.what());
  }
}

void write_file(const std::string& path, const Json& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << doc.dump(2) << '\n';
}

}  // namespace config

namespace {

using namespace config;

ConvSpec conv_from_json(const Json& j, const std::string& where) {
  reject_unknown(j, where, {"type", "name", "in_channels", "out_channels", "kernel", "stride", "replaceable", "norm",
                            "activation"});
  ConvSpec c;
  c.name = get_string(require(j, where, "name"), where + ".name");
  c.in_channels = get_size(require(j, where, "in_channels"), where + ".in_channels");
  c.out_channels = get_size(require(j, where, "out_channels"), where + ".out_channels");
  try {
    c.kernel = KernelShape::parse(get_string(require(j, where, "kernel"), where + ".kernel"));
  } catch (const ShapeError& e) {
    throw ConfigError(where + ".kernel", e.what());
  }
  if (j.contains("stride")) c.stride = get_triple(j["stride"], where + ".stride");
  if (j.contains("replaceable")) c.replaceable = get_bool(j["replaceable"], where + ".replaceable");
  if (j.contains("norm")) c.norm = get_bool(j["norm"], where + ".norm");
  if (j.contains("activation")) c.activation = get_bool(j["activation"], where + ".activation");
  return c;
}

Json conv_to_json(const ConvSpec& c) {
  Json j;
  j["type"] = "conv";
  j["name"] = c.name;
  j["in_channels"] = c.in_channels;
  j["out_channels"] = c.out_channels;
  j["kernel"] = c.kernel.str();
  j["stride"] = triple_to_json(c.stride);
  j["replaceable"] = c.replaceable;
  j["norm"] = c.norm;
  j["activation"] = c.activation;
  return j;
}

Triple conv_out(const ConvSpec& c, const Triple& in) {
  auto ax = [](std::size_t n, int k, std::size_t s) {
    std::size_t kk = static_cast<std::size_t>(k);
    return conv_output_extent(n, kk, s, (kk - 1) / 2);
  };
  return {ax(in.d, c.kernel.d, c.stride.d), ax(in.h, c.kernel.h, c.stride.h), ax(in.w, c.kernel.w, c.stride.w)};
}

}  // namespace

BackboneSpec desk_classifier(std::size_t width, std::size_t blocks, Triple input_dims, std::size_t classes,
                             std::size_t first_stride, std::size_t in_channels) {
  BackboneSpec s;
  s.name = "desk_classifier";
  s.in_channels = in_channels;
  s.input_dims = input_dims;
  s.head = {HeadKind::Classification, classes};
  auto conv = [](std::string name, std::size_t ci, std::size_t co, KernelShape k, std::size_t stride, bool rep) {
    LayerSpec l;
    l.conv = {std::move(name), ci, co, k, {stride, stride, stride}, rep, true, true};
    return l;
  };
  s.layers.push_back(conv("stem", in_channels, width, {1, 1, 1}, 1, false));
  for (std::size_t b = 0; b < blocks; ++b)
    s.layers.push_back(conv("layer" + std::to_string(b + 1), width, width, {3, 3, 3}, b == 0 ? first_stride : 1, true));
  s.layers.push_back(conv("head_conv", width, width, {1, 1, 1}, 1, false));
  LayerSpec pool;
  pool.kind = LayerSpec::Kind::GlobalAvgPool;
  s.layers.push_back(pool);
  LayerSpec fc;
  fc.kind = LayerSpec::Kind::Linear;
  fc.linear = {"fc", width, classes};
  s.layers.push_back(fc);
  s.validate();
  return s;
}

BackboneSpec desk_segmenter(std::size_t width, std::size_t blocks, Triple input_dims, std::size_t classes,
                            std::size_t in_channels) {
  BackboneSpec s;
  s.name = "desk_segmenter";
  s.in_channels = in_channels;
  s.input_dims = input_dims;
  s.head = {HeadKind::Segmentation, classes};
  LayerSpec stem;
  stem.conv = {"stem", in_channels, width, {1, 1, 1}, {1, 1, 1}, false, true, true};
  s.layers.push_back(stem);
  for (std::size_t b = 0; b < blocks; ++b) {
    LayerSpec l;
    l.conv = {"layer" + std::to_string(b + 1), width, width, {3, 3, 3}, {1, 1, 1}, true, true, true};
    s.layers.push_back(l);
  }
  LayerSpec head;
  head.conv = {"seg_head", width, classes, {1, 1, 1}, {1, 1, 1}, false, false, false};
  s.layers.push_back(head);
  s.validate();
  return s;
}

BackboneSpec backbone_from_json(const Json& doc) {
  reject_unknown(doc, "", {"name", "in_channels", "input_dims", "layers", "task_head"});
  BackboneSpec spec;
  if (doc.contains("name")) spec.name = get_string(doc["name"], "name");
  spec.in_channels = get_size(require(doc, "", "in_channels"), "in_channels");
  spec.input_dims = get_triple(require(doc, "", "input_dims"), "input_dims");
  const Json& layers = require(doc, "", "layers");
  if (!layers.is_array()) throw ConfigError("layers", "expected an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layers[" + std::to_string(i) + "]";
    const Json& l = layers[i];
    if (!l.is_object()) throw ConfigError(where, "expected an object");
    const std::string type = get_string(require(l, where, "type"), where + ".type");
    LayerSpec ls;
    if (type == "conv") {
      ls.kind = LayerSpec::Kind::Conv;
      ls.conv = conv_from_json(l, where);
    } else if (type == "residual") {
      reject_unknown(l, where, {"type", "name", "body"});
      ls.kind = LayerSpec::Kind::Residual;
      ls.residual_name = get_string(require(l, where, "name"), where + ".name");
      const Json& body = require(l, where, "body");
      if (!body.is_array() || body.empty()) throw ConfigError(where + ".body", "expected a non-empty array");
      for (std::size_t b = 0; b < body.size(); ++b) {
        const std::string bw = where + ".body[" + std::to_string(b) + "]";
        if (!body[b].is_object() || get_string(require(body[b], bw, "type"), bw + ".type") != "conv")
          throw ConfigError(bw + ".type", "residual bodies hold conv layers only");
        ls.body.push_back(conv_from_json(body[b], bw));
      }
    } else if (type == "global_avg_pool") {
      reject_unknown(l, where, {"type"});
      ls.kind = LayerSpec::Kind::GlobalAvgPool;
    } else if (type == "linear") {
      reject_unknown(l, where, {"type", "name", "in_features", "out_features"});
      ls.kind = LayerSpec::Kind::Linear;
      ls.linear.name = get_string(require(l, where, "name"), where + ".name");
      ls.linear.in_features = get_size(require(l, where, "in_features"), where + ".in_features");
      ls.linear.out_features = get_size(require(l, where, "out_features"), where + ".out_features");
    } else {
      throw ConfigError(where + ".type", "unknown layer type '" + type + "'");
    }
    spec.layers.push_back(std::move(ls));
  }
  const Json& head = require(doc, "", "task_head");
  reject_unknown(head, "task_head", {"type", "classes"});
  const std::string kind = get_string(require(head, "task_head", "type"), "task_head.type");
  if (kind == "classification") spec.head.kind = HeadKind::Classification;
  else if (kind == "segmentation") spec.head.kind = HeadKind::Segmentation;
  else throw ConfigError("task_head.type", "expected 'classification' or 'segmentation'");
  spec.head.classes = get_size(require(head, "task_head", "classes"), "task_head.classes");
  spec.validate();
  return spec;
}

Json backbone_to_json(const BackboneSpec& spec) {
  Json doc;
  doc["name"] = spec.name;
  doc["in_channels"] = spec.in_channels;
  doc["input_dims"] = triple_to_json(spec.input_dims);
  Json layers = Json::array();
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::Conv: layers.push_back(conv_to_json(l.conv)); break;
      case LayerSpec::Kind::Residual: {
        Json r;
        r["type"] = "residual";
        r["name"] = l.residual_name;
        r["body"] = Json::array();
        for (const auto& c : l.body) r["body"].push_back(conv_to_json(c));
        layers.push_back(r);
        break;
      }
      case LayerSpec::Kind::GlobalAvgPool: layers.push_back(Json{{"type", "global_avg_pool"}}); break;
      case LayerSpec::Kind::Linear:
        layers.push_back(Json{{"type", "linear"},
                              {"name", l.linear.name},
                              {"in_features", l.linear.in_features},
                              {"out_features", l.linear.out_features}});
        break;
    }
  }
  doc["layers"] = layers;
  doc["task_head"] = Json{{"type", spec.head.kind == HeadKind::Classification ? "classification" : "segmentation"},
                          {"classes", spec.head.classes}};
  return doc;
}

void BackboneSpec::validate() const {
  if (in_channels == 0) throw ConfigError("in_channels", "must be positive");
  if (input_dims.d == 0 || input_dims.h == 0 || input_dims.w == 0) throw ConfigError("input_dims", "must be positive");
  if (layers.empty()) throw ConfigError("layers", "must not be empty");
  if (head.classes < 2) throw ConfigError("task_head.classes", "need at least two classes");

  std::set<std::string> names;
  auto claim = [&](const std::string& name, const std::string& where) {
    if (name.empty()) throw ConfigError(where + ".name", "must not be empty");
    if (!names.insert(name).second) throw ConfigError(where + ".name", "duplicate layer name '" + name + "'");
  };
  std::size_t channels = in_channels;
  Triple dims = input_dims;
  bool flat = false;  // after global pooling
  std::size_t first_replaceable = layers.size(), last_replaceable = 0;

  auto check_conv = [&](const ConvSpec& c, const std::string& where) {
    claim(c.name, where);
    if (flat) throw ConfigError(where, "conv after global pooling");
    if (c.in_channels != channels)
      throw ConfigError(where + ".in_channels",
                        "expected " + std::to_string(channels) + " to match the previous layer, got " +
                            std::to_string(c.in_channels));
    if (c.out_channels == 0) throw ConfigError(where + ".out_channels", "must be positive");
    if (c.stride.d == 0 || c.stride.h == 0 || c.stride.w == 0) throw ConfigError(where + ".stride", "must be positive");
    channels = c.out_channels;
    dims = conv_out(c, dims);
  };

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layers[" + std::to_string(i) + "]";
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerSpec::Kind::Conv:
        check_conv(l.conv, where);
        if (l.conv.replaceable) {
          first_replaceable = std::min(first_replaceable, i);
          last_replaceable = std::max(last_replaceable, i);
        }
        break;
      case LayerSpec::Kind::Residual: {
        claim(l.residual_name, where);
        const std::size_t c_in = channels;
        const Triple d_in = dims;
        for (std::size_t b = 0; b < l.body.size(); ++b) {
          check_conv(l.body[b], where + ".body[" + std::to_string(b) + "]");
          if (l.body[b].replaceable) {
            first_replaceable = std::min(first_replaceable, i);
            last_replaceable = std::max(last_replaceable, i);
          }
        }
        if (channels != c_in || !(dims == d_in))
          throw ConfigError(where + ".body", "identity skip needs matching channels and extents");
        break;
      }
      case LayerSpec::Kind::GlobalAvgPool:
        if (flat) throw ConfigError(where, "repeated global pooling");
        flat = true;
        break;
      case LayerSpec::Kind::Linear:
        claim(l.linear.name, where);
        if (!flat) throw ConfigError(where, "linear layer requires a preceding global_avg_pool");
        if (l.linear.in_features != channels)
          throw ConfigError(where + ".in_features", "expected " + std::to_string(channels));
        if (l.linear.out_features == 0) throw ConfigError(where + ".out_features", "must be positive");
        channels = l.linear.out_features;
        break;
    }
  }
  // The stem is everything before the first and after the last replaceable
  // layer; it must include at least the first and the last layer.
  if (first_replaceable == 0) throw ConfigError("layers[0].replaceable", "the first layer belongs to the stem");
  if (first_replaceable < layers.size() && last_replaceable == layers.size() - 1)
    throw ConfigError("layers[" + std::to_string(last_replaceable) + "].replaceable",
                      "the last layer belongs to the stem");

  const LayerSpec& last = layers.back();
  if (head.kind == HeadKind::Classification) {
    if (last.kind != LayerSpec::Kind::Linear || last.linear.out_features != head.classes)
      throw ConfigError("task_head", "classification needs a final linear layer with `classes` outputs");
  } else {
    if (last.kind != LayerSpec::Kind::Conv || last.conv.out_channels != head.classes || last.conv.activation ||
        last.conv.norm)
      throw ConfigError("task_head",
                        "segmentation needs a final conv with `classes` channels, no norm and no activation");
    if (!(dims == input_dims)) throw ConfigError("task_head", "segmentation output must keep the input extents");
  }
}

std::vector<const ConvSpec*> BackboneSpec::convs() const {
  std::vector<const ConvSpec*> out;
  for (const auto& l : layers) {
    if (l.kind == LayerSpec::Kind::Conv) out.push_back(&l.conv);
    if (l.kind == LayerSpec::Kind::Residual)
      for (const auto& c : l.body) out.push_back(&c);
  }
  return out;
}

std::vector<const ConvSpec*> BackboneSpec::replaceable() const {
  std::vector<const ConvSpec*> out;
  for (const ConvSpec* c : convs())
    if (c->replaceable) out.push_back(c);
  return out;
}

const ConvSpec& BackboneSpec::conv(const std::string& name) const {
  for (const ConvSpec* c : convs())
    if (c->name == name) return *c;
  throw std::out_of_range("no conv layer named '" + name + "'");
}

std::vector<ConvGeometry> BackboneSpec::geometry() const {
  std::vector<ConvGeometry> out;
  Triple dims = input_dims;
  for (const ConvSpec* c : convs()) {
    Triple od = conv_out(*c, dims);
    out.push_back({c, dims, od});
    dims = od;
  }
  return out;
}

}  // namespace cakes
