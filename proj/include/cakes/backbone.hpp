#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cakes/kernel_space.hpp"
#include "cakes/ops.hpp"

namespace cakes {

using Json = nlohmann::ordered_json;

/// Malformed or inconsistent configuration document. `field` names the
/// offending entry as a dotted path.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct ConvSpec {
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  KernelShape kernel{3, 3, 3};
  Triple stride{1, 1, 1};
  bool replaceable = false;
  bool norm = true;
  bool activation = true;
  // A bias is added exactly when norm is false.
  bool has_bias() const { return !norm; }
};

struct LinearSpec {
  std::string name;
  std::size_t in_features = 0;
  std::size_t out_features = 0;
};

struct LayerSpec {
  enum class Kind { Conv, Residual, GlobalAvgPool, Linear };
  Kind kind = Kind::Conv;
  ConvSpec conv;               // Conv
  std::string residual_name;   // Residual
  std::vector<ConvSpec> body;  // Residual: body convs, identity skip, then ReLU
  LinearSpec linear;           // Linear
};

enum class HeadKind { Classification, Segmentation };

struct TaskHead {
  HeadKind kind = HeadKind::Classification;
  std::size_t classes = 2;
};

struct ConvGeometry {
  const ConvSpec* conv = nullptr;
  Triple input_dims;
  Triple output_dims;
  std::size_t output_voxels() const { return output_dims.d * output_dims.h * output_dims.w; }
};

/// Declarative network description. Layers run in order on [N, C, D, H, W]
/// inputs; the last layer must match the head (a linear layer with `classes`
/// outputs for classification, a bias conv with `classes` channels and no
/// activation at full resolution for segmentation).
struct BackboneSpec {
  std::string name = "backbone";
  std::size_t in_channels = 1;
  Triple input_dims{16, 16, 16};
  std::vector<LayerSpec> layers;
  TaskHead head;

  // Throws ConfigError on any inconsistency.
  void validate() const;

  // Every conv in execution order, residual bodies flattened.
  std::vector<const ConvSpec*> convs() const;
  std::vector<const ConvSpec*> replaceable() const;
  const ConvSpec& conv(const std::string& name) const;
  // Input/output extents of every conv, in execution order.
  std::vector<ConvGeometry> geometry() const;
};

/// Pointwise stem -> `blocks` replaceable 3x3x3 convs of equal width (the
/// first one strided) -> pointwise conv -> global pooling -> linear.
BackboneSpec desk_classifier(std::size_t width, std::size_t blocks, Triple input_dims, std::size_t classes,
                             std::size_t first_stride = 2, std::size_t in_channels = 1);
/// Pointwise stem -> `blocks` replaceable 3x3x3 convs -> pointwise bias conv
/// producing per-voxel logits.
BackboneSpec desk_segmenter(std::size_t width, std::size_t blocks, Triple input_dims, std::size_t classes,
                            std::size_t in_channels = 1);

BackboneSpec backbone_from_json(const Json& doc);
Json backbone_to_json(const BackboneSpec& spec);

// Strict field access shared by every config parser.
namespace config {
void reject_unknown(const Json& obj, const std::string& where, std::initializer_list<const char*> allowed);
const Json& require(const Json& obj, const std::string& where, const char* key);
std::size_t get_size(const Json& v, const std::string& where);
double get_double(const Json& v, const std::string& where);
bool get_bool(const Json& v, const std::string& where);
std::string get_string(const Json& v, const std::string& where);
Triple get_triple(const Json& v, const std::string& where);
Json triple_to_json(const Triple& t);
Json read_file(const std::string& path);
void write_file(const std::string& path, const Json& doc);
}  // namespace config

}  // namespace cakes
