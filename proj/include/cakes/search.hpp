#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "cakes/supernet.hpp"
#include "cakes/tasks.hpp"

namespace cakes {

struct SearchConfig {
  SearchMode mode = SearchMode::CostPriority;
  double lambda = 1e-4;
  // Per-candidate penalty weights; cost priority only. Defaults to cost_beta.
  std::optional<std::vector<double>> beta;
  TrainConfig train;

  void validate(const SubKernelSet& set) const;
  std::vector<double> resolved_beta(const SubKernelSet& set) const;
};

Json search_config_to_json(const SearchConfig& c);
SearchConfig search_config_from_json(const Json& doc);
Json sgd_to_json(const SgdSettings& s);
SgdSettings sgd_from_json(const Json& doc, const std::string& where);

/// Final-network training run: the optimisation settings plus how to infer.
struct FinalTrainConfig {
  TrainConfig train;
  Inference inference;
};

Json final_train_config_to_json(const FinalTrainConfig& c);
FinalTrainConfig final_train_config_from_json(const Json& doc);

/// lambda * sum_t weights[t] * sum_j |alphas[t]_j|.
Tensor penalty_loss(const std::vector<Tensor>& alphas, std::span<const double> weights, double lambda);
/// Penalty over every branch scale of the supernet; beta is per candidate.
Tensor penalty_loss(const SuperNet& net, std::span<const double> beta, double lambda);

struct SearchResult {
  AlphaSnapshot alpha;
  TrainLog log;
};

// One fresh path per iteration, task loss only.
SearchResult run_performance_priority(SuperNet& net, const Dataset& data, const SearchConfig& cfg);
// All paths jointly, task loss plus the cost-weighted lasso on the scales.
SearchResult run_cost_priority(SuperNet& net, const Dataset& data, const SearchConfig& cfg);
SearchResult run_search(SuperNet& net, const Dataset& data, const SearchConfig& cfg);

// ------------------------------------------------------------------ configurations

struct LayerChoice {
  std::string layer;
  bool p3d = false;                 // layer-wise 1 x k x k then k x 1 x 1 factorisation
  std::vector<KernelShape> shapes;  // per output channel, empty when p3d
};

struct ReplacementConfig {
  std::vector<LayerChoice> layers;  // replaceable-layer order

  const LayerChoice& at(const std::string& layer) const;
  // Throws ConfigError unless every replaceable layer appears once with one
  // shape per output channel, each fitting the layer's kernel.
  void validate(const BackboneSpec& spec) const;
};

Json replacement_to_json(const ReplacementConfig& c);
ReplacementConfig replacement_from_json(const Json& doc);

/// Per channel: argmax of |alpha|; ties go to the cheaper shape, then to the
/// earlier candidate.
ReplacementConfig finalize(const AlphaSnapshot& alpha, const SubKernelSet& set);
std::size_t select_candidate(std::span<const double> alpha, const SubKernelSet& set);

enum class ManualScheme { Uniform, Pure2D, Pure1D, Temporal1D, Full3D, P3D };
std::string_view to_string(ManualScheme s);
ManualScheme manual_scheme_from_string(std::string_view s);

/// uniform: candidates round-robin over channels; pure2d: 1 x k x k; pure1d:
/// the three 1D shapes round-robin; temporal1d: k x 1 x 1; full3d: the base
/// kernel; p3d: the layer-wise factorisation. Shapes must be in `set`.
ReplacementConfig manual_config(const BackboneSpec& spec, const SubKernelSet& set, ManualScheme scheme);

/// Backbone with every replaceable conv realised per the config. Weights are
/// freshly initialised from `seed`.
Network build_final_network(const BackboneSpec& spec, const ReplacementConfig& cfg, std::uint64_t seed);

// ------------------------------------------------------------------ accounting

struct LayerCost {
  std::string name;
  bool replaceable = false;
  bool p3d = false;
  std::int64_t params = 0;
  std::int64_t flops = 0;
  std::size_t channels = 0;
  std::vector<std::pair<std::string, std::size_t>> shape_counts;  // in order of first use over channels
};

// Class counts are indexed by KernelClass (pointwise, 1D, 2D, 3D).
struct CostReport {
  std::int64_t total_params = 0;
  std::int64_t total_flops = 0;
  std::int64_t replaceable_params = 0;
  std::int64_t replaceable_flops = 0;
  std::size_t replaced_channels = 0;
  std::array<std::size_t, 4> class_counts{};
  std::array<std::size_t, 3> axis_counts{};  // d, h, w
  std::vector<LayerCost> layers;
};

/// Weights of convolutions (plus bias where present) and linear layers; norm
/// parameters are excluded. A p3d layer counts as C_o 2D plus C_o 1D
/// channels, with its C_o channels counted once on every axis.
CostReport cost_report(const BackboneSpec& spec, const ReplacementConfig& cfg, const CostModel& model = {});
Json cost_report_to_json(const CostReport& r);
CostReport cost_report_from_json(const Json& doc);
std::string cost_report_csv(const CostReport& r);

}  // namespace cakes
