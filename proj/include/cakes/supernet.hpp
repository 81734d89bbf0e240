#pragma once

#include <map>
#include <string>
#include <vector>

#include "cakes/network.hpp"

namespace cakes {

enum class SearchMode { PerformancePriority, CostPriority };

std::string_view to_string(SearchMode m);
SearchMode search_mode_from_string(std::string_view s);  // "perf" | "cost"

/// One candidate index per (replaceable layer, output channel).
struct PathSample {
  std::vector<std::vector<std::size_t>> choice;
  std::uint64_t rng_seed = 0;
};

/// Path weights: values[layer][channel][candidate].
struct AlphaSnapshot {
  std::vector<std::string> candidates;
  std::vector<std::string> layers;
  std::vector<std::vector<std::vector<double>>> values;
};

Json alpha_to_json(const AlphaSnapshot& a, SearchMode mode);
AlphaSnapshot alpha_from_json(const Json& doc);

/// Trainable tensors of one replaceable layer. Candidate i of channel c uses
/// row c of weight[i] and scale[i][c] (its path weight); batch-norm statistics
/// live in slot i * C_o + c of `stats`.
struct BranchSet {
  std::string layer;
  std::size_t in_channels = 0, out_channels = 0;
  Triple stride;
  bool activation = true;
  std::vector<Tensor> weight;  // per candidate [C_o, C_i, kd, kh, kw]
  std::vector<Tensor> scale;   // per candidate [C_o]
  std::vector<Tensor> shift;   // per candidate [C_o]
  Tensor aggregator;           // cost priority: [C_o, n * C_o, 1, 1, 1]
  NormStats stats;
};

/// Over-parameterised network: every replaceable conv carries one branch per
/// candidate sub-kernel and output channel.
///
/// Performance priority: each channel is computed by its sampled branch
/// (conv -> branch BN -> shared activation). Cost priority: every branch runs,
/// the n * C_o normalised outputs are concatenated candidate-major and a
/// pointwise aggregator maps them back to C_o channels before the activation.
class SuperNet {
 public:
  SuperNet(BackboneSpec spec, SubKernelSet set, SearchMode mode, std::uint64_t seed);
  SuperNet(const SuperNet&) = delete;
  SuperNet& operator=(const SuperNet&) = delete;

  Tensor forward_single_path(const Tensor& x, const PathSample& sample, NormMode norm = NormMode::Train);
  Tensor forward_all_paths(const Tensor& x, NormMode norm = NormMode::Train);

  PathSample sample_path(Rng& rng) const;
  PathSample sample_path(std::uint64_t seed) const;
  AlphaSnapshot read_path_weights() const;
  void set_path_weight(std::size_t layer, std::size_t channel, std::size_t candidate, double value);

  /// Rewrites every branch from a 1 x kh x kw source kernel per replaceable
  /// layer (keyed by layer name, shape [C_o, C_i, 1, kh, kw]): depth is
  /// filled by repetition divided by the repeat count, and spatial axes the
  /// branch collapses are averaged.
  void inflate_init(const std::map<std::string, Tensor>& source2d);

  /// Cost priority, eval statistics: the pre-activation output of a layer
  /// equals conv(x, kernel) + bias for the returned base-shaped kernel.
  std::pair<Tensor, Tensor> merged_kernel(std::size_t layer) const;

  // Evaluates one replaceable layer in isolation (pre-network input).
  Tensor forward_layer(std::size_t layer, const Tensor& x, const ForwardContext& ctx);

  SearchMode mode() const { return mode_; }
  const SubKernelSet& candidates() const { return set_; }
  const BackboneSpec& spec() const { return net_.spec(); }
  Network& network() { return net_; }
  std::vector<BranchSet*> branches() { return branches_; }
  const BranchSet& branch(std::size_t layer) const { return *branches_.at(layer); }
  // All branch scales, in layer then candidate order (penalised parameters).
  std::vector<Tensor> path_weight_tensors() const;

 private:
  SubKernelSet set_;
  SearchMode mode_;
  std::vector<BranchSet*> branches_;  // owned by modules inside net_
  Network net_;
};

// Statistics slot of (candidate, channel): candidate * C_o + channel.
std::size_t candidate_slot(std::size_t candidate, std::size_t channel, std::size_t out_channels);

}  // namespace cakes
