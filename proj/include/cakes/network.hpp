#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cakes/backbone.hpp"
#include "cakes/random.hpp"

namespace cakes {

struct PathSample;

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct NamedStats {
  std::string name;
  NormStats* stats;
};

struct ForwardContext {
  NormMode norm = NormMode::Train;
  // Required by performance-priority supernet layers, ignored elsewhere.
  const PathSample* sample = nullptr;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(const Tensor& x, const ForwardContext& ctx) = 0;
  virtual void collect(std::vector<NamedParam>& params, std::vector<NamedStats>& stats) = 0;
};

// He-uniform: U(-b, b) with b = sqrt(6 / fan_in).
Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng);
Shape kernel_tensor_shape(std::size_t out_channels, std::size_t in_channels, const KernelShape& k);

/// conv -> (batch norm | bias) -> (ReLU) with one kernel shape per output
/// channel. Channels sharing a shape are computed by one convolution and the
/// group outputs are scattered back into channel order.
class GroupedConv final : public Module {
 public:
  GroupedConv(const ConvSpec& spec, std::vector<KernelShape> shapes, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx) override;
  void collect(std::vector<NamedParam>& params, std::vector<NamedStats>& stats) override;

  struct Group {
    KernelShape shape;
    std::vector<std::size_t> channels;
    Tensor weight;  // [|channels|, Ci, kd, kh, kw]
  };
  const std::vector<Group>& groups() const { return groups_; }
  const std::vector<KernelShape>& shapes() const { return shapes_; }

 private:
  ConvSpec spec_;
  std::vector<KernelShape> shapes_;
  std::vector<Group> groups_;
  Tensor scale_, shift_, bias_;
  NormStats stats_;
};

/// Layer-wise factorisation: 1 x kh x kw spatial conv (h/w stride) -> BN ->
/// ReLU -> kd x 1 x 1 temporal conv (depth stride) -> BN -> activation flag.
/// The intermediate width equals the output width.
class P3DConv final : public Module {
 public:
  P3DConv(const ConvSpec& spec, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx) override;
  void collect(std::vector<NamedParam>& params, std::vector<NamedStats>& stats) override;

 private:
  ConvSpec spec_;
  Tensor w_spatial_, w_temporal_;
  Tensor s1_, b1_, s2_, b2_;
  NormStats st1_, st2_;
};

/// Sequential network. A factory decides how each replaceable conv is
/// realised; every other layer is built as a single-shape GroupedConv.
class Network {
 public:
  using ReplaceableFactory =
      std::function<std::unique_ptr<Module>(const ConvSpec& spec, std::size_t replaceable_index, Rng& rng)>;

  Network(BackboneSpec spec, std::uint64_t seed, const ReplaceableFactory& factory = {});
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  // [N, Cin, D, H, W] -> [N, K] logits or [N, K, D, H, W] logits.
  Tensor forward(const Tensor& x, const ForwardContext& ctx = {});

  // Stable, unique names in construction order.
  std::vector<NamedParam> parameters();
  std::vector<NamedStats> norm_stats();
  std::size_t parameter_scalars();

  const BackboneSpec& spec() const { return spec_; }
  Module& replaceable_module(std::size_t index) { return *replaceable_.at(index); }

 private:
  BackboneSpec spec_;
  std::vector<std::unique_ptr<Module>> modules_;
  std::vector<Module*> replaceable_;
};

}  // namespace cakes
