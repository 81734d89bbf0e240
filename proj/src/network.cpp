#include "cakes/network.hpp"

#include <cmath>

namespace cakes {

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double b = std::sqrt(6.0 / static_cast<double>(fan_in));
  return uniform_tensor(std::move(shape), -b, b, rng, true);
}

Shape kernel_tensor_shape(std::size_t out_channels, std::size_t in_channels, const KernelShape& k) {
  return {out_channels, in_channels, static_cast<std::size_t>(k.d), static_cast<std::size_t>(k.h),
          static_cast<std::size_t>(k.w)};
}

GroupedConv::GroupedConv(const ConvSpec& spec, std::vector<KernelShape> shapes, Rng& rng)
    : spec_(spec), shapes_(std::move(shapes)), stats_(spec.norm ? spec.out_channels : 0) {
  if (shapes_.size() != spec_.out_channels)
    throw ShapeError(spec_.name + ": " + std::to_string(shapes_.size()) + " shapes for " +
                     std::to_string(spec_.out_channels) + " channels");
  for (std::size_t c = 0; c < shapes_.size(); ++c) {
    auto it = std::find_if(groups_.begin(), groups_.end(), [&](const Group& g) { return g.shape == shapes_[c]; });
    if (it == groups_.end()) {
      groups_.push_back({shapes_[c], {}, {}});
      it = groups_.end() - 1;
    }
    it->channels.push_back(c);
  }
  for (auto& g : groups_)
    g.weight = he_uniform(kernel_tensor_shape(g.channels.size(), spec_.in_channels, g.shape),
                          spec_.in_channels * static_cast<std::size_t>(g.shape.volume()), rng);
  if (spec_.norm) {
    scale_ = Tensor({spec_.out_channels}, 1.0, true);
    shift_ = Tensor({spec_.out_channels}, 0.0, true);
  } else {
    bias_ = Tensor({spec_.out_channels}, 0.0, true);
  }
}

Tensor GroupedConv::forward(const Tensor& x, const ForwardContext& ctx) {
  ConvOptions opt{spec_.stride, std::nullopt};
  Tensor y;
  if (groups_.size() == 1) {
    y = conv3d(x, groups_[0].weight, opt);
  } else {
    std::vector<Tensor> parts;
    std::vector<std::vector<std::size_t>> index;
    for (const auto& g : groups_) {
      parts.push_back(conv3d(x, g.weight, opt));
      index.push_back(g.channels);
    }
    y = assemble_channels(parts, index, spec_.out_channels);
  }
  y = spec_.norm ? batch_norm(y, scale_, shift_, &stats_, ctx.norm) : add_channel_bias(y, bias_);
  return spec_.activation ? relu(y) : y;
}

void GroupedConv::collect(std::vector<NamedParam>& params, std::vector<NamedStats>& stats) {
  if (groups_.size() == 1) {
    params.push_back({spec_.name + ".weight", groups_[0].weight});
  } else {
    for (const auto& g : groups_) params.push_back({spec_.name + ".weight." + g.shape.str(), g.weight});
  }
  if (spec_.norm) {
    params.push_back({spec_.name + ".bn.scale", scale_});
    params.push_back({spec_.name + ".bn.shift", shift_});
    stats.push_back({spec_.name + ".bn", &stats_});
  } else {
    params.push_back({spec_.name + ".bias", bias_});
  }
}

P3DConv::P3DConv(const ConvSpec& spec, Rng& rng)
    : spec_(spec), st1_(spec.out_channels), st2_(spec.out_channels) {
  if (!spec_.norm) throw ConfigError(spec_.name, "p3d realisation needs a normalised layer");
  const KernelShape sp(1, spec_.kernel.h, spec_.kernel.w), tp(spec_.kernel.d, 1, 1);
  const std::size_t C = spec_.out_channels;
  w_spatial_ = he_uniform(kernel_tensor_shape(C, spec_.in_channels, sp), spec_.in_channels * sp.volume(), rng);
  w_temporal_ = he_uniform(kernel_tensor_shape(C, C, tp), C * tp.volume(), rng);
  s1_ = Tensor({C}, 1.0, true);
  b1_ = Tensor({C}, 0.0, true);
  s2_ = Tensor({C}, 1.0, true);
  b2_ = Tensor({C}, 0.0, true);
}

Tensor P3DConv::forward(const Tensor& x, const ForwardContext& ctx) {
  Tensor y = conv3d(x, w_spatial_, {{1, spec_.stride.h, spec_.stride.w}, std::nullopt});
  y = relu(batch_norm(y, s1_, b1_, &st1_, ctx.norm));
  y = conv3d(y, w_temporal_, {{spec_.stride.d, 1, 1}, std::nullopt});
  y = batch_norm(y, s2_, b2_, &st2_, ctx.norm);
  return spec_.activation ? relu(y) : y;
}

void P3DConv::collect(std::vector<NamedParam>& params, std::vector<NamedStats>& stats) {
  params.push_back({spec_.name + ".spatial.weight", w_spatial_});
  params.push_back({spec_.name + ".spatial.bn.scale", s1_});
  params.push_back({spec_.name + ".spatial.bn.shift", b1_});
  params.push_back({spec_.name + ".temporal.weight", w_temporal_});
  params.push_back({spec_.name + ".temporal.bn.scale", s2_});
  params.push_back({spec_.name + ".temporal.bn.shift", b2_});
  stats.push_back({spec_.name + ".spatial.bn", &st1_});
  stats.push_back({spec_.name + ".temporal.bn", &st2_});
}

namespace {

class Residual final : public Module {
 public:
  explicit Residual(std::vector<std::unique_ptr<Module>> body) : body_(std::move(body)) {}
  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    Tensor y = x;
    for (auto& m : body_) y = m->forward(y, ctx);
    return relu(add(y, x));
  }
  void collect(std::vector<NamedParam>& params, std::vector<NamedStats>& stats) override {
    for (auto& m : body_) m->collect(params, stats);
  }

 private:
  std::vector<std::unique_ptr<Module>> body_;
};

class Pool final : public Module {
 public:
  Tensor forward(const Tensor& x, const ForwardContext&) override { return global_avg_pool(x); }
  void collect(std::vector<NamedParam>&, std::vector<NamedStats>&) override {}
};

class Linear final : public Module {
 public:
  Linear(const LinearSpec& spec, Rng& rng) : name_(spec.name) {
    const double b = 1.0 / std::sqrt(static_cast<double>(spec.in_features));
    weight_ = uniform_tensor({spec.out_features, spec.in_features}, -b, b, rng, true);
    bias_ = Tensor({spec.out_features}, 0.0, true);
  }
  Tensor forward(const Tensor& x, const ForwardContext&) override { return linear(x, weight_, bias_); }
  void collect(std::vector<NamedParam>& params, std::vector<NamedStats>&) override {
    params.push_back({name_ + ".weight", weight_});
    params.push_back({name_ + ".bias", bias_});
  }

 private:
  std::string name_;
  Tensor weight_, bias_;
};

}  // namespace

Network::Network(BackboneSpec spec, std::uint64_t seed, const ReplaceableFactory& factory) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  std::size_t next_replaceable = 0;
  auto make_conv = [&](const ConvSpec& c) -> std::unique_ptr<Module> {
    std::unique_ptr<Module> m;
    if (c.replaceable && factory) m = factory(c, next_replaceable, rng);
    else m = std::make_unique<GroupedConv>(c, std::vector<KernelShape>(c.out_channels, c.kernel), rng);
    if (c.replaceable) {
      replaceable_.push_back(m.get());
      ++next_replaceable;
    }
    return m;
  };
  for (const auto& l : spec_.layers) {
    switch (l.kind) {
      case LayerSpec::Kind::Conv: modules_.push_back(make_conv(l.conv)); break;
      case LayerSpec::Kind::Residual: {
        std::vector<std::unique_ptr<Module>> body;
        for (const auto& c : l.body) body.push_back(make_conv(c));
        modules_.push_back(std::make_unique<Residual>(std::move(body)));
        break;
      }
      case LayerSpec::Kind::GlobalAvgPool: modules_.push_back(std::make_unique<Pool>()); break;
      case LayerSpec::Kind::Linear: modules_.push_back(std::make_unique<Linear>(l.linear, rng)); break;
    }
  }
}

Tensor Network::forward(const Tensor& x, const ForwardContext& ctx) {
  if (x.rank() != 5 || x.dim(1) != spec_.in_channels)
    throw ShapeError("network input must be [N, " + std::to_string(spec_.in_channels) + ", D, H, W], got " +
                     shape_string(x.shape()));
  Tensor y = x;
  for (auto& m : modules_) y = m->forward(y, ctx);
  return y;
}

std::vector<NamedParam> Network::parameters() {
  std::vector<NamedParam> p;
  std::vector<NamedStats> s;
  for (auto& m : modules_) m->collect(p, s);
  return p;
}

std::vector<NamedStats> Network::norm_stats() {
  std::vector<NamedParam> p;
  std::vector<NamedStats> s;
  for (auto& m : modules_) m->collect(p, s);
  return s;
}

std::size_t Network::parameter_scalars() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

}  // namespace cakes
