#include "cakes/supernet.hpp"

#include <cmath>

namespace cakes {

std::string_view to_string(SearchMode m) { return m == SearchMode::CostPriority ? "cost" : "perf"; }

SearchMode search_mode_from_string(std::string_view s) {
  if (s == "perf") return SearchMode::PerformancePriority;
  if (s == "cost") return SearchMode::CostPriority;
  throw ConfigError("mode", "expected 'perf' or 'cost', got '" + std::string(s) + "'");
}

std::size_t candidate_slot(std::size_t candidate, std::size_t channel, std::size_t out_channels) {
  return candidate * out_channels + channel;
}

namespace {

BranchSet make_branches(const ConvSpec& spec, const SubKernelSet& set, SearchMode mode, Rng& rng) {
  for (const auto& k : set.candidates())
    if (!k.fits_within(spec.kernel))
      throw ConfigError(spec.name + ".kernel", "candidate " + k.str() + " exceeds the layer kernel " + spec.kernel.str());
  if (!spec.norm) throw ConfigError(spec.name + ".norm", "replaceable layers need normalisation (path weights)");
  BranchSet b;
  b.layer = spec.name;
  b.in_channels = spec.in_channels;
  b.out_channels = spec.out_channels;
  b.stride = spec.stride;
  b.activation = spec.activation;
  const std::size_t n = set.size(), C = spec.out_channels;
  for (const auto& k : set.candidates()) {
    b.weight.push_back(he_uniform(kernel_tensor_shape(C, spec.in_channels, k),
                                  spec.in_channels * static_cast<std::size_t>(k.volume()), rng));
    b.scale.push_back(Tensor({C}, 1.0, true));
    b.shift.push_back(Tensor({C}, 0.0, true));
  }
  b.stats = NormStats(n * C);
  if (mode == SearchMode::CostPriority) {
    std::vector<double> a(C * n * C, 0.0);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < n; ++i) a[c * n * C + candidate_slot(i, c, C)] = 1.0 / static_cast<double>(n);
    b.aggregator = Tensor({C, n * C, 1, 1, 1}, std::move(a), true);
  }
  return b;
}

std::vector<std::size_t> slots_for(std::size_t candidate, const std::vector<std::size_t>& channels, std::size_t C) {
  std::vector<std::size_t> s;
  for (std::size_t c : channels) s.push_back(candidate_slot(candidate, c, C));
  return s;
}

void collect_branches(BranchSet& b, const SubKernelSet& set, std::vector<NamedParam>& params,
                      std::vector<NamedStats>& stats) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    const std::string p = b.layer + ".branch." + set[i].str();
    params.push_back({p + ".weight", b.weight[i]});
    params.push_back({p + ".bn.scale", b.scale[i]});
    params.push_back({p + ".bn.shift", b.shift[i]});
  }
  if (b.aggregator.defined()) params.push_back({b.layer + ".aggregator", b.aggregator});
  stats.push_back({b.layer + ".branch.bn", &b.stats});
}

class SinglePathLayer final : public Module {
 public:
  SinglePathLayer(BranchSet b, const SubKernelSet& set, std::size_t index)
      : b_(std::move(b)), set_(set), index_(index) {}
  BranchSet* branches() { return &b_; }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    if (!ctx.sample || ctx.sample->choice.size() <= index_)
      throw std::invalid_argument(b_.layer + ": single-path forward needs a path sample");
    const auto& choice = ctx.sample->choice[index_];
    const std::size_t C = b_.out_channels;
    if (choice.size() != C) throw ShapeError(b_.layer + ": path sample has the wrong channel count");
    std::vector<std::vector<std::size_t>> members(set_.size());
    for (std::size_t c = 0; c < C; ++c) {
      if (choice[c] >= set_.size())
        throw std::out_of_range(b_.layer + ": sampled candidate " + std::to_string(choice[c]) + " out of range");
      members[choice[c]].push_back(c);
    }
    std::vector<Tensor> parts;
    std::vector<std::vector<std::size_t>> index;
    const ConvOptions opt{b_.stride, std::nullopt};
    for (std::size_t i = 0; i < set_.size(); ++i) {
      if (members[i].empty()) continue;
      Tensor y = conv3d(x, gather_rows(b_.weight[i], members[i]), opt);
      auto slots = slots_for(i, members[i], C);
      parts.push_back(batch_norm(y, gather_rows(b_.scale[i], members[i]), gather_rows(b_.shift[i], members[i]),
                                 &b_.stats, ctx.norm, 1e-5, slots));
      index.push_back(members[i]);
    }
    Tensor y = parts.size() == 1 ? parts[0] : assemble_channels(parts, index, C);
    return b_.activation ? relu(y) : y;
  }

  void collect(std::vector<NamedParam>& params, std::vector<NamedStats>& stats) override {
    collect_branches(b_, set_, params, stats);
  }

 private:
  BranchSet b_;
  const SubKernelSet& set_;
  std::size_t index_;
};

class AllPathLayer final : public Module {
 public:
  AllPathLayer(BranchSet b, const SubKernelSet& set) : b_(std::move(b)), set_(set) {}
  BranchSet* branches() { return &b_; }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    const std::size_t C = b_.out_channels;
    std::vector<std::size_t> all(C);
    for (std::size_t c = 0; c < C; ++c) all[c] = c;
    const ConvOptions opt{b_.stride, std::nullopt};
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < set_.size(); ++i) {
      Tensor y = conv3d(x, b_.weight[i], opt);
      auto slots = slots_for(i, all, C);
      parts.push_back(batch_norm(y, b_.scale[i], b_.shift[i], &b_.stats, ctx.norm, 1e-5, slots));
    }
    Tensor y = conv3d(parts.size() == 1 ? parts[0] : concat_channels(parts), b_.aggregator);
    return b_.activation ? relu(y) : y;
  }

  void collect(std::vector<NamedParam>& params, std::vector<NamedStats>& stats) override {
    collect_branches(b_, set_, params, stats);
  }

 private:
  BranchSet b_;
  const SubKernelSet& set_;
};

}  // namespace

SuperNet::SuperNet(BackboneSpec spec, SubKernelSet set, SearchMode mode, std::uint64_t seed)
    : set_(std::move(set)),
      mode_(mode),
      net_(std::move(spec), seed, [this](const ConvSpec& c, std::size_t index, Rng& rng) -> std::unique_ptr<Module> {
        BranchSet b = make_branches(c, set_, mode_, rng);
        if (mode_ == SearchMode::PerformancePriority) {
          auto m = std::make_unique<SinglePathLayer>(std::move(b), set_, index);
          branches_.push_back(m->branches());
          return m;
        }
        auto m = std::make_unique<AllPathLayer>(std::move(b), set_);
        branches_.push_back(m->branches());
        return m;
      }) {}

Tensor SuperNet::forward_single_path(const Tensor& x, const PathSample& sample, NormMode norm) {
  if (mode_ != SearchMode::PerformancePriority)
    throw std::logic_error("forward_single_path requires a performance-priority supernet");
  if (sample.choice.size() != branches_.size()) throw ShapeError("path sample has the wrong layer count");
  return net_.forward(x, {norm, &sample});
}

Tensor SuperNet::forward_all_paths(const Tensor& x, NormMode norm) {
  if (mode_ != SearchMode::CostPriority) throw std::logic_error("forward_all_paths requires a cost-priority supernet");
  return net_.forward(x, {norm, nullptr});
}

Tensor SuperNet::forward_layer(std::size_t layer, const Tensor& x, const ForwardContext& ctx) {
  return net_.replaceable_module(layer).forward(x, ctx);
}

PathSample SuperNet::sample_path(Rng& rng) const {
  PathSample s;
  std::uniform_int_distribution<std::size_t> pick(0, set_.size() - 1);
  for (const BranchSet* b : branches_) {
    std::vector<std::size_t> row(b->out_channels);
    for (auto& r : row) r = pick(rng);
    s.choice.push_back(std::move(row));
  }
  return s;
}

PathSample SuperNet::sample_path(std::uint64_t seed) const {
  Rng rng(seed);
  PathSample s = sample_path(rng);
  s.rng_seed = seed;
  return s;
}

AlphaSnapshot SuperNet::read_path_weights() const {
  AlphaSnapshot a;
  a.candidates = set_.names();
  for (const BranchSet* b : branches_) {
    a.layers.push_back(b->layer);
    std::vector<std::vector<double>> rows(b->out_channels, std::vector<double>(set_.size()));
    for (std::size_t c = 0; c < b->out_channels; ++c)
      for (std::size_t i = 0; i < set_.size(); ++i) rows[c][i] = b->scale[i][c];
    a.values.push_back(std::move(rows));
  }
  return a;
}

void SuperNet::set_path_weight(std::size_t layer, std::size_t channel, std::size_t candidate, double value) {
  BranchSet& b = *branches_.at(layer);
  if (channel >= b.out_channels || candidate >= set_.size()) throw std::out_of_range("path weight index");
  b.scale[candidate].mutable_values()[channel] = value;
}

std::vector<Tensor> SuperNet::path_weight_tensors() const {
  std::vector<Tensor> out;
  for (const BranchSet* b : branches_)
    for (const auto& s : b->scale) out.push_back(s);
  return out;
}

void SuperNet::inflate_init(const std::map<std::string, Tensor>& source2d) {
  for (BranchSet* b : branches_) {
    auto it = source2d.find(b->layer);
    if (it == source2d.end()) throw ConfigError(b->layer, "no 2D source kernel for layer");
    const Tensor& src = it->second;
    const KernelShape& base = spec().conv(b->layer).kernel;
    const Shape expected{b->out_channels, b->in_channels, 1, static_cast<std::size_t>(base.h),
                         static_cast<std::size_t>(base.w)};
    if (src.shape() != expected)
      throw ShapeError(b->layer + ": 2D source must be " + shape_string(expected) + ", got " +
                       shape_string(src.shape()));
    const std::size_t KH = base.h, KW = base.w, lead = b->out_channels * b->in_channels;
    for (std::size_t i = 0; i < set_.size(); ++i) {
      const KernelShape& k = set_[i];
      if ((k.h != 1 && k.h != base.h) || (k.w != 1 && k.w != base.w))
        throw ShapeError(b->layer + ": cannot inflate into " + k.str());
      const std::size_t kd = k.d, kh = k.h, kw = k.w;
      auto dst = b->weight[i].mutable_values();
      for (std::size_t l = 0; l < lead; ++l) {
        const double* s = src.values().data() + l * KH * KW;
        for (std::size_t j = 0; j < kh; ++j)
          for (std::size_t q = 0; q < kw; ++q) {
            // Average over the spatial axes the branch collapses.
            double acc = 0.0;
            std::size_t count = 0;
            for (std::size_t sj = 0; sj < KH; ++sj) {
              if (kh != 1 && sj != j) continue;
              for (std::size_t sq = 0; sq < KW; ++sq) {
                if (kw != 1 && sq != q) continue;
                acc += s[sj * KW + sq];
                ++count;
              }
            }
            const double v = acc / static_cast<double>(count) / static_cast<double>(kd);
            for (std::size_t d = 0; d < kd; ++d) dst[((l * kd + d) * kh + j) * kw + q] = v;
          }
      }
    }
  }
}

std::pair<Tensor, Tensor> SuperNet::merged_kernel(std::size_t layer) const {
  if (mode_ != SearchMode::CostPriority) throw std::logic_error("merged_kernel requires a cost-priority supernet");
  const BranchSet& b = *branches_.at(layer);
  const KernelShape& base = spec().conv(b.layer).kernel;
  const std::size_t C = b.out_channels, Ci = b.in_channels, n = set_.size();
  const std::size_t V = static_cast<std::size_t>(base.volume());
  std::vector<double> w(C * Ci * V, 0.0), bias(C, 0.0);
  auto A = b.aggregator.values();
  for (std::size_t i = 0; i < n; ++i) {
    Tensor e = embed_subkernel(b.weight[i].detach(), base);  // [C, Ci, base]
    for (std::size_t cp = 0; cp < C; ++cp) {
      const std::size_t slot = candidate_slot(i, cp, C);
      const double inv = 1.0 / std::sqrt(b.stats.running_var[slot] + 1e-5);
      const double g = b.scale[i][cp] * inv;
      const double off = b.shift[i][cp] - g * b.stats.running_mean[slot];
      for (std::size_t c = 0; c < C; ++c) {
        const double a = A[c * n * C + slot];
        if (a == 0.0) continue;
        bias[c] += a * off;
        for (std::size_t k = 0; k < Ci * V; ++k) w[c * Ci * V + k] += a * g * e[cp * Ci * V + k];
      }
    }
  }
  return {Tensor(kernel_tensor_shape(C, Ci, base), std::move(w)), Tensor({C}, std::move(bias))};
}

Json alpha_to_json(const AlphaSnapshot& a, SearchMode mode) {
  Json doc;
  doc["mode"] = std::string(to_string(mode));
  doc["candidates"] = a.candidates;
  Json layers = Json::object();
  for (std::size_t l = 0; l < a.layers.size(); ++l) layers[a.layers[l]] = a.values[l];
  doc["layers"] = layers;
  return doc;
}

AlphaSnapshot alpha_from_json(const Json& doc) {
  config::reject_unknown(doc, "", {"mode", "candidates", "layers"});
  AlphaSnapshot a;
  if (doc.contains("mode")) search_mode_from_string(config::get_string(doc["mode"], "mode"));
  const Json& cand = config::require(doc, "", "candidates");
  if (!cand.is_array() || cand.empty()) throw ConfigError("candidates", "expected a non-empty array");
  for (std::size_t i = 0; i < cand.size(); ++i) {
    std::string s = config::get_string(cand[i], "candidates[" + std::to_string(i) + "]");
    try {
      KernelShape::parse(s);
    } catch (const ShapeError& e) {
      throw ConfigError("candidates[" + std::to_string(i) + "]", e.what());
    }
    a.candidates.push_back(s);
  }
  const Json& layers = config::require(doc, "", "layers");
  if (!layers.is_object()) throw ConfigError("layers", "expected an object");
  for (const auto& [name, rows] : layers.items()) {
    const std::string where = "layers." + name;
    if (!rows.is_array() || rows.empty()) throw ConfigError(where, "expected a non-empty array of channels");
    std::vector<std::vector<double>> v;
    for (std::size_t c = 0; c < rows.size(); ++c) {
      const std::string cw = where + "[" + std::to_string(c) + "]";
      if (!rows[c].is_array() || rows[c].size() != a.candidates.size())
        throw ConfigError(cw, "expected " + std::to_string(a.candidates.size()) + " path weights");
      std::vector<double> r;
      for (std::size_t i = 0; i < rows[c].size(); ++i) {
        double x = config::get_double(rows[c][i], cw + "[" + std::to_string(i) + "]");
        if (!std::isfinite(x)) throw ConfigError(cw, "non-finite path weight");
        r.push_back(x);
      }
      v.push_back(std::move(r));
    }
    a.layers.push_back(name);
    a.values.push_back(std::move(v));
  }
  return a;
}

}  // namespace cakes
