#include "cakes/kernel_space.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <stdexcept>

namespace cakes {

std::string_view to_string(KernelClass c) {
  switch (c) {
    case KernelClass::Pointwise: return "pointwise";
    case KernelClass::Conv1D: return "1D";
    case KernelClass::Conv2D: return "2D";
    case KernelClass::Conv3D: return "3D";
  }
  return "?";
}

KernelShape::KernelShape(int kd, int kh, int kw) : d(kd), h(kh), w(kw) {
  for (int k : {kd, kh, kw})
    if (k < 1 || k % 2 == 0)
      throw ShapeError("kernel extents must be positive and odd, got " + std::to_string(kd) + "x" +
                       std::to_string(kh) + "x" + std::to_string(kw));
}

KernelClass KernelShape::kernel_class() const {
  return static_cast<KernelClass>((d > 1) + (h > 1) + (w > 1));
}

std::string KernelShape::str() const {
  return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

KernelShape KernelShape::parse(std::string_view text) {
  int ext[3];
  const char* p = text.data();
  const char* end = text.data() + text.size();
  for (int i = 0; i < 3; ++i) {
    auto [next, ec] = std::from_chars(p, end, ext[i]);
    if (ec != std::errc{} || next == p) throw ShapeError("malformed kernel string '" + std::string(text) + "'");
    p = next;
    if (i < 2) {
      if (p == end || *p != 'x') throw ShapeError("malformed kernel string '" + std::string(text) + "'");
      ++p;
    }
  }
  if (p != end) throw ShapeError("malformed kernel string '" + std::string(text) + "'");
  return {ext[0], ext[1], ext[2]};
}

SubKernelSet::SubKernelSet(KernelShape base, std::vector<KernelShape> candidates)
    : base_(base), candidates_(std::move(candidates)) {
  if (candidates_.empty()) throw std::invalid_argument("sub-kernel set must not be empty");
  for (std::size_t i = 0; i < candidates_.size(); ++i) {
    if (!candidates_[i].fits_within(base_))
      throw ShapeError("candidate " + candidates_[i].str() + " exceeds base " + base_.str());
    for (std::size_t j = 0; j < i; ++j)
      if (candidates_[i] == candidates_[j])
        throw std::invalid_argument("duplicate candidate " + candidates_[i].str());
  }
}

bool SubKernelSet::contains(const KernelShape& s) const {
  return std::find(candidates_.begin(), candidates_.end(), s) != candidates_.end();
}

std::size_t SubKernelSet::index_of(const KernelShape& s) const {
  auto it = std::find(candidates_.begin(), candidates_.end(), s);
  if (it == candidates_.end()) throw std::out_of_range("shape " + s.str() + " not in candidate set");
  return static_cast<std::size_t>(it - candidates_.begin());
}

std::vector<std::string> SubKernelSet::names() const {
  std::vector<std::string> out;
  for (const auto& c : candidates_) out.push_back(c.str());
  return out;
}

bool candidate_order(const KernelShape& a, const KernelShape& b) {
  if (a.volume() != b.volume()) return a.volume() > b.volume();
  return a < b;
}

SubKernelSet enumerate_subkernels(const KernelShape& base, const std::set<int>& per_axis_choices,
                                  bool exclude_pointwise) {
  for (int c : per_axis_choices)
    if (c < 1 || c % 2 == 0) throw ShapeError("axis choice " + std::to_string(c) + " is not a positive odd extent");
  std::vector<int> axis[3];
  for (int a = 0; a < 3; ++a)
    for (int c : per_axis_choices)
      if (c <= base.extent(a)) axis[a].push_back(c);
  std::vector<KernelShape> out;
  for (int kd : axis[0])
    for (int kh : axis[1])
      for (int kw : axis[2]) {
        KernelShape s(kd, kh, kw);
        if (exclude_pointwise && s.kernel_class() == KernelClass::Pointwise) continue;
        out.push_back(s);
      }
  if (out.empty()) throw std::invalid_argument("sub-kernel enumeration is empty");
  std::sort(out.begin(), out.end(), candidate_order);
  return SubKernelSet(base, std::move(out));
}

SubKernelSet default_subkernel_set() { return enumerate_subkernels({3, 3, 3}, {1, 3}, true); }

long cuboid_subkernel_options(const KernelShape& base) { return base.volume(); }

Tensor embed_subkernel(const Tensor& w_sub, const KernelShape& base) {
  const Shape& s = w_sub.shape();
  if (s.size() < 3) throw ShapeError("sub-kernel needs at least 3 axes, got " + shape_string(s));
  const std::size_t r = s.size();
  const std::size_t a = s[r - 3], b = s[r - 2], c = s[r - 1];
  // Constructing the shape validates oddness.
  KernelShape sub(static_cast<int>(a), static_cast<int>(b), static_cast<int>(c));
  if (!sub.fits_within(base)) throw ShapeError("sub-kernel " + sub.str() + " exceeds base " + base.str());
  const std::size_t D = base.d, H = base.h, W = base.w;
  const std::size_t od = (D - a) / 2, oh = (H - b) / 2, ow = (W - c) / 2;
  Shape out_shape(s.begin(), s.end() - 3);
  out_shape.insert(out_shape.end(), {D, H, W});
  const std::size_t lead = numel(Shape(s.begin(), s.end() - 3));
  std::vector<double> out(lead * D * H * W, 0.0);
  auto src = w_sub.values();
  for (std::size_t l = 0; l < lead; ++l)
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t k = 0; k < c; ++k)
          out[((l * D + od + i) * H + oh + j) * W + ow + k] = src[((l * a + i) * b + j) * c + k];
  return Tensor(std::move(out_shape), std::move(out));
}

std::int64_t param_count(const KernelShape& shape, std::int64_t in_channels, std::int64_t out_channels) {
  return out_channels * in_channels * shape.volume();
}

std::int64_t flop_count(const KernelShape& shape, std::int64_t in_channels, std::int64_t out_channels,
                        std::int64_t output_voxels, const CostModel& model) {
  return model.flops_per_mac * param_count(shape, in_channels, out_channels) * output_voxels;
}

std::vector<double> cost_beta(const SubKernelSet& set) {
  if (set.size() == 0) throw std::invalid_argument("cost_beta of an empty set");
  std::map<KernelClass, std::pair<double, int>> acc;
  for (const auto& c : set.candidates()) {
    auto& [vol, n] = acc[c.kernel_class()];
    vol += static_cast<double>(c.volume());
    ++n;
  }
  std::map<KernelClass, double> class_cost;
  double total = 0.0;
  for (const auto& [cls, vn] : acc) {
    class_cost[cls] = vn.first / vn.second;
    total += class_cost[cls];
  }
  std::vector<double> beta;
  for (const auto& c : set.candidates()) beta.push_back(class_cost[c.kernel_class()] / total);
  return beta;
}

}  // namespace cakes
