#pragma once

#include <compare>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cakes/tensor.hpp"

namespace cakes {

/// Number of axes with extent > 1.
enum class KernelClass : int { Pointwise = 0, Conv1D = 1, Conv2D = 2, Conv3D = 3 };

std::string_view to_string(KernelClass c);

struct KernelShape {
  int d = 1, h = 1, w = 1;

  KernelShape() = default;
  // Throws ShapeError unless every extent is positive and odd.
  KernelShape(int kd, int kh, int kw);

  long volume() const { return static_cast<long>(d) * h * w; }
  KernelClass kernel_class() const;
  bool fits_within(const KernelShape& base) const { return d <= base.d && h <= base.h && w <= base.w; }
  int extent(int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }

  // "KdxKhxKw", e.g. "1x3x3".
  std::string str() const;
  static KernelShape parse(std::string_view text);

  friend auto operator<=>(const KernelShape&, const KernelShape&) = default;
};

/// Ordered candidate set; the order defines branch indexing and tie-breaks.
class SubKernelSet {
 public:
  SubKernelSet() = default;
  // Validates containment and uniqueness; keeps the given order.
  SubKernelSet(KernelShape base, std::vector<KernelShape> candidates);

  const KernelShape& base() const { return base_; }
  const std::vector<KernelShape>& candidates() const { return candidates_; }
  std::size_t size() const { return candidates_.size(); }
  const KernelShape& operator[](std::size_t i) const { return candidates_.at(i); }
  bool contains(const KernelShape& s) const;
  // Throws std::out_of_range when absent.
  std::size_t index_of(const KernelShape& s) const;

  std::vector<std::string> names() const;

 private:
  KernelShape base_;
  std::vector<KernelShape> candidates_;
};

// Descending volume, then lexicographic (d, h, w).
bool candidate_order(const KernelShape& a, const KernelShape& b);

/// Cartesian product of per-axis extent choices (each choice clipped to the
/// base extent), sorted by candidate_order.
SubKernelSet enumerate_subkernels(const KernelShape& base, const std::set<int>& per_axis_choices,
                                  bool exclude_pointwise);

// 3x3x3 base with {1, 3} per axis, pointwise excluded: the seven 1D/2D/3D shapes.
SubKernelSet default_subkernel_set();

// Cuboid sub-kernels of any extent (including even) fitting in base: kd*kh*kw.
long cuboid_subkernel_options(const KernelShape& base);

/// Zero tensor of the base footprint with w_sub written into the centred
/// window. The last three axes of w_sub are the kernel extents; leading axes
/// (Co, Ci) are preserved.
Tensor embed_subkernel(const Tensor& w_sub, const KernelShape& base);

struct CostModel {
  int flops_per_mac = 2;
  bool include_norm_cost = false;
};

std::int64_t param_count(const KernelShape& shape, std::int64_t in_channels, std::int64_t out_channels);
std::int64_t flop_count(const KernelShape& shape, std::int64_t in_channels, std::int64_t out_channels,
                        std::int64_t output_voxels, const CostModel& model = {});

/// Cost-aware penalty weights, one per candidate. Each dimensionality class
/// gets the mean parameter volume of its members, normalised so the class
/// weights present in the set sum to one; members of a class share the value.
std::vector<double> cost_beta(const SubKernelSet& set);

}  // namespace cakes
