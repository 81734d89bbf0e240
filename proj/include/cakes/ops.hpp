#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "cakes/tensor.hpp"

namespace cakes {

struct Triple {
  std::size_t d = 1, h = 1, w = 1;
  friend bool operator==(const Triple&, const Triple&) = default;
};

struct ConvOptions {
  Triple stride{1, 1, 1};
  // Unset means "same": (k - 1) / 2 per axis.
  std::optional<Triple> padding;
};

/// Cross-correlation of input [N, Ci, D, H, W] with weight [Co, Ci, kd, kh, kw].
/// Kernel extents must be odd. Lower-dimensional convolutions are expressed
/// with unit extents.
Tensor conv3d(const Tensor& input, const Tensor& weight, const ConvOptions& options = {});

// Output extent of one axis: floor((in + 2 pad - k) / stride) + 1.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad);

// Adds bias[c] to every element of channel c (axis 1).
Tensor add_channel_bias(const Tensor& input, const Tensor& bias);
// Multiplies channel c (axis 1) by scale[c].
Tensor channel_scale(const Tensor& input, const Tensor& scale);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& a);

// Sum_i weights[i] * |a_i|, subgradient 0 at a_i = 0.
Tensor weighted_abs_sum(const Tensor& a, std::span<const double> weights);

// [N, C, ...] -> [N, C]
Tensor global_avg_pool(const Tensor& input);

// [N, F] x [O, F]^T + [O]; bias may be undefined.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Softmax over axis 1.
Tensor softmax(const Tensor& logits);

/// Mean negative log-likelihood. logits are [N, K] with one label per sample
/// or [N, K, ...] with one label per voxel (labels flattened as [N, ...]).
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// 1 - soft Dice averaged over foreground classes 1..K-1. probabilities are
/// [N, K, ...]; sums run over batch and voxels.
Tensor dice_loss(const Tensor& probabilities, std::span<const int> labels,
                 double smooth = 1e-5);

// Rows of axis 0 selected by index (backward scatters into the source).
Tensor gather_rows(const Tensor& source, std::span<const std::size_t> rows);

/// Builds [N, channels, ...] where channel channel_index[j][k] is taken from
/// channel k of parts[j]. Every output channel must be covered exactly once.
Tensor assemble_channels(const std::vector<Tensor>& parts,
                         const std::vector<std::vector<std::size_t>>& channel_index,
                         std::size_t channels);
Tensor concat_channels(const std::vector<Tensor>& parts);

enum class NormMode { Train, Eval };

struct NormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;

  explicit NormStats(std::size_t channels = 0)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Per-channel (axis 1) batch normalization with affine scale and shift.
/// Train mode uses batch statistics (biased variance) and updates `stats`
/// when provided; eval mode normalizes with the running statistics. When
/// stat_index is non-empty, channel j reads and writes
/// stats entry stat_index[j].
Tensor batch_norm(const Tensor& input, const Tensor& scale, const Tensor& shift,
                  NormStats* stats, NormMode mode, double eps = 1e-5,
                  std::span<const std::size_t> stat_index = {});

namespace debug {
// Test hook: perturbs the backward rule of the named op ("conv", "batch_norm",
// "linear", ...). Empty string restores exact gradients.
void corrupt_backward(std::string_view op);
bool backward_corrupted(std::string_view op);
}  // namespace debug

}  // namespace cakes
