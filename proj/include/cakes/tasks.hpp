#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cakes/backbone.hpp"
#include "cakes/optim.hpp"
#include "cakes/random.hpp"

namespace cakes {

enum class TaskKind { PlantedPlane, PlantedTemporal, Isotropic3D };

std::string_view to_string(TaskKind k);
TaskKind task_kind_from_string(std::string_view s);

/// Class-conditional pattern banks (at most four pattern classes per kind),
/// each drawn with a random phase, sign and, where relevant, orientation:
///   planted_plane     f(h, w), constant along depth
///   planted_temporal  g(d), constant over the h-w plane
///   isotropic_3d      genuinely 3D textures mixed with lower-rank ones
/// Segmentation volumes split the h-w plane into quadrants, each holding one
/// class (class 0 is the pattern-free background); labels are per voxel.
struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::PlantedPlane;
  Triple dims{16, 16, 16};
  std::size_t classes = 4;
  double noise = 0.1;
  std::size_t train_size = 256;
  std::size_t val_size = 128;
  std::uint64_t seed = 0;
  HeadKind head = HeadKind::Classification;

  void validate() const;
  std::size_t voxels() const { return dims.d * dims.h * dims.w; }
};

Json task_to_json(const SyntheticTaskSpec& s);
SyntheticTaskSpec task_from_json(const Json& doc);

enum class Split { Train, Val };

struct Dataset {
  SyntheticTaskSpec spec;
  std::vector<double> train_x, val_x;  // [N, 1, D, H, W]
  std::vector<int> train_y, val_y;     // N labels, or N * D * H * W voxel labels

  std::size_t count(Split s) const;
  std::span<const double> volume(Split s, std::size_t i) const;
  std::span<const int> labels(Split s, std::size_t i) const;
  std::size_t labels_per_sample() const { return spec.head == HeadKind::Segmentation ? spec.voxels() : 1; }
};

Dataset generate(const SyntheticTaskSpec& spec);

/// Clean (noise-free) pattern of class `cls` with the given draw; exposed for
/// closure checks. Background class of segmentation tasks is the zero field.
std::vector<double> pattern_field(TaskKind kind, const Triple& dims, std::size_t cls, Rng& rng);

// Dataset cache: <prefix>.bin holds little-endian f64 voxels then int32
// labels (train then val); <prefix>.json holds the task settings and a SHA-256 digest.
void save_dataset(const Dataset& data, const std::string& prefix);
Dataset load_dataset(const std::string& prefix);
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::string& path);

// ------------------------------------------------------------------ augmentation

/// Axis-aligned rigid transform of a volume: optional flips per axis, then
/// `quarter_turns` rotations in the plane of (axis_a, axis_b).
struct VolumeTransform {
  bool flip[3] = {false, false, false};
  int plane_a = 1, plane_b = 2;
  int quarter_turns = 0;
};

// Transforms a [C, D, H, W] block (one sample) in place of a copy.
std::vector<double> apply_transform(std::span<const double> v, std::size_t channels, const Triple& dims,
                                    const VolumeTransform& t);
std::vector<int> apply_transform(std::span<const int> v, const Triple& dims, const VolumeTransform& t);

/// Transforms that leave the planted label unchanged for this kind: h-w
/// rotations plus all flips for planted tasks; every plane for isotropic
/// cubes.
VolumeTransform random_transform(TaskKind kind, const Triple& dims, Rng& rng);

/// Verifies that every allowed transform maps every pattern of a class onto
/// a pattern of the same class (over the full phase/sign/orientation
/// enumeration). Returns false on any violation.
bool augmentation_self_check(TaskKind kind, const Triple& dims);

// ------------------------------------------------------------------ metrics

/// 2 |Y n Z| / (|Y| + |Z|) over binary masks; 1 when both are empty.
double dsc(std::span<const std::uint8_t> prediction, std::span<const std::uint8_t> truth);

using PredictFn = std::function<Tensor(const Tensor& x)>;

/// Averages logits of overlapping patches; the last window on each axis is
/// clamped to the volume bound. volume is [1, C, D, H, W].
Tensor sliding_window_infer(const PredictFn& predict, const Tensor& volume, const Triple& patch, const Triple& stride);

struct Inference {
  bool sliding_window = false;
  Triple patch{16, 16, 16};
  Triple stride{8, 8, 8};
};

struct EvalResult {
  HeadKind kind = HeadKind::Classification;
  double accuracy = 0.0;              // classification
  std::vector<double> per_class_dsc;  // segmentation: classes 1..K-1
  double mean_dsc = 0.0;
  double loss = 0.0;
  std::size_t samples = 0;
};

EvalResult evaluate(const PredictFn& predict, const Dataset& data, Split split, const Inference& inference = {});
Json eval_to_json(const EvalResult& r);
std::string eval_csv_header(const EvalResult& r);
std::string eval_csv_row(const EvalResult& r);

// ------------------------------------------------------------------ training

struct TrainConfig {
  std::size_t iterations = 1000;
  std::size_t batch_size = 8;
  SgdSettings optimizer;
  std::uint64_t seed = 0;
  bool augment = true;
};

struct LogRow {
  std::size_t iteration = 0;
  double learning_rate = 0.0;
  double loss = 0.0;
  double task_loss = 0.0;
  double penalty = 0.0;
};

struct TrainLog {
  std::vector<LogRow> rows;
  std::string to_csv() const;
};

/// Non-finite loss or gradient during training; carries the partial log.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, TrainLog partial) : NumericalError(what), log_(std::move(partial)) {}
  const TrainLog& log() const { return log_; }

 private:
  TrainLog log_;
};

// Cross-entropy for classification; cross-entropy + dice for segmentation.
Tensor task_loss(const Tensor& logits, std::span<const int> labels, HeadKind head);

using TrainForward = std::function<Tensor(const Tensor& x, std::size_t iteration)>;
using PenaltyFn = std::function<Tensor()>;

/// Generic SGD loop: per iteration draws a minibatch (epoch-wise shuffles),
/// optionally augments it, runs forward, adds the optional penalty, and
/// steps the optimizer over `params`.
TrainLog run_training(const std::vector<Tensor>& params, const TrainForward& forward, const PenaltyFn& penalty,
                      const Dataset& data, const TrainConfig& cfg);

// Assembles a minibatch tensor and its labels from the listed samples.
Tensor make_batch(const Dataset& data, Split split, std::span<const std::size_t> indices, std::vector<int>& labels,
                  Rng* augment_rng);

}  // namespace cakes
