#include "cakes/tasks.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace cakes {

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::PlantedPlane: return "planted_plane";
    case TaskKind::PlantedTemporal: return "planted_temporal";
    case TaskKind::Isotropic3D: return "isotropic_3d";
  }
  return "?";
}

TaskKind task_kind_from_string(std::string_view s) {
  if (s == "planted_plane") return TaskKind::PlantedPlane;
  if (s == "planted_temporal") return TaskKind::PlantedTemporal;
  if (s == "isotropic_3d") return TaskKind::Isotropic3D;
  throw ConfigError("kind", "unknown task kind '" + std::string(s) + "'");
}

namespace {

constexpr std::size_t kPatternClasses = 4;

std::size_t max_classes(HeadKind h) { return h == HeadKind::Segmentation ? kPatternClasses + 1 : kPatternClasses; }

}  // namespace

void SyntheticTaskSpec::validate() const {
  for (std::size_t e : {dims.d, dims.h, dims.w})
    if (e < 4 || e > 32) throw ConfigError("dims", "each extent must lie in [4, 32]");
  if (classes < 2 || classes > max_classes(head))
    throw ConfigError("classes", "must lie in [2, " + std::to_string(max_classes(head)) + "]");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("noise", "must be finite and non-negative");
  if (train_size == 0) throw ConfigError("train_size", "must be positive");
  if (val_size == 0) throw ConfigError("val_size", "must be positive");
  if (head == HeadKind::Segmentation && (dims.h % 2 || dims.w % 2))
    throw ConfigError("dims", "segmentation quadrants need even h and w");
}

Json task_to_json(const SyntheticTaskSpec& s) {
  Json j;
  j["kind"] = std::string(to_string(s.kind));
  j["dims"] = config::triple_to_json(s.dims);
  j["classes"] = s.classes;
  j["noise"] = s.noise;
  j["train_size"] = s.train_size;
  j["val_size"] = s.val_size;
  j["seed"] = s.seed;
  j["head"] = s.head == HeadKind::Segmentation ? "segmentation" : "classification";
  return j;
}

SyntheticTaskSpec task_from_json(const Json& doc) {
  using namespace config;
  reject_unknown(doc, "", {"kind", "dims", "classes", "noise", "train_size", "val_size", "seed", "head"});
  SyntheticTaskSpec s;
  s.kind = task_kind_from_string(get_string(require(doc, "", "kind"), "kind"));
  if (doc.contains("dims")) s.dims = get_triple(doc["dims"], "dims");
  if (doc.contains("classes")) s.classes = get_size(doc["classes"], "classes");
  if (doc.contains("noise")) s.noise = get_double(doc["noise"], "noise");
  if (doc.contains("train_size")) s.train_size = get_size(doc["train_size"], "train_size");
  if (doc.contains("val_size")) s.val_size = get_size(doc["val_size"], "val_size");
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned() && !(doc["seed"].is_number_integer() && doc["seed"].get<long long>() >= 0))
      throw ConfigError("seed", "expected a non-negative integer");
    s.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("head")) {
    const std::string h = get_string(doc["head"], "head");
    if (h == "classification") s.head = HeadKind::Classification;
    else if (h == "segmentation") s.head = HeadKind::Segmentation;
    else throw ConfigError("head", "expected 'classification' or 'segmentation'");
  }
  s.validate();
  return s;
}

// ------------------------------------------------------------------ patterns

namespace {

// Square wave of the given period: +1 on the first half of each period.
double square(long x, long period) {
  long m = x % period;
  if (m < 0) m += period;
  return 2 * m < period ? 1.0 : -1.0;
}

struct PatternParams {
  long phase[3] = {0, 0, 0};
  int sign = 1;
  int axis = 0;  // orientation where the class has one
};

// Per-class description: period per axis (0 = axis unused) and whether the
// class picks an orientation axis.
struct ClassForm {
  long period;
  int rank;  // number of varying axes
};

ClassForm class_form(TaskKind kind, std::size_t cls) {
  switch (kind) {
    case TaskKind::PlantedPlane: return {cls < 2 ? 2L : 4L, (cls % 2 == 0) ? 2 : 1};
    case TaskKind::PlantedTemporal: {
      static constexpr long periods[] = {2, 4, 8, 6};
      return {periods[cls], 1};
    }
    case TaskKind::Isotropic3D: {
      static constexpr ClassForm forms[] = {{2, 3}, {2, 2}, {2, 1}, {4, 3}};
      return forms[cls];
    }
  }
  return {2, 1};
}

// Axes that vary for a given (kind, class, orientation).
std::array<bool, 3> varying_axes(TaskKind kind, std::size_t cls, int axis) {
  const ClassForm f = class_form(kind, cls);
  if (kind == TaskKind::PlantedTemporal) return {true, false, false};
  if (kind == TaskKind::PlantedPlane) {
    if (f.rank == 2) return {false, true, true};
    return {false, axis == 1, axis == 2};
  }
  if (f.rank == 3) return {true, true, true};
  if (f.rank == 1) return {axis == 0, axis == 1, axis == 2};
  return {axis != 0, axis != 1, axis != 2};  // constant along `axis`
}

std::vector<int> orientation_choices(TaskKind kind, std::size_t cls) {
  const ClassForm f = class_form(kind, cls);
  if (kind == TaskKind::PlantedPlane && f.rank == 1) return {1, 2};
  if (kind == TaskKind::Isotropic3D && f.rank < 3) return {0, 1, 2};
  return {0};
}

std::vector<double> render(TaskKind kind, const Triple& dims, std::size_t cls, const PatternParams& p) {
  const ClassForm f = class_form(kind, cls);
  const auto vary = varying_axes(kind, cls, p.axis);
  std::vector<double> out(dims.d * dims.h * dims.w);
  std::size_t i = 0;
  for (std::size_t d = 0; d < dims.d; ++d)
    for (std::size_t h = 0; h < dims.h; ++h)
      for (std::size_t w = 0; w < dims.w; ++w) {
        const long x[3] = {static_cast<long>(d), static_cast<long>(h), static_cast<long>(w)};
        double v = p.sign;
        for (int a = 0; a < 3; ++a)
          if (vary[a]) v *= square(x[a] + p.phase[a], f.period);
        out[i++] = v;
      }
  return out;
}

PatternParams draw_params(TaskKind kind, std::size_t cls, Rng& rng) {
  const ClassForm f = class_form(kind, cls);
  PatternParams p;
  std::uniform_int_distribution<long> phase(0, f.period - 1);
  for (auto& ph : p.phase) ph = phase(rng);
  p.sign = std::bernoulli_distribution(0.5)(rng) ? 1 : -1;
  const auto axes = orientation_choices(kind, cls);
  p.axis = axes[std::uniform_int_distribution<std::size_t>(0, axes.size() - 1)(rng)];
  return p;
}

}  // namespace

std::vector<double> pattern_field(TaskKind kind, const Triple& dims, std::size_t cls, Rng& rng) {
  if (cls >= kPatternClasses) throw std::out_of_range("pattern class out of range");
  return render(kind, dims, cls, draw_params(kind, cls, rng));
}

std::size_t Dataset::count(Split s) const {
  return (s == Split::Train ? train_x.size() : val_x.size()) / spec.voxels();
}

std::span<const double> Dataset::volume(Split s, std::size_t i) const {
  const auto& x = s == Split::Train ? train_x : val_x;
  return std::span<const double>(x).subspan(i * spec.voxels(), spec.voxels());
}

std::span<const int> Dataset::labels(Split s, std::size_t i) const {
  const auto& y = s == Split::Train ? train_y : val_y;
  const std::size_t k = labels_per_sample();
  return std::span<const int>(y).subspan(i * k, k);
}

Dataset generate(const SyntheticTaskSpec& spec) {
  spec.validate();
  Dataset data;
  data.spec = spec;
  const std::size_t V = spec.voxels(), K = spec.classes;
  const bool seg = spec.head == HeadKind::Segmentation;
  for (int split = 0; split < 2; ++split) {
    const std::size_t n = split == 0 ? spec.train_size : spec.val_size;
    auto& xs = split == 0 ? data.train_x : data.val_x;
    auto& ys = split == 0 ? data.train_y : data.val_y;
    // Exactly balanced class sequence, then shuffled.
    std::vector<std::size_t> cls(n);
    for (std::size_t i = 0; i < n; ++i) cls[i] = i % K;
    Rng order(derive_seed(spec.seed, 100 + split));
    std::shuffle(cls.begin(), cls.end(), order);
    xs.assign(n * V, 0.0);
    ys.assign(n * (seg ? V : 1), 0);
    parallel_for(n, [&](std::size_t i) {
      Rng rng(derive_seed(derive_seed(spec.seed, split), i));
      double* x = xs.data() + i * V;
      if (!seg) {
        auto f = render(spec.kind, spec.dims, cls[i], draw_params(spec.kind, cls[i], rng));
        std::copy(f.begin(), f.end(), x);
        ys[i] = static_cast<int>(cls[i]);
      } else {
        std::array<std::size_t, 4> quad;
        for (std::size_t q = 0; q < 4; ++q) quad[q] = (cls[i] + q) % K;
        std::shuffle(quad.begin(), quad.end(), rng);
        int* y = ys.data() + i * V;
        std::array<std::vector<double>, 4> fields;
        for (std::size_t q = 0; q < 4; ++q)
          if (quad[q] > 0)
            fields[q] = render(spec.kind, spec.dims, quad[q] - 1, draw_params(spec.kind, quad[q] - 1, rng));
        std::size_t idx = 0;
        for (std::size_t d = 0; d < spec.dims.d; ++d)
          for (std::size_t h = 0; h < spec.dims.h; ++h)
            for (std::size_t w = 0; w < spec.dims.w; ++w, ++idx) {
              const std::size_t q = (h >= spec.dims.h / 2 ? 2 : 0) + (w >= spec.dims.w / 2 ? 1 : 0);
              y[idx] = static_cast<int>(quad[q]);
              x[idx] = quad[q] > 0 ? fields[q][idx] : 0.0;
            }
      }
      if (spec.noise > 0.0) {
        std::normal_distribution<double> noise(0.0, spec.noise);
        for (std::size_t v = 0; v < V; ++v) x[v] += noise(rng);
      }
    });
  }
  return data;
}

// ------------------------------------------------------------------ cache

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

namespace {

template <typename T>
void append_le(std::vector<unsigned char>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = std::bit_cast<U>(value);
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<unsigned char>(bits >> (8 * b)));
}

template <typename T>
T read_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) bits |= static_cast<U>(p[b]) << (8 * b);
  return std::bit_cast<T>(bits);
}

}  // namespace

void save_dataset(const Dataset& data, const std::string& prefix) {
  std::vector<unsigned char> bytes;
  for (const auto* v : {&data.train_x, &data.val_x})
    for (double x : *v) append_le(bytes, x);
  for (const auto* v : {&data.train_y, &data.val_y})
    for (int y : *v) append_le(bytes, static_cast<std::int32_t>(y));
  {
    std::ofstream out(prefix + ".bin", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + prefix + ".bin");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  Json side;
  side["format"] = "cakes-dataset-v1";
  side["task"] = task_to_json(data.spec);
  side["sha256"] = sha256_hex(bytes);
  side["bytes"] = bytes.size();
  config::write_file(prefix + ".json", side);
}

Dataset load_dataset(const std::string& prefix) {
  Json side = config::read_file(prefix + ".json");
  config::reject_unknown(side, "", {"format", "task", "sha256", "bytes"});
  Dataset d;
  d.spec = task_from_json(config::require(side, "", "task"));
  std::ifstream in(prefix + ".bin", std::ios::binary);
  if (!in) throw ConfigError(prefix + ".bin", "cannot open file");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (sha256_hex(bytes) != config::get_string(config::require(side, "", "sha256"), "sha256"))
    throw ConfigError(prefix + ".bin", "checksum mismatch");
  const std::size_t V = d.spec.voxels(), L = d.spec.head == HeadKind::Segmentation ? V : 1;
  const std::size_t nt = d.spec.train_size, nv = d.spec.val_size;
  if (bytes.size() != (nt + nv) * (V * 8 + L * 4)) throw ConfigError(prefix + ".bin", "unexpected size");
  const unsigned char* p = bytes.data();
  d.train_x.resize(nt * V);
  d.val_x.resize(nv * V);
  d.train_y.resize(nt * L);
  d.val_y.resize(nv * L);
  for (auto* v : {&d.train_x, &d.val_x})
    for (double& x : *v) x = read_le<double>(p), p += 8;
  for (auto* v : {&d.train_y, &d.val_y})
    for (int& y : *v) y = read_le<std::int32_t>(p), p += 4;
  return d;
}

// ------------------------------------------------------------------ augmentation

namespace {

template <typename T>
std::vector<T> transform_impl(std::span<const T> v, std::size_t channels, const Triple& dims,
                              const VolumeTransform& t) {
  const std::size_t n[3] = {dims.d, dims.h, dims.w};
  const std::size_t turns = static_cast<std::size_t>(((t.quarter_turns % 4) + 4) % 4);
  if (turns && n[t.plane_a] != n[t.plane_b]) throw ShapeError("rotation plane needs equal extents");
  const std::size_t V = n[0] * n[1] * n[2];
  std::vector<T> out(v.size());
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t d = 0; d < n[0]; ++d)
      for (std::size_t h = 0; h < n[1]; ++h)
        for (std::size_t w = 0; w < n[2]; ++w) {
          std::size_t x[3] = {d, h, w};
          for (int a = 0; a < 3; ++a)
            if (t.flip[a]) x[a] = n[a] - 1 - x[a];
          for (std::size_t k = 0; k < turns; ++k) {
            const std::size_t ia = x[t.plane_a], ib = x[t.plane_b];
            x[t.plane_a] = n[t.plane_b] - 1 - ib;
            x[t.plane_b] = ia;
          }
          out[c * V + (x[0] * n[1] + x[1]) * n[2] + x[2]] = v[c * V + (d * n[1] + h) * n[2] + w];
        }
  return out;
}

std::vector<VolumeTransform> allowed_transforms(TaskKind kind, const Triple& dims) {
  std::vector<std::pair<int, int>> planes;
  if (dims.h == dims.w) planes.push_back({1, 2});
  if (kind == TaskKind::Isotropic3D) {
    if (dims.d == dims.h) planes.push_back({0, 1});
    if (dims.d == dims.w) planes.push_back({0, 2});
  }
  std::vector<VolumeTransform> out;
  for (int mask = 0; mask < 8; ++mask) {
    VolumeTransform t;
    for (int a = 0; a < 3; ++a) t.flip[a] = (mask >> a) & 1;
    out.push_back(t);
    for (auto [a, b] : planes)
      for (int k = 1; k < 4; ++k) {
        VolumeTransform r = t;
        r.plane_a = a;
        r.plane_b = b;
        r.quarter_turns = k;
        out.push_back(r);
      }
  }
  return out;
}

}  // namespace

std::vector<double> apply_transform(std::span<const double> v, std::size_t channels, const Triple& dims,
                                    const VolumeTransform& t) {
  return transform_impl(v, channels, dims, t);
}

std::vector<int> apply_transform(std::span<const int> v, const Triple& dims, const VolumeTransform& t) {
  return transform_impl(v, 1, dims, t);
}

VolumeTransform random_transform(TaskKind kind, const Triple& dims, Rng& rng) {
  const auto all = allowed_transforms(kind, dims);
  return all[std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(rng)];
}

bool augmentation_self_check(TaskKind kind, const Triple& dims) {
  // Every parameter draw of every class.
  std::vector<std::vector<std::vector<double>>> bank(kPatternClasses);
  for (std::size_t c = 0; c < kPatternClasses; ++c) {
    const long P = class_form(kind, c).period;
    for (int axis : orientation_choices(kind, c))
      for (int sign : {1, -1})
        for (long a = 0; a < P; ++a)
          for (long b = 0; b < P; ++b)
            for (long e = 0; e < P; ++e) {
              PatternParams p;
              p.phase[0] = a, p.phase[1] = b, p.phase[2] = e, p.sign = sign, p.axis = axis;
              auto f = render(kind, dims, c, p);
              if (std::find(bank[c].begin(), bank[c].end(), f) == bank[c].end()) bank[c].push_back(std::move(f));
            }
  }
  auto class_of = [&](const std::vector<double>& f) -> int {
    int found = -1;
    for (std::size_t c = 0; c < kPatternClasses; ++c)
      if (std::find(bank[c].begin(), bank[c].end(), f) != bank[c].end()) {
        if (found >= 0) return -2;  // ambiguous between classes
        found = static_cast<int>(c);
      }
    return found;
  };
  for (std::size_t c = 0; c < kPatternClasses; ++c)
    for (const auto& f : bank[c]) {
      if (class_of(f) != static_cast<int>(c)) return false;
      for (const auto& t : allowed_transforms(kind, dims))
        if (class_of(apply_transform(f, 1, dims, t)) != static_cast<int>(c)) return false;
    }
  return true;
}

// ------------------------------------------------------------------ metrics

double dsc(std::span<const std::uint8_t> prediction, std::span<const std::uint8_t> truth) {
  if (prediction.size() != truth.size()) throw ShapeError("dsc: mask sizes differ");
  std::size_t inter = 0, py = 0, pz = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool y = prediction[i] != 0, z = truth[i] != 0;
    inter += y && z;
    py += y;
    pz += z;
  }
  if (py + pz == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(py + pz);
}

Tensor sliding_window_infer(const PredictFn& predict, const Tensor& volume, const Triple& patch, const Triple& stride) {
  const Shape& s = volume.shape();
  if (s.size() != 5 || s[0] != 1) throw ShapeError("sliding_window_infer: volume must be [1, C, D, H, W]");
  const std::size_t C = s[1], n[3] = {s[2], s[3], s[4]};
  const std::size_t p[3] = {patch.d, patch.h, patch.w}, st[3] = {stride.d, stride.h, stride.w};
  std::vector<std::size_t> starts[3];
  for (int a = 0; a < 3; ++a) {
    if (st[a] == 0) throw std::invalid_argument("sliding_window_infer: stride must be positive");
    if (p[a] == 0 || p[a] > n[a]) throw std::invalid_argument("sliding_window_infer: patch exceeds the volume");
    if (st[a] > p[a]) throw std::invalid_argument("sliding_window_infer: stride exceeds the patch");
    for (std::size_t o = 0;; o += st[a]) {
      const std::size_t clamped = std::min(o, n[a] - p[a]);
      if (starts[a].empty() || starts[a].back() != clamped) starts[a].push_back(clamped);
      if (clamped + p[a] >= n[a]) break;
    }
  }
  const std::size_t V = n[0] * n[1] * n[2], PV = p[0] * p[1] * p[2];
  std::vector<double> acc, hits(V, 0.0);
  std::size_t K = 0;
  auto x = volume.values();
  for (std::size_t od : starts[0])
    for (std::size_t oh : starts[1])
      for (std::size_t ow : starts[2]) {
        std::vector<double> crop(C * PV);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t d = 0; d < p[0]; ++d)
            for (std::size_t h = 0; h < p[1]; ++h)
              for (std::size_t w = 0; w < p[2]; ++w)
                crop[((c * p[0] + d) * p[1] + h) * p[2] + w] =
                    x[((c * n[0] + od + d) * n[1] + oh + h) * n[2] + ow + w];
        Tensor y = predict(Tensor({1, C, p[0], p[1], p[2]}, std::move(crop)));
        if (y.rank() != 5 || y.dim(0) != 1 || y.dim(2) != p[0] || y.dim(3) != p[1] || y.dim(4) != p[2])
          throw ShapeError("sliding_window_infer: predictor must return [1, K, patch]");
        if (K == 0) {
          K = y.dim(1);
          acc.assign(K * V, 0.0);
        }
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t d = 0; d < p[0]; ++d)
            for (std::size_t h = 0; h < p[1]; ++h)
              for (std::size_t w = 0; w < p[2]; ++w) {
                const std::size_t dst = ((od + d) * n[1] + oh + h) * n[2] + ow + w;
                acc[k * V + dst] += y[((k * p[0] + d) * p[1] + h) * p[2] + w];
                if (k == 0) hits[dst] += 1.0;
              }
      }
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t v = 0; v < V; ++v) acc[k * V + v] /= hits[v];
  return Tensor({1, K, n[0], n[1], n[2]}, std::move(acc));
}

Tensor task_loss(const Tensor& logits, std::span<const int> labels, HeadKind head) {
  Tensor ce = softmax_cross_entropy(logits, labels);
  if (head == HeadKind::Classification) return ce;
  return add(ce, dice_loss(softmax(logits), labels));
}

namespace {

std::vector<std::size_t> argmax_channels(const Tensor& logits) {
  const std::size_t N = logits.dim(0), K = logits.dim(1), S = logits.size() / (N * K);
  std::vector<std::size_t> out(N * S);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t s = 0; s < S; ++s) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits[(n * K + k) * S + s] > logits[(n * K + best) * S + s]) best = k;
      out[n * S + s] = best;
    }
  return out;
}

}  // namespace

Tensor make_batch(const Dataset& data, Split split, std::span<const std::size_t> indices, std::vector<int>& labels,
                  Rng* augment_rng) {
  const std::size_t V = data.spec.voxels();
  std::vector<double> x(indices.size() * V);
  labels.clear();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto vol = data.volume(split, indices[b]);
    auto lab = data.labels(split, indices[b]);
    if (augment_rng) {
      const VolumeTransform t = random_transform(data.spec.kind, data.spec.dims, *augment_rng);
      auto tv = apply_transform(vol, 1, data.spec.dims, t);
      std::copy(tv.begin(), tv.end(), x.begin() + b * V);
      if (data.spec.head == HeadKind::Segmentation) {
        auto tl = apply_transform(lab, data.spec.dims, t);
        labels.insert(labels.end(), tl.begin(), tl.end());
      } else {
        labels.insert(labels.end(), lab.begin(), lab.end());
      }
    } else {
      std::copy(vol.begin(), vol.end(), x.begin() + b * V);
      labels.insert(labels.end(), lab.begin(), lab.end());
    }
  }
  return Tensor({indices.size(), 1, data.spec.dims.d, data.spec.dims.h, data.spec.dims.w}, std::move(x));
}

EvalResult evaluate(const PredictFn& predict, const Dataset& data, Split split, const Inference& inference) {
  NoGradGuard guard;
  EvalResult r;
  r.kind = data.spec.head;
  const std::size_t n = data.count(split), K = data.spec.classes;
  const bool seg = r.kind == HeadKind::Segmentation;
  if (seg) r.per_class_dsc.assign(K - 1, 0.0);
  std::size_t correct = 0;
  double loss_sum = 0.0;
  const std::size_t chunk = inference.sliding_window ? 1 : 8;
  for (std::size_t first = 0; first < n; first += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = first; i < std::min(n, first + chunk); ++i) idx.push_back(i);
    std::vector<int> labels;
    Tensor x = make_batch(data, split, idx, labels, nullptr);
    Tensor logits = inference.sliding_window && seg
                        ? sliding_window_infer(predict, x, inference.patch, inference.stride)
                        : predict(x);
    loss_sum += task_loss(logits, labels, r.kind).item() * static_cast<double>(idx.size());
    auto pred = argmax_channels(logits);
    if (!seg) {
      for (std::size_t b = 0; b < idx.size(); ++b) correct += static_cast<int>(pred[b]) == labels[b];
      continue;
    }
    const std::size_t V = data.spec.voxels();
    for (std::size_t b = 0; b < idx.size(); ++b)
      for (std::size_t k = 1; k < K; ++k) {
        std::vector<std::uint8_t> py(V), pz(V);
        for (std::size_t v = 0; v < V; ++v) {
          py[v] = pred[b * V + v] == k;
          pz[v] = labels[b * V + v] == static_cast<int>(k);
        }
        r.per_class_dsc[k - 1] += dsc(py, pz);
      }
  }
  r.samples = n;
  r.loss = loss_sum / static_cast<double>(n);
  if (!seg) {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  } else {
    for (auto& v : r.per_class_dsc) v /= static_cast<double>(n);
    r.mean_dsc = std::accumulate(r.per_class_dsc.begin(), r.per_class_dsc.end(), 0.0) /
                 static_cast<double>(r.per_class_dsc.size());
  }
  return r;
}

Json eval_to_json(const EvalResult& r) {
  Json j;
  j["task_head"] = r.kind == HeadKind::Segmentation ? "segmentation" : "classification";
  j["samples"] = r.samples;
  j["loss"] = r.loss;
  if (r.kind == HeadKind::Classification) {
    j["accuracy"] = r.accuracy;
  } else {
    j["per_class_dsc"] = r.per_class_dsc;
    j["mean_dsc"] = r.mean_dsc;
  }
  return j;
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string eval_csv_header(const EvalResult& r) {
  std::string h = "task_head,samples,loss";
  if (r.kind == HeadKind::Classification) return h + ",accuracy";
  for (std::size_t k = 0; k < r.per_class_dsc.size(); ++k) h += ",dsc_class" + std::to_string(k + 1);
  return h + ",mean_dsc";
}

std::string eval_csv_row(const EvalResult& r) {
  std::string s = std::string(r.kind == HeadKind::Classification ? "classification" : "segmentation") + "," +
                  std::to_string(r.samples) + "," + num(r.loss);
  if (r.kind == HeadKind::Classification) return s + "," + num(r.accuracy);
  for (double d : r.per_class_dsc) s += "," + num(d);
  return s + "," + num(r.mean_dsc);
}

// ------------------------------------------------------------------ training

std::string TrainLog::to_csv() const {
  std::string out = "iteration,learning_rate,loss,task_loss,penalty\n";
  for (const auto& r : rows)
    out += std::to_string(r.iteration) + "," + num(r.learning_rate) + "," + num(r.loss) + "," + num(r.task_loss) +
           "," + num(r.penalty) + "\n";
  return out;
}

TrainLog run_training(const std::vector<Tensor>& params, const TrainForward& forward, const PenaltyFn& penalty,
                      const Dataset& data, const TrainConfig& cfg) {
  if (cfg.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  TrainLog log;
  if (cfg.iterations == 0) return log;
  SgdOptimizer opt(params, cfg.optimizer, cfg.iterations);
  Rng order_rng(derive_seed(cfg.seed, 11));
  Rng augment_rng(derive_seed(cfg.seed, 12));
  const std::size_t n = data.count(Split::Train);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  std::vector<int> labels;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<std::size_t> batch;
    while (batch.size() < cfg.batch_size) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    Tensor x = make_batch(data, Split::Train, batch, labels, cfg.augment ? &augment_rng : nullptr);
    LogRow row;
    row.iteration = it;
    row.learning_rate = opt.learning_rate();
    Tensor task = task_loss(forward(x, it), labels, data.spec.head);
    Tensor total = task;
    if (penalty) {
      Tensor p = penalty();
      if (p.defined()) {
        row.penalty = p.item();
        total = add(task, p);
      }
    }
    row.task_loss = task.item();
    row.loss = total.item();
    if (!std::isfinite(row.loss)) {
      log.rows.push_back(row);
      throw DivergenceError("non-finite loss at iteration " + std::to_string(it), log);
    }
    try {
      opt.zero_grad();
      total.backward();
      opt.step();
    } catch (const NumericalError& e) {
      log.rows.push_back(row);
      throw DivergenceError(std::string(e.what()) + " at iteration " + std::to_string(it), log);
    }
    log.rows.push_back(row);
  }
  return log;
}

}  // namespace cakes
