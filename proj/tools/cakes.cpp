// cakes: file-based pipeline driver. One subcommand per stage; every stage
// writes its artifacts plus a manifest.json into --out.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cakes/checkpoint.hpp"
#include "cakes/gradcheck.hpp"
#include "cakes/plot.hpp"
#include "cakes/search.hpp"

namespace fs = std::filesystem;
using namespace cakes;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitCheck = 4;

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path, "cannot open file");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Json load_json(const std::string& path) {
  try {
    return config::read_file(path);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path, std::string("invalid JSON: ") + e.what());
  }
}

// Records inputs and every artifact written into the output directory.
class Manifest {
 public:
  Manifest(std::string command, fs::path out) : command_(std::move(command)), out_(std::move(out)), started_(utc_now()) {
    fs::create_directories(out_);
  }
  void input(const std::string& role, const std::string& path) {
    if (path.empty()) return;
    inputs_[role] = {{"path", path}, {"sha256", sha256_file(path)}};
  }
  void setting(const std::string& key, Json value) { settings_[key] = std::move(value); }
  void json(const std::string& file, const Json& doc) {
    config::write_file((out_ / file).string(), doc);
    artifacts_.push_back(file);
  }
  void text(const std::string& file, const std::string& body) {
    write_text(out_ / file, body);
    artifacts_.push_back(file);
  }
  void finish() {
    Json m;
    m["command"] = command_;
    m["inputs"] = inputs_;
    m["settings"] = settings_;
    m["out"] = out_.string();
    m["started"] = started_;
    m["finished"] = utc_now();
    Json arts = Json::object();
    for (const auto& f : artifacts_) arts[f] = sha256_file((out_ / f).string());
    m["artifacts"] = arts;
    config::write_file((out_ / "manifest.json").string(), m);
  }

 private:
  std::string command_;
  fs::path out_;
  std::string started_;
  Json inputs_ = Json::object(), settings_ = Json::object();
  std::vector<std::string> artifacts_;
};

SubKernelSet parse_candidates(const std::string& list, const KernelShape& base) {
  if (list.empty()) {
    if (base == KernelShape(3, 3, 3)) return default_subkernel_set();
    return enumerate_subkernels(base, {1, std::max({base.d, base.h, base.w})}, true);
  }
  std::vector<KernelShape> shapes;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      shapes.push_back(KernelShape::parse(item));
    } catch (const ShapeError& e) {
      throw ConfigError("--candidates", e.what());
    }
  }
  try {
    return SubKernelSet(base, shapes);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("--candidates", e.what());
  }
}

// Every replaceable layer must share one base kernel for a single set.
KernelShape common_base(const BackboneSpec& spec) {
  const auto repl = spec.replaceable();
  if (repl.empty()) throw ConfigError("layers", "backbone has no replaceable layer");
  for (const ConvSpec* c : repl)
    if (c->kernel != repl.front()->kernel)
      throw ConfigError(c->name, "replaceable layers must share one kernel shape");
  return repl.front()->kernel;
}

SubKernelSet set_from_names(const std::vector<std::string>& names) {
  std::vector<KernelShape> shapes;
  int d = 1, h = 1, w = 1;
  for (const auto& n : names) {
    shapes.push_back(KernelShape::parse(n));
    d = std::max(d, shapes.back().d), h = std::max(h, shapes.back().h), w = std::max(w, shapes.back().w);
  }
  return SubKernelSet(KernelShape(d, h, w), shapes);
}

PredictFn eval_predictor(Network& net) {
  return [&net](const Tensor& x) { return net.forward(x, ForwardContext{NormMode::Eval, nullptr}); };
}

Json metrics_json(Network& net, const Dataset& data, const Inference& inference) {
  Json m;
  m["train"] = eval_to_json(evaluate(eval_predictor(net), data, Split::Train, inference));
  m["val"] = eval_to_json(evaluate(eval_predictor(net), data, Split::Val, inference));
  return m;
}

std::string metrics_csv(Network& net, const Dataset& data, const Inference& inference) {
  auto tr = evaluate(eval_predictor(net), data, Split::Train, inference);
  auto va = evaluate(eval_predictor(net), data, Split::Val, inference);
  return "split," + eval_csv_header(tr) + "\ntrain," + eval_csv_row(tr) + "\nval," + eval_csv_row(va) + "\n";
}

void check_task_backbone(const SyntheticTaskSpec& task, const BackboneSpec& spec) {
  if (spec.in_channels != 1) throw ConfigError("in_channels", "synthetic tasks provide one input channel");
  if (spec.head.kind != task.head) throw ConfigError("head", "backbone head differs from the task head");
  if (spec.head.classes != task.classes) throw ConfigError("head.classes", "backbone classes differ from the task");
  if (spec.head.kind == HeadKind::Classification && !(spec.input_dims == task.dims))
    throw ConfigError("input_dims", "backbone input extent differs from the task volumes");
}

// ------------------------------------------------------------------ commands

struct Common {
  std::string out = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t threads = 1;
};

int cmd_search(const Common& common, const std::string& backbone_path, const std::string& task_path,
               const std::string& search_path, const std::string& mode, const std::optional<double>& lambda,
               const std::optional<std::size_t>& iterations, const std::string& candidates) {
  Manifest manifest("search", common.out);
  manifest.input("backbone", backbone_path);
  manifest.input("task", task_path);
  manifest.input("search", search_path);
  const BackboneSpec spec = backbone_from_json(load_json(backbone_path));
  const SyntheticTaskSpec task = task_from_json(load_json(task_path));
  check_task_backbone(task, spec);
  SearchConfig cfg = search_path.empty() ? SearchConfig{} : search_config_from_json(load_json(search_path));
  if (!mode.empty()) cfg.mode = search_mode_from_string(mode);
  if (lambda) cfg.lambda = *lambda;
  if (iterations) cfg.train.iterations = *iterations;
  if (common.seed_set) cfg.train.seed = common.seed;
  if (cfg.mode != SearchMode::CostPriority) cfg.beta.reset();
  const SubKernelSet set = parse_candidates(candidates, common_base(spec));
  cfg.validate(set);
  manifest.setting("search", search_config_to_json(cfg));
  manifest.setting("candidates", set.names());
  manifest.setting("threads", common.threads);

  const Dataset data = generate(task);
  SuperNet net(spec, set, cfg.mode, derive_seed(cfg.train.seed, 1));
  SearchResult result;
  try {
    result = run_search(net, data, cfg);
  } catch (const DivergenceError& e) {
    manifest.text("log.csv", e.log().to_csv());
    manifest.finish();
    throw;
  }
  manifest.json("alpha.json", alpha_to_json(result.alpha, cfg.mode));
  manifest.text("log.csv", result.log.to_csv());
  manifest.json("supernet.json", supernet_checkpoint_to_json(net));
  manifest.finish();
  std::cout << "search (" << to_string(cfg.mode) << ") finished: " << result.log.rows.size() << " iterations, alpha in "
            << (fs::path(common.out) / "alpha.json").string() << "\n";
  return 0;
}

int cmd_finalize(const Common& common, const std::string& alpha_path, const std::string& backbone_path) {
  Manifest manifest("finalize", common.out);
  manifest.input("alpha", alpha_path);
  manifest.input("backbone", backbone_path);
  const AlphaSnapshot alpha = alpha_from_json(load_json(alpha_path));
  const SubKernelSet set = set_from_names(alpha.candidates);
  ReplacementConfig cfg = finalize(alpha, set);
  if (!backbone_path.empty()) cfg.validate(backbone_from_json(load_json(backbone_path)));
  manifest.json("config.json", replacement_to_json(cfg));
  manifest.finish();
  std::cout << "config written to " << (fs::path(common.out) / "config.json").string() << "\n";
  return 0;
}

int cmd_manual(const Common& common, const std::string& backbone_path, const std::string& scheme,
               const std::string& candidates) {
  Manifest manifest("manual", common.out);
  manifest.input("backbone", backbone_path);
  manifest.setting("scheme", scheme);
  const BackboneSpec spec = backbone_from_json(load_json(backbone_path));
  const SubKernelSet set = parse_candidates(candidates, common_base(spec));
  manifest.json("config.json", replacement_to_json(manual_config(spec, set, manual_scheme_from_string(scheme))));
  manifest.finish();
  return 0;
}

int cmd_cost_report(const Common& common, const std::string& backbone_path, const std::string& config_path) {
  Manifest manifest("cost-report", common.out);
  manifest.input("backbone", backbone_path);
  manifest.input("config", config_path);
  const BackboneSpec spec = backbone_from_json(load_json(backbone_path));
  const ReplacementConfig cfg = replacement_from_json(load_json(config_path));
  const CostReport r = cost_report(spec, cfg);
  manifest.json("report.json", cost_report_to_json(r));
  manifest.text("report.csv", cost_report_csv(r));
  manifest.finish();
  std::printf("params %lld (replaceable %lld)  flops %lld  classes 1D %zu / 2D %zu / 3D %zu  axes d %zu h %zu w %zu\n",
              static_cast<long long>(r.total_params), static_cast<long long>(r.replaceable_params),
              static_cast<long long>(r.total_flops), r.class_counts[1], r.class_counts[2], r.class_counts[3],
              r.axis_counts[0], r.axis_counts[1], r.axis_counts[2]);
  return 0;
}

int cmd_train_final(const Common& common, const std::string& backbone_path, const std::string& config_path,
                    const std::string& task_path, const std::string& train_path,
                    const std::optional<std::size_t>& iterations) {
  Manifest manifest("train-final", common.out);
  manifest.input("backbone", backbone_path);
  manifest.input("config", config_path);
  manifest.input("task", task_path);
  manifest.input("train", train_path);
  const BackboneSpec spec = backbone_from_json(load_json(backbone_path));
  const ReplacementConfig cfg = replacement_from_json(load_json(config_path));
  const SyntheticTaskSpec task = task_from_json(load_json(task_path));
  check_task_backbone(task, spec);
  FinalTrainConfig tc = train_path.empty() ? FinalTrainConfig{} : final_train_config_from_json(load_json(train_path));
  if (iterations) tc.train.iterations = *iterations;
  if (common.seed_set) tc.train.seed = common.seed;
  manifest.setting("train", final_train_config_to_json(tc));
  manifest.setting("threads", common.threads);

  const Dataset data = generate(task);
  Network net = build_final_network(spec, cfg, derive_seed(tc.train.seed, 2));
  std::vector<Tensor> params;
  for (auto& p : net.parameters()) params.push_back(p.tensor);
  TrainLog log;
  try {
    log = run_training(
        params, [&](const Tensor& x, std::size_t) { return net.forward(x); }, {}, data, tc.train);
  } catch (const DivergenceError& e) {
    manifest.text("log.csv", e.log().to_csv());
    manifest.finish();
    throw;
  }
  Json ckpt = final_checkpoint_to_json(spec, cfg, net);
  ckpt["inference"] = final_train_config_to_json(tc)["inference"];
  manifest.json("final.json", ckpt);
  manifest.text("log.csv", log.to_csv());
  manifest.json("metrics.json", metrics_json(net, data, tc.inference));
  manifest.text("metrics.csv", metrics_csv(net, data, tc.inference));
  manifest.finish();
  std::cout << "metrics written to " << (fs::path(common.out) / "metrics.json").string() << "\n";
  return 0;
}

int cmd_eval(const Common& common, const std::string& checkpoint_path, const std::string& task_path) {
  Manifest manifest("eval", common.out);
  manifest.input("checkpoint", checkpoint_path);
  manifest.input("task", task_path);
  Json doc = load_json(checkpoint_path);
  Inference inference;
  if (doc.contains("inference")) {
    Json wrapper;
    wrapper["inference"] = doc["inference"];
    inference = final_train_config_from_json(wrapper).inference;
    doc.erase("inference");
  }
  const FinalCheckpoint ckpt = final_checkpoint_from_json(doc);
  const SyntheticTaskSpec task = task_from_json(load_json(task_path));
  check_task_backbone(task, ckpt.backbone);
  Network net = restore_final_network(ckpt);
  const Dataset data = generate(task);
  manifest.json("metrics.json", metrics_json(net, data, inference));
  manifest.text("metrics.csv", metrics_csv(net, data, inference));
  manifest.finish();
  std::cout << "metrics written to " << (fs::path(common.out) / "metrics.json").string() << "\n";
  return 0;
}

int cmd_plot(const Common& common, const std::string& report_path, const std::string& log_path) {
  if (report_path.empty() == log_path.empty()) throw ConfigError("plot", "give exactly one of --report or --log");
  Manifest manifest("plot", common.out);
  if (!report_path.empty()) {
    manifest.input("report", report_path);
    manifest.text("composition.svg", composition_svg(cost_report_from_json(load_json(report_path))));
  } else {
    manifest.input("log", log_path);
    manifest.text("loss.svg", loss_curve_svg(parse_log_csv(read_text(log_path))));
  }
  manifest.finish();
  return 0;
}

int cmd_gradcheck(const std::string& corrupt, std::size_t cases, std::uint64_t seed) {
  debug::corrupt_backward(corrupt);
  const auto results = run_gradient_suite(cases, seed);
  debug::corrupt_backward("");
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-24s cases %3zu  worst %.3e  %s\n", r.op.c_str(), r.cases, r.worst_error, r.passed ? "PASS" : "FAIL");
    ok = ok && r.passed;
  }
  std::printf("%zu ops checked: %s\n", results.size(), ok ? "all passed" : "FAILED");
  if (!ok) throw CheckFailure("gradient check failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-wise kernel shrinking: search, finalize, cost accounting, training and evaluation"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub, bool with_out = true) {
    if (with_out) sub->add_option("--out", common.out, "output directory")->capture_default_str();
    sub->add_option("--threads", common.threads, "worker threads (1 for reproducible runs)")->capture_default_str();
  };
  auto add_seed = [&](CLI::App* sub) {
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& s) { common.seed = s, common.seed_set = true; }, "RNG seed override");
  };

  std::string backbone, task, search, mode, alpha, config_path, train, checkpoint, report, log_csv, scheme,
      candidates, corrupt;
  std::optional<double> lambda;
  std::optional<std::size_t> iterations;
  std::size_t cases = 20;
  std::uint64_t grad_seed = 2024;

  auto* s = app.add_subcommand("search", "run a performance- or cost-priority search");
  s->add_option("--backbone", backbone, "backbone.json")->required()->check(CLI::ExistingFile);
  s->add_option("--task", task, "task.json")->required()->check(CLI::ExistingFile);
  s->add_option("--search", search, "search.json")->check(CLI::ExistingFile);
  s->add_option("--mode", mode, "perf or cost (overrides search.json)")->check(CLI::IsMember({"perf", "cost"}));
  s->add_option("--lambda", lambda, "penalty coefficient (overrides search.json)");
  s->add_option("--iterations", iterations, "training iterations (overrides search.json)");
  s->add_option("--candidates", candidates, "comma-separated sub-kernel shapes");
  add_seed(s);
  add_common(s);

  auto* f = app.add_subcommand("finalize", "pick one shape per channel from alpha.json");
  f->add_option("--alpha", alpha, "alpha.json")->required()->check(CLI::ExistingFile);
  f->add_option("--backbone", backbone, "backbone.json to validate against")->check(CLI::ExistingFile);
  add_common(f);

  auto* m = app.add_subcommand("manual", "write a hand-designed replacement config");
  m->add_option("--backbone", backbone, "backbone.json")->required()->check(CLI::ExistingFile);
  m->add_option("--scheme", scheme, "uniform | pure2d | pure1d | temporal1d | full3d | p3d")->required();
  m->add_option("--candidates", candidates, "comma-separated sub-kernel shapes");
  add_common(m);

  auto* c = app.add_subcommand("cost-report", "parameter / flop accounting of a config");
  c->add_option("--backbone", backbone, "backbone.json")->required()->check(CLI::ExistingFile);
  c->add_option("--config", config_path, "config.json")->required()->check(CLI::ExistingFile);
  add_common(c);

  auto* t = app.add_subcommand("train-final", "train the shrunk network from scratch");
  t->add_option("--backbone", backbone, "backbone.json")->required()->check(CLI::ExistingFile);
  t->add_option("--config", config_path, "config.json")->required()->check(CLI::ExistingFile);
  t->add_option("--task", task, "task.json")->required()->check(CLI::ExistingFile);
  t->add_option("--train", train, "train.json")->check(CLI::ExistingFile);
  t->add_option("--iterations", iterations, "training iterations (overrides train.json)");
  add_seed(t);
  add_common(t);

  auto* e = app.add_subcommand("eval", "evaluate a trained checkpoint");
  e->add_option("--checkpoint", checkpoint, "final.json")->required()->check(CLI::ExistingFile);
  e->add_option("--task", task, "task.json")->required()->check(CLI::ExistingFile);
  add_common(e);

  auto* p = app.add_subcommand("plot", "SVG of a cost report's layer composition or of a training log");
  p->add_option("--report", report, "report.json")->check(CLI::ExistingFile);
  p->add_option("--log", log_csv, "log.csv")->check(CLI::ExistingFile);
  add_common(p);

  auto* g = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  g->add_option("--corrupt", corrupt, "test hook: perturb the backward rule of this op");
  g->add_option("--cases", cases, "random cases per op")->capture_default_str();
  g->add_option("--seed", grad_seed, "RNG seed")->capture_default_str();
  add_common(g, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    set_num_threads(common.threads);
    if (*s) return cmd_search(common, backbone, task, search, mode, lambda, iterations, candidates);
    if (*f) return cmd_finalize(common, alpha, backbone);
    if (*m) return cmd_manual(common, backbone, scheme, candidates);
    if (*c) return cmd_cost_report(common, backbone, config_path);
    if (*t) return cmd_train_final(common, backbone, config_path, task, train, iterations);
    if (*e) return cmd_eval(common, checkpoint, task);
    if (*p) return cmd_plot(common, report, log_csv);
    if (*g) return cmd_gradcheck(corrupt, cases, grad_seed);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& err) {
    std::cerr << "diverged: " << err.what() << " (partial log kept)\n";
    return kExitDivergence;
  } catch (const NumericalError& err) {
    std::cerr << "numerical error: " << err.what() << "\n";
    return kExitDivergence;
  } catch (const CheckFailure& err) {
    std::cerr << err.what() << "\n";
    return kExitCheck;
  } catch (const std::invalid_argument& err) {
    std::cerr << "invalid input: " << err.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 1;
}
