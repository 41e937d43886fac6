// eapgp: circuit discovery on a tiny trainable transformer.
//
// Subcommands: train, discover, sweep, saturate, compare, edge-count,
// export-dot. Every run is deterministic under (--seed, flags); wall time
// goes to a timing sidecar so the other outputs can be byte-compared.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "eapgp/attribution.hpp"
#include "eapgp/evaluation.hpp"
#include "eapgp/graph.hpp"
#include "eapgp/model.hpp"
#include "eapgp/pipeline.hpp"
#include "eapgp/tasks.hpp"

namespace fs = std::filesystem;
using namespace eapgp;

namespace {

struct CommonArgs {
  uint64_t seed = 0;
  std::string precision = "f32";
  std::string out;
};

struct TaskArgs {
  std::string task = "induction";
  std::string tasks_file;
  int64_t batch = 64;
  int64_t seq = 8;
  int64_t vocab = 32;
};

struct MethodArgs {
  std::string method = "eap";
  int steps = 5;
  std::string grad_point = "clean";
  std::string path_mode = "shared";
  std::string step_rule = "endpoint-budget";
  std::string objective_positions = "all";
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--seed", a.seed, "Global seed; all randomness derives from it");
  cmd->add_option("--precision", a.precision, "Float precision: f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--out", a.out, "Output directory (default: $EAPGP_OUTPUT_ROOT/<command>)");
}

void add_task(CLI::App* cmd, TaskArgs& a) {
  cmd->add_option("--task", a.task, "Task generator: induction, greater-than, or ioi");
  cmd->add_option("--tasks-file", a.tasks_file, "Task JSONL file (overrides --task)");
  cmd->add_option("--batch", a.batch, "Examples per batch");
  cmd->add_option("--seq", a.seq, "Sequence length (induction generator)");
  cmd->add_option("--vocab", a.vocab, "Vocabulary size (induction generator)");
}

void add_method(CLI::App* cmd, MethodArgs& a, bool require_method) {
  auto* m = cmd->add_option("--method", a.method, "Attribution method: eap, eap-ig, eap-gp");
  if (require_method) m->required();
  cmd->add_option("--steps", a.steps, "Path steps k for eap-ig / eap-gp");
  cmd->add_option("--grad-point", a.grad_point, "EAP gradient point: clean or corrupted")
      ->check(CLI::IsMember({"clean", "corrupted"}));
  cmd->add_option("--path-mode", a.path_mode, "Path mode: shared or per-edge")
      ->check(CLI::IsMember({"shared", "per-edge"}));
  cmd->add_option("--step-rule", a.step_rule, "GradPath step rule: literal-unit or endpoint-budget")
      ->check(CLI::IsMember({"literal-unit", "endpoint-budget"}));
  cmd->add_option("--objective-positions", a.objective_positions,
                  "GradPath distance objective positions: all or final")
      ->check(CLI::IsMember({"all", "final"}));
}

fs::path resolve_out(const CommonArgs& a, const std::string& command) {
  fs::path dir;
  if (!a.out.empty()) {
    dir = a.out;
  } else {
    const char* root = std::getenv("EAPGP_OUTPUT_ROOT");
    dir = fs::path(root ? root : "eapgp-out") / command;
  }
  fs::create_directories(dir);
  return dir;
}

TaskBatch make_task(const TaskArgs& a, uint64_t seed) {
  if (!a.tasks_file.empty()) return load_task_jsonl(a.tasks_file);
  return generate_task(a.task, derive_seed(seed, "task"), a.batch, a.seq, a.vocab);
}

PipelineOptions pipeline_options(const MethodArgs& m) {
  PipelineOptions opt;
  opt.grad_point = parse_grad_point(m.grad_point);
  opt.gradpath.step_rule = parse_step_rule(m.step_rule);
  opt.gradpath.positions = parse_objective_positions(m.objective_positions);
  opt.path_mode = parse_path_mode(m.path_mode);
  return opt;
}

// ----------------------------------------------------------------- train

struct TrainArgs {
  CommonArgs common;
  TaskArgs task;
  int layers = 2, heads = 2, d_model = 32, d_mlp = 128;
  std::string kind = "standard";
  double init_std = 0.1;
  int steps = 2000;
  double lr = 1e-3;
};

template <class S>
int run_train(const TrainArgs& a) {
  ModelConfig cfg;
  cfg.n_layers = a.layers;
  cfg.n_heads = a.heads;
  cfg.d_model = a.d_model;
  if (a.d_model % a.heads != 0)
    fail_invalid("--d-model (", a.d_model, ") must be divisible by --heads (", a.heads, ")");
  cfg.d_head = a.d_model / a.heads;
  cfg.d_mlp = a.d_mlp;
  cfg.kind = parse_model_kind(a.kind);
  cfg.init_std = a.init_std;
  cfg.seed = derive_seed(a.common.seed, "model-init");

  TaskArgs task = a.task;
  if (task.task == "greater-than") {
    task.vocab = kGreaterThanVocab;
    task.seq = 5;
  } else if (task.task == "ioi") {
    task.vocab = kToyIoiVocab;
    task.seq = 7;
  }
  cfg.vocab_size = task.vocab;
  cfg.max_seq_len = std::max<int64_t>(task.seq, 8);

  const fs::path out = resolve_out(a.common, "train");
  Model<S> model(cfg);
  const uint64_t stream_seed = derive_seed(a.common.seed, "train-stream");
  auto stream = [&](int step) {
    uint64_t s = stream_seed;
    s ^= static_cast<uint64_t>(step) * 0x9e3779b97f4a7c15ull;
    return generate_task(task.task, splitmix64(s), task.batch, task.seq, task.vocab);
  };
  TrainResult r = model.train_toy(stream, a.steps, a.lr);

  model.save((out / "model.ckpt").string());
  std::ofstream log(out / "train_log.csv");
  log << "step,loss\n";
  for (size_t i = 0; i < r.loss_curve.size(); ++i)
    log << i << ',' << format_double(r.loss_curve[i]) << '\n';
  std::cout << "trained " << a.steps << " steps; final loss "
            << format_double(r.loss_curve.back()) << "; answer accuracy "
            << format_double(r.accuracy) << "\n"
            << "checkpoint: " << (out / "model.ckpt").string() << "\n";
  return 0;
}

// --------------------------------------------------------------- discover

struct DiscoverArgs {
  CommonArgs common;
  TaskArgs task;
  MethodArgs method;
  std::string model_path;
  int64_t top_n = -1;
  double sparsity = -1.0;
};

template <class S>
int run_discover(const DiscoverArgs& a) {
  const fs::path out = resolve_out(a.common, "discover");
  Model<S> model = Model<S>::load(a.model_path);
  TaskBatch batch = make_task(a.task, a.common.seed);
  const int64_t n = a.top_n >= 0
                        ? a.top_n
                        : static_cast<int64_t>(std::llround(
                              (1.0 - a.sparsity) * static_cast<double>(model.graph().num_edges())));

  PipelineResult<S> result = run_pipeline(model, batch, parse_method(a.method.method),
                                          a.method.steps, n, pipeline_options(a.method));

  save_task_jsonl(batch, (out / "tasks.jsonl").string());
  save_circuit_json(to_circuit_file(model.graph(), result.circuit),
                    (out / "circuit.json").string());
  save_scores_csv(model.graph(), result.scores, (out / "scores.csv").string());
  save_report_json(result.report, (out / "report.json").string());
  save_timing_sidecar(result.report.wall_time_s, (out / "timing.json").string());
  std::cout << "method " << result.report.method << " selected " << result.report.n_selected
            << " edges (" << result.report.n_after_prune << " after pruning); nfs "
            << format_double(result.report.nfs) << "\n"
            << "outputs in " << out.string() << "\n";
  return 0;
}

// ------------------------------------------------------------------ sweep

struct SweepArgs {
  CommonArgs common;
  TaskArgs task;
  MethodArgs method;
  std::string model_path;
  std::string sparsities = "0.9,0.925,0.95,0.975,0.99,0.995";
};

std::vector<double> parse_levels(const std::string& csv) {
  std::vector<double> out;
  size_t pos = 0;
  while (pos < csv.size()) {
    size_t next = csv.find(',', pos);
    if (next == std::string::npos) next = csv.size();
    out.push_back(std::stod(csv.substr(pos, next - pos)));
    pos = next + 1;
  }
  if (out.empty()) fail_invalid("--sparsities: empty list");
  return out;
}

template <class S>
int run_sweep(const SweepArgs& a) {
  const fs::path out = resolve_out(a.common, "sweep");
  Model<S> model = Model<S>::load(a.model_path);
  TaskBatch batch = make_task(a.task, a.common.seed);
  const std::vector<double> levels = parse_levels(a.sparsities);

  const Method method = parse_method(a.method.method);
  const PipelineOptions opt = pipeline_options(a.method);
  EdgeScores scores;
  switch (method) {
    case Method::Eap:
      scores = eap_scores(model, batch, opt.grad_point);
      break;
    case Method::EapIg:
      scores = eap_ig_scores(model, batch, a.method.steps, opt.path_mode);
      break;
    case Method::EapGp:
      scores = eap_gp_scores(model, batch, a.method.steps, opt.gradpath, opt.path_mode);
      break;
  }
  std::vector<FaithfulnessReport> rows = faithfulness_sweep(model, scores, levels, batch);

  save_task_jsonl(batch, (out / "tasks.jsonl").string());
  save_scores_csv(model.graph(), scores, (out / "scores.csv").string());
  save_sweep_csv(rows, (out / "sweep.csv").string());
  std::cout << "swept " << rows.size() << " sparsity levels; sweep.csv in " << out.string()
            << "\n";
  return 0;
}

// --------------------------------------------------------------- saturate

struct SaturateArgs {
  CommonArgs common;
  TaskArgs task;
  MethodArgs method;
  std::string model_path;
  std::string path_kind = "gradpath";
  double epsilon = 0.05;
};

template <class S>
int run_saturate(const SaturateArgs& a) {
  const fs::path out = resolve_out(a.common, "saturate");
  Model<S> model = Model<S>::load(a.model_path);
  TaskBatch batch = make_task(a.task, a.common.seed);

  CacheRun<S> clean = model.forward_with_cache(batch.clean);
  CacheRun<S> corrupted = model.forward_with_cache(batch.corrupted);
  IntegrationPath<S> path;
  if (a.path_kind == "straight-line") {
    path = straight_line_path(clean.cache.contributions[0], corrupted.cache.contributions[0],
                              a.method.steps);
  } else if (a.path_kind == "gradpath") {
    GradPathOptions opt{parse_step_rule(a.method.step_rule),
                        parse_objective_positions(a.method.objective_positions)};
    path = build_gradpath(model, batch, a.method.steps, opt, clean.cache, corrupted.cache);
  } else {
    fail_invalid("--path must be straight-line or gradpath, got '", a.path_kind, "'");
  }

  SaturationProfile profile = saturation_profile(model, batch, path, a.epsilon);
  save_saturation_csv(profile, (out / "saturation.csv").string());
  std::cout << "path " << a.path_kind << " k=" << a.method.steps << " epsilon "
            << format_double(a.epsilon) << ": saturated_fraction "
            << format_double(profile.saturated_fraction) << "\n"
            << "diagnostics: " << (out / "saturation.csv").string() << "\n";
  return 0;
}

// ---------------------------------------------------- compare / edge-count

int run_compare(const std::string& candidate_path, const std::string& reference_path) {
  CircuitFile a = load_circuit_json(candidate_path);
  CircuitFile b = load_circuit_json(reference_path);
  PrResult r = precision_recall(a, b);
  std::cout << "edge_precision " << format_double(r.edge_precision) << "\n"
            << "edge_recall " << format_double(r.edge_recall) << "\n"
            << "node_precision " << format_double(r.node_precision) << "\n"
            << "node_recall " << format_double(r.node_recall) << "\n";
  if (r.degenerate) std::cout << "degenerate true\n";
  return 0;
}

int run_edge_count(int layers, int heads) {
  Graph g = build_graph_dims(layers, heads);
  const int64_t formula = edge_count_formula(layers, heads);
  if (g.num_edges() != formula)
    fail("edge enumeration (", g.num_edges(), ") disagrees with the closed form (", formula, ")");
  std::cout << g.num_edges() << "\n";
  return 0;
}

int run_export_dot(const std::string& circuit_path, std::string out_path) {
  CircuitFile f = load_circuit_json(circuit_path);
  if (out_path.empty()) out_path = fs::path(circuit_path).replace_extension(".dot").string();
  std::ofstream out(out_path, std::ios::binary);
  if (!out) fail("cannot open '", out_path, "' for writing");
  out << circuit_to_dot(f);
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

// -------------------------------------------------------------- config file

// A JSON config can stand in for flags; explicit flags win. The file maps
// long option names (no leading dashes) to values, e.g. {"method": "eap"}.
std::vector<std::string> splice_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
      args.erase(args.begin() + static_cast<long>(i), args.begin() + static_cast<long>(i) + 2);
      break;
    }
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) fail("cannot open config file '", config_path, "'");
  nlohmann::json j = nlohmann::json::parse(in);
  if (!j.is_object()) fail("config file '", config_path, "' must hold a JSON object");

  // Config-derived flags go right after the subcommand name; options use a
  // take-last policy so explicit flags override them.
  std::vector<std::string> merged;
  if (!args.empty()) merged.push_back(args[0]);
  for (auto it = j.begin(); it != j.end(); ++it) {
    merged.push_back("--" + it.key());
    if (it->is_string())
      merged.push_back(it->get<std::string>());
    else
      merged.push_back(it->dump());
  }
  for (size_t i = 1; i < args.size(); ++i) merged.push_back(args[i]);
  return merged;
}

template <class Fn>
int with_precision(const std::string& precision, Fn fn) {
  if (precision == "f64") return fn(double{});
  return fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-based circuit discovery (EAP, EAP-IG, EAP-GP) on a tiny transformer"};
  app.require_subcommand(1);
  app.option_defaults()->take_last();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a toy model and write an EAPG1 checkpoint");
  train->option_defaults()->take_last();
  add_common(train, train_args.common);
  add_task(train, train_args.task);
  train->add_option("--layers", train_args.layers);
  train->add_option("--heads", train_args.heads);
  train->add_option("--d-model", train_args.d_model);
  train->add_option("--d-mlp", train_args.d_mlp);
  train->add_option("--kind", train_args.kind)->check(CLI::IsMember({"standard", "linear"}));
  train->add_option("--init-std", train_args.init_std, "Weight init standard deviation");
  train->add_option("--steps", train_args.steps, "Training steps");
  train->add_option("--lr", train_args.lr, "Adam learning rate");

  DiscoverArgs discover_args;
  auto* discover = app.add_subcommand("discover", "Score edges, extract and evaluate a circuit");
  discover->option_defaults()->take_last();
  add_common(discover, discover_args.common);
  add_task(discover, discover_args.task);
  add_method(discover, discover_args.method, /*require_method=*/true);
  discover->add_option("--model", discover_args.model_path, "EAPG1 checkpoint")->required();
  auto* top_n = discover->add_option("--top-n", discover_args.top_n, "Edges to keep");
  auto* sparsity =
      discover->add_option("--sparsity", discover_args.sparsity, "Edge sparsity in [0,1)");
  top_n->excludes(sparsity);
  sparsity->excludes(top_n);

  SweepArgs sweep_args;
  auto* sweep = app.add_subcommand("sweep", "Faithfulness across sparsity levels");
  sweep->option_defaults()->take_last();
  add_common(sweep, sweep_args.common);
  add_task(sweep, sweep_args.task);
  add_method(sweep, sweep_args.method, /*require_method=*/true);
  sweep->add_option("--model", sweep_args.model_path, "EAPG1 checkpoint")->required();
  sweep->add_option("--sparsities", sweep_args.sparsities, "Comma-separated sparsity levels");

  SaturateArgs saturate_args;
  auto* saturate = app.add_subcommand("saturate", "Per-channel gradient norms along a path");
  saturate->option_defaults()->take_last();
  add_common(saturate, saturate_args.common);
  add_task(saturate, saturate_args.task);
  add_method(saturate, saturate_args.method, /*require_method=*/false);
  saturate->add_option("--model", saturate_args.model_path, "EAPG1 checkpoint")->required();
  saturate->add_option("--path", saturate_args.path_kind, "straight-line or gradpath");
  saturate->add_option("--epsilon", saturate_args.epsilon, "Saturation threshold");

  std::string compare_a, compare_b;
  auto* compare = app.add_subcommand("compare", "Precision/recall between two circuit files");
  compare->add_option("candidate", compare_a, "Candidate circuit JSON")->required();
  compare->add_option("reference", compare_b, "Reference circuit JSON")->required();

  int ec_layers = 0, ec_heads = 0;
  auto* edge_count = app.add_subcommand("edge-count", "Edge total for a model size");
  edge_count->add_option("--layers", ec_layers)->required();
  edge_count->add_option("--heads", ec_heads)->required();

  std::string dot_in, dot_out;
  auto* export_dot = app.add_subcommand("export-dot", "Graphviz export of a circuit file");
  export_dot->add_option("circuit", dot_in, "Circuit JSON")->required();
  export_dot->add_option("output", dot_out, "Output .dot path");

  std::vector<std::string> args;
  try {
    args = splice_config(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    std::vector<const char*> raw;
    raw.push_back(argv[0]);
    for (const std::string& a : args) raw.push_back(a.c_str());
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the message and usage
    return 2;
  }

  try {
    if (*train)
      return with_precision(train_args.common.precision,
                            [&](auto tag) { return run_train<decltype(tag)>(train_args); });
    if (*discover) {
      if (discover_args.top_n < 0 && discover_args.sparsity < 0)
        fail_invalid("discover: exactly one of --top-n or --sparsity is required");
      return with_precision(discover_args.common.precision,
                            [&](auto tag) { return run_discover<decltype(tag)>(discover_args); });
    }
    if (*sweep)
      return with_precision(sweep_args.common.precision,
                            [&](auto tag) { return run_sweep<decltype(tag)>(sweep_args); });
    if (*saturate)
      return with_precision(saturate_args.common.precision,
                            [&](auto tag) { return run_saturate<decltype(tag)>(saturate_args); });
    if (*compare) return run_compare(compare_a, compare_b);
    if (*edge_count) return run_edge_count(ec_layers, ec_heads);
    if (*export_dot) return run_export_dot(dot_in, dot_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
