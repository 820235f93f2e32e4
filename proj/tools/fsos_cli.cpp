#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fsos/fsos.hpp"

using namespace fsos;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kData = 3, kNumeric = 4 };

struct GenDataArgs {
  std::string out;
  std::string spec;
  std::size_t per_class = kBuiltinPerClass;
  std::uint64_t seed = 1;
};

struct TrainArgs {
  std::string data;
  std::string out;
  std::string report;
  bool resume = false;
  std::size_t log_every = 100;
  std::size_t pelvis = 0;
  ModelConfig model;
  std::string pe = "sinusoidal";
  TrainConfig train{.checkpoint_every = 100};
  std::string os_mean = "terms";
};

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::vector<std::size_t> ks{3};
  std::size_t reps = 100;
  std::string method = "all";
  double tau = -1;  // < 0: the checkpoint's tau
  std::uint64_t seed = 1;
  std::string out;
  std::string split = "test";
  bool retrain_per_rep = false;
};

struct ConfusionArgs {
  std::string checkpoint;
  std::string data;
  double tau = -1;
  std::string out;
  std::string split = "test";
};

struct InferArgs {
  std::string checkpoint;
  std::string support;
  std::string query;
  double tau = -1;
  std::size_t pelvis = 0;
  std::string confidence = "disc";
};

struct ValidateArgs {
  std::string data;
  std::size_t frames = 0;
  std::size_t joints = 0;
  std::size_t pelvis = 0;
  bool no_pelvis_check = false;
};

void print_warnings(const std::vector<std::string>& warnings) {
  std::set<std::string> seen;
  for (const auto& w : warnings)
    if (seen.insert(w).second) std::cerr << "warning: " << w << '\n';
}

// The resolved configuration (config file plus command line) lands next to the run's outputs.
void ensure_parent(const fs::path& file) {
  std::error_code ec;
  if (file.has_parent_path()) fs::create_directories(file.parent_path(), ec);
}

// It is a valid --config file for the same command. Unset optional values are left out.
void echo_config(const CLI::App& sub, const fs::path& dir) {
  const fs::path path = (dir.empty() ? fs::path(".") : dir) / (sub.get_name() + ".resolved.ini");
  ensure_parent(path);
  std::istringstream in(sub.config_to_str(true, false));
  std::string out = "[" + sub.get_name() + "]\n", line;
  while (std::getline(in, line))
    if (!line.ends_with("=\"\"")) out += line + '\n';
  write_text_file(path, out);
}

double resolve_tau(double flag, const Model& m) {
  const double tau = flag < 0 ? m.config().tau : flag;
  if (!(tau >= 0 && tau <= 1)) throw ConfigError("tau must lie in [0, 1]");
  return tau;
}

std::vector<SynthActionSpec> read_specs(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
  const nlohmann::json& list = j.is_object() && j.contains("classes") ? j.at("classes") : j;
  std::vector<SynthActionSpec> specs;
  try {
    if (list.is_array()) {
      for (const auto& e : list) specs.push_back(e.get<SynthActionSpec>());
    } else {
      specs.push_back(list.get<SynthActionSpec>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (specs.empty()) throw DataError(path + ": no action specs");
  std::set<std::string> names;
  for (const auto& s : specs)
    if (!names.insert(s.name).second) throw DataError(path + ": duplicate class '" + s.name + "'");
  return specs;
}

int cmd_gen_data(const CLI::App& app, const GenDataArgs& a) {
  if (a.per_class == 0) throw ConfigError("--per-class must be >= 1");
  const std::vector<SynthActionSpec> specs = a.spec.empty() ? builtin_suite() : read_specs(a.spec);
  const auto suite = generate_suite(specs, a.per_class, a.seed);
  write_dataset(a.out, suite, joint::pelvis);
  echo_config(app, a.out);
  std::cout << "wrote " << specs.size() << " classes x " << a.per_class << " sequences to " << a.out << '\n';
  return kOk;
}

// Keeps the header and the rows whose step is <= `step`.
std::string truncate_report(const std::string& text, std::size_t step) {
  std::istringstream in(text);
  std::string line, out;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      if (line != kReportHeader) throw DataError("existing report has an unexpected header");
      header = false;
    } else {
      std::size_t s = 0;
      const auto comma = line.find(',');
      if (std::from_chars(line.data(), line.data() + comma, s).ec != std::errc{}) throw DataError("corrupt report row");
      if (s > step) break;
    }
    out += line + '\n';
  }
  if (header) out = std::string(kReportHeader) + '\n';
  return out;
}

int cmd_train(const CLI::App& sub, TrainArgs a) {
  const fs::path out(a.out);
  const fs::path report = a.report.empty() ? fs::path(out.string() + ".csv") : fs::path(a.report);
  a.model.gamma_dim = a.model.upsilon_dim;
  a.model.pe = parse_pe_kind(a.pe);
  a.train.os_mean = parse_os_mean(a.os_mean);

  std::optional<TrainState> state;
  std::string report_text = std::string(kReportHeader) + '\n';
  if (a.resume && fs::exists(out)) {
    LoadedCheckpoint ck = load_checkpoint(out);
    if (!ck.resumable()) throw DataError(out.string() + " holds no training state to resume");
    state = ck.resume_state();
    if (sub.count("--episodes")) state->train.episodes = a.train.episodes;
    if (fs::exists(report)) report_text = truncate_report(read_text_file(report), state->opt.step);
    std::cerr << "resuming at step " << state->opt.step << " of " << state->train.episodes << '\n';
  }

  LoadOptions lo;
  lo.frames = state ? state->model.config().frames : a.model.frames;
  lo.pelvis = a.pelvis;
  const Dataset ds = load_dataset(a.data, lo);
  print_warnings(ds.warnings);
  if (ds.classes.empty()) throw DataError(a.data + " holds no usable sequences");

  if (!state) {
    a.model.joints = ds.classes.front().sequences.front().joints();
    a.model.validate();
    a.train.validate();
    state = init_training(a.model, a.train);
  }
  const auto classes = training_classes(ds);
  if (classes.size() < state->train.way + 1) {
    throw ConfigError("train split has " + std::to_string(classes.size()) + " classes; way=" +
                      std::to_string(state->train.way) + " needs at least " + std::to_string(state->train.way + 1));
  }
  for (std::size_t c : classes)
    if (ds.classes[c].sequences.size() < 2) throw DataError("class '" + ds.classes[c].name + "' has fewer than 2 sequences");
  if (state->model.config().joints != ds.classes.front().sequences.front().joints()) {
    throw DataError("dataset joint count differs from the checkpoint's");
  }

  echo_config(sub, out.parent_path());
  ensure_parent(report);
  write_text_file(report, report_text);
  std::ofstream csv(report, std::ios::app);
  if (!csv) throw DataError("cannot open " + report.string());

  std::vector<std::string> warnings;
  double acc_sum = 0;
  std::size_t acc_n = 0;
  TrainHooks hooks;
  hooks.warnings = &warnings;
  hooks.on_step = [&](const StepReport& r) {
    csv << format_report_row(r) << '\n';
    acc_sum += r.fs_acc;
    ++acc_n;
    if (a.log_every && r.step % a.log_every == 0) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "step %zu  loss %.4f (fs %.4f, os %.4f)  fs_acc %.3f", r.step, r.loss_total,
                    r.loss_fs, r.loss_os, acc_sum / static_cast<double>(acc_n));
      std::cerr << buf << '\n';
      acc_sum = 0;
      acc_n = 0;
    }
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    csv.flush();
    save_checkpoint(out, s);
  };
  train_loop(ds, *state, hooks);
  print_warnings(warnings);
  if (!csv.flush()) throw DataError("write failed for " + report.string());
  std::cout << "trained " << state->opt.step << " steps; checkpoint " << out.string() << ", report " << report.string()
            << '\n';
  return kOk;
}

std::vector<Method> parse_methods(const std::string& s) {
  if (s == "all") return {Method::trxos, Method::exp, Method::random};
  return {parse_method(s)};
}

int cmd_eval(const CLI::App& app, const EvalArgs& a) {
  const std::vector<Method> methods = parse_methods(a.method);
  const bool learned = methods.size() > 1 || methods.front() != Method::random;
  const Split split = parse_split(a.split);
  if (a.ks.empty()) throw ConfigError("--k needs at least one value");
  if (a.reps == 0) throw ConfigError("--reps must be >= 1");
  if (learned && a.checkpoint.empty()) throw ConfigError("--checkpoint is required for method " + a.method);

  std::optional<LoadedCheckpoint> ck;
  if (learned) ck = load_checkpoint(a.checkpoint);
  LoadOptions lo;
  if (ck) {
    lo.frames = ck->model.config().frames;
    lo.joints = ck->model.config().joints;
  }
  const Dataset ds = load_dataset(a.data, lo);
  print_warnings(ds.warnings);
  const auto cls = ds.classes_in(split);
  for (std::size_t k : a.ks) {
    if (k == 0 || k >= cls.size()) {
      throw ConfigError("k=" + std::to_string(k) + " is not below the " + std::to_string(cls.size()) + " " + a.split +
                        " classes in " + a.data + " (unknown queries need at least one spare class)");
    }
  }
  const double tau = ck ? resolve_tau(a.tau, ck->model) : (a.tau < 0 ? 0.5 : a.tau);

  std::vector<ComparisonRow> rows;
  if (a.retrain_per_rep && learned) {
    if (!ck->resumable()) throw DataError("--retrain-per-rep needs a checkpoint with its training configuration");
    // Every repetition trains a fresh model from seed + rep with the checkpoint's settings.
    std::vector<std::string> warnings;
    auto build = [&](std::size_t rep) {
      TrainConfig tc = *ck->train;
      tc.seed = tc.seed + rep;
      TrainState st = init_training(ck->model.config(), tc);
      TrainHooks hooks;
      hooks.warnings = &warnings;
      train_loop(ds, st, hooks);
      return build_score_table(st.model, ds, cls);
    };
    for (std::size_t k : a.ks) {
      for (Method m : {Method::trxos, Method::exp, Method::random}) {
        if (std::find(methods.begin(), methods.end(), m) == methods.end()) continue;
        ComparisonRow row{k, m, random_baseline(k), 0, a.reps, a.seed};
        if (m != Method::random) {
          std::mt19937_64 rng = task_rng(a.seed, k);
          const EvalResult r = run_protocol_retrain(build, m, k, a.reps, tau, rng);
          row.mean = r.mean;
          row.std = r.std;
        }
        rows.push_back(row);
      }
    }
    print_warnings(warnings);
  } else {
    std::optional<ScoreTable> table;
    if (ck) table = build_score_table(ck->model, ds, cls);
    rows = compare_baseline(table ? &*table : nullptr, cls.size(), a.ks, a.reps, tau, a.seed, methods);
  }

  if (!a.out.empty()) {
    ensure_parent(a.out);
    write_text_file(a.out, results_csv(rows));
    echo_config(app, fs::path(a.out).parent_path());
  } else {
    std::cout << results_csv(rows);
  }
  std::cerr << results_table(rows);
  return kOk;
}

int cmd_confusion(const CLI::App& app, const ConfusionArgs& a) {
  const Split split = parse_split(a.split);
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const double tau = resolve_tau(a.tau, ck.model);
  LoadOptions lo;
  lo.frames = ck.model.config().frames;
  lo.joints = ck.model.config().joints;
  const Dataset ds = load_dataset(a.data, lo);
  print_warnings(ds.warnings);
  const auto cls = ds.classes_in(split);
  if (cls.empty()) throw DataError("no " + a.split + " classes in " + a.data);
  const std::string csv = confusion_csv(os_confusion_matrix(build_score_table(ck.model, ds, cls), tau));
  if (!a.out.empty()) {
    ensure_parent(a.out);
    write_text_file(a.out, csv);
    echo_config(app, fs::path(a.out).parent_path());
  } else {
    std::cout << csv;
  }
  return kOk;
}

int cmd_infer(const InferArgs& a) {
  Confidence conf;
  if (a.confidence == "disc") {
    conf = Confidence::discriminator;
  } else if (a.confidence == "exp") {
    conf = Confidence::exp;
  } else {
    throw ConfigError("--confidence must be disc or exp");
  }
  if (!fs::is_directory(a.support)) throw DataError(a.support + " is not a directory");
  const LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const double tau = resolve_tau(a.tau, ck.model);
  const ModelConfig& mc = ck.model.config();

  std::vector<std::string> warnings;
  auto load = [&](const fs::path& p, std::string& label) {
    SkeletonSequence s = read_sequence(p);
    if (s.joints() != mc.joints) {
      throw DataError(p.string() + ": " + std::to_string(s.joints()) + " joints, model expects " + std::to_string(mc.joints));
    }
    for (const auto& v : validate_sequence(s.frames, {.check_pelvis = false}))
      if (v.kind == Violation::Kind::finite) throw DataError(p.string() + ": " + v.message);
    label = s.class_label.empty() ? p.stem().string() : s.class_label;
    return preprocess(s.frames, {mc.frames, a.pelvis}, &warnings, p.string());
  };

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.support))
    if (e.is_regular_file() && e.path().extension() == ".seq") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError(a.support + " contains no .seq files");
  std::vector<std::string> names;
  std::vector<Tensor> support;
  for (const auto& f : files) {
    std::string name;
    support.push_back(load(f, name));
    names.push_back(name);
  }
  std::string qname;
  const Tensor query = load(a.query, qname);
  print_warnings(warnings);

  const Prediction p = ck.model.fsos_classify(query, support, tau, conf);
  std::size_t width = 5;
  for (const auto& n : names) width = std::max(width, n.size());
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %12s  %8s\n", static_cast<int>(width), "class", "distance", "fs_score");
  std::cout << buf;
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%-*s  %12.6f  %8.4f%s\n", static_cast<int>(width), names[i].c_str(), p.distances[i],
                  p.fs_scores[i], i == p.fs_class ? "  *" : "");
    std::cout << buf;
  }
  std::snprintf(buf, sizeof buf, "os_score %.6f (tau %.3f, %s)\n", p.os_score, tau,
                conf == Confidence::exp ? "exp" : "discriminator");
  std::cout << buf;
  std::cout << "prediction: " << (p.rejected() ? std::string("reject") : names[*p.accepted]) << '\n';
  return kOk;
}

int cmd_validate(const ValidateArgs& a) {
  if (!fs::is_directory(a.data)) throw DataError(a.data + " is not a directory");
  std::vector<fs::path> files;
  const fs::path manifest = fs::path(a.data) / kManifestName;
  std::size_t problems = 0;
  if (fs::exists(manifest)) {
    Manifest m;
    try {
      m = manifest_from_json(nlohmann::json::parse(read_text_file(manifest)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(manifest.string() + ": " + e.what());
    }
    for (const auto& c : m.classes) {
      if (c.files.empty()) {
        std::cout << "class " << c.name << ": no files listed\n";
        ++problems;
      }
      for (const auto& f : c.files) files.push_back(fs::path(a.data) / f);
    }
  } else {
    for (const auto& e : fs::recursive_directory_iterator(a.data))
      if (e.is_regular_file() && e.path().extension() == ".seq") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw DataError(a.data + " contains no sequences");

  const ValidationOptions vo{.frames = a.frames, .joints = a.joints, .pelvis = a.pelvis, .check_pelvis = !a.no_pelvis_check};
  std::size_t bad_files = 0;
  for (const auto& f : files) {
    std::vector<std::string> issues;
    try {
      const SkeletonSequence s = read_sequence(f);
      for (const auto& v : validate_sequence(s.frames, vo)) issues.push_back(v.message);
    } catch (const DataError& e) {
      issues.push_back(e.what());
    }
    if (!issues.empty()) {
      ++bad_files;
      problems += issues.size();
      std::cout << f.string() << ":\n";
      for (std::size_t i = 0; i < issues.size() && i < 5; ++i) std::cout << "  " << issues[i] << '\n';
      if (issues.size() > 5) std::cout << "  ... " << issues.size() - 5 << " more\n";
    }
  }
  std::cout << files.size() << " files checked, " << bad_files << " with problems\n";
  return problems ? kData : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot open-set skeleton action recognition"};
  app.require_subcommand(1);
  app.set_config("--config", "", "INI/TOML file with option values; command-line flags take precedence");

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic skeleton dataset");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--spec", gen.spec, "JSON action spec file (default: builtin suite)");
  g->add_option("--per-class", gen.per_class, "Sequences per class")->capture_default_str();
  g->add_option("--seed", gen.seed, "Random seed")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Episodic training; writes a checkpoint and a per-step CSV report");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--report", tr.report, "Report CSV (default: <out>.csv)");
  t->add_flag("--resume", tr.resume, "Continue from the checkpoint at --out if it exists");
  t->add_option("--log-every", tr.log_every, "Progress line interval in steps (0 = silent)")->capture_default_str();
  t->add_option("--pelvis", tr.pelvis, "Pelvis joint index")->capture_default_str();
  t->add_option("--frames", tr.model.frames, "Frames per subsampled sequence")->capture_default_str();
  t->add_option("--embed-dim", tr.model.embed_dim, "Frame embedding width")->capture_default_str();
  t->add_option("--query-dim", tr.model.upsilon_dim, "Query/key projection width")->capture_default_str();
  t->add_option("--value-dim", tr.model.lambda_dim, "Value projection width")->capture_default_str();
  t->add_option("--reduced-dim", tr.model.reduced_dim, "Discriminator per-pair width")->capture_default_str();
  t->add_option("--pe", tr.pe, "Positional encoding: sinusoidal|learned")->capture_default_str();
  t->add_option("--tau", tr.model.tau, "Acceptance threshold stored with the model")->capture_default_str();
  t->add_option("--sigma", tr.model.sigma, "Weight of the open-set loss")->capture_default_str();
  t->add_option("--way", tr.train.way, "Classes per training episode")->capture_default_str();
  t->add_option("--queries", tr.train.queries, "Known queries per episode")->capture_default_str();
  t->add_option("--batch", tr.train.batch, "Episodes per optimizer step")->capture_default_str();
  t->add_option("--episodes", tr.train.episodes, "Total optimizer steps")->capture_default_str();
  t->add_option("--checkpoint-every", tr.train.checkpoint_every, "Checkpoint interval in steps (0 = end only)")
      ->capture_default_str();
  t->add_option("--lr", tr.train.lr, "Adam learning rate")->capture_default_str();
  t->add_option("--os-mean", tr.os_mean, "Open-set loss averaging: terms|batch")->capture_default_str();
  t->add_option("--seed", tr.train.seed, "Random seed")->capture_default_str();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "FSOS-ACC over random k-way tasks for TRX-OS, EXP and RANDOM");
  e->add_option("--checkpoint", ev.checkpoint, "Trained checkpoint (not needed for --method random)");
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--k", ev.ks, "Support set sizes")->delimiter(',')->capture_default_str();
  e->add_option("--reps", ev.reps, "Task repetitions per k")->capture_default_str();
  e->add_option("--method", ev.method, "trxos|exp|random|all")->capture_default_str();
  e->add_option("--tau", ev.tau, "Acceptance threshold (default: the checkpoint's)");
  e->add_option("--seed", ev.seed, "Task sampling seed")->capture_default_str();
  e->add_option("--out", ev.out, "Results CSV (default: stdout)");
  e->add_option("--split", ev.split, "Split to evaluate on")->capture_default_str();
  e->add_flag("--retrain-per-rep", ev.retrain_per_rep, "Retrain from scratch for every repetition");

  ConfusionArgs cf;
  auto* c = app.add_subcommand("confusion", "Open-set confusion matrix with a single-class support set");
  c->add_option("--checkpoint", cf.checkpoint, "Trained checkpoint")->required();
  c->add_option("--data", cf.data, "Dataset directory")->required();
  c->add_option("--tau", cf.tau, "Acceptance threshold (default: the checkpoint's)");
  c->add_option("--out", cf.out, "Confusion CSV (default: stdout)");
  c->add_option("--split", cf.split, "Split to evaluate on")->capture_default_str();

  InferArgs in;
  auto* i = app.add_subcommand("infer", "Classify one query against a support directory (one .seq file per class)");
  i->add_option("--checkpoint", in.checkpoint, "Trained checkpoint")->required();
  i->add_option("--support", in.support, "Support directory")->required();
  i->add_option("--query", in.query, "Query sequence file")->required();
  i->add_option("--tau", in.tau, "Acceptance threshold (default: the checkpoint's)");
  i->add_option("--pelvis", in.pelvis, "Pelvis joint index")->capture_default_str();
  i->add_option("--confidence", in.confidence, "disc|exp")->capture_default_str();

  ValidateArgs va;
  auto* v = app.add_subcommand("validate", "Check sequence files for shape, finiteness, range and centering");
  v->add_option("--data", va.data, "Dataset directory")->required();
  v->add_option("--frames", va.frames, "Required frame count (0 = any)")->capture_default_str();
  v->add_option("--joints", va.joints, "Required joint count (0 = any)")->capture_default_str();
  v->add_option("--pelvis", va.pelvis, "Pelvis joint index")->capture_default_str();
  v->add_flag("--no-pelvis-check", va.no_pelvis_check, "Accept sequences that are not pelvis-centered");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(*g, gen);
    if (t->parsed()) return cmd_train(*t, tr);
    if (e->parsed()) return cmd_eval(*e, ev);
    if (c->parsed()) return cmd_confusion(*c, cf);
    if (i->parsed()) return cmd_infer(in);
    if (v->parsed()) return cmd_validate(va);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << '\n';
    return kNumeric;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const DimensionError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const DomainError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "internal error: " << err.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
