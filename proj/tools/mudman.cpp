// Command-line driver: pretrain, trial, search, ablation, replay, report.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include "mudman/experiment.hpp"

using namespace mudman;
namespace fs = std::filesystem;

namespace {

constexpr int kStrictFailure = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out;
  bool strict = false;
  std::string checkpoint;
  std::string checkpoint_dir;
  std::string method = "mudman";
  std::string records;
  long index = -1;
  bool variants = false;
  std::vector<std::string> overrides;
};

ExperimentConfig load_config(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  if (!o.overrides.empty()) c = apply_overrides(c, o.overrides);
  return c;
}

std::string out_dir(const Options& o, const ExperimentConfig& c) { return o.out.empty() ? c.out_dir : o.out; }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << text;
}

void echo_config(const std::string& dir, const ExperimentConfig& c) {
  fs::create_directories(dir);
  write_text(dir + "/config.resolved.ini", to_text(c));
}

std::string base_path(const std::string& dir, std::uint64_t seed) {
  return dir + "/base_" + std::to_string(seed) + ".ckpt";
}

BaseModel save_base(BaseModel b, const std::string& dir, const ExperimentConfig& c) {
  fs::create_directories(dir);
  b.path = base_path(dir, b.base_seed);
  save_checkpoint(b.path, b.model, base_metadata(b));
  Json meta = {{"base_seed", b.base_seed},
               {"checkpoint_hash", b.hash},
               {"retain_plateau", b.plateau.retain_plateau},
               {"forget_plateau", b.plateau.forget_plateau},
               {"pretrain_passes", b.plateau.passes},
               {"config", to_text(c)}};
  write_text(dir + "/base_" + std::to_string(b.base_seed) + ".json", meta.dump(2) + "\n");
  return b;
}

BaseModel checked_base(const std::string& path, const ExperimentConfig& c) {
  BaseModel b = load_base(path);
  if (!(b.model.arch == c.arch)) throw InvalidArgument("checkpoint architecture does not match the config: " + path);
  return b;
}

/// Base model for a seed: from --checkpoint, from --checkpoint-dir, or freshly
/// pretrained and saved under the output directory.
BaseModel obtain_base(const Options& o, const ExperimentConfig& c, std::uint64_t seed, const std::string& dir) {
  if (!o.checkpoint.empty()) return checked_base(o.checkpoint, c);
  if (!o.checkpoint_dir.empty()) {
    BaseModel b = checked_base(base_path(o.checkpoint_dir, seed), c);
    if (b.base_seed != seed) throw InvalidArgument("checkpoint base seed mismatch in " + b.path);
    return b;
  }
  std::cerr << "pretraining base seed " << seed << "\n";
  return save_base(pretrain_base(c, seed), dir, c);
}

void print_result(const TrialResult& r) {
  std::printf("status: %s\n", to_string(r.status));
  std::printf("initial retain loss: %.6f\n", r.initial_retain_loss);
  std::printf("forget loss after unlearning: %.6f\n", r.forget_loss_after_unlearn);
  std::printf("forget loss after relearning: %.6f\n", r.forget_loss_after_relearn);
  std::printf("passes: unlearn %zu, relearn %zu, loops %zu\n", r.unlearn_passes, r.relearn_passes, r.loops);
  std::printf("mask violations: %zu, paused loops: %zu\n", r.mask_violations, r.paused_loops);
  if (!r.message.empty()) std::printf("message: %s\n", r.message.c_str());
}

void print_rows(const std::vector<SearchOutcome>& outs) {
  std::cout << summary_csv_header() << "\n";
  for (const auto& o : outs) std::cout << summary_csv_line(o.row) << "\n";
}

int cmd_pretrain(const Options& o) {
  const ExperimentConfig c = load_config(o);
  const std::uint64_t seed = o.seed.value_or(c.first_base_seed);
  const std::string dir = out_dir(o, c);
  echo_config(dir, c);
  const BaseModel b = save_base(pretrain_base(c, seed), dir, c);
  std::printf("checkpoint: %s\nhash: %016llx\nretain plateau: %.6f\nforget plateau: %.6f\n", b.path.c_str(),
              static_cast<unsigned long long>(b.hash), b.plateau.retain_plateau, b.plateau.forget_plateau);
  return 0;
}

int cmd_trial(const Options& o) {
  const ExperimentConfig c = load_config(o);
  const BaseModel b = checked_base(o.checkpoint, c);
  UnlearnConfig u = c.unlearn;
  u.seed = o.seed.value_or(u.seed);
  // A zero unlearning rate is the control: nothing but the relearning attack.
  if (u.alpha_unlearning == 0.0) u = configure_method(u, Method::no_unlearning);
  u = effective_config(u);
  const auto env = make_trial_env(b.model, c.data.forget_grammar, c.data.retain_grammar, c.data.data_seed, c.data.eval);
  TrialRecord rec;
  rec.method = u.alpha_unlearning == 0.0 ? "control" : "trial";
  rec.base_seed = b.base_seed;
  rec.checkpoint_hash = b.hash;
  rec.checkpoint_path = b.path;
  rec.data = c.data;
  rec.config = u;
  rec.attack = c.attack;
  rec.guard = c.guard;
  rec.result = run_trial(env, u, c.attack, c.guard);
  const std::string dir = out_dir(o, c);
  echo_config(dir, c);
  std::ofstream f(dir + "/trial.jsonl");
  append_jsonl(f, to_json(rec));
  print_result(rec.result);
  if (o.strict && rec.result.status != TrialStatus::valid) return kStrictFailure;
  return 0;
}

SearchJob make_job(const Experiment& e, const std::string& key, std::uint64_t seed) {
  const auto& c = e.config();
  if (key.rfind("variant.", 0) == 0) {
    const auto n = enum_from_name<Normalization>(key.substr(8));
    return {seed, key, e.variant_config(n, seed), c.space_for(key), std::nullopt};
  }
  const Method m = method_from_string(key);
  return {seed, key, e.method_config(m, seed), c.space_for(key), m};
}

int cmd_search(const Options& o) {
  ExperimentConfig c = load_config(o);
  const std::uint64_t seed = o.seed.value_or(c.first_base_seed);
  c.first_base_seed = seed;
  c.n_base_seeds = 1;
  const std::string dir = out_dir(o, c);
  echo_config(dir, c);
  Experiment e(c);
  BaseModel b = obtain_base(o, c, seed, dir);
  b.base_seed = seed;
  e.add_base(std::move(b));
  const SearchJob job = make_job(e, o.method, seed);
  const std::vector<SearchOutcome> outs{e.run(job, o.jobs)};
  write_outcomes(dir, outs, "search_" + o.method);
  print_rows(outs);
  return outs[0].row.failed && o.strict ? kStrictFailure : 0;
}

int cmd_ablation(const Options& o) {
  ExperimentConfig c = load_config(o);
  if (o.seed) c.first_base_seed = *o.seed;
  const std::string dir = out_dir(o, c);
  echo_config(dir, c);
  Experiment e(c);
  for (auto s : e.base_seeds()) e.add_base(obtain_base(o, c, s, dir));
  const auto outs = e.run_all(e.ablation_jobs(), o.jobs);
  write_outcomes(dir, outs, "ablation");
  print_rows(outs);
  bool failed = false;
  for (const auto& x : outs) failed = failed || x.row.failed;
  if (o.variants) {
    const auto v = e.run_all(e.variant_jobs(), o.jobs);
    write_outcomes(dir, v, "variants");
    print_rows(v);
    for (const auto& x : v) failed = failed || x.row.failed;
  }
  for (const auto& x : outs)
    if (x.row.failed) std::cerr << "search failed: seed " << x.row.base_seed << " " << x.row.method << "\n";
  return failed && o.strict ? kStrictFailure : 0;
}

int cmd_replay(const Options& o) {
  const auto recs = read_trial_records(o.records);
  const BaseModel b = load_base(o.checkpoint);
  std::size_t replayed = 0, identical = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (o.index >= 0 && static_cast<std::size_t>(o.index) != i) continue;
    if (recs[i].checkpoint_hash != b.hash) {
      std::cerr << "record " << i << " was produced from a different checkpoint\n";
      continue;
    }
    ++replayed;
    const TrialResult r = replay_trial(recs[i], b.model);
    if (same_result(r, recs[i].result)) {
      ++identical;
    } else {
      std::cerr << "record " << i << " (" << recs[i].method << ") differs on replay\n";
    }
  }
  std::printf("replayed %zu, identical %zu\n", replayed, identical);
  return replayed > 0 && identical == replayed ? 0 : 1;
}

int cmd_report(const Options& o) {
  const ExperimentConfig c = load_config(o);
  const auto recs = read_trial_records(o.records);
  std::vector<std::pair<std::uint64_t, std::string>> order;
  std::map<std::pair<std::uint64_t, std::string>, std::vector<TrialRecord>> groups;
  for (const auto& r : recs) {
    const auto key = std::make_pair(r.base_seed, r.method);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(r);
  }
  std::ostringstream csv;
  csv << summary_csv_header() << "\n";
  for (const auto& key : order) {
    auto& g = groups[key];
    std::stable_sort(g.begin(), g.end(), [](const auto& a, const auto& b) { return a.trial_index < b.trial_index; });
    csv << summary_csv_line(summarize(g, c.space_for(key.second), c.search.window)) << "\n";
  }
  if (!o.out.empty()) {
    if (const auto p = fs::path(o.out).parent_path(); !p.empty()) fs::create_directories(p);
    write_text(o.out, csv.str());
  }
  std::cout << csv.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-unlearning experiments on a toy transformer"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "experiment config file");
    sub->add_option("--out", o.out, "output directory (defaults to [experiment] out_dir)");
    sub->add_option("overrides", o.overrides, "key=value or section.key=value config overrides");
  };
  auto seed_opt = [&](CLI::App* sub, const std::string& what) {
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { o.seed = v; }, what);
  };

  auto* pre = app.add_subcommand("pretrain", "pretrain a base model and save its checkpoint");
  common(pre);
  seed_opt(pre, "base seed");

  auto* tri = app.add_subcommand("trial", "run one unlearning trial plus the relearning attack");
  common(tri);
  seed_opt(tri, "trial seed (defaults to [unlearn] seed)");
  tri->add_option("--checkpoint", o.checkpoint, "base checkpoint")->required()->check(CLI::ExistingFile);
  tri->add_flag("--strict", o.strict, "exit nonzero when the trial is not valid");

  auto* sea = app.add_subcommand("search", "one hyperparameter search for a method or variant.<normalization>");
  common(sea);
  seed_opt(sea, "base seed");
  sea->add_option("--method", o.method, "method name or variant.<normalization>");
  sea->add_option("--checkpoint", o.checkpoint, "base checkpoint (pretrained when omitted)")->check(CLI::ExistingFile);
  sea->add_option("--jobs", o.jobs, "concurrent trials per sampler round");
  sea->add_flag("--strict", o.strict, "exit nonzero when the search has no valid trial");

  auto* abl = app.add_subcommand("ablation", "one search per method and base seed");
  common(abl);
  seed_opt(abl, "first base seed");
  abl->add_option("--checkpoint-dir", o.checkpoint_dir, "directory with base_<seed>.ckpt files")
      ->check(CLI::ExistingDirectory);
  abl->add_option("--jobs", o.jobs, "concurrent searches");
  abl->add_flag("--variants", o.variants, "also search the normalization variants");
  abl->add_flag("--strict", o.strict, "exit nonzero when any search has no valid trial");

  auto* rep = app.add_subcommand("replay", "rerun persisted trial records and compare bitwise");
  rep->add_option("--records", o.records, "trial records (.jsonl)")->required()->check(CLI::ExistingFile);
  rep->add_option("--checkpoint", o.checkpoint, "base checkpoint")->required()->check(CLI::ExistingFile);
  rep->add_option("--index", o.index, "replay only this record");

  auto* rpt = app.add_subcommand("report", "summary table from persisted trial records");
  rpt->add_option("--config", o.config, "experiment config (search spaces and window)");
  rpt->add_option("--records", o.records, "trial records (.jsonl)")->required()->check(CLI::ExistingFile);
  rpt->add_option("--out", o.out, "write the CSV here as well");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) return cmd_pretrain(o);
    if (*tri) return cmd_trial(o);
    if (*sea) return cmd_search(o);
    if (*abl) return cmd_ablation(o);
    if (*rep) return cmd_replay(o);
    if (*rpt) return cmd_report(o);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
