#pragma once

// Flat sectioned key = value configuration. Every key is typed and known;
// anything unrecognized is an error. to_text() writes the fully resolved
// configuration back in the same format.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mudman/attack.hpp"
#include "mudman/datagen.hpp"
#include "mudman/eval.hpp"
#include "mudman/model.hpp"
#include "mudman/pretrain.hpp"
#include "mudman/search.hpp"
#include "mudman/unlearn.hpp"

namespace mudman {

// ----------------------------------------------------------------------------
// Enum names
// ----------------------------------------------------------------------------

namespace detail {

template <typename E>
struct EnumNames;

template <>
struct EnumNames<LossKind> {
  static constexpr std::pair<LossKind, const char*> table[] = {{LossKind::lm_cross_entropy, "lm_cross_entropy"},
                                                              {LossKind::neg_cross_entropy, "neg_cross_entropy"},
                                                              {LossKind::neg_entropy, "neg_entropy"},
                                                              {LossKind::selective_logit, "selective_logit"}};
};
template <>
struct EnumNames<LogitNormalization> {
  static constexpr std::pair<LogitNormalization, const char*> table[] = {{LogitNormalization::sum, "sum"},
                                                                        {LogitNormalization::mean, "mean"}};
};
template <>
struct EnumNames<Normalization> {
  static constexpr std::pair<Normalization, const char*> table[] = {{Normalization::none, "none"},
                                                                   {Normalization::per_parameter, "per_parameter"},
                                                                   {Normalization::global_pre_mask, "global_pre_mask"},
                                                                   {Normalization::global_post_mask, "global_post_mask"}};
};
template <>
struct EnumNames<GuardMode> {
  static constexpr std::pair<GuardMode, const char*> table[] = {{GuardMode::reject_only, "reject_only"},
                                                               {GuardMode::pause_then_reject, "pause_then_reject"}};
};
template <>
struct EnumNames<MlpKind> {
  static constexpr std::pair<MlpKind, const char*> table[] = {{MlpKind::gated, "gated"}, {MlpKind::plain, "plain"}};
};
template <>
struct EnumNames<RangeKind> {
  static constexpr std::pair<RangeKind, const char*> table[] = {
      {RangeKind::log_uniform, "log"}, {RangeKind::uniform, "uniform"}, {RangeKind::integer, "int"}};
};

}  // namespace detail

template <typename E>
std::string enum_name(E e) {
  for (const auto& [v, n] : detail::EnumNames<E>::table)
    if (v == e) return n;
  throw InvalidArgument("enum value has no name");
}

template <typename E>
E enum_from_name(const std::string& s) {
  for (const auto& [v, n] : detail::EnumNames<E>::table)
    if (s == n) return v;
  throw InvalidArgument("unknown value: " + s);
}

// ----------------------------------------------------------------------------
// Raw document
// ----------------------------------------------------------------------------

struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
  bool used = false;
};

class ConfigDocument {
 public:
  static ConfigDocument parse(const std::string& text) {
    ConfigDocument doc;
    std::istringstream in(text);
    std::string raw, section;
    std::size_t lineno = 0;
    while (std::getline(in, raw)) {
      ++lineno;
      std::string line = trim(strip_comment(raw));
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') fail(lineno, "unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) fail(lineno, "empty section name");
        doc.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail(lineno, "expected key = value");
      if (section.empty()) fail(lineno, "key outside of a section");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) fail(lineno, "empty key");
      auto& sec = doc.sections_[section];
      if (sec.count(key)) fail(lineno, "duplicate key " + key);
      sec[key] = {trim(line.substr(eq + 1)), lineno, false};
    }
    return doc;
  }

  bool has_section(const std::string& s) const { return sections_.count(s) != 0; }

  std::vector<std::string> section_names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : sections_) out.push_back(k);
    return out;
  }

  std::vector<std::string> keys(const std::string& s) const {
    std::vector<std::string> out;
    if (auto it = sections_.find(s); it != sections_.end())
      for (const auto& [k, _] : it->second) out.push_back(k);
    return out;
  }

  /// Marks the key consumed and returns its raw value, or nullptr.
  const ConfigEntry* take(const std::string& s, const std::string& key) {
    auto it = sections_.find(s);
    if (it == sections_.end()) return nullptr;
    auto kt = it->second.find(key);
    if (kt == it->second.end()) return nullptr;
    kt->second.used = true;
    return &kt->second;
  }

  void get(const std::string& s, const std::string& key, double& out) {
    if (auto* e = take(s, key)) out = to_double(*e, s, key);
  }
  template <typename U>
    requires(std::is_unsigned_v<U> && !std::is_same_v<U, bool>)
  void get(const std::string& s, const std::string& key, U& out) {
    if (auto* e = take(s, key)) out = static_cast<U>(to_uint(*e, s, key));
  }
  void get(const std::string& s, const std::string& key, bool& out) {
    if (auto* e = take(s, key)) {
      if (e->value == "true") out = true;
      else if (e->value == "false") out = false;
      else fail(e->line, "[" + s + "] " + key + ": expected true or false");
    }
  }
  void get(const std::string& s, const std::string& key, std::string& out) {
    if (auto* e = take(s, key)) out = e->value;
  }
  template <typename E>
    requires std::is_enum_v<E>
  void get(const std::string& s, const std::string& key, E& out) {
    if (auto* e = take(s, key)) {
      try {
        out = enum_from_name<E>(e->value);
      } catch (const InvalidArgument& ex) {
        fail(e->line, "[" + s + "] " + key + ": " + ex.what());
      }
    }
  }
  void get_list(const std::string& s, const std::string& key, std::vector<std::string>& out) {
    if (auto* e = take(s, key)) out = split_list(e->value);
  }

  /// Throws on any section or key nobody consumed.
  void require_all_used() const {
    for (const auto& [s, keys] : sections_)
      for (const auto& [k, e] : keys)
        if (!e.used) fail(e.line, "unknown key [" + s + "] " + k);
  }

  static std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(v);
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  [[noreturn]] static void fail(std::size_t line, const std::string& msg) {
    throw InvalidArgument("config line " + std::to_string(line) + ": " + msg);
  }

 private:
  static std::string strip_comment(const std::string& s) {
    const auto p = s.find('#');
    return p == std::string::npos ? s : s.substr(0, p);
  }
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }
  static double to_double(const ConfigEntry& e, const std::string& s, const std::string& key) {
    try {
      std::size_t pos = 0;
      const double v = std::stod(e.value, &pos);
      if (pos != e.value.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      fail(e.line, "[" + s + "] " + key + ": expected a number, got '" + e.value + "'");
    }
  }
  static std::uint64_t to_uint(const ConfigEntry& e, const std::string& s, const std::string& key) {
    try {
      if (!e.value.empty() && e.value.front() == '-') throw std::invalid_argument("negative");
      std::size_t pos = 0;
      const auto v = std::stoull(e.value, &pos, 0);
      if (pos != e.value.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      fail(e.line, "[" + s + "] " + key + ": expected a non-negative integer, got '" + e.value + "'");
    }
  }

  std::map<std::string, std::map<std::string, ConfigEntry>> sections_;
};

// ----------------------------------------------------------------------------
// Experiment configuration
// ----------------------------------------------------------------------------

struct DataConfig {
  GrammarSpec forget_grammar{GrammarId::forget_grammar};
  GrammarSpec retain_grammar{GrammarId::retain_grammar};
  EvalSetConfig eval;
  std::uint64_t data_seed = 7;  // held-out eval sets
};

inline SearchSpace default_search_space() {
  return {{{"alpha_unlearning", RangeKind::log_uniform, 0.01, 3.0},
           {"alpha_retaining", RangeKind::log_uniform, 1e-3, 1.0},
           {"alpha_adv", RangeKind::log_uniform, 1e-3, 1.0},
           {"mu", RangeKind::uniform, 0.0, 1.0},
           {"fork_every_n_loops", RangeKind::integer, 1.0, 20.0}}};
}

/// Methods without normalization see raw gradient norms, so their step size
/// range sits higher.
inline SearchSpace unnormalized_search_space() {
  SearchSpace s = default_search_space();
  s.params[0] = {"alpha_unlearning", RangeKind::log_uniform, 0.1, 100.0};
  return s;
}

struct ExperimentConfig {
  ArchSpec arch;
  DataConfig data;
  PretrainConfig pretrain;
  UnlearnConfig unlearn;
  AttackConfig attack;
  GuardPolicy guard;
  SearchSettings search;
  std::vector<Method> methods = {Method::mudman,         Method::no_masking,  Method::no_normalization,
                                 Method::no_meta_learning, Method::tar_adapted, Method::no_unlearning};
  std::vector<Normalization> normalization_variants = {Normalization::global_pre_mask, Normalization::per_parameter,
                                                       Normalization::none};
  std::size_t n_base_seeds = 1;
  std::uint64_t first_base_seed = 1;
  std::string out_dir = "results";
  SearchSpace space = default_search_space();
  std::map<std::string, SearchSpace> method_spaces = {{"no_normalization", unnormalized_search_space()},
                                                      {"tar_adapted", unnormalized_search_space()},
                                                      {"variant.none", unnormalized_search_space()}};

  /// Search space for a method name or a "variant.<normalization>" key.
  const SearchSpace& space_for(const std::string& key) const {
    auto it = method_spaces.find(key);
    return it == method_spaces.end() ? space : it->second;
  }

  void validate() const {
    arch.validate();
    pretrain.validate();
    attack.validate();
    guard.validate();
    search.validate();
    space.validate();
    for (const auto& [_, s] : method_spaces) s.validate();
    MUDMAN_REQUIRE(!methods.empty(), "experiment needs at least one method");
    for (std::size_t i = 0; i < methods.size(); ++i)
      for (std::size_t j = 0; j < i; ++j) MUDMAN_REQUIRE(methods[i] != methods[j], "method names must be unique");
    MUDMAN_REQUIRE(n_base_seeds > 0, "n_base_seeds must be positive");
    MUDMAN_REQUIRE(data.forget_grammar.id == GrammarId::forget_grammar && data.retain_grammar.id == GrammarId::retain_grammar,
                   "grammar ids are fixed by section");
    // Every method must fit the shared budget.
    for (Method m : methods) configure_method(unlearn, m).validate();
    for (Normalization n : normalization_variants) {
      UnlearnConfig c = configure_method(unlearn, Method::mudman);
      c.normalization = n;
      c.validate();
    }
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline SearchSpace read_space(ConfigDocument& doc, const std::string& section, SearchSpace base) {
  for (const auto& key : doc.keys(section)) {
    const ConfigEntry* e = doc.take(section, key);
    const auto parts = ConfigDocument::split_list(e->value);
    if (parts.size() != 3) ConfigDocument::fail(e->line, "[" + section + "] " + key + ": expected kind, lo, hi");
    ParamRange r;
    r.name = key;
    try {
      r.kind = enum_from_name<RangeKind>(parts[0]);
      r.lo = std::stod(parts[1]);
      r.hi = std::stod(parts[2]);
    } catch (const std::exception& ex) {
      ConfigDocument::fail(e->line, "[" + section + "] " + key + ": " + ex.what());
    }
    try {
      apply_point(UnlearnConfig{}, SearchSpace{{r}}, {r.lo});
    } catch (const InvalidArgument&) {
      ConfigDocument::fail(e->line, "unknown search parameter " + key);
    }
    bool replaced = false;
    for (auto& p : base.params)
      if (p.name == key) {
        p = r;
        replaced = true;
      }
    if (!replaced) base.params.push_back(r);
  }
  return base;
}

inline void write_space(std::ostringstream& o, const SearchSpace& s) {
  for (const auto& p : s.params)
    o << p.name << " = " << enum_name(p.kind) << ", " << fmt_double(p.lo) << ", " << fmt_double(p.hi) << "\n";
}

inline void read_grammar(ConfigDocument& doc, const std::string& sec, GrammarSpec& g) {
  doc.get(sec, "vocab_size", g.vocab_size);
  doc.get(sec, "overlap_fraction", g.overlap_fraction);
  doc.get(sec, "max_depth", g.max_depth);
  doc.get(sec, "structure_seed", g.structure_seed);
}

inline void write_grammar(std::ostringstream& o, const GrammarSpec& g) {
  o << "vocab_size = " << g.vocab_size << "\noverlap_fraction = " << fmt_double(g.overlap_fraction)
    << "\nmax_depth = " << g.max_depth << "\nstructure_seed = " << g.structure_seed << "\n";
}

}  // namespace detail

inline void read_unlearn_section(ConfigDocument& doc, const std::string& sec, UnlearnConfig& u) {
  doc.get(sec, "alpha_unlearning", u.alpha_unlearning);
  doc.get(sec, "alpha_retaining", u.alpha_retaining);
  doc.get(sec, "alpha_adv", u.alpha_adv);
  doc.get(sec, "mu", u.mu);
  doc.get(sec, "fork_every_n_loops", u.fork_every_n_loops);
  doc.get(sec, "unlearning_loss", u.unlearning_loss);
  doc.get(sec, "selective_logit_normalization", u.selective_logit_normalization);
  doc.get(sec, "normalization", u.normalization);
  doc.get(sec, "masking", u.masking);
  doc.get(sec, "meta_learning", u.meta_learning);
  std::vector<std::string> names;
  doc.get_list(sec, "intervention", names);
  if (!names.empty()) u.intervention = InterventionSet(names);
  doc.get(sec, "pass_budget_unlearn", u.pass_budget_unlearn);
  doc.get(sec, "batch", u.batch);
  doc.get(sec, "seq", u.seq);
  doc.get(sec, "retain_eval_every_loops", u.retain_eval_every_loops);
  doc.get(sec, "seed", u.seed);
}

inline void write_unlearn_section(std::ostringstream& o, const UnlearnConfig& u) {
  using detail::fmt_double;
  o << "alpha_unlearning = " << fmt_double(u.alpha_unlearning) << "\n"
    << "alpha_retaining = " << fmt_double(u.alpha_retaining) << "\n"
    << "alpha_adv = " << fmt_double(u.alpha_adv) << "\n"
    << "mu = " << fmt_double(u.mu) << "\n"
    << "fork_every_n_loops = " << u.fork_every_n_loops << "\n"
    << "unlearning_loss = " << enum_name(u.unlearning_loss) << "\n"
    << "selective_logit_normalization = " << enum_name(u.selective_logit_normalization) << "\n"
    << "normalization = " << enum_name(u.normalization) << "\n"
    << "masking = " << (u.masking ? "true" : "false") << "\n"
    << "meta_learning = " << (u.meta_learning ? "true" : "false") << "\n";
  o << "intervention = ";
  for (std::size_t i = 0; i < u.intervention.names().size(); ++i) o << (i ? ", " : "") << u.intervention.names()[i];
  o << "\n"
    << "pass_budget_unlearn = " << u.pass_budget_unlearn << "\n"
    << "batch = " << u.batch << "\n"
    << "seq = " << u.seq << "\n"
    << "retain_eval_every_loops = " << u.retain_eval_every_loops << "\n"
    << "seed = " << u.seed << "\n";
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  ConfigDocument doc = ConfigDocument::parse(text);
  ExperimentConfig c;

  doc.get("arch", "vocab_size", c.arch.vocab_size);
  doc.get("arch", "d_model", c.arch.d_model);
  doc.get("arch", "n_blocks", c.arch.n_blocks);
  doc.get("arch", "n_heads", c.arch.n_heads);
  doc.get("arch", "d_mlp", c.arch.d_mlp);
  doc.get("arch", "context_len", c.arch.context_len);
  doc.get("arch", "mlp_kind", c.arch.mlp_kind);

  detail::read_grammar(doc, "forget_grammar", c.data.forget_grammar);
  detail::read_grammar(doc, "retain_grammar", c.data.retain_grammar);
  doc.get("data", "eval_batches", c.data.eval.batches);
  doc.get("data", "eval_batch", c.data.eval.batch);
  doc.get("data", "eval_seq", c.data.eval.seq);
  doc.get("data", "data_seed", c.data.data_seed);

  doc.get("pretrain", "steps", c.pretrain.steps);
  doc.get("pretrain", "batch", c.pretrain.batch);
  doc.get("pretrain", "seq", c.pretrain.seq);
  doc.get("pretrain", "lr", c.pretrain.lr);
  doc.get("pretrain", "final_lr_fraction", c.pretrain.final_lr_fraction);
  doc.get("pretrain", "retain_fraction", c.pretrain.retain_fraction);
  doc.get("pretrain", "beta1", c.pretrain.beta1);
  doc.get("pretrain", "beta2", c.pretrain.beta2);
  doc.get("pretrain", "eps", c.pretrain.eps);

  read_unlearn_section(doc, "unlearn", c.unlearn);

  doc.get("attack", "relearn_lr", c.attack.relearn_lr);
  doc.get("attack", "pass_budget_relearn", c.attack.pass_budget_relearn);
  doc.get("attack", "batch", c.attack.batch);
  doc.get("attack", "seq", c.attack.seq);
  doc.get("attack", "eval_every", c.attack.eval_every);

  doc.get("guard", "soft_threshold_offset", c.guard.soft_threshold_offset);
  doc.get("guard", "hard_threshold_offset", c.guard.hard_threshold_offset);
  doc.get("guard", "mode", c.guard.mode);

  doc.get("search", "n_trials", c.search.n_trials);
  doc.get("search", "window", c.search.window);
  doc.get("search", "explore_fraction", c.search.explore_fraction);
  doc.get("search", "top_fraction", c.search.top_fraction);
  doc.get("search", "uniform_mix", c.search.uniform_mix);
  doc.get("search", "round_size", c.search.round_size);

  std::vector<std::string> names;
  doc.get_list("experiment", "methods", names);
  if (doc.take("experiment", "methods")) {
    c.methods.clear();
    for (const auto& n : names) c.methods.push_back(method_from_string(n));
  }
  names.clear();
  doc.get_list("experiment", "normalization_variants", names);
  if (doc.take("experiment", "normalization_variants")) {
    c.normalization_variants.clear();
    for (const auto& n : names) c.normalization_variants.push_back(enum_from_name<Normalization>(n));
  }
  doc.get("experiment", "n_base_seeds", c.n_base_seeds);
  doc.get("experiment", "first_base_seed", c.first_base_seed);
  doc.get("experiment", "out_dir", c.out_dir);

  if (doc.has_section("space")) c.space = detail::read_space(doc, "space", c.space);
  for (const auto& s : doc.section_names()) {
    if (s.rfind("space.", 0) != 0) continue;
    const std::string key = s.substr(6);
    if (key.rfind("variant.", 0) == 0) {
      enum_from_name<Normalization>(key.substr(8));
    } else {
      method_from_string(key);
    }
    const SearchSpace base = c.method_spaces.count(key) ? c.method_spaces[key] : c.space;
    c.method_spaces[key] = detail::read_space(doc, s, base);
  }

  doc.require_all_used();
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

inline std::string to_text(const ExperimentConfig& c) {
  using detail::fmt_double;
  std::ostringstream o;
  o << "[arch]\nvocab_size = " << c.arch.vocab_size << "\nd_model = " << c.arch.d_model
    << "\nn_blocks = " << c.arch.n_blocks << "\nn_heads = " << c.arch.n_heads << "\nd_mlp = " << c.arch.d_mlp
    << "\ncontext_len = " << c.arch.context_len << "\nmlp_kind = " << enum_name(c.arch.mlp_kind) << "\n\n";
  o << "[forget_grammar]\n";
  detail::write_grammar(o, c.data.forget_grammar);
  o << "\n[retain_grammar]\n";
  detail::write_grammar(o, c.data.retain_grammar);
  o << "\n[data]\neval_batches = " << c.data.eval.batches << "\neval_batch = " << c.data.eval.batch
    << "\neval_seq = " << c.data.eval.seq << "\ndata_seed = " << c.data.data_seed << "\n\n";
  o << "[pretrain]\nsteps = " << c.pretrain.steps << "\nbatch = " << c.pretrain.batch << "\nseq = " << c.pretrain.seq
    << "\nlr = " << fmt_double(c.pretrain.lr) << "\nfinal_lr_fraction = " << fmt_double(c.pretrain.final_lr_fraction)
    << "\nretain_fraction = " << fmt_double(c.pretrain.retain_fraction) << "\nbeta1 = " << fmt_double(c.pretrain.beta1)
    << "\nbeta2 = " << fmt_double(c.pretrain.beta2) << "\neps = " << fmt_double(c.pretrain.eps) << "\n\n";
  o << "[unlearn]\n";
  write_unlearn_section(o, c.unlearn);
  o << "\n[attack]\nrelearn_lr = " << fmt_double(c.attack.relearn_lr)
    << "\npass_budget_relearn = " << c.attack.pass_budget_relearn << "\nbatch = " << c.attack.batch
    << "\nseq = " << c.attack.seq << "\neval_every = " << c.attack.eval_every << "\n\n";
  o << "[guard]\nsoft_threshold_offset = " << fmt_double(c.guard.soft_threshold_offset)
    << "\nhard_threshold_offset = " << fmt_double(c.guard.hard_threshold_offset)
    << "\nmode = " << enum_name(c.guard.mode) << "\n\n";
  o << "[search]\nn_trials = " << c.search.n_trials << "\nwindow = " << c.search.window
    << "\nexplore_fraction = " << fmt_double(c.search.explore_fraction)
    << "\ntop_fraction = " << fmt_double(c.search.top_fraction)
    << "\nuniform_mix = " << fmt_double(c.search.uniform_mix) << "\nround_size = " << c.search.round_size << "\n\n";
  o << "[experiment]\nmethods = ";
  for (std::size_t i = 0; i < c.methods.size(); ++i) o << (i ? ", " : "") << to_string(c.methods[i]);
  o << "\nnormalization_variants = ";
  for (std::size_t i = 0; i < c.normalization_variants.size(); ++i)
    o << (i ? ", " : "") << enum_name(c.normalization_variants[i]);
  o << "\nn_base_seeds = " << c.n_base_seeds << "\nfirst_base_seed = " << c.first_base_seed
    << "\nout_dir = " << c.out_dir << "\n\n[space]\n";
  detail::write_space(o, c.space);
  for (const auto& [k, s] : c.method_spaces) {
    o << "\n[space." << k << "]\n";
    detail::write_space(o, s);
  }
  return o.str();
}

/// Applies `key=value` or `section.key=value` overrides (bare keys belong to
/// [unlearn]) on top of a resolved config. Only keys that already appear in
/// the resolved text can be overridden.
inline ExperimentConfig apply_overrides(const ExperimentConfig& c, const std::vector<std::string>& overrides) {
  std::vector<std::string> lines;
  {
    std::istringstream in(to_text(c));
    std::string l;
    while (std::getline(in, l)) lines.push_back(l);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidArgument("override must be key=value: " + ov);
    std::string path = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    std::string section = "unlearn", key = path;
    if (const auto dot = path.rfind('.'); dot != std::string::npos) {
      section = path.substr(0, dot);
      key = path.substr(dot + 1);
    }
    std::string current;
    bool done = false;
    for (auto& l : lines) {
      if (!l.empty() && l.front() == '[') {
        current = l.substr(1, l.size() - 2);
        continue;
      }
      if (current == section && l.rfind(key + " = ", 0) == 0) {
        l = key + " = " + value;
        done = true;
        break;
      }
    }
    if (!done) throw InvalidArgument("unknown override [" + section + "] " + key);
  }
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  return parse_experiment_config(text);
}

}  // namespace mudman
