#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sigrl/checkpoint.hpp"
#include "sigrl/eval.hpp"
#include "sigrl/feature_io.hpp"
#include "sigrl/gradcheck_suites.hpp"
#include "sigrl/trainer.hpp"

namespace sigrl::cli {

using nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

/// Raised for flag combinations CLI11 cannot express.
class UsageError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

/// Reads `key = value` lines ('#' starts a comment) into `--key=value` tokens.
inline std::vector<std::string> config_tokens(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  std::vector<std::string> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError(path + ":" + std::to_string(lineno) + ": empty key");
    out.push_back("--" + key + "=" + value);
  }
  return out;
}

/// Splices config-file tokens in front of the command-line flags so that
/// explicit flags override them.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::optional<std::string> config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file argument");
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!config || rest.empty()) return rest;
  std::vector<std::string> out = {rest.front()};
  for (auto& t : config_tokens(*config)) out.push_back(std::move(t));
  out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

inline std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  const char* env = std::getenv("SIGRL_SEED");
  if (!env || !*env) return 0;
  std::string s(env);
  if (s.find_first_not_of("0123456789") != std::string::npos) {
    throw UsageError("SIGRL_SEED must be a non-negative integer, got '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::out_of_range&) {
    throw UsageError("SIGRL_SEED out of range: " + s);
  }
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir + ": " + ec.message());
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error("write failed for " + path);
}

inline json nullable(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

/// Marks `unseen` (if any) in the label space, replacing the file's flags.
inline void apply_unseen(Dataset& ds, const std::vector<std::size_t>& unseen) {
  if (unseen.empty()) return;
  const std::size_t c = ds.num_classes();
  ds.label_space.seen.assign(c, true);
  for (std::size_t j : unseen) {
    if (j >= c) throw ValueError("unseen label id " + std::to_string(j) + " out of range for " + std::to_string(c) + " classes");
    ds.label_space.seen[j] = false;
  }
}

template <class E>
CLI::CheckedTransformer enum_map(const std::map<std::string, E>& m) {
  std::string names;
  for (const auto& [name, value] : m) names += (names.empty() ? "" : ",") + name;
  CLI::CheckedTransformer t(m, CLI::ignore_case);
  t.description("{" + names + "}");
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Metric reports

inline json metrics_json(const MetricsReport& r, Split split) {
  json j;
  j["protocol"] = to_string(r.protocol);
  j["split"] = to_string(split);
  j["num_samples"] = r.num_samples;
  j["num_labels"] = r.label_names.size();
  j["labels"] = r.label_names;
  j["map"] = r.map;
  for (const auto& t : r.topk) {
    const std::string p = "top" + std::to_string(t.k) + "_";
    j[p + "precision"] = t.prf.precision;
    j[p + "recall"] = t.prf.recall;
    j[p + "f1"] = t.prf.f1;
  }
  json ap = json::object();
  for (std::size_t i = 0; i < r.label_names.size(); ++i) ap[r.label_names[i]] = detail::nullable(r.per_class_ap[i]);
  j["per_class_ap"] = ap;
  return j;
}

inline std::string fmt_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

/// Two-column `metric,value` mirror of the JSON report.
inline std::string metrics_csv(const MetricsReport& r) {
  std::ostringstream s;
  s << "metric,value\n";
  s << "map," << fmt_double(r.map) << "\n";
  for (const auto& t : r.topk) {
    const std::string p = "top" + std::to_string(t.k) + "_";
    s << p << "precision," << fmt_double(t.prf.precision) << "\n";
    s << p << "recall," << fmt_double(t.prf.recall) << "\n";
    s << p << "f1," << fmt_double(t.prf.f1) << "\n";
  }
  for (std::size_t i = 0; i < r.label_names.size(); ++i) {
    s << "ap:" << r.label_names[i] << ",";
    if (r.per_class_ap[i]) s << fmt_double(*r.per_class_ap[i]);
    s << "\n";
  }
  return s.str();
}

// ---------------------------------------------------------------------------
// Subcommands

struct SynthArgs {
  std::string out;
  SynthConfig cfg;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> unseen;
  std::string oracle_checkpoint;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out) {
  SynthConfig cfg = a.cfg;
  cfg.seed = detail::resolve_seed(a.seed);
  Dataset ds = gen_synthetic(cfg);
  detail::apply_unseen(ds, a.unseen);
  write_dataset(ds, a.out);

  out << "wrote " << a.out << "\n";
  out << "C=" << ds.num_classes() << " P=" << ds.num_patches << " D=" << ds.dim() << " D_raw=" << ds.raw_dim
      << " N=" << ds.samples.size() << " seed=" << cfg.seed << "\n";
  out << "splits: train=" << ds.indices(Split::train).size() << " val=" << ds.indices(Split::val).size()
      << " test=" << ds.indices(Split::test).size() << "\n";
  std::map<std::size_t, std::size_t> hist;
  for (const Sample& s : ds.samples) ++hist[s.num_positives()];
  out << "positives per image:";
  for (auto [k, n] : hist) out << " " << k << ":" << n;
  out << "\n";
  if (!ds.label_space.unseen_ids().empty()) {
    out << "unseen:";
    for (std::size_t j : ds.label_space.unseen_ids()) out << " " << ds.label_space.names[j];
    out << "\n";
  }
  if (!a.oracle_checkpoint.empty()) {
    write_checkpoint(oracle_params(synthetic_projection(cfg.seed, cfg.dim, cfg.raw_dim), cfg.seed),
                     a.oracle_checkpoint);
    out << "wrote oracle checkpoint " << a.oracle_checkpoint << "\n";
  }
  return kOk;
}

struct TrainArgs {
  std::string data;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> dim;
  TrainConfig cfg;
  bool spml = false;
  std::optional<std::uint64_t> mask_seed;
  std::vector<std::size_t> unseen;
  UnseenPolicy unseen_policy = UnseenPolicy::mask_annotations;
};

inline json config_json(const TrainArgs& a, const TrainConfig& c, const Dataset& ds) {
  json j;
  j["event"] = "config";
  j["data"] = a.data;
  j["seed"] = c.seed;
  j["classes"] = ds.num_classes();
  j["patches"] = ds.num_patches;
  j["dim"] = ds.dim();
  j["raw_dim"] = ds.raw_dim;
  j["k"] = c.model.k;
  j["gmc_activation"] = c.model.gmc.activation == GatActivation::elu ? "elu" : "tanh";
  j["score_enriched"] = c.model.score_with_enriched;
  j["loss"] = to_string(c.loss.mode);
  j["alpha"] = c.loss.alpha_em;
  j["theta_pos"] = c.loss.theta_pos;
  j["theta_neg"] = c.loss.theta_neg;
  j["temperature"] = c.loss.temperature;
  j["apl_warmup"] = c.loss.apl_warmup_epochs;
  j["assume_negative"] = c.loss.assume_negative;
  j["reduction"] = c.loss.reduction == Reduction::sum ? "sum" : "mean";
  j["lr"] = c.optim.lr;
  j["min_lr"] = c.optim.min_lr;
  j["weight_decay"] = c.optim.weight_decay;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["train_labels"] = c.train_label_embeddings;
  j["spml"] = a.spml;
  j["unseen"] = ds.label_space.unseen_ids();
  j["train_samples"] = ds.indices(Split::train).size();
  return j;
}

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = a.cfg;
  cfg.seed = detail::resolve_seed(a.seed);
  if (cfg.loss.mode != LossMode::ranking_distill && !a.spml) {
    throw UsageError(std::string("--loss ") + to_string(cfg.loss.mode) + " needs --spml");
  }
  Dataset ds = read_dataset(a.data);
  if (a.dim && *a.dim != ds.dim()) {
    throw DimensionError("--dim " + std::to_string(*a.dim) + " does not match dataset " + a.data +
                         " with D=" + std::to_string(ds.dim()));
  }
  detail::apply_unseen(ds, a.unseen);
  if (const auto unseen = ds.label_space.unseen_ids(); !unseen.empty()) {
    ds = split_zsl(ds, unseen, a.unseen_policy).train;
  }
  const std::uint64_t mask_seed = a.mask_seed.value_or(cfg.seed);
  if (a.spml) ds = apply_spml_mask(std::move(ds), mask_seed);

  detail::ensure_dir(a.out_dir);
  const std::string log_path = (std::filesystem::path(a.out_dir) / "train_log.jsonl").string();
  const std::string ckpt_path = (std::filesystem::path(a.out_dir) / "model.sigp").string();
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw Error("cannot open " + log_path + " for writing");

  json header = config_json(a, cfg, ds);
  if (a.spml) header["mask_seed"] = mask_seed;
  log << header.dump() << "\n";

  const FitResult res = fit(ds, cfg, [&](const EpochLog& e) {
    json j;
    j["event"] = "epoch";
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["val_map"] = detail::nullable(e.val_map);
    j["lr"] = e.lr;
    log << j.dump() << "\n";
    log.flush();
    out << "epoch " << e.epoch << " loss " << fmt_double(e.loss);
    if (e.val_map) out << " val_map " << fmt_double(*e.val_map);
    out << "\n";
  });
  write_checkpoint(res.best_params, ckpt_path);
  json done;
  done["event"] = "done";
  done["best_epoch"] = res.best_epoch;
  done["best_val_map"] = detail::nullable(res.best_val_map);
  done["checkpoint"] = "model.sigp";
  log << done.dump() << "\n";
  if (!log) throw Error("write failed for " + log_path);
  out << "wrote " << ckpt_path << " (epoch " << res.best_epoch << ") and " << log_path << "\n";
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out_dir;
  Protocol protocol = Protocol::gzsl;
  Split split = Split::test;
  std::vector<std::size_t> unseen;
  std::vector<std::size_t> ks = {3, 5};
  ModelConfig model;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Dataset ds = read_dataset(a.data);
  detail::apply_unseen(ds, a.unseen);
  const ModelParams params = read_checkpoint(a.checkpoint);
  try {
    check_compatible(params, ds, a.model);
  } catch (const DimensionError& e) {
    throw DimensionError("checkpoint " + a.checkpoint + " vs dataset " + a.data + ": " + e.what());
  }
  const MetricsReport rep = evaluate(params, a.model, ds, a.protocol, a.split, a.ks);
  detail::ensure_dir(a.out_dir);
  const auto dir = std::filesystem::path(a.out_dir);
  detail::write_text((dir / "metrics.json").string(), metrics_json(rep, a.split).dump(2) + "\n");
  detail::write_text((dir / "metrics.csv").string(), metrics_csv(rep));
  out << to_string(rep.protocol) << " on " << to_string(a.split) << " (" << rep.num_samples << " samples, "
      << rep.label_names.size() << " labels): mAP " << fmt_double(rep.map) << "\n";
  for (const auto& t : rep.topk) {
    out << "top-" << t.k << ": P " << fmt_double(t.prf.precision) << " R " << fmt_double(t.prf.recall) << " F1 "
        << fmt_double(t.prf.f1) << "\n";
  }
  return kOk;
}

inline int cmd_gradcheck(GradScope scope, std::ostream& out) {
  const auto cases = run_gradcheck_suite(scope);
  bool ok = true;
  out << std::left << std::setw(22) << "case" << std::setw(24) << "input" << std::setw(14) << "max_rel_err"
      << std::setw(10) << "tol"
      << "status\n";
  for (const auto& c : cases) {
    for (const auto& e : c.report.entries) {
      const bool pass = e.finite && e.max_rel_error <= c.report.tol;
      std::ostringstream err;
      err << std::scientific << std::setprecision(3) << e.max_rel_error;
      std::ostringstream tol;
      tol << std::scientific << std::setprecision(0) << c.report.tol;
      out << std::setw(22) << c.name << std::setw(24) << e.name << std::setw(14) << err.str() << std::setw(10)
          << tol.str() << (pass ? "ok" : "FAIL") << "\n";
    }
    if (!c.report.diagnostic.empty()) out << "  " << c.report.diagnostic << "\n";
    ok = ok && c.report.passed;
  }
  out << "scope " << to_string(scope) << ": " << (ok ? "all passed" : "FAILED") << "\n";
  return ok ? kOk : kRuntime;
}

// ---------------------------------------------------------------------------
// Front door

/// Parses `args` (without the program name) and runs one subcommand.
inline int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Label-graph multi-label recognition on precomputed features", "sigrl"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  const std::map<std::string, LossMode> loss_modes = {
      {"ranking", LossMode::ranking_distill}, {"iun", LossMode::iun}, {"em", LossMode::em}, {"em_apl", LossMode::em_apl}};
  const std::map<std::string, Protocol> protocols = {{"zsl", Protocol::zsl}, {"gzsl", Protocol::gzsl}};
  const std::map<std::string, Split> splits = {{"train", Split::train}, {"val", Split::val}, {"test", Split::test}};
  const std::map<std::string, UnseenPolicy> policies = {{"mask", UnseenPolicy::mask_annotations},
                                                        {"drop", UnseenPolicy::drop_images}};
  const std::map<std::string, GatActivation> activations = {{"elu", GatActivation::elu}, {"tanh", GatActivation::tanh}};
  const std::map<std::string, Reduction> reductions = {{"sum", Reduction::sum}, {"mean", Reduction::mean}};

  auto add_model_flags = [&](CLI::App* sub, ModelConfig& m) {
    sub->add_option("--k", m.k, "Top-k size of the local score term")->check(CLI::PositiveNumber);
    sub->add_option("--gmc-activation", m.gmc.activation, "GAT output activation (elu|tanh)")
        ->transform(detail::enum_map(activations));
    sub->add_flag("--score-enriched", m.score_with_enriched, "Score with the GAT-enriched label embeddings");
  };

  // synth
  SynthArgs sa;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic SIGF dataset");
  synth->add_option("--out", sa.out, "Output dataset path")->required();
  synth->add_option("--classes", sa.cfg.classes)->check(CLI::Range(2, 1 << 20));
  synth->add_option("--patches", sa.cfg.patches)->check(CLI::PositiveNumber);
  synth->add_option("--dim", sa.cfg.dim)->check(CLI::PositiveNumber);
  synth->add_option("--raw-dim", sa.cfg.raw_dim)->check(CLI::PositiveNumber);
  synth->add_option("--samples", sa.cfg.samples)->check(CLI::PositiveNumber);
  synth->add_option("--noise", sa.cfg.noise_sigma)->check(CLI::NonNegativeNumber);
  synth->add_option("--min-labels", sa.cfg.min_labels)->check(CLI::PositiveNumber);
  synth->add_option("--max-labels", sa.cfg.max_labels)->check(CLI::PositiveNumber);
  synth->add_option("--train-fraction", sa.cfg.train_fraction)->check(CLI::Range(0.0, 1.0));
  synth->add_option("--val-fraction", sa.cfg.val_fraction)->check(CLI::Range(0.0, 1.0));
  auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "RNG seed (falls back to SIGRL_SEED)");
  synth->add_option("--unseen", sa.unseen, "Comma-separated label ids to mark unseen")->delimiter(',');
  synth->add_option("--oracle-checkpoint", sa.oracle_checkpoint, "Also write the generator's oracle checkpoint");

  // train
  TrainArgs ta;
  std::uint64_t train_seed = 0, mask_seed = 0;
  std::size_t train_dim = 0;
  auto* train = app.add_subcommand("train", "Train a model on a SIGF dataset");
  train->add_option("--data", ta.data, "Dataset path")->required()->check(CLI::ExistingFile);
  train->add_option("--out-dir", ta.out_dir, "Directory for model.sigp and train_log.jsonl")->required();
  auto* train_seed_opt = train->add_option("--seed", train_seed, "RNG seed (falls back to SIGRL_SEED)");
  auto* train_dim_opt = train->add_option("--dim", train_dim, "Expected embedding width D")->check(CLI::PositiveNumber);
  add_model_flags(train, ta.cfg.model);
  train->add_option("--loss", ta.cfg.loss.mode, "ranking|iun|em|em_apl")->transform(detail::enum_map(loss_modes));
  train->add_flag("--spml", ta.spml, "Keep one observed positive per training image");
  auto* mask_seed_opt = train->add_option("--mask-seed", mask_seed, "Seed of the single-positive mask");
  train->add_option("--alpha", ta.cfg.loss.alpha_em, "Entropy weight")->check(CLI::NonNegativeNumber);
  train->add_option("--theta-pos", ta.cfg.loss.theta_pos)->check(CLI::Range(0.0, 1.0));
  train->add_option("--theta-neg", ta.cfg.loss.theta_neg)->check(CLI::Range(0.0, 1.0));
  train->add_option("--temperature", ta.cfg.loss.temperature)->check(CLI::PositiveNumber);
  train->add_option("--apl-warmup", ta.cfg.loss.apl_warmup_epochs, "Epochs before pseudo-labels switch on");
  train->add_option("--apl-pos-weight", ta.cfg.loss.apl_pos_weight)->check(CLI::NonNegativeNumber);
  train->add_option("--apl-neg-weight", ta.cfg.loss.apl_neg_weight)->check(CLI::NonNegativeNumber);
  train->add_flag("--assume-negative", ta.cfg.loss.assume_negative, "Rank unannotated labels as negatives");
  train->add_option("--reduction", ta.cfg.loss.reduction, "sum|mean")->transform(detail::enum_map(reductions));
  train->add_option("--lr", ta.cfg.optim.lr)->check(CLI::NonNegativeNumber);
  train->add_option("--min-lr", ta.cfg.optim.min_lr)->check(CLI::NonNegativeNumber);
  train->add_option("--weight-decay", ta.cfg.optim.weight_decay)->check(CLI::NonNegativeNumber);
  train->add_option("--batch-size", ta.cfg.batch_size)->check(CLI::PositiveNumber);
  train->add_option("--epochs", ta.cfg.epochs)->check(CLI::PositiveNumber);
  train->add_flag("--train-labels", ta.cfg.train_label_embeddings, "Train the label embeddings");
  train->add_option("--unseen", ta.unseen, "Comma-separated unseen label ids")->delimiter(',');
  train->add_option("--unseen-policy", ta.unseen_policy, "mask|drop")->transform(detail::enum_map(policies));

  // eval
  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--data", ea.data)->required()->check(CLI::ExistingFile);
  eval->add_option("--out-dir", ea.out_dir, "Directory for metrics.json and metrics.csv")->required();
  eval->add_option("--protocol", ea.protocol, "zsl|gzsl")->transform(detail::enum_map(protocols));
  eval->add_option("--split", ea.split, "train|val|test")->transform(detail::enum_map(splits));
  eval->add_option("--unseen", ea.unseen, "Comma-separated unseen label ids")->delimiter(',');
  eval->add_option("--ks", ea.ks, "Top-k sizes")->delimiter(',')->check(CLI::PositiveNumber);
  add_model_flags(eval, ea.model);

  // gradcheck
  std::string scope = "ops";
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--scope", scope, "ops|gmc|svfr|loss|full")
      ->check(CLI::IsMember({"ops", "gmc", "svfr", "loss", "full"}));

  try {
    std::vector<std::string> args = detail::expand_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (synth->parsed()) {
      if (*synth_seed_opt) sa.seed = synth_seed;
      return cmd_synth(sa, out);
    }
    if (train->parsed()) {
      if (*train_seed_opt) ta.seed = train_seed;
      if (*mask_seed_opt) ta.mask_seed = mask_seed;
      if (*train_dim_opt) ta.dim = train_dim;
      return cmd_train(ta, out);
    }
    if (eval->parsed()) return cmd_eval(ea, out);
    if (gc->parsed()) return cmd_gradcheck(parse_grad_scope(scope), out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ValueError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace sigrl::cli
