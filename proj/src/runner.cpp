#include "plab/runner.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "plab/binio.hpp"
#include "plab/capacity.hpp"
#include "plab/csv.hpp"
#include "plab/error.hpp"
#include "plab/rl.hpp"
#include "plab/svg.hpp"
#include "plab/tasks.hpp"
#include "plab/td.hpp"

namespace plab::runner {

namespace fs = std::filesystem;

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Seqfit: return "seqfit";
    case ExperimentKind::RlTrain: return "rl-train";
    case ExperimentKind::CapacityProbe: return "capacity-probe";
    case ExperimentKind::TdSim: return "td-sim";
    case ExperimentKind::Rank: return "rank";
  }
  return "?";
}

ExperimentKind parse_kind(const std::string& name) {
  for (auto k : {ExperimentKind::Seqfit, ExperimentKind::RlTrain, ExperimentKind::CapacityProbe,
                 ExperimentKind::TdSim, ExperimentKind::Rank})
    if (to_string(k) == name) return k;
  throw ConfigError("config field 'kind': unknown experiment kind '" + name +
                    "' (expected seqfit, rl-train, capacity-probe, td-sim or rank)");
}

std::string to_string(RunStatus status) {
  switch (status) {
    case RunStatus::Planned: return "planned";
    case RunStatus::Completed: return "completed";
    case RunStatus::Cached: return "cached";
    case RunStatus::Failed: return "failed";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Schema

namespace {

Json data_defaults(int num_inputs) {
  return {{"source", "synthetic"}, {"images", ""},  {"labels", ""},
          {"num_inputs", num_inputs}, {"dim", 64}, {"clusters", 100}, {"seed", 1234}};
}

Json infer_defaults() {
  return {{"enabled", false}, {"k", 10}, {"beta", 100.0}, {"alpha", 0.1}, {"head_seed", 0}};
}

Json rank_defaults() { return {{"epsilon", kDefaultRankEpsilon}, {"delta", kDefaultSrankDelta}}; }

Json probe_defaults() {
  return {{"num_target_seeds", 10}, {"budget_steps", 2000}, {"batch_size", 32}, {"oldest_fraction", 0.1},
          {"lr", 1e-3}};
}

// Fields whose value must be one of a fixed set of names.
const std::map<std::string, std::vector<std::string>>& enum_fields() {
  static const std::map<std::string, std::vector<std::string>> fields{
      {"data.source", {"synthetic", "idx"}},
      {"task.target", {"random", "hash", "threshold"}},
      {"env.reward", {"sparse", "dense", "zeroed"}},
      {"agent.algorithm", {"dqn", "double_dqn"}},
      {"flow.setting", {"scaled_lr", "scaled_variance"}},
  };
  return fields;
}

// Required fields left at their empty default.
std::vector<std::string> required_fields(ExperimentKind kind) {
  if (kind == ExperimentKind::CapacityProbe) return {"probe.checkpoint"};
  return {};
}

enum class LeafType { Integer, Number, Boolean, String, List };

LeafType leaf_type(const Json& def) {
  if (def.is_boolean()) return LeafType::Boolean;
  if (def.is_number_integer()) return LeafType::Integer;
  if (def.is_number()) return LeafType::Number;
  if (def.is_string()) return LeafType::String;
  return LeafType::List;
}

std::string type_name(LeafType t) {
  switch (t) {
    case LeafType::Integer: return "integer";
    case LeafType::Number: return "number";
    case LeafType::Boolean: return "boolean";
    case LeafType::String: return "string";
    case LeafType::List: return "list of integers";
  }
  return "?";
}

std::string json_type(const Json& v) {
  if (v.is_number_integer()) return "integer";
  return v.type_name();
}

ConfigError type_error(const std::string& path, LeafType expected, const Json& got) {
  return ConfigError("config field '" + path + "': expected " + type_name(expected) + " (or a list of them to sweep), got " +
                     json_type(got));
}

// Normalised scalar of the expected type, or nullopt on mismatch.
std::optional<Json> coerce(LeafType t, const Json& v) {
  switch (t) {
    case LeafType::Integer:
      if (v.is_number_integer()) return Json(v.get<std::int64_t>());
      if (v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<std::int64_t>(v.get<double>())))
        return Json(static_cast<std::int64_t>(v.get<double>()));
      return std::nullopt;
    case LeafType::Number:
      if (v.is_number()) return Json(v.get<double>());
      return std::nullopt;
    case LeafType::Boolean:
      if (v.is_boolean()) return v;
      return std::nullopt;
    case LeafType::String:
      if (v.is_string()) return v;
      return std::nullopt;
    case LeafType::List: {
      if (!v.is_array()) return std::nullopt;
      Json out = Json::array();
      for (const auto& e : v) {
        if (!e.is_number_integer()) return std::nullopt;
        out.push_back(e.get<std::int64_t>());
      }
      return out;
    }
  }
  return std::nullopt;
}

bool is_sweep(LeafType t, const Json& v) {
  if (!v.is_array()) return false;
  if (t != LeafType::List) return true;
  return !v.empty() && v.front().is_array();
}

void check_enum(const std::string& path, const Json& v) {
  const auto it = enum_fields().find(path);
  if (it == enum_fields().end()) return;
  const auto& allowed = it->second;
  if (std::find(allowed.begin(), allowed.end(), v.get<std::string>()) != allowed.end()) return;
  std::string names;
  for (std::size_t i = 0; i < allowed.size(); ++i) names += (i ? ", " : "") + allowed[i];
  throw ConfigError("config field '" + path + "': unknown value '" + v.get<std::string>() + "' (expected one of " +
                    names + ")");
}

Json resolve_leaf(const std::string& path, const Json& def, const Json& v) {
  const LeafType t = leaf_type(def);
  if (is_sweep(t, v)) {
    if (v.empty()) throw ConfigError("config field '" + path + "': sweep list is empty");
    Json out = Json::array();
    for (const auto& e : v) {
      auto c = coerce(t, e);
      if (!c) throw type_error(path, t, e);
      if (t == LeafType::String) check_enum(path, *c);
      out.push_back(*c);
    }
    return out;
  }
  auto c = coerce(t, v);
  if (!c) throw type_error(path, t, v);
  if (t == LeafType::String) check_enum(path, *c);
  return *c;
}

void merge_block(const Json& defaults, const Json& user, const std::string& prefix, Json& out) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) throw ConfigError("config field '" + path + "': unknown key");
    const Json& def = defaults.at(it.key());
    if (def.is_object()) {
      if (!it.value().is_object())
        throw ConfigError("config field '" + path + "': expected object, got " + json_type(it.value()));
      merge_block(def, it.value(), path, out[it.key()]);
    } else {
      out[it.key()] = resolve_leaf(path, def, it.value());
    }
  }
}

const Json& at_path(const Json& root, const std::string& path) {
  const Json* cur = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    cur = &cur->at(path.substr(start, dot - start));
    if (dot == std::string::npos) return *cur;
    start = dot + 1;
  }
}

Json& at_path(Json& root, const std::string& path) {
  return const_cast<Json&>(at_path(static_cast<const Json&>(root), path));
}

void collect_axes(const Json& defaults, const Json& params, const std::string& prefix, std::vector<SweepAxis>& out) {
  for (auto it = defaults.begin(); it != defaults.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    const Json& v = params.at(it.key());
    if (it.value().is_object()) {
      collect_axes(it.value(), v, path, out);
    } else if (is_sweep(leaf_type(it.value()), v)) {
      out.push_back({path, std::vector<Json>(v.begin(), v.end())});
    }
  }
}

}  // namespace

Json default_params(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Seqfit:
      return {{"data", data_defaults(1000)},
              {"learner", {{"hidden", {32, 32}}}},
              {"task",
               {{"target", "random"},
                {"iterations", 30},
                {"steps_per_iter", 0},
                {"batch_size", 64},
                {"lr", 1e-3},
                {"fixed_target", false}}},
              {"infer", infer_defaults()},
              {"rank", rank_defaults()}};
    case ExperimentKind::RlTrain: {
      Json probe = probe_defaults();
      probe["enabled"] = false;
      return {{"env", {{"size", 8}, {"reward", "sparse"}, {"gamma", 0.99}, {"horizon", 0}}},
              {"agent",
               {{"algorithm", "dqn"},
                {"hidden", {128, 64}},
                {"width_multiplier", 1},
                {"concat_random_features", false},
                {"total_steps", 50000},
                {"checkpoint_period", 5000},
                {"target_update_period", 1000},
                {"learn_start", 1000},
                {"update_period", 1},
                {"buffer_capacity", 50000},
                {"batch_size", 32},
                {"lr", 1e-3},
                {"epsilon_start", 1.0},
                {"epsilon_end", 0.05},
                {"epsilon_decay", 10000},
                {"rank_samples", 5000},
                {"save_checkpoints", true}}},
              {"infer", infer_defaults()},
              {"rc", {{"enabled", false}, {"num_heads", 5}, {"cumulant_scale", 10.0}}},
              {"probe", probe},
              {"rank", rank_defaults()}};
    }
    case ExperimentKind::CapacityProbe: {
      Json probe = probe_defaults();
      probe["checkpoint"] = "";
      return {{"probe", probe}};
    }
    case ExperimentKind::TdSim:
      return {{"mrp", {{"states", 5}, {"gamma", 0.9}, {"zero_reward", false}}},
              {"flow",
               {{"features", 4},
                {"heads", 512},
                {"setting", "scaled_lr"},
                {"beta", 0.0},
                {"phi0_scale", 1.0},
                {"dt", 1e-3},
                {"t_end", 5.0},
                {"snapshot_stride", 100}}},
              {"rank", {{"epsilon", kDefaultRankEpsilon}}}};
    case ExperimentKind::Rank:
      return {{"data", data_defaults(10000)},
              {"learner", {{"hidden", {32, 32}}}},
              {"sample_sizes", {128, 256, 512, 1024, 2048}},
              {"resamples", 20},
              {"rank", rank_defaults()}};
  }
  return Json::object();
}

ExperimentConfig config_from_json(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object at the top level, got " + json_type(doc));
  if (!doc.contains("kind")) throw ConfigError("config: missing required field 'kind' at path 'kind'");
  if (!doc.at("kind").is_string())
    throw ConfigError("config field 'kind': expected string, got " + json_type(doc.at("kind")));

  ExperimentConfig cfg;
  cfg.kind = parse_kind(doc.at("kind").get<std::string>());
  const Json defaults = default_params(cfg.kind);
  cfg.params = defaults;

  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& key = it.key();
    const Json& v = it.value();
    if (key == "kind") continue;
    if (key == "seeds") {
      if (!v.is_array() || v.empty()) throw ConfigError("config field 'seeds': expected non-empty list of integers");
      cfg.seeds.clear();
      for (const auto& s : v) {
        if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<std::int64_t>() < 0))
          throw ConfigError("config field 'seeds': expected non-negative integer, got " + json_type(s));
        cfg.seeds.push_back(s.get<std::uint64_t>());
      }
    } else if (key == "output_dir") {
      if (!v.is_string()) throw ConfigError("config field 'output_dir': expected string, got " + json_type(v));
      cfg.output_dir = v.get<std::string>();
    } else if (defaults.contains(key)) {
      const Json& def = defaults.at(key);
      if (def.is_object()) {
        if (!v.is_object()) throw ConfigError("config field '" + key + "': expected object, got " + json_type(v));
        merge_block(def, v, key, cfg.params[key]);
      } else {
        cfg.params[key] = resolve_leaf(key, def, v);
      }
    } else {
      throw ConfigError("config field '" + key + "': unknown key for kind " + to_string(cfg.kind));
    }
  }

  for (const auto& path : required_fields(cfg.kind)) {
    const Json& v = at_path(cfg.params, path);
    if (v.is_string() && v.get<std::string>().empty())
      throw ConfigError("config: missing required field '" + path.substr(path.rfind('.') + 1) + "' at path '" +
                        path + "'");
  }
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(doc);
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return parse_config(s.str());
}

Json ExperimentConfig::to_json() const {
  Json doc = params;
  doc["kind"] = to_string(kind);
  doc["seeds"] = seeds;
  if (!output_dir.empty()) doc["output_dir"] = output_dir;
  return doc;
}

std::string serialize(const ExperimentConfig& cfg) { return cfg.to_json().dump(); }

// ---------------------------------------------------------------------------
// Planning

std::vector<SweepAxis> sweep_axes(const ExperimentConfig& cfg) {
  std::vector<SweepAxis> axes;
  collect_axes(default_params(cfg.kind), cfg.params, "", axes);
  return axes;
}

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string make_run_id(ExperimentKind kind, const Json& params, std::uint64_t seed) {
  const Json doc{{"kind", to_string(kind)}, {"params", params}, {"seed", seed}};
  return sha256_hex(doc.dump()).substr(0, 16);
}

std::string config_id(const ExperimentConfig& cfg) {
  Json doc = cfg.to_json();
  doc.erase("output_dir");
  return sha256_hex(doc.dump()).substr(0, 16);
}

std::vector<PlannedRun> plan_runs(const ExperimentConfig& cfg) {
  const auto axes = sweep_axes(cfg);
  std::size_t combos = 1;
  for (const auto& a : axes) combos *= a.values.size();

  std::vector<PlannedRun> plan;
  std::vector<std::size_t> idx(axes.size(), 0);
  for (std::size_t c = 0; c < combos; ++c) {
    Json params = cfg.params;
    std::vector<Json> values;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      at_path(params, axes[a].path) = axes[a].values[idx[a]];
      values.push_back(axes[a].values[idx[a]]);
    }
    for (auto seed : cfg.seeds) plan.push_back({make_run_id(cfg.kind, params, seed), seed, params, values});
    // Odometer with the last axis fastest.
    for (std::size_t a = axes.size(); a-- > 0;) {
      if (++idx[a] < axes[a].values.size()) break;
      idx[a] = 0;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Execution

namespace {

Dataset load_dataset(const Json& d) {
  const int n = d.at("num_inputs").get<int>();
  const auto seed = d.at("seed").get<std::uint64_t>();
  if (d.at("source") == "synthetic") return synth_inputs(seed, n, d.at("dim").get<int>(), d.at("clusters").get<int>());
  const std::string images = d.at("images").get<std::string>();
  if (images.empty()) throw ConfigError("config field 'data.images': required when data.source is idx");
  const std::string labels = d.at("labels").get<std::string>();
  Dataset full = load_idx(images, labels.empty() ? std::nullopt : std::optional<fs::path>(labels));
  if (n > 0 && n < full.size()) return subsample(full, n, seed);
  return full;
}

std::vector<int> widths_for(int in, const Json& hidden, int out) {
  std::vector<int> w{in};
  for (const auto& h : hidden) w.push_back(h.get<int>());
  w.push_back(out);
  return w;
}

std::optional<InferConfig> infer_from(const Json& j) {
  if (!j.at("enabled").get<bool>()) return std::nullopt;
  InferConfig c;
  c.k = j.at("k").get<int>();
  c.beta = j.at("beta").get<double>();
  c.alpha = j.at("alpha").get<double>();
  c.head_seed = j.at("head_seed").get<std::uint64_t>();
  c.validate();
  return c;
}

ProbeConfig probe_from(const Json& j, std::uint64_t seed) {
  ProbeConfig c;
  c.num_target_seeds = j.at("num_target_seeds").get<int>();
  c.budget_steps = j.at("budget_steps").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.oldest_fraction = j.at("oldest_fraction").get<double>();
  c.optimizer.learning_rate = j.at("lr").get<double>();
  c.target_seed = derive_seed(seed, 1);
  c.batch_seed = derive_seed(seed, 2);
  return c;
}

void write_csv(std::vector<fs::path>& outputs, const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
  csv::write_file(path, header, rows);
  outputs.push_back(path);
}

std::vector<fs::path> run_seqfit(const Json& p, std::uint64_t seed, const fs::path& dir) {
  const Dataset data = load_dataset(p.at("data"));
  const Json& task = p.at("task");
  SequenceConfig sc;
  sc.learner = MlpSpec(widths_for(static_cast<int>(data.dim()), p.at("learner").at("hidden"), 1));
  sc.learner_seed = derive_seed(seed, 1);
  sc.task = parse_target_kind(task.at("target").get<std::string>());
  sc.task_seed = derive_seed(seed, 2);
  sc.batch_seed = derive_seed(seed, 3);
  sc.num_iterations = task.at("iterations").get<int>();
  const int steps = task.at("steps_per_iter").get<int>();
  sc.steps_per_iter = steps > 0 ? steps : default_steps_per_iter(sc.task);
  sc.batch_size = task.at("batch_size").get<int>();
  sc.optimizer.learning_rate = task.at("lr").get<double>();
  sc.fixed_target = task.at("fixed_target").get<bool>();
  sc.infer = infer_from(p.at("infer"));
  sc.rank_epsilon = p.at("rank").at("epsilon").get<double>();
  sc.srank_delta = p.at("rank").at("delta").get<double>();

  const SequenceResult res = run_sequence(sc, data);
  std::vector<std::vector<double>> rows;
  for (const auto& r : res.records) rows.push_back(sequence_csv_row(r));
  std::vector<fs::path> out;
  write_csv(out, dir / "records.csv", sequence_csv_header(), rows);
  return out;
}

std::vector<fs::path> run_rl(const Json& p, std::uint64_t seed, const fs::path& dir) {
  const Json& e = p.at("env");
  GridWorld env = make_gridworld(e.at("size").get<int>(), parse_reward_mode(e.at("reward").get<std::string>()));
  env.gamma = e.at("gamma").get<double>();
  if (e.at("horizon").get<int>() > 0) env.horizon = e.at("horizon").get<int>();

  const Json& a = p.at("agent");
  AgentConfig cfg;
  cfg.algorithm = parse_algorithm(a.at("algorithm").get<std::string>());
  cfg.network.hidden = a.at("hidden").get<std::vector<int>>();
  cfg.network.width_multiplier = a.at("width_multiplier").get<int>();
  cfg.network.concat_random_features = a.at("concat_random_features").get<bool>();
  cfg.total_steps = a.at("total_steps").get<std::int64_t>();
  cfg.checkpoint_period = a.at("checkpoint_period").get<std::int64_t>();
  cfg.target_update_period = a.at("target_update_period").get<int>();
  cfg.learn_start = a.at("learn_start").get<int>();
  cfg.update_period = a.at("update_period").get<int>();
  cfg.buffer_capacity = a.at("buffer_capacity").get<std::size_t>();
  cfg.batch_size = a.at("batch_size").get<int>();
  cfg.optimizer.learning_rate = a.at("lr").get<double>();
  cfg.epsilon = {a.at("epsilon_start").get<double>(), a.at("epsilon_end").get<double>(),
                 a.at("epsilon_decay").get<int>()};
  cfg.rank_samples = a.at("rank_samples").get<int>();
  cfg.rank_epsilon = p.at("rank").at("epsilon").get<double>();
  cfg.srank_delta = p.at("rank").at("delta").get<double>();
  cfg.infer = infer_from(p.at("infer"));
  if (p.at("rc").at("enabled").get<bool>())
    cfg.rc = RcConfig{p.at("rc").at("num_heads").get<int>(), p.at("rc").at("cumulant_scale").get<double>(), 0};

  const bool save = a.at("save_checkpoints").get<bool>();
  const Json& probe = p.at("probe");
  if (probe.at("enabled").get<bool>() && !save)
    throw ConfigError("config field 'probe.enabled': needs agent.save_checkpoints");

  const AgentResult res = train_agent(env, cfg, seed, save ? std::optional<fs::path>(dir) : std::nullopt);

  std::vector<fs::path> out;
  std::vector<std::vector<double>> rows;
  for (const auto& r : res.log.rows) rows.push_back(training_csv_row(r));
  write_csv(out, dir / "training.csv", training_csv_header(), rows);

  rows.clear();
  for (const auto& ep : res.log.episodes)
    rows.push_back({static_cast<double>(ep.end_step), ep.episode_return, static_cast<double>(ep.length),
                    ep.reached_goal ? 1.0 : 0.0});
  write_csv(out, dir / "episodes.csv", {"end_step", "episode_return", "length", "reached_goal"}, rows);

  if (probe.at("enabled").get<bool>()) {
    const ProbeConfig pc = probe_from(probe, derive_seed(seed, 10));
    rows.clear();
    for (const auto& r : res.log.rows) {
      const auto cap = probe_checkpoint_capacity(dir / ("step_" + std::to_string(r.step)), pc);
      rows.push_back({static_cast<double>(r.step), cap.mean_mse});
    }
    write_csv(out, dir / "capacity.csv", {"step", "mean_mse"}, rows);
  }
  return out;
}

std::vector<fs::path> run_probe(const Json& p, std::uint64_t seed, const fs::path& dir) {
  const Json& probe = p.at("probe");
  const auto cap = probe_checkpoint_capacity(probe.at("checkpoint").get<std::string>(), probe_from(probe, seed));
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < cap.per_seed_mse.size(); ++i)
    rows.push_back({static_cast<double>(i), cap.per_seed_mse[i]});
  std::vector<fs::path> out;
  write_csv(out, dir / "capacity.csv", {"target_index", "final_mse"}, rows);
  write_csv(out, dir / "summary.csv", {"mean_mse"}, {{cap.mean_mse}});
  return out;
}

std::vector<fs::path> run_td(const Json& p, std::uint64_t seed, const fs::path& dir) {
  const Json& m = p.at("mrp");
  const Json& f = p.at("flow");
  Mrp mrp = random_mrp(m.at("states").get<int>(), m.at("gamma").get<double>(), derive_seed(seed, 1));
  if (m.at("zero_reward").get<bool>()) mrp.R.setZero();

  const int d = f.at("features").get<int>();
  const int heads = f.at("heads").get<int>();
  if (d < 1 || heads < 1) throw ConfigError("config fields 'flow.features' and 'flow.heads' must be >= 1");
  Rng rng = make_rng(seed, 2);
  Matrix phi0(mrp.num_states(), d);
  const double scale = f.at("phi0_scale").get<double>();
  for (Eigen::Index i = 0; i < phi0.size(); ++i) phi0.data()[i] = scale * standard_normal(rng);

  // scaled_lr: alpha = 1/M with unit-variance heads; scaled_variance: alpha = 1
  // with head variance 1/M.
  const bool scaled_lr = f.at("setting") == "scaled_lr";
  const double inv_m = 1.0 / static_cast<double>(heads);
  const double beta = f.at("beta").get<double>();
  const FlowState init = init_flow(phi0, heads, scaled_lr ? inv_m : 1.0, beta, scaled_lr ? 1.0 : inv_m,
                                   derive_seed(seed, 3));
  FlowOptions opt;
  opt.dt = f.at("dt").get<double>();
  opt.t_end = f.at("t_end").get<double>();
  opt.fixed_weights = beta == 0.0;
  opt.snapshot_stride = f.at("snapshot_stride").get<int>();
  const auto traj = simulate_ensemble_flow(mrp, init, opt);

  // The infinite-ensemble limit keeps the summed heads as a noise term only
  // when the head variance shrinks instead of the learning rate.
  std::optional<NoiseVector> noise;
  if (!scaled_lr) noise = NoiseVector{init.w.rowwise().sum()};

  const double eps = p.at("rank").at("epsilon").get<double>();
  std::vector<std::vector<double>> sim_rows, cf_rows, dev_rows;
  for (const auto& s : traj) {
    const Matrix cf = closed_form_phi(mrp, phi0, s.t, noise);
    sim_rows.push_back(trajectory_csv_row(rank_point(s.t, s.phi, eps)));
    cf_rows.push_back(trajectory_csv_row(rank_point(s.t, cf, eps)));
    dev_rows.push_back({s.t, (s.phi - cf).cwiseAbs().maxCoeff()});
  }
  std::vector<fs::path> out;
  write_csv(out, dir / "trajectory.csv", trajectory_csv_header(), sim_rows);
  write_csv(out, dir / "closed_form.csv", trajectory_csv_header(), cf_rows);
  write_csv(out, dir / "deviation.csv", {"t", "max_abs_deviation"}, dev_rows);
  return out;
}

std::vector<fs::path> run_rank(const Json& p, std::uint64_t seed, const fs::path& dir) {
  const Dataset pool = load_dataset(p.at("data"));
  const Params net = init_params(MlpSpec(widths_for(static_cast<int>(pool.dim()), p.at("learner").at("hidden"), 1)),
                                 derive_seed(seed, 1));
  const double eps = p.at("rank").at("epsilon").get<double>();
  const double delta = p.at("rank").at("delta").get<double>();
  const int resamples = p.at("resamples").get<int>();
  std::vector<std::vector<double>> rows;
  for (const auto& nj : p.at("sample_sizes")) {
    const int n = nj.get<int>();
    for (int r = 0; r < resamples; ++r) {
      const Dataset sample = subsample(pool, n, derive_seed(derive_seed(seed, 2), static_cast<std::uint64_t>(n) * 1000003u + r));
      const RankReport rep = rank_report(FeatureMatrix(features(net, sample.inputs)), eps, delta);
      std::vector<double> row{static_cast<double>(r)};
      const auto rest = rank_csv_row(rep);
      row.insert(row.end(), rest.begin(), rest.end());
      rows.push_back(std::move(row));
    }
  }
  std::vector<fs::path> out;
  write_csv(out, dir / "rank.csv", primary_table(ExperimentKind::Rank).header, rows);

  // Spectrum over the whole pool, the large-sample reference for the resamples.
  const Vector sv = scaled_singular_values(FeatureMatrix(features(net, pool.inputs)));
  rows.clear();
  for (Eigen::Index i = 0; i < sv.size(); ++i) rows.push_back({static_cast<double>(i + 1), sv(i)});
  write_csv(out, dir / "spectrum.csv", {"index", "singular_value"}, rows);
  return out;
}

}  // namespace

std::vector<fs::path> execute_run(ExperimentKind kind, const Json& params, std::uint64_t seed, const fs::path& dir) {
  switch (kind) {
    case ExperimentKind::Seqfit: return run_seqfit(params, seed, dir);
    case ExperimentKind::RlTrain: return run_rl(params, seed, dir);
    case ExperimentKind::CapacityProbe: return run_probe(params, seed, dir);
    case ExperimentKind::TdSim: return run_td(params, seed, dir);
    case ExperimentKind::Rank: return run_rank(params, seed, dir);
  }
  return {};
}

PrimaryTable primary_table(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Seqfit:
      return {"records.csv", sequence_csv_header(), "iteration", {"final_mse", "effective_dim", "srank"}};
    case ExperimentKind::RlTrain:
      return {"training.csv", training_csv_header(), "step", {"episode_return", "td_loss", "effective_dim", "srank"}};
    case ExperimentKind::CapacityProbe:
      return {"capacity.csv", {"target_index", "final_mse"}, "target_index", {"final_mse"}};
    case ExperimentKind::TdSim:
      return {"trajectory.csv", trajectory_csv_header(), "t", {"frobenius_norm", "effective_dim"}};
    case ExperimentKind::Rank: {
      std::vector<std::string> header{"resample"};
      const auto rest = rank_csv_header();
      header.insert(header.end(), rest.begin(), rest.end());
      return {"rank.csv", header, "n", {"effective_dim", "srank"}};
    }
  }
  return {};
}

fs::path resolve_out_dir(const std::string& flag, const ExperimentConfig& cfg) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("PLAB_OUT"); env && *env) return env;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return "plab_out";
}

namespace {

std::string axis_label(const Json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

std::string describe(const std::vector<SweepAxis>& axes, const PlannedRun& run) {
  std::string s = run.run_id + " seed=" + std::to_string(run.seed);
  for (std::size_t a = 0; a < axes.size(); ++a) s += " " + axes[a].path + "=" + axis_label(run.axis_values[a]);
  return s;
}

RunRecord execute_planned(ExperimentKind kind, const PlannedRun& run, const fs::path& runs_dir, bool force) {
  RunRecord rec;
  rec.run_id = run.run_id;
  rec.seed = run.seed;
  rec.dir = runs_dir / run.run_id;
  const fs::path marker = rec.dir / "done";
  if (!force && fs::exists(marker)) {
    rec.status = RunStatus::Cached;
    for (const auto& entry : fs::directory_iterator(rec.dir))
      if (entry.path().extension() == ".csv") rec.outputs.push_back(entry.path());
    std::sort(rec.outputs.begin(), rec.outputs.end());
    return rec;
  }
  const auto start = std::chrono::steady_clock::now();
  try {
    fs::remove_all(rec.dir);
    fs::create_directories(rec.dir);
    const Json meta{{"kind", to_string(kind)}, {"params", run.params}, {"seed", run.seed}};
    binio::atomic_write(rec.dir / "config.json", [&](std::ostream& out) { out << meta.dump(2) << '\n'; });
    rec.outputs = execute_run(kind, run.params, run.seed, rec.dir);
    binio::atomic_write(marker, [](std::ostream& out) { out << "ok\n"; });
    rec.status = RunStatus::Completed;
  } catch (const std::exception& e) {
    rec.status = RunStatus::Failed;
    rec.error = e.what();
    try {
      binio::atomic_write(rec.dir / "error.txt", [&](std::ostream& out) { out << rec.error << '\n'; });
    } catch (const std::exception&) {
    }
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

void write_manifest(const fs::path& path, const std::vector<SweepAxis>& axes, const std::vector<PlannedRun>& plan,
                    const std::vector<RunRecord>& records) {
  Json runs = Json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    Json axis_values = Json::object();
    for (std::size_t a = 0; a < axes.size(); ++a) axis_values[axes[a].path] = plan[i].axis_values[a];
    Json outputs = Json::array();
    for (const auto& o : r.outputs) outputs.push_back(o.string());
    runs.push_back({{"run_id", r.run_id},
                    {"seed", r.seed},
                    {"status", to_string(r.status)},
                    {"wall_seconds", r.wall_seconds},
                    {"dir", r.dir.string()},
                    {"outputs", outputs},
                    {"axes", axis_values},
                    {"error", r.error}});
  }
  binio::atomic_write(path, [&](std::ostream& out) { out << runs.dump(2) << '\n'; });
}

}  // namespace

std::vector<fs::path> write_outputs(const ExperimentConfig& cfg, const std::vector<PlannedRun>& plan,
                                    const std::vector<RunRecord>& records, const fs::path& sweep_dir,
                                    OutputFormat format) {
  const auto axes = sweep_axes(cfg);
  const PrimaryTable table = primary_table(cfg.kind);
  fs::create_directories(sweep_dir);

  // Completed runs with their primary table, in plan order.
  std::vector<std::pair<std::size_t, csv::Table>> done;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.status != RunStatus::Completed && r.status != RunStatus::Cached) continue;
    done.emplace_back(i, csv::read_file(r.dir / table.file));
  }

  if (format == OutputFormat::Csv) {
    std::vector<std::string> header{"run_id", "seed"};
    for (const auto& a : axes) header.push_back(a.path);
    header.insert(header.end(), table.header.begin(), table.header.end());
    const fs::path path = sweep_dir / "results.csv";
    binio::atomic_write(path, [&](std::ostream& out) {
      csv::write_header(out, header);
      for (const auto& [i, t] : done) {
        for (const auto& row : t.rows) {
          std::vector<std::string> fields{records[i].run_id, std::to_string(records[i].seed)};
          for (const auto& v : plan[i].axis_values) fields.push_back(axis_label(v));
          for (double v : row) fields.push_back(csv::format_number(v));
          csv::write_fields(out, fields);
        }
      }
    });
    return {path};
  }

  std::vector<fs::path> paths;
  for (const auto& metric : table.metrics) {
    svg::Chart chart;
    chart.title = to_string(cfg.kind) + ": " + metric;
    chart.x_label = table.x_column;
    chart.y_label = metric;
    for (const auto& [i, t] : done) {
      const auto col = [&](const std::string& name) {
        const auto it = std::find(t.header.begin(), t.header.end(), name);
        if (it == t.header.end()) throw FormatError(table.file + " has no column " + name);
        return static_cast<std::size_t>(it - t.header.begin());
      };
      const std::size_t xc = col(table.x_column), yc = col(metric);
      // Mean over rows sharing an x value.
      std::map<double, std::pair<double, int>> acc;
      for (const auto& row : t.rows) {
        if (!std::isfinite(row[yc])) continue;
        auto& slot = acc[row[xc]];
        slot.first += row[yc];
        slot.second += 1;
      }
      svg::Series s;
      s.name = describe(axes, plan[i]);
      for (const auto& [x, sum] : acc) {
        s.x.push_back(x);
        s.y.push_back(sum.first / sum.second);
      }
      chart.series.push_back(std::move(s));
    }
    const fs::path path = sweep_dir / (metric + ".svg");
    svg::write_file(path, chart);
    paths.push_back(path);
  }
  return paths;
}

std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, const RunOptions& opt) {
  const auto axes = sweep_axes(cfg);
  const auto plan = plan_runs(cfg);
  std::mutex log_mutex;
  const auto log = [&](const std::string& line) {
    if (!opt.log) return;
    std::lock_guard lock(log_mutex);
    *opt.log << line << '\n' << std::flush;
  };

  if (opt.dry_run) {
    std::vector<RunRecord> records;
    for (const auto& run : plan) {
      log("plan " + describe(axes, run));
      RunRecord r;
      r.run_id = run.run_id;
      r.seed = run.seed;
      r.dir = opt.out_dir / to_string(cfg.kind) / "runs" / run.run_id;
      records.push_back(std::move(r));
    }
    log(std::to_string(plan.size()) + " planned runs");
    return records;
  }

  const fs::path kind_dir = opt.out_dir / to_string(cfg.kind);
  const fs::path runs_dir = kind_dir / "runs";
  const fs::path sweep_dir = kind_dir / ("sweep_" + config_id(cfg));
  try {
    fs::create_directories(runs_dir);
    fs::create_directories(sweep_dir);
    binio::atomic_write(sweep_dir / "config.json",
                        [&](std::ostream& out) { out << cfg.to_json().dump(2) << '\n'; });
  } catch (const std::exception& e) {
    throw IoError("output directory " + opt.out_dir.string() + " is not writable: " + e.what());
  }

  std::vector<RunRecord> records(plan.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < plan.size();) {
      records[i] = execute_planned(cfg.kind, plan[i], runs_dir, opt.force);
      std::ostringstream line;
      line << '[' << i + 1 << '/' << plan.size() << "] " << describe(axes, plan[i]) << ' '
           << to_string(records[i].status);
      if (records[i].status != RunStatus::Cached) line << " (" << records[i].wall_seconds << " s)";
      if (!records[i].error.empty()) line << ": " << records[i].error;
      log(line.str());
    }
  };
  const int jobs = std::max(1, std::min<int>(opt.jobs, static_cast<int>(plan.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  write_manifest(sweep_dir / "runs.json", axes, plan, records);
  write_outputs(cfg, plan, records, sweep_dir, OutputFormat::Csv);
  write_outputs(cfg, plan, records, sweep_dir, OutputFormat::Svg);
  return records;
}

}  // namespace plab::runner
