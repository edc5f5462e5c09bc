#include "rtal/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "rtal/errors.hpp"

namespace rtal {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const std::set<std::string>& model_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const json defaults = ModelConfig{}.to_json();
    for (const auto& [key, value] : defaults.items()) k.insert(key);
    return k;
  }();
  return keys;
}

const std::set<std::string> kRunKeys{"task",       "min_src_len",   "max_src_len",     "steps",
                                     "batch_tokens", "warmup",      "lr_factor",       "label_smoothing",
                                     "log_every",  "checkpoint_every", "adam_beta1",   "adam_beta2",
                                     "adam_eps",   "output_dir",    "eval_count",      "beam",
                                     "alpha"};

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if constexpr (std::is_same_v<T, std::size_t>) {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(key, "must be a non-negative integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(key, "must be a number");
  } else {
    if (!v.is_string()) throw ConfigError(key, "must be a string");
  }
  out = v.get<T>();
}

}  // namespace

ExperimentConfig ExperimentConfig::toy() {
  ExperimentConfig c;
  c.model.num_layers = 4;
  c.model.d_model = 64;
  c.model.num_heads = 4;
  c.model.d_ff = 256;
  c.model.vocab_size = 16;
  c.model.max_len = 32;
  c.model.dropout = 0.1;
  c.task = SyntheticTask{TaskKind::Copy, 16, 3, 12};
  c.train.steps = 1500;
  c.train.batch_tokens = 1024;
  c.train.warmup = 400;
  c.train.log_every = 100;
  c.train.checkpoint_every = 500;
  return c;
}

json ExperimentConfig::to_json() const {
  json j = model.to_json();
  j["task"] = to_string(task.kind);
  j["min_src_len"] = task.min_len;
  j["max_src_len"] = task.max_len;
  j["steps"] = train.steps;
  j["batch_tokens"] = train.batch_tokens;
  j["warmup"] = train.warmup;
  j["lr_factor"] = train.lr_factor;
  j["label_smoothing"] = train.label_smoothing;
  j["log_every"] = train.log_every;
  j["checkpoint_every"] = train.checkpoint_every;
  j["adam_beta1"] = train.adam.beta1;
  j["adam_beta2"] = train.adam.beta2;
  j["adam_eps"] = train.adam.eps;
  j["output_dir"] = output_dir.string();
  j["eval_count"] = eval_count;
  j["beam"] = beam;
  j["alpha"] = alpha;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config", "must be a JSON object");
  json model_part = json::object();
  for (const auto& [key, value] : j.items()) {
    if (model_keys().count(key)) {
      model_part[key] = value;
    } else if (!kRunKeys.count(key)) {
      throw ConfigError(key, "unknown configuration key");
    }
  }
  ExperimentConfig c;
  c.model = ModelConfig::from_json(model_part);
  std::string text;
  if (j.contains("task")) {
    read(j, "task", text);
    c.task.kind = parse_task(text);
  }
  c.task.vocab_size = c.model.vocab_size;
  read(j, "min_src_len", c.task.min_len);
  read(j, "max_src_len", c.task.max_len);
  read(j, "steps", c.train.steps);
  read(j, "batch_tokens", c.train.batch_tokens);
  read(j, "warmup", c.train.warmup);
  read(j, "lr_factor", c.train.lr_factor);
  read(j, "label_smoothing", c.train.label_smoothing);
  read(j, "log_every", c.train.log_every);
  read(j, "checkpoint_every", c.train.checkpoint_every);
  read(j, "adam_beta1", c.train.adam.beta1);
  read(j, "adam_beta2", c.train.adam.beta2);
  read(j, "adam_eps", c.train.adam.eps);
  if (j.contains("output_dir")) {
    read(j, "output_dir", text);
    c.output_dir = text;
  }
  read(j, "eval_count", c.eval_count);
  read(j, "beam", c.beam);
  read(j, "alpha", c.alpha);
  c.train.seed = c.model.seed;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config", path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << to_json().dump(2) << '\n';
}

void ExperimentConfig::validate() const {
  model.validate();
  if (task.min_len == 0) throw ConfigError("min_src_len", "must be at least 1");
  if (task.max_len < task.min_len) throw ConfigError("max_src_len", "must be >= min_src_len");
  // Targets carry BOS/EOS and decoding may run past the source length.
  if (task.max_len + 1 > model.max_len) throw ConfigError("max_src_len", "must be below max_len");
  if (train.batch_tokens == 0) throw ConfigError("batch_tokens", "must be positive");
  if (train.warmup == 0) throw ConfigError("warmup", "must be positive");
  if (!(train.lr_factor > 0)) throw ConfigError("lr_factor", "must be positive");
  if (train.label_smoothing < 0 || train.label_smoothing >= 1) {
    throw ConfigError("label_smoothing", "must lie in [0, 1)");
  }
  if (train.log_every == 0) throw ConfigError("log_every", "must be positive");
  if (train.checkpoint_every == 0) throw ConfigError("checkpoint_every", "must be positive");
  if (train.adam.beta1 < 0 || train.adam.beta1 >= 1) throw ConfigError("adam_beta1", "must lie in [0, 1)");
  if (train.adam.beta2 < 0 || train.adam.beta2 >= 1) throw ConfigError("adam_beta2", "must lie in [0, 1)");
  if (!(train.adam.eps > 0)) throw ConfigError("adam_eps", "must be positive");
  if (beam == 0) throw ConfigError("beam", "must be at least 1");
  if (alpha < 0) throw ConfigError("alpha", "must be non-negative");
}

json apply_overrides(json config, const std::vector<std::string>& assignments) {
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(a, "override must look like key=value");
    const std::string key = a.substr(0, eq);
    const std::string text = a.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    config[key] = value;
  }
  return config;
}

std::vector<Batch::Pair> heldout_pairs(const ExperimentConfig& config) {
  return generate_task(config.task, Split::Test, config.eval_count, config.train.seed);
}

RunSummary run_experiment(const ExperimentConfig& config, bool resume, std::function<void(const std::string&)> log) {
  config.validate();
  RunSummary s;
  s.run_dir = config.output_dir;
  fs::create_directories(s.run_dir);
  const fs::path config_file = s.run_dir / "config.json";
  if (resume) {
    const ExperimentConfig saved = ExperimentConfig::load(config_file);
    if (saved.model.digest() != config.model.digest()) {
      throw ConfigError("config", "model configuration differs from the one stored in " + config_file.string());
    }
  }
  config.save(config_file);

  Seq2SeqModel model = Seq2SeqModel::build(config.model);
  s.params = model.parameter_count();
  TrainOptions options;
  options.run_dir = s.run_dir;
  options.resume = resume;
  options.log = std::move(log);
  s.train = train(model, config.task, config.train, options);

  const auto heldout = heldout_pairs(config);
  s.eval = evaluate(model, heldout, config.beam, config.alpha);
  json report{{"step", s.train.final_step},
              {"count", s.eval.count},
              {"exact_match", s.eval.exact_match},
              {"beam", config.beam},
              {"alpha", config.alpha},
              {"bleu", s.eval.bleu.to_json()}};
  std::ofstream(s.run_dir / "eval.json") << report.dump(2) << '\n';
  if (options.log) {
    options.log("held-out exact match " + std::to_string(s.eval.exact_match) + " over " +
                std::to_string(s.eval.count) + " pairs, BLEU " + std::to_string(s.eval.bleu.bleu));
  }
  return s;
}

std::size_t thread_limit() {
  if (const char* env = std::getenv("RTAL_NUM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    throw ConfigError("RTAL_NUM_THREADS", "must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "cell,structure,formula,position,params,final_loss,token_accuracy,exact_match,bleu,status\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out << r.cell << ',' << r.structure << ',' << r.formula << ',' << r.position << ',' << r.params << ','
        << r.final_loss << ',' << r.token_accuracy << ',' << r.exact_match << ',' << r.bleu << ',' << status << '\n';
  }
  return out.str();
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const AblationGrid& grid, std::size_t threads,
                                      std::function<void(const std::string&)> log) {
  if (grid.empty()) throw ConfigError("grid", "ablation grid is empty");
  for (const auto& [axis, values] : grid) {
    if (axis != "structure" && axis != "formula" && axis != "position") {
      throw ConfigError("grid", "unknown axis '" + axis + "' (structure, formula, position)");
    }
    if (values.empty()) throw ConfigError("grid", "axis '" + axis + "' has no values");
  }

  // Cells in odometer order, last axis fastest.
  std::vector<std::vector<std::pair<std::string, std::string>>> cells{{}};
  for (const auto& [axis, values] : grid) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& prefix : cells) {
      for (const auto& v : values) {
        auto c = prefix;
        c.emplace_back(axis, v);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }

  std::vector<AblationRow> rows(cells.size());
  std::mutex log_mutex;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard lock(log_mutex);
    log(msg);
  };
  auto run_cell = [&](std::size_t i) {
    AblationRow& row = rows[i];
    for (const auto& [axis, value] : cells[i]) row.cell += (row.cell.empty() ? "" : "_") + axis + "-" + value;
    try {
      json j = base.to_json();
      for (const auto& [axis, value] : cells[i]) j[axis] = value;
      j["output_dir"] = (base.output_dir / "cells" / row.cell).string();
      const ExperimentConfig cfg = ExperimentConfig::from_json(j);
      row.structure = to_string(cfg.model.aggregation.structure);
      row.formula = to_string(cfg.model.aggregation.formula);
      row.position = to_string(cfg.model.aggregation.position);
      row.params = count_params(cfg.model).total;
      say("cell " + row.cell + ": training");
      const RunSummary s = run_experiment(cfg, false, [&](const std::string& m) { say("[" + row.cell + "] " + m); });
      if (!s.train.metrics.empty()) {
        row.final_loss = s.train.metrics.back().loss;
        row.token_accuracy = s.train.metrics.back().token_accuracy;
      }
      row.exact_match = s.eval.exact_match;
      row.bleu = s.eval.bleu.bleu;
      row.status = "ok";
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
      say("cell " + row.cell + " " + row.status);
    }
  };

  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, cells.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < cells.size(); i = next++) run_cell(i);
    });
  }
  for (auto& t : pool) t.join();

  fs::create_directories(base.output_dir);
  std::ofstream(base.output_dir / "ablation.csv") << ablation_csv(rows);
  return rows;
}

}  // namespace rtal
