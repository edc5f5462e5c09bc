#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "rtal/checkpoint.hpp"
#include "rtal/decode.hpp"
#include "rtal/errors.hpp"
#include "rtal/experiment.hpp"
#include "rtal/gradient_suite.hpp"
#include "rtal/model.hpp"
#include "rtal/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rtal;

namespace {

constexpr int kUsage = 1;
constexpr int kNumerical = 2;

void print_line(const std::string& s) { std::cout << s << std::endl; }

// A run directory stands for its config.json.
fs::path config_file(const fs::path& p) { return fs::is_directory(p) ? p / "config.json" : p; }

ExperimentConfig load_config(const std::string& path, const std::string& preset, const std::vector<std::string>& sets) {
  json j;
  if (!path.empty()) {
    std::ifstream in(config_file(path));
    if (!in) throw ConfigError("config", "cannot read " + config_file(path).string());
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config", config_file(path).string() + " is not valid JSON");
  } else if (preset == "base" || preset == "big") {
    ExperimentConfig c = ExperimentConfig::toy();
    c.model = preset == "base" ? ModelConfig::base() : ModelConfig::big();
    c.task.vocab_size = c.model.vocab_size;
    j = c.to_json();
  } else if (preset == "toy" || preset.empty()) {
    j = ExperimentConfig::toy().to_json();
  } else {
    throw ConfigError("preset", "unknown preset '" + preset + "' (toy, base, big)");
  }
  return ExperimentConfig::from_json(apply_overrides(j, sets));
}

std::vector<int> parse_ids(const std::string& line, std::size_t vocab, std::size_t lineno) {
  std::istringstream in(line);
  std::vector<int> ids;
  std::string tok;
  while (in >> tok) {
    std::size_t used = 0;
    int v = -1;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || v < token::kFirstSymbol || v >= static_cast<int>(vocab)) {
      throw ConfigError("input", "line " + std::to_string(lineno) + ": '" + tok + "' is not a symbol id in [" +
                                     std::to_string(token::kFirstSymbol) + ", " + std::to_string(vocab) + ")");
    }
    ids.push_back(v);
  }
  return ids;
}

std::string join(const std::vector<int>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? " " : "") + std::to_string(ids[i]);
  return s;
}

void print_params(const ModelConfig& cfg) {
  const ParamReport r = count_params(cfg);
  std::printf("%-22s %14zu\n", "embedding (shared)", r.embedding);
  std::printf("%-22s %14zu  (%zu x %zu)\n", "encoder layers", r.encoder_layers, cfg.num_layers, r.per_encoder_layer);
  std::printf("%-22s %14zu  (%zu x %zu)\n", "decoder layers", r.decoder_layers, cfg.num_layers, r.per_decoder_layer);
  std::printf("%-22s %14zu\n", "final norms", r.final_norms);
  std::printf("%-22s %14zu\n", "encoder aggregation", r.encoder_aggregation);
  std::printf("%-22s %14zu\n", "decoder aggregation", r.decoder_aggregation);
  std::printf("%-22s %14zu  (%.2fM)\n", "total", r.total, static_cast<double>(r.total) / 1e6);
  json j = r.to_json();
  j["config"] = cfg.to_json();
  std::cout << j.dump() << std::endl;
}

int cmd_train(const std::string& path, const std::vector<std::string>& sets, bool resume) {
  const ExperimentConfig cfg = load_config(path, "", sets);
  const RunSummary s = run_experiment(cfg, resume, print_line);
  std::cout << "run directory: " << s.run_dir.string() << std::endl;
  return 0;
}

AblationGrid parse_grid(const std::vector<std::string>& axes) {
  AblationGrid grid;
  for (const std::string& a : axes) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("grid", "axis must look like name=v1,v2,...");
    std::vector<std::string> values;
    std::stringstream in(a.substr(eq + 1));
    std::string v;
    while (std::getline(in, v, ',')) {
      if (!v.empty()) values.push_back(v);
    }
    grid.emplace_back(a.substr(0, eq), values);
  }
  return grid;
}

int cmd_ablate(const std::string& path, const std::vector<std::string>& sets, const std::vector<std::string>& axes) {
  const ExperimentConfig cfg = load_config(path, "", sets);
  const auto rows = run_ablation(cfg, parse_grid(axes), thread_limit(), print_line);
  std::cout << ablation_csv(rows);
  std::cout << "report: " << (cfg.output_dir / "ablation.csv").string() << std::endl;
  for (const auto& r : rows) {
    if (r.status != "ok") return kNumerical;
  }
  return 0;
}

int cmd_decode(const fs::path& run_dir, const std::string& input, const std::string& output, std::size_t beam,
               double alpha, const std::string& checkpoint) {
  const ExperimentConfig cfg = ExperimentConfig::load(run_dir / "config.json");
  const fs::path ckpt_path = checkpoint.empty() ? run_dir / "averaged.ckpt" : fs::path(checkpoint);
  if (!fs::exists(ckpt_path)) {
    throw FormatError(ckpt_path.string() + " does not exist; run `rtal average` first or pass --checkpoint");
  }
  Seq2SeqModel model = Seq2SeqModel::build(cfg.model);
  load_model(model, read_checkpoint(ckpt_path));

  std::vector<Batch::Pair> pairs;
  bool scored = false;
  if (input.empty()) {
    pairs = heldout_pairs(cfg);
    scored = true;
  } else {
    std::ifstream in(input);
    if (!in) throw ConfigError("input", "cannot read " + input);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      auto ids = parse_ids(line, cfg.model.vocab_size, n);
      pairs.emplace_back(std::move(ids), std::vector<int>{});
    }
  }
  const EvalResult r = evaluate(model, pairs, beam, alpha);
  std::ostringstream text;
  for (const auto& h : r.hypotheses) text << join(h) << '\n';
  if (output.empty()) {
    std::cout << text.str();
  } else {
    std::ofstream(output) << text.str();
  }
  if (scored) {
    std::cerr << "held-out pairs: " << r.count << "\nexact match: " << r.exact_match << '\n'
              << r.bleu.table() << r.bleu.to_json().dump() << std::endl;
  }
  return 0;
}

int cmd_average(const fs::path& run_dir, std::size_t k, const std::string& output) {
  if (k == 0) throw ConfigError("k", "must be at least 1");
  const auto all = list_checkpoints(run_dir);
  if (all.size() < k) {
    throw FormatError("run directory holds " + std::to_string(all.size()) + " checkpoints, fewer than k = " +
                      std::to_string(k));
  }
  std::vector<Checkpoint> last;
  for (auto it = all.end() - static_cast<std::ptrdiff_t>(k); it != all.end(); ++it) {
    last.push_back(read_checkpoint(*it));
    std::cout << "averaging " << it->filename().string() << std::endl;
  }
  const fs::path out = output.empty() ? run_dir / "averaged.ckpt" : fs::path(output);
  write_checkpoint(out, average_checkpoints(last));
  std::cout << "wrote " << out.string() << std::endl;
  return 0;
}

int cmd_gradcheck() {
  std::size_t failed = 0;
  const auto results = run_gradient_suite();
  for (const auto& r : results) {
    std::printf("%-4s %-34s rel err %.3e (tol %.0e)\n", r.pass ? "ok" : "FAIL", r.name.c_str(), r.error, r.tolerance);
    if (!r.pass) ++failed;
  }
  if (failed == 0) {
    std::printf("all %zu checks passed\n", results.size());
    return 0;
  }
  std::printf("%zu of %zu checks failed\n", failed, results.size());
  return kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequence-to-sequence Transformer with residual tree layer aggregation"};
  app.require_subcommand(1);

  std::string config;
  std::vector<std::string> sets;
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "Train on a synthetic task and write a run directory");
  train_cmd->add_option("config", config, "Experiment config (JSON) or run directory")->required();
  train_cmd->add_option("--set", sets, "Override a config key: key=value");
  train_cmd->add_flag("--resume", resume, "Continue from the newest checkpoint in output_dir");

  std::vector<std::string> axes;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train every cell of an aggregation grid and write a CSV");
  ablate_cmd->add_option("config", config, "Base experiment config")->required();
  ablate_cmd->add_option("--axis", axes, "Grid axis: structure|formula|position=v1,v2,...")->required();
  ablate_cmd->add_option("--set", sets, "Override a config key: key=value");

  std::string preset;
  auto* params_cmd = app.add_subcommand("params", "Print an itemized parameter count");
  params_cmd->add_option("config", config, "Experiment config or run directory");
  params_cmd->add_option("--preset", preset, "toy, base or big when no config is given");
  params_cmd->add_option("--set", sets, "Override a config key: key=value");

  std::string run_dir, input, output, checkpoint;
  std::size_t beam = 4;
  double alpha = 0.6;
  auto* decode_cmd = app.add_subcommand("decode", "Translate token-id lines with a trained run");
  decode_cmd->add_option("run_dir", run_dir, "Run directory")->required();
  decode_cmd->add_option("--input", input, "One source per line as space-separated ids (default: held-out split)");
  decode_cmd->add_option("--output", output, "Hypothesis file (default: stdout)");
  decode_cmd->add_option("--beam", beam, "Beam size")->capture_default_str();
  decode_cmd->add_option("--alpha", alpha, "Length penalty exponent")->capture_default_str();
  decode_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to use instead of averaged.ckpt");

  std::size_t k = 5;
  auto* average_cmd = app.add_subcommand("average", "Average the last k checkpoints of a run");
  average_cmd->add_option("run_dir", run_dir, "Run directory")->required();
  average_cmd->add_option("-k", k, "Number of checkpoints")->capture_default_str();
  average_cmd->add_option("--output", output, "Destination (default: run_dir/averaged.ckpt)");

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(config, sets, resume);
    if (*ablate_cmd) return cmd_ablate(config, sets, axes);
    if (*params_cmd) {
      print_params(load_config(config, preset, sets).model);
      return 0;
    }
    if (*decode_cmd) return cmd_decode(run_dir, input, output, beam, alpha, checkpoint);
    if (*average_cmd) return cmd_average(run_dir, k, output);
    if (*gradcheck_cmd) return cmd_gradcheck();
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << std::endl;
    return kNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << std::endl;
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kUsage;
  }
  return kUsage;
}
