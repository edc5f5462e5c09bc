#include "rtal/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "rtal/checkpoint.hpp"
#include "rtal/decode.hpp"
#include "rtal/nn.hpp"
#include "rtal/tape.hpp"

namespace rtal {

namespace fs = std::filesystem;

nlohmann::json MetricRecord::to_json(bool include_wall_time) const {
  nlohmann::json j{{"step", step}, {"loss", loss}, {"token_accuracy", token_accuracy}, {"lr", lr}};
  if (include_wall_time) j["wall_ms"] = wall_ms;
  return j;
}

double token_accuracy(const Tensor& logits, std::span<const int> targets) {
  const std::size_t vocab = logits.dim(-1);
  const std::vector<double> v = logits.to_vector();
  std::size_t counted = 0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] == token::kPad) continue;
    const auto row = v.begin() + static_cast<std::ptrdiff_t>(r * vocab);
    const auto best = std::max_element(row, row + static_cast<std::ptrdiff_t>(vocab)) - row;
    ++counted;
    if (best == targets[r]) ++correct;
  }
  return counted == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(counted);
}

std::vector<fs::path> list_checkpoints(const fs::path& run_dir) {
  std::vector<fs::path> out;
  const fs::path dir = run_dir / "checkpoints";
  if (!fs::exists(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const fs::path& p = entry.path();
    if (p.extension() == ".ckpt" && p.filename().string().rfind("step_", 0) == 0) out.push_back(p);
  }
  // Zero-padded step numbers sort lexicographically.
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

fs::path checkpoint_path(const fs::path& run_dir, std::uint64_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "step_%08llu.ckpt", static_cast<unsigned long long>(step));
  return run_dir / "checkpoints" / name;
}

fs::path optimizer_path(fs::path ckpt) { return ckpt.replace_extension(".adam"); }

// Keeps metrics.jsonl lines with step <= last_step.
void truncate_metrics(const fs::path& file, std::uint64_t last_step) {
  std::vector<std::string> kept;
  {
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("step").get<std::uint64_t>() <= last_step) kept.push_back(line);
    }
  }
  std::ofstream out(file, std::ios::trunc);
  for (const auto& line : kept) out << line << '\n';
}

}  // namespace

TrainResult train(Seq2SeqModel& model, const SyntheticTask& task, const TrainSpec& spec, const TrainOptions& options) {
  const ModelConfig& cfg = model.config();
  if (task.vocab_size > cfg.vocab_size) {
    throw ConfigError("vocab_size", "task vocabulary exceeds the model vocabulary");
  }
  if (task.max_len + 1 > cfg.max_len) throw ConfigError("max_src_len", "task sequences exceed the model max_len");
  if (spec.log_every == 0) throw ConfigError("log_every", "must be >= 1");
  if (spec.checkpoint_every == 0) throw ConfigError("checkpoint_every", "must be >= 1");
  if (spec.warmup == 0) throw ConfigError("warmup", "must be >= 1");

  const bool persist = !options.run_dir.empty();
  if (persist && !options.resume && !list_checkpoints(options.run_dir).empty()) {
    throw ConfigError("output_dir", options.run_dir.string() + " already holds checkpoints; resume or pick a new directory");
  }
  std::ofstream log_file;
  if (persist) {
    fs::create_directories(options.run_dir / "checkpoints");
    log_file.open(options.run_dir / "train.log", std::ios::app);
  }
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
    if (log_file) log_file << msg << '\n' << std::flush;
  };

  const ParamList params = model.parameters();
  AdamState adam = AdamState::create(params, spec.adam);
  TrainResult result;
  std::uint64_t start = 0;
  const fs::path metrics_file = options.run_dir / "metrics.jsonl";

  if (options.resume) {
    if (!persist) throw std::invalid_argument("resume needs a run directory");
    const auto existing = list_checkpoints(options.run_dir);
    if (existing.empty()) throw FormatError("no checkpoint to resume from in " + options.run_dir.string());
    const Checkpoint ckpt = read_checkpoint(existing.back());
    load_model(model, ckpt);
    const Checkpoint moments = read_checkpoint(optimizer_path(existing.back()));
    if (moments.step != ckpt.step) throw FormatError("optimizer state does not match " + existing.back().string());
    adam.load(params, moments);
    start = ckpt.step;
    if (fs::exists(metrics_file)) truncate_metrics(metrics_file, start);
    result.checkpoints = existing;
    log("resumed from step " + std::to_string(start));
  } else if (persist) {
    std::ofstream(metrics_file, std::ios::trunc);
    const fs::path p = checkpoint_path(options.run_dir, 0);
    write_checkpoint(p, snapshot(model, 0));
    write_checkpoint(optimizer_path(p), adam.save(params));
    result.checkpoints.push_back(p);
  }

  if (const auto span = cfg.aggregated_span()) {
    log(std::string("aggregation: ") + to_string(cfg.aggregation.structure) + " / " +
        to_string(cfg.aggregation.formula) + " on " + to_string(cfg.aggregation.position));
    log("aggregated span: layers " + std::to_string(span->first) + ".." + std::to_string(span->second));
  }
  log("parameters: " + std::to_string(model.parameter_count()));

  std::ofstream metrics_out;
  if (persist) metrics_out.open(metrics_file, std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();

  for (std::uint64_t step = start + 1; step <= spec.steps; ++step) {
    const auto pairs = training_batch(task, spec.batch_tokens, spec.seed, step);
    const Batch batch = Batch::make(pairs);
    Rng dropout_rng = Rng::derive(spec.seed ^ 0xd409'0a7eULL, step);
    const Tensor logits = model.forward_train(batch, ForwardMode::train(dropout_rng));
    const Tensor loss = label_smoothed_ce(logits, batch.tgt_out, spec.label_smoothing, token::kPad);
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      Tape::local().clear();
      throw TrainingDiverged("loss became non-finite at step " + std::to_string(step) +
                             "; last written checkpoint is preserved");
    }
    for (const auto& p : params) Tensor(p.tensor).zero_grad();
    backward(loss);
    const double lr = spec.lr_factor * lr_schedule(step, cfg.d_model, spec.warmup);
    adam_step(adam, params, lr);

    if (step % spec.log_every == 0 || step == spec.steps) {
      MetricRecord rec;
      rec.step = step;
      rec.loss = loss_value;
      rec.token_accuracy = token_accuracy(logits, batch.tgt_out);
      rec.lr = lr;
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      result.metrics.push_back(rec);
      if (metrics_out) metrics_out << rec.to_json().dump() << '\n' << std::flush;
      char line[160];
      std::snprintf(line, sizeof line, "step %llu loss %.4f token_acc %.4f lr %.6f",
                    static_cast<unsigned long long>(step), loss_value, rec.token_accuracy, lr);
      log(line);
    }
    if (persist && (step % spec.checkpoint_every == 0 || step == spec.steps)) {
      const fs::path p = checkpoint_path(options.run_dir, step);
      write_checkpoint(p, snapshot(model, step));
      write_checkpoint(optimizer_path(p), adam.save(params));
      result.checkpoints.push_back(p);
    }
    result.final_step = step;
  }
  if (result.final_step < start) result.final_step = start;
  return result;
}

EvalResult evaluate(const Seq2SeqModel& model, std::span<const Batch::Pair> data, std::size_t beam, double alpha) {
  EvalResult r;
  r.count = data.size();
  if (data.empty()) return r;
  std::size_t exact = 0;
  std::vector<std::vector<int>> refs;
  for (const auto& [src, tgt] : data) {
    const std::size_t budget = decode_budget(model, src.size());
    BeamResult out = beam <= 1 ? greedy_decode(model, src, alpha, budget) : beam_search(model, src, beam, alpha, budget);
    if (out.tokens == tgt) ++exact;
    r.hypotheses.push_back(std::move(out.tokens));
    refs.push_back(tgt);
  }
  r.exact_match = static_cast<double>(exact) / static_cast<double>(data.size());
  r.bleu = bleu_report(to_sentences(r.hypotheses), to_sentences(refs));
  return r;
}

}  // namespace rtal
