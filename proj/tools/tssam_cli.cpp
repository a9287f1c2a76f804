// tssam: train / eval / gradcheck / count-params / synth.
//
// Exit codes
//   0  success
//   1  unexpected internal error
//   2  usage error (unknown flag, missing required option)
//   3  unreadable or corrupt checkpoint
//   4  invalid configuration
//   5  data error (unreadable image, no pairs, size mismatch)
//   6  numeric failure (non-finite loss or gradient)
//   7  gradient check failed

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tssam/checkpoint.hpp"
#include "tssam/hashing.hpp"
#include "tssam/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tssam;

namespace {

enum Exit : int { ok = 0, internal = 1, usage = 2, checkpoint = 3, config = 4, data_error = 5, numeric = 6, gradcheck_failed = 7 };

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

class RunManifest {
 public:
  RunManifest(std::string command, std::vector<std::string> argv) : started_(utc_now()) {
    j_["command"] = std::move(command);
    j_["argv"] = std::move(argv);
    j_["artifacts"] = json::object();
  }
  void set(const std::string& k, json v) { j_[k] = std::move(v); }
  void artifact(const std::string& path) { j_["artifacts"][fs::path(path).filename().string()] = sha256_file(path); }
  void write(const std::string& path, const std::string& status) {
    j_["status"] = status;
    j_["started_at"] = started_;
    j_["finished_at"] = utc_now();
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest '" + path + "'");
    out << j_.dump(2) << '\n';
  }

 private:
  json j_;
  std::string started_;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  json data = json::object();
  std::optional<std::size_t> max_steps;
  bool full_batch = false;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

/// {"model": {...}, "train": {...}, "data": {...}, "run": {"max_steps": N, "full_batch": b}}
RunConfig load_run_config(const std::string& path) {
  const auto j = read_json_file(path);
  if (!j.is_object()) throw ConfigError("config root must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "model" && it.key() != "train" && it.key() != "data" && it.key() != "run")
      throw ConfigError("unknown top-level config key '" + it.key() + "'");
  RunConfig rc;
  rc.model = model_config_from_json(j.value("model", json::object()));
  rc.train = train_config_from_json(j.value("train", json::object()));
  rc.data = j.value("data", json::object());
  const auto run = j.value("run", json::object());
  for (auto it = run.begin(); it != run.end(); ++it)
    if (it.key() != "max_steps" && it.key() != "full_batch") throw ConfigError("unknown key '" + it.key() + "' in run");
  try {
    if (run.contains("max_steps")) rc.max_steps = run.at("max_steps").get<std::size_t>();
    rc.full_batch = run.value("full_batch", false);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run section: ") + e.what());
  }
  return rc;
}

/// data: {"images": dir, "masks": dir} or {"synthetic": {"n": N, "seed": S, "difficulty": "low|high"}}.
std::vector<data::SegSample> load_dataset(const json& d, const ModelConfig& m) {
  std::vector<data::SegSample> out;
  if (d.contains("synthetic")) {
    const auto& s = d.at("synthetic");
    try {
      out = data::generate_synthetic(s.value("n", std::size_t(8)), m.image_height, m.image_width,
                                     s.value("seed", std::uint64_t(0)),
                                     data::parse_difficulty(s.value("difficulty", std::string("low"))));
    } catch (const json::exception& e) {
      throw ConfigError(std::string("data.synthetic: ") + e.what());
    }
  } else if (d.contains("images") && d.contains("masks")) {
    auto loaded = data::load_folder(d.at("images").get<std::string>(), d.at("masks").get<std::string>());
    for (const auto& w : loaded.warnings) std::cerr << "warning: " << w << '\n';
    for (auto& s : loaded.samples) out.push_back(data::resize_sample(s, m.image_height, m.image_width));
  } else {
    throw ConfigError("config needs data.synthetic or data.images + data.masks");
  }
  return out;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::optional<std::uint64_t> seed,
              std::optional<std::string> task, const std::vector<std::string>& argv) {
  auto rc = load_run_config(config_path);
  if (seed) rc.model.seed = rc.train.seed = *seed;
  if (task) rc.train.task = parse_task(*task);
  fs::create_directories(out_dir);
  RunManifest manifest("train", argv);
  manifest.set("config_path", config_path);
  manifest.set("config_sha256", sha256_file(config_path));
  manifest.set("seed", rc.train.seed);

  const auto dataset = load_dataset(rc.data, rc.model);
  auto model = Model<float>::build(rc.model);
  const json cfg_json = {{"model", to_json(rc.model)}, {"train", to_json(rc.train)}};
  const auto ckpt = (fs::path(out_dir) / "checkpoint.ckpt").string();
  const auto log_path = (fs::path(out_dir) / "train_log.ndjson").string();

  trainer::TrainOptions opt;
  opt.max_steps = rc.max_steps;
  opt.full_batch = rc.full_batch;
  std::vector<std::string> periodic;
  opt.on_checkpoint = [&](std::size_t step, const ParamStore<float>& store) {
    const auto p = (fs::path(out_dir) / ("step_" + std::to_string(step) + ".ckpt")).string();
    save_checkpoint(store, p, cfg_json);
    periodic.push_back(p);
  };
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write '" + log_path + "'");
  opt.on_step = [&](const trainer::StepRecord& r) { log << trainer::to_json(r).dump() << '\n'; };

  try {
    const auto result = trainer::train(model, dataset, rc.train, opt);
    for (const auto& e : result.log.epochs) log << trainer::to_json(e).dump() << '\n';
    log.close();
    save_checkpoint(model.params(), ckpt, cfg_json);
    manifest.artifact(ckpt);
    manifest.artifact(log_path);
    for (const auto& p : periodic) manifest.artifact(p);
    manifest.write((fs::path(out_dir) / "manifest.json").string(), "ok");
    const auto& last = result.log.steps;
    std::cout << "trained " << (last.empty() ? 0 : last.back().step) << " steps; final loss "
              << (last.empty() ? 0.0 : last.back().loss) << "\n";
    return ok;
  } catch (const NumericError& e) {
    log.close();
    const auto good = (fs::path(out_dir) / "last_good.ckpt").string();
    save_checkpoint(model.params(), good, cfg_json);
    manifest.artifact(good);
    manifest.artifact(log_path);
    manifest.write((fs::path(out_dir) / "manifest.json").string(), std::string("aborted: ") + e.what());
    throw;
  }
}

int cmd_eval(const std::string& ckpt_path, const std::string& images, const std::string& masks,
             const std::string& report_path, std::optional<std::string> task, bool allow_missing,
             const std::vector<std::string>& argv) {
  RunManifest manifest("eval", argv);
  auto ck = load_checkpoint<float>(ckpt_path);
  if (!ck.config.is_object() || !ck.config.contains("model"))
    throw CheckpointError(CheckpointErrc::manifest, "checkpoint carries no model config");
  const auto mc = model_config_from_json(ck.config.at("model"));
  Task t = Task::cod;
  if (ck.config.contains("train")) t = train_config_from_json(ck.config.at("train")).task;
  if (task) t = parse_task(*task);
  Model<float> model(mc, std::move(ck.store));

  auto preds_in = data::png_by_stem(images);
  auto masks_in = data::png_by_stem(masks);
  std::vector<std::string> missing;
  for (const auto& [id, p] : preds_in)
    if (!masks_in.count(id)) missing.push_back(id + " (no mask)");
  for (const auto& [id, p] : masks_in)
    if (!preds_in.count(id)) missing.push_back(id + " (no image)");
  if (!missing.empty() && !allow_missing) {
    std::string msg = "unpaired samples:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }
  for (const auto& m : missing) std::cerr << "warning: skipping " << m << '\n';
  auto loaded = data::load_folder(images, masks);
  const auto report = trainer::evaluate(model, loaded.samples, t);

  const auto j = metrics::to_json(report);
  {
    std::ofstream out(report_path);
    if (!out) throw IoError("cannot write report '" + report_path + "'");
    out << j.dump(2) << '\n';
  }
  std::cout << metrics::format_table(report);
  manifest.set("checkpoint_sha256", sha256_file(ckpt_path));
  manifest.artifact(report_path);
  manifest.write(report_path + ".manifest.json", "ok");
  return ok;
}

int cmd_gradcheck(const std::string& config_path, const std::string& loss_name, std::size_t per_tensor,
                  std::size_t size, double tolerance, double perturb, std::uint64_t seed) {
  const auto rc = load_run_config(config_path);
  auto mc = rc.model;
  mc.image_height = mc.image_width = size;
  validate(mc);
  auto model = Model<double>::build(mc);
  if (perturb > 0) trainer::perturb_trainable(model.params(), perturb, seed + 1);
  const auto sample = data::generate_synthetic(1, size, size, seed, data::Difficulty::low);
  auto [img, msk] = data::make_batch<double>(sample, {0});

  std::vector<std::pair<std::string, Task>> runs;
  if (loss_name == "bce_iou" || loss_name == "both") runs.push_back({"bce_iou", Task::cod});
  if (loss_name == "bbce" || loss_name == "both") runs.push_back({"bbce", Task::shadow});
  if (runs.empty()) throw ConfigError("--loss must be bce_iou, bbce or both");

  trainer::GradCheckOptions opt;
  opt.tolerance = tolerance;
  opt.max_per_tensor = per_tensor;
  opt.seed = seed;
  bool all = true;
  for (const auto& [name, task] : runs) {
    const auto r = trainer::grad_check(model, trainer::loss_for<double>(task), img, msk, opt);
    std::cout << "loss " << name << '\n';
    for (const auto& g : r.groups)
      std::cout << "  " << (g.passed ? "PASS " : "FAIL ") << std::left << std::setw(44) << g.name << std::right
                << " rel " << std::scientific << std::setprecision(2) << g.max_rel_error << " abs " << g.max_abs_error
                << " |g| " << g.max_abs_grad
                << std::defaultfloat << " probes " << g.checked << " kinks " << g.skipped_kinks
                << (g.finite ? "" : " NON-FINITE") << '\n';
    std::cout << "  " << (r.passed ? "PASS" : "FAIL") << " max rel " << r.max_rel_error << " over " << r.checked
              << " probes, " << r.skipped_kinks << " kink-crossing probes skipped\n";
    all = all && r.passed;
  }
  return all ? ok : gradcheck_failed;
}

int cmd_count(const std::string& config_path, const std::string& filter) {
  const auto rc = load_run_config(config_path);
  const auto model = Model<float>::build(rc.model);
  const auto& store = model.params();
  CountFilter f = CountFilter::all;
  if (filter == "trainable") f = CountFilter::trainable;
  else if (filter == "frozen") f = CountFilter::frozen;
  else if (filter != "all") throw ConfigError("--filter must be all, trainable or frozen");
  std::cout << filter << ' ' << count_parameters(store, f) << '\n';
  std::cout << "trainable " << count_parameters(store, CountFilter::trainable) << '\n';
  std::cout << "frozen " << count_parameters(store, CountFilter::frozen) << '\n';
  std::cout << "all " << count_parameters(store, CountFilter::all) << '\n';
  for (const auto& [module, n] : count_by_module(store)) std::cout << "  " << module << ' ' << n << '\n';
  return ok;
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) return {std::stoul(s), std::stoul(s)};
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError("--size must be N or HxW, got '" + s + "'");
  }
}

int cmd_synth(std::size_t n, const std::string& size, std::uint64_t seed, const std::string& out,
              const std::string& difficulty, const std::vector<std::string>& argv) {
  const auto [h, w] = parse_size(size);
  RunManifest manifest("synth", argv);
  manifest.set("seed", seed);
  data::write_synthetic_folder(out, n, h, w, seed, data::parse_difficulty(difficulty));
  manifest.artifact((fs::path(out) / "manifest.json").string());
  manifest.write((fs::path(out) / "run_manifest.json").string(), "ok");
  std::cout << "wrote " << n << " samples to " << out << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"Two-stream side-adapter segmentation: training, evaluation and audits"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt, images, masks, report, loss = "both", filter = "all", difficulty = "low",
                                                                    size_str = "64";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  bool allow_missing = false;
  std::size_t per_tensor = 8, gc_size = 32, n = 8;
  double tolerance = 1e-4, perturb = 0.05;
  std::uint64_t synth_seed = 0, gc_seed = 0;

  auto* train = app.add_subcommand("train", "train the side modules");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--seed", seed, "override model and train seeds");
  train->add_option("--task", task, "cod|sod|shadow");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on an image/mask folder pair");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval->add_option("--images", images, "image directory")->required();
  eval->add_option("--masks", masks, "mask directory")->required();
  eval->add_option("--report", report, "report JSON path")->required();
  eval->add_option("--task", task, "cod|sod|shadow (default: from checkpoint)");
  eval->add_flag("--allow-missing", allow_missing, "skip unpaired samples instead of failing");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit in double precision");
  gc->add_option("--config", config_path, "run config JSON")->required();
  gc->add_option("--loss", loss, "bce_iou|bbce|both");
  gc->add_option("--per-tensor", per_tensor, "entries probed per tensor, 0 = all");
  gc->add_option("--size", gc_size, "square input size (multiple of 16)");
  gc->add_option("--tolerance", tolerance, "max relative error");
  gc->add_option("--seed", gc_seed, "probe and sample seed");
  gc->add_option("--perturb", perturb, "stddev of noise added to trainable tensors first, 0 = as initialised");

  auto* count = app.add_subcommand("count-params", "exact parameter counts");
  count->add_option("--config", config_path, "run config JSON")->required();
  count->add_option("--filter", filter, "all|trainable|frozen");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset folder");
  synth->add_option("--n", n, "number of samples")->required();
  synth->add_option("--size", size_str, "N or HxW");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--difficulty", difficulty, "low|high");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return usage;
  }

  try {
    if (*train) return cmd_train(config_path, out_dir, seed, task, args);
    if (*eval) return cmd_eval(ckpt, images, masks, report, task, allow_missing, args);
    if (*gc) return cmd_gradcheck(config_path, loss, per_tensor, gc_size, tolerance, perturb, gc_seed);
    if (*count) return cmd_count(config_path, filter);
    if (*synth) return cmd_synth(n, size_str, synth_seed, out_dir, difficulty, args);
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return checkpoint;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return numeric;
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return data_error;
  } catch (const ValidationError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return data_error;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return data_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return internal;
  }
  return usage;
}
