#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fovit/attack.hpp"
#include "fovit/config.hpp"
#include "fovit/overlay.hpp"
#include "fovit/trace.hpp"

namespace fs = std::filesystem;
using fovit::Dataset;
using fovit::RunConfig;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

const char* kUsage =
    "usage: fovit <command> [--config FILE] [section.key=value ...]\n"
    "commands:\n"
    "  train        train a model (training.objective picks the pathway)\n"
    "  eval         per-fixation accuracy, guided and random policies\n"
    "  threshold    confidence threshold from the train split\n"
    "  ensemble     cascade with full-resolution escalation\n"
    "  attack       robustness sweep over attack strengths\n"
    "  trace        trace one episode: trace file + overlay graphic\n"
    "  layout-dump  print the pooling layout\n";

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Splits {
  Dataset train, val, test;
};

Dataset filter_first_k(Dataset d, int k) {
  if (k <= 0 || k >= int(d.class_names.size())) return d;
  Dataset out;
  out.class_names.assign(d.class_names.begin(), d.class_names.begin() + k);
  for (fovit::Sample& s : d.samples)
    if (s.label < k) out.samples.push_back(std::move(s));
  return out;
}

Dataset load_folder_fitted(const std::string& root, const RunConfig& cfg) {
  Dataset d = filter_first_k(fovit::load_folder_dataset(root),
                             cfg.first_k_classes);
  for (fovit::Sample& s : d.samples)
    s.image = fovit::fit_to_model(s.image, cfg.model.image_side,
                                  cfg.model.channels);
  return d;
}

Splits load_splits(const RunConfig& cfg) {
  Splits s;
  if (cfg.dataset_kind == "synthetic") {
    fovit::SyntheticBundle bundle = fovit::make_synthetic(cfg.synthetic);
    s.train = std::move(bundle.train);
    s.val = std::move(bundle.val);
    s.test = std::move(bundle.test);
    return s;
  }
  const fs::path root = cfg.dataset_root;
  if (fs::is_directory(root / "train")) {
    s.train = load_folder_fitted((root / "train").string(), cfg);
    s.val = fs::is_directory(root / "val")
                ? load_folder_fitted((root / "val").string(), cfg)
                : s.train;
    s.test = fs::is_directory(root / "test")
                 ? load_folder_fitted((root / "test").string(), cfg)
                 : s.val;
  } else {
    s.train = load_folder_fitted(root.string(), cfg);
    s.val = s.train;
    s.test = s.train;
  }
  return s;
}

template <typename S>
fovit::VitParams<S> load_model(const std::string& path,
                               const fovit::ModelConfig& cfg,
                               const char* which) {
  if (path.empty())
    throw std::runtime_error(std::string("missing checkpoint path (io.") +
                             which + ")");
  if (!fs::exists(path))
    throw std::runtime_error("checkpoint not found: " + path);
  fovit::VitParams<S> params = fovit::VitParams<S>::init(cfg, 0);
  fovit::load_params<S>(path, params);
  return params;
}

template <typename S>
double full_pass_accuracy(const fovit::VitParams<S>& params,
                          const Dataset& data) {
  long long correct = 0;
  for (const fovit::Sample& s : data.samples)
    correct += fovit::classify_full<S>(params, s.image).first == s.label;
  return double(correct) / double(data.samples.size());
}

std::string tsv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

template <typename S>
int cmd_train(const RunConfig& cfg, const fs::path& out) {
  Splits splits = load_splits(cfg);
  fovit::VitParams<S> params;
  if (!cfg.checkpoint.empty() && fs::exists(cfg.checkpoint)) {
    params = load_model<S>(cfg.checkpoint, cfg.model, "checkpoint");
    std::cout << "resuming from " << cfg.checkpoint << "\n";
  } else {
    params = fovit::VitParams<S>::init(cfg.model, cfg.seed);
  }

  fovit::TrainConfig tcfg = cfg.train_config();
  tcfg.checkpoint_dir = out.string();
  std::ofstream log_file(out / "train-log.txt");
  tcfg.log = [&](const std::string& line) {
    std::cout << line << "\n";
    log_file << line << "\n";
  };
  fovit::TrainResult result = fovit::train(params, splits.train, tcfg);

  std::ostringstream losses;
  losses << "step\tloss\n";
  for (size_t i = 0; i < result.step_loss.size(); ++i)
    losses << i + 1 << '\t' << tsv_double(result.step_loss[i]) << "\n";
  write_file(out / "train-loss.tsv", losses.str());

  const bool foveated = tcfg.objective == fovit::TrainObjective::episode;
  const std::string name = foveated ? "foveated.ckpt" : "unfoveated.ckpt";
  fovit::save_params<S>((out / name).string(), params,
                        std::string("{\"objective\":\"") + cfg.objective +
                            "\",\"epochs\":" + std::to_string(cfg.epochs) +
                            "}");

  std::ostringstream classes;
  for (size_t c = 0; c < splits.train.class_names.size(); ++c)
    classes << c << '\t' << splits.train.class_names[c] << "\n";
  write_file(out / "classes.tsv", classes.str());

  std::ostringstream metrics;
  metrics << "split\tmetric\tvalue\n";
  if (foveated) {
    fovit::EvalOptions opts;
    opts.n_fixations = cfg.n_fixations;
    opts.seed = cfg.seed;
    fovit::EvalResult val = fovit::evaluate(params, splits.val, opts);
    std::vector<double> acc = val.accuracy();
    for (size_t k = 0; k < acc.size(); ++k)
      metrics << "val\tguided_acc_fix" << k + 1 << '\t' << tsv_double(acc[k])
              << "\n";
  } else {
    metrics << "val\tfull_pass_acc\t"
            << tsv_double(full_pass_accuracy(params, splits.val)) << "\n";
  }
  write_file(out / "train-metrics.tsv", metrics.str());
  std::cout << "saved " << (out / name).string() << "\n";
  std::cout << read_file(out / "train-metrics.tsv");
  return 0;
}

template <typename S>
int cmd_eval(const RunConfig& cfg, const fs::path& out) {
  Splits splits = load_splits(cfg);
  fovit::VitParams<S> params =
      load_model<S>(cfg.checkpoint, cfg.model, "checkpoint");

  fovit::EvalOptions opts;
  opts.n_fixations = cfg.n_fixations;
  opts.seed = cfg.seed;
  opts.policy = fovit::FixationPolicy::guided;
  fovit::EvalResult guided = fovit::evaluate(params, splits.test, opts);
  opts.policy = fovit::FixationPolicy::random;
  fovit::EvalResult random_r = fovit::evaluate(params, splits.test, opts);

  std::ostringstream table;
  table << "fixations\tguided\trandom\n";
  std::vector<double> ga = guided.accuracy(), ra = random_r.accuracy();
  for (size_t k = 0; k < ga.size(); ++k)
    table << k + 1 << '\t' << tsv_double(ga[k]) << '\t' << tsv_double(ra[k])
          << "\n";
  if (!cfg.unfoveated_checkpoint.empty()) {
    fovit::VitParams<S> unfov = load_model<S>(
        cfg.unfoveated_checkpoint, cfg.model, "unfoveated_checkpoint");
    table << "full\t" << tsv_double(full_pass_accuracy(unfov, splits.test))
          << "\t-\n";
  }
  write_file(out / "eval-metrics.tsv", table.str());
  std::cout << table.str();
  return 0;
}

template <typename S>
int cmd_threshold(const RunConfig& cfg, const fs::path& out) {
  Splits splits = load_splits(cfg);
  fovit::VitParams<S> params =
      load_model<S>(cfg.checkpoint, cfg.model, "checkpoint");
  const double tau =
      fovit::compute_confidence_threshold(params, splits.train, cfg.seed);
  std::ostringstream table;
  table << "metric\tvalue\n";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", tau);
  table << "tau\t" << buf << "\n";
  write_file(out / "threshold.tsv", table.str());
  std::cout << table.str();
  return 0;
}

template <typename S>
int cmd_ensemble(const RunConfig& cfg, const fs::path& out) {
  Splits splits = load_splits(cfg);
  fovit::VitParams<S> fov =
      load_model<S>(cfg.checkpoint, cfg.model, "checkpoint");
  fovit::VitParams<S> unfov = load_model<S>(cfg.unfoveated_checkpoint,
                                            cfg.model, "unfoveated_checkpoint");
  const double tau =
      cfg.tau >= 0
          ? cfg.tau
          : fovit::compute_confidence_threshold(fov, splits.train, cfg.seed);

  fovit::EnsembleResult r = fovit::ensemble_evaluate(
      fov, unfov, splits.test, tau, cfg.n_fixations, cfg.seed);

  std::ostringstream table;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", tau);
  table << "tau\t" << buf << "\n";
  table << "stage\tclassified_pct\tcorrect_pct\tcumulative_relative_cost\n";
  long long running_cost = 0;
  long long seen = 0;
  for (size_t k = 0; k < r.stages.size(); ++k) {
    const fovit::StageStat& st = r.stages[k];
    const bool full = int(k) + 1 > cfg.n_fixations;
    running_cost += st.classified * (full ? fovit::kFullPassCost +
                                                30LL * cfg.n_fixations
                                          : 30LL * (long long)(k + 1));
    seen += st.classified;
    const std::string label = full ? "full" : std::to_string(k + 1);
    table << label << '\t'
          << tsv_double(100.0 * double(st.classified) / double(r.n)) << '\t'
          << tsv_double(st.classified
                            ? 100.0 * double(st.correct) /
                                  double(st.classified)
                            : 0.0)
          << '\t'
          << tsv_double(double(running_cost) / double(r.ledger.baseline))
          << "\n";
  }
  auto [num, den] = r.ledger.relative_exact();
  table << "accuracy\t" << tsv_double(r.accuracy) << "\n";
  table << "relative_cost\t" << tsv_double(r.ledger.relative()) << "\t"
        << num << "/" << den << "\n";
  write_file(out / "ensemble-metrics.tsv", table.str());
  std::cout << table.str();
  return 0;
}

template <typename S>
int cmd_attack(const RunConfig& cfg, const fs::path& out) {
  Splits splits = load_splits(cfg);
  fovit::VitParams<S> fov =
      load_model<S>(cfg.checkpoint, cfg.model, "checkpoint");
  fovit::VitParams<S> unfov = load_model<S>(cfg.unfoveated_checkpoint,
                                            cfg.model, "unfoveated_checkpoint");
  std::vector<fovit::SweepRow> rows = fovit::robustness_sweep(
      fov, unfov, splits.test, cfg.attack_epsilons, cfg.attack_config(),
      cfg.n_fixations, cfg.seed);

  // epsilon lives in embedding units; report the feature scale it compares to
  double sq_sum = 0;
  long long n_entries = 0;
  for (const fovit::Sample& s : splits.test.samples) {
    const fovit::Mat<S> ep = fovit::embed_features<S>(fov, s.image);
    sq_sum += double(ep.array().square().sum());
    n_entries += ep.size();
  }
  std::ostringstream table;
  table << "# epsilon is in embedding units; clean feature rms "
        << tsv_double(std::sqrt(sq_sum / double(n_entries))) << "\n";
  table << "model\tattack\tepsilon\taccuracy\n";
  for (const fovit::SweepRow& row : rows)
    table << row.model << '\t' << row.attack << '\t' << row.epsilon << '\t'
          << tsv_double(row.accuracy) << "\n";
  write_file(out / "attack-metrics.tsv", table.str());
  std::cout << table.str();
  return 0;
}

template <typename S>
int cmd_trace(const RunConfig& cfg, const fs::path& out) {
  fovit::VitParams<S> params =
      load_model<S>(cfg.checkpoint, cfg.model, "checkpoint");

  fovit::ImageU8 img;
  std::string id;
  uint64_t stream_index = 0;
  int label = -1;
  if (fs::exists(cfg.image)) {
    img = fovit::read_pnm(cfg.image);
    id = fs::path(cfg.image).stem().string();
  } else {
    size_t pos = 0;
    int index = -1;
    try {
      index = std::stoi(cfg.image, &pos);
    } catch (const std::exception&) {
    }
    if (index < 0 || pos != cfg.image.size())
      throw std::runtime_error("io.image must be a test index or image path");
    Splits splits = load_splits(cfg);
    if (index >= int(splits.test.samples.size()))
      throw std::runtime_error("io.image index out of range");
    img = splits.test.samples[size_t(index)].image;
    label = splits.test.samples[size_t(index)].label;
    id = "test_" + std::to_string(index);
    stream_index = uint64_t(index);
  }

  fovit::EpisodeConfig ecfg;
  ecfg.n_fixations = cfg.n_fixations;
  ecfg.policy = cfg.fixation_policy();
  if (cfg.stop_threshold >= 0) ecfg.stop_threshold = cfg.stop_threshold;
  const fovit::FoveaLayout layout = fovit::FoveaLayout::canonical();
  fovit::EpisodeTrace<S> trace = fovit::run_episode(
      params, img, layout, ecfg,
      fovit::stream_rng(cfg.seed, fovit::kEvalContext, stream_index));

  fovit::TraceDoc doc =
      fovit::trace_from_episode(trace, id, label, layout.capacity());
  write_file(out / ("trace_" + id + ".txt"), fovit::emit_trace(doc));
  write_file(out / ("trace_" + id + ".svg"),
             fovit::render_trace_overlay(img, doc, layout,
                                         cfg.model.patch_side));
  std::cout << "wrote " << (out / ("trace_" + id + ".txt")).string() << " and "
            << (out / ("trace_" + id + ".svg")).string() << "\n";
  std::cout << "predicted " << trace.predicted << " cost " << trace.cost
            << "\n";
  return 0;
}

int cmd_layout_dump(const fs::path& out) {
  const std::string text = fovit::dump_layout(fovit::FoveaLayout::canonical());
  write_file(out / "layout.txt", text);
  std::cout << text;
  return 0;
}

template <typename S>
int dispatch(const std::string& cmd, const RunConfig& cfg,
             const fs::path& out) {
  if (cmd == "train") return cmd_train<S>(cfg, out);
  if (cmd == "eval") return cmd_eval<S>(cfg, out);
  if (cmd == "threshold") return cmd_threshold<S>(cfg, out);
  if (cmd == "ensemble") return cmd_ensemble<S>(cfg, out);
  if (cmd == "attack") return cmd_attack<S>(cfg, out);
  if (cmd == "trace") return cmd_trace<S>(cfg, out);
  throw std::runtime_error("unknown command: " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return kExitUsage;
  }
  const std::string cmd = argv[1];
  if (cmd == "-h" || cmd == "--help" || cmd == "help") {
    std::cout << kUsage;
    return 0;
  }

  std::string config_text;
  std::vector<std::string> overrides;
  for (int i = 2; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--config") {
      if (i + 1 >= argc) {
        std::cerr << "error: --config needs a file\n";
        return kExitUsage;
      }
      try {
        config_text = read_file(argv[++i]);
      } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
      }
    } else if (arg.find('=') != std::string::npos) {
      overrides.push_back(arg);
    } else {
      std::cerr << "error: unrecognized argument '" << arg << "'\n"
                << kUsage;
      return kExitUsage;
    }
  }

  RunConfig cfg;
  std::string echo;
  try {
    cfg = fovit::resolve_config(config_text, overrides, &echo);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    const fs::path out = cfg.out_dir;
    fs::create_directories(out);
    write_file(out / (cmd + "-config.json"), echo);
    if (cmd == "layout-dump") return cmd_layout_dump(out);
    return cfg.precision == "double" ? dispatch<double>(cmd, cfg, out)
                                     : dispatch<float>(cmd, cfg, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
