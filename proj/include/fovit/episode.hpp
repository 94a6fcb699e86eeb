#pragma once

#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fovit/dataset.hpp"
#include "fovit/model.hpp"
#include "fovit/optim.hpp"
#include "fovit/policy.hpp"
#include "fovit/rng.hpp"

namespace fovit {

// Compute is counted in tokens pushed through the trunk: one class token
// plus the pooled sequence per fixation, one class token plus every patch
// token for a full-resolution pass.
inline long long fixation_cost(const FoveaLayout& layout) {
  return layout.capacity() + 1;  // 30 for the canonical layout
}
inline constexpr long long kFullPassCost = kGridBlocks + 1;  // 197

enum class FixationPolicy { guided, random };

struct EpisodeConfig {
  int n_fixations = 5;
  FixationPolicy policy = FixationPolicy::guided;
  // Stop once the top class probability reaches this; absent = never stop.
  std::optional<double> stop_threshold;
  // When non-empty, fixations are taken verbatim from here (length must be
  // n_fixations) instead of from the policy. Used by the attack harness.
  std::vector<Fixation> forced;
};

template <typename S>
struct FixationStep {
  Fixation fix{};
  Mat<S> logits;      // 1 x K
  Mat<S> probs;       // 1 x K
  int predicted = -1;
  S max_prob = S(0);
  Mat<S> evidence;    // 14x14 snapshot after this fixation's deposit
  Mat<S> inhibition;  // 14x14 snapshot after this fixation's registration
};

template <typename S>
struct EpisodeTrace {
  std::vector<FixationStep<S>> steps;
  int stop_index = -1;  // 1-based fixation where the threshold was met
  long long cost = 0;
  int predicted = -1;
  S final_max_prob = S(0);
};

template <typename S>
struct EpisodeRun {
  EpisodeTrace<S> trace;
  std::vector<Var<S>> logits_vars;  // per executed fixation, on the tape
};

// The fixation loop: pool at the current fixation, run the trunk, deposit
// the readout attention as evidence, fuse all class outputs so far into
// logits, then pick the next fixation from evidence minus inhibition (the
// first fixation always comes from the rng; the random policy uses it for
// every fixation). Embedding happens once outside; `ep` is reused across
// fixations.
template <typename S>
EpisodeRun<S> run_episode_on_tape(Tape<S>& t, const VitVars<S>& vars,
                                  const ModelConfig& cfg, Var<S> ep,
                                  const FoveaLayout& layout,
                                  const EpisodeConfig& ecfg,
                                  std::mt19937& rng) {
  if (ecfg.n_fixations < 1)
    throw std::invalid_argument("run_episode: n_fixations must be >= 1");
  if (!ecfg.forced.empty() &&
      int(ecfg.forced.size()) != ecfg.n_fixations)
    throw std::invalid_argument(
        "run_episode: forced path length must equal n_fixations");

  ConfidenceState<S> state;
  EpisodeRun<S> run;
  std::vector<Var<S>> class_outputs;
  for (int k = 0; k < ecfg.n_fixations; ++k) {
    Fixation f{};
    if (!ecfg.forced.empty())
      f = ecfg.forced[size_t(k)];
    else if (k == 0 || ecfg.policy == FixationPolicy::random)
      f = random_fixation(rng);
    else
      f = next_fixation(state);

    AttentionRecord<S> rec;
    Var<S> class_out =
        fixation_forward(t, vars, cfg, ep, layout, f, &rec);
    class_outputs.push_back(class_out);
    update_evidence(state, layout, f, rec.feature_weights);
    register_fixation(state, f);
    Var<S> logits = fuse_fixations(t, vars, cfg, class_outputs);
    run.logits_vars.push_back(logits);

    FixationStep<S> step;
    step.fix = f;
    step.logits = t.value(logits);
    step.probs = softmax_vector(step.logits);
    Eigen::Index arg = 0;
    step.max_prob = step.probs.row(0).maxCoeff(&arg);
    step.predicted = int(arg);
    step.evidence = state.evidence;
    step.inhibition = state.inhibition;
    run.trace.steps.push_back(std::move(step));

    if (ecfg.stop_threshold &&
        double(run.trace.steps.back().max_prob) >= *ecfg.stop_threshold) {
      run.trace.stop_index = k + 1;
      break;
    }
  }
  const FixationStep<S>& last = run.trace.steps.back();
  run.trace.predicted = last.predicted;
  run.trace.final_max_prob = last.max_prob;
  run.trace.cost =
      fixation_cost(layout) * (long long)(run.trace.steps.size());
  return run;
}

// Position-added embedded features as a plain matrix (no tape), identical to
// the value embed_with_positions produces.
template <typename S>
Mat<S> embed_features(const VitParams<S>& params, const ImageU8& img) {
  Mat<S> patches = patchify<S>(img, params.cfg);
  Mat<S> x = patches * params.patch_w;
  x = x.rowwise() + params.patch_b.row(0);
  return x + params.pos;
}

template <typename S>
EpisodeTrace<S> run_episode_from_features(const VitParams<S>& params,
                                          const Mat<S>& ep,
                                          const FoveaLayout& layout,
                                          const EpisodeConfig& ecfg,
                                          std::mt19937 rng) {
  Tape<S> t;
  VitVars<S> vars = push_params(t, params, false);
  return run_episode_on_tape(t, vars, params.cfg, t.constant(ep), layout,
                             ecfg, rng)
      .trace;
}

template <typename S>
EpisodeTrace<S> run_episode(const VitParams<S>& params, const ImageU8& img,
                            const FoveaLayout& layout,
                            const EpisodeConfig& ecfg, std::mt19937 rng) {
  return run_episode_from_features(params, embed_features(params, img),
                                   layout, ecfg, std::move(rng));
}

// Sum of per-fixation cross-entropies against one target.
template <typename S>
Var<S> multi_fixation_loss(Tape<S>& t,
                           const std::vector<Var<S>>& per_fixation_logits,
                           int target) {
  if (per_fixation_logits.empty())
    throw std::invalid_argument("multi_fixation_loss: no logits");
  std::vector<Var<S>> terms;
  terms.reserve(per_fixation_logits.size());
  for (Var<S> l : per_fixation_logits)
    terms.push_back(cross_entropy(t, l, target));
  return add_scalars(t, terms);
}

// Classification loss at the final fixation of a fixed fixation path; the
// gradient surface the attacks climb.
template <typename S>
Var<S> forced_final_loss(Tape<S>& t, const VitVars<S>& vars,
                         const ModelConfig& cfg, Var<S> ep,
                         const FoveaLayout& layout,
                         const std::vector<Fixation>& fixations, int target) {
  if (fixations.empty())
    throw std::invalid_argument("forced_final_loss: empty fixation path");
  std::vector<Var<S>> outs;
  outs.reserve(fixations.size());
  for (Fixation f : fixations)
    outs.push_back(fixation_forward(t, vars, cfg, ep, layout, f, nullptr));
  return cross_entropy(t, fuse_fixations(t, vars, cfg, outs), target);
}

// Full-resolution classification (the escalation target in the cascade).
template <typename S>
std::pair<int, Mat<S>> classify_full_from_features(
    const VitParams<S>& params, const Mat<S>& ep) {
  Tape<S> t;
  VitVars<S> vars = push_params(t, params, false);
  Var<S> logits =
      full_sequence_logits(t, vars, params.cfg, t.constant(ep));
  Mat<S> probs = softmax_vector(t.value(logits));
  Eigen::Index arg = 0;
  probs.row(0).maxCoeff(&arg);
  return {int(arg), std::move(probs)};
}

template <typename S>
std::pair<int, Mat<S>> classify_full(const VitParams<S>& params,
                                     const ImageU8& img) {
  return classify_full_from_features(params, embed_features(params, img));
}

enum class TrainObjective { episode, full_sequence };

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double lr_init = 3e-4;
  double lr_min = 3e-5;
  double weight_decay = 1e-8;
  int n_fixations = 5;
  TrainObjective objective = TrainObjective::episode;
  uint64_t seed = 0;
  int threads = 1;  // >1 fans episodes out; 1 is the bitwise-reference mode
  std::string checkpoint_dir;  // per-epoch checkpoints when non-empty
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  std::vector<double> step_loss;        // mean per-image loss, every step
  std::vector<double> epoch_mean_loss;  // mean of the epoch's step losses
  long long steps = 0;
};

namespace detail {

// Per-image loss builder shared by both objectives: forward on a fresh tape,
// backward, gradients accumulated into `grad_acc` (visit order).
template <typename S>
double train_one(const VitParams<S>& params, const Sample& sample,
                 const FoveaLayout& layout, const TrainConfig& tcfg,
                 std::mt19937 rng, std::vector<Mat<S>>& grad_acc) {
  Tape<S> t;
  t.reserve(4096);
  VitVars<S> vars = push_params(t, params, true);
  Var<S> ep = embed_with_positions(
      t, vars, patchify<S>(sample.image, params.cfg));
  Var<S> loss;
  if (tcfg.objective == TrainObjective::episode) {
    EpisodeConfig ecfg;
    ecfg.n_fixations = tcfg.n_fixations;
    ecfg.policy = FixationPolicy::guided;
    EpisodeRun<S> run = run_episode_on_tape(t, vars, params.cfg, ep, layout,
                                            ecfg, rng);
    loss = multi_fixation_loss(t, run.logits_vars, sample.label);
  } else {
    Var<S> logits = full_sequence_logits(t, vars, params.cfg, ep);
    loss = cross_entropy(t, logits, sample.label);
  }
  t.backward(loss);
  std::vector<Mat<S>> grads = collect_grads(t, vars);
  if (grad_acc.empty()) {
    grad_acc = std::move(grads);
  } else {
    for (size_t i = 0; i < grads.size(); ++i) grad_acc[i] += grads[i];
  }
  return double(t.value(loss)(0, 0));
}

inline std::vector<size_t> shuffled_indices(size_t n, std::mt19937& g) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t(0));
  for (size_t i = n; i > 1; --i)
    std::swap(idx[i - 1], idx[uniform_below(g, uint32_t(i))]);
  return idx;
}

}  // namespace detail

template <typename S>
TrainResult train(VitParams<S>& params, const Dataset& data,
                  const TrainConfig& tcfg) {
  if (data.samples.empty())
    throw std::invalid_argument("train: empty dataset");
  if (tcfg.epochs < 1 || tcfg.batch_size < 1 || tcfg.threads < 1)
    throw std::invalid_argument("train: bad schedule");
  const FoveaLayout layout = FoveaLayout::canonical();
  const size_t n = data.samples.size();
  const long long steps_per_epoch =
      (long long)((n + size_t(tcfg.batch_size) - 1) / size_t(tcfg.batch_size));
  const long long total_steps = steps_per_epoch * tcfg.epochs;

  std::vector<Mat<S>*> param_ptrs;
  visit_params<S>(params, [&](const std::string&, Mat<S>& m) {
    param_ptrs.push_back(&m);
  });
  typename AdamW<S>::Options opt_options;
  opt_options.weight_decay = S(tcfg.weight_decay);
  AdamW<S> opt(opt_options);

  TrainResult result;
  long long step = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::mt19937 shuffle_rng = stream_rng(tcfg.seed, 0x53485546u, // "SHUF"
                                          uint64_t(epoch));
    const std::vector<size_t> order =
        detail::shuffled_indices(n, shuffle_rng);
    double epoch_loss_total = 0;
    for (size_t start = 0; start < n; start += size_t(tcfg.batch_size)) {
      const size_t end = std::min(n, start + size_t(tcfg.batch_size));
      const size_t count = end - start;
      std::vector<Mat<S>> grad_acc;
      double loss_total = 0;
      if (tcfg.threads == 1) {
        for (size_t i = start; i < end; ++i) {
          const size_t idx = order[i];
          loss_total += detail::train_one(
              params, data.samples[idx], layout, tcfg,
              stream_rng(tcfg.seed, uint32_t(epoch), uint64_t(idx)),
              grad_acc);
        }
      } else {
        const int workers =
            int(std::min(size_t(tcfg.threads), count));
        std::vector<std::vector<Mat<S>>> worker_grads(
            static_cast<size_t>(workers));
        std::vector<double> worker_loss(size_t(workers), 0.0);
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
          pool.emplace_back([&, w] {
            for (size_t i = start + size_t(w); i < end;
                 i += size_t(workers)) {
              const size_t idx = order[i];
              worker_loss[size_t(w)] += detail::train_one(
                  params, data.samples[idx], layout, tcfg,
                  stream_rng(tcfg.seed, uint32_t(epoch), uint64_t(idx)),
                  worker_grads[size_t(w)]);
            }
          });
        }
        for (auto& th : pool) th.join();
        for (int w = 0; w < workers; ++w) {
          loss_total += worker_loss[size_t(w)];
          if (grad_acc.empty())
            grad_acc = std::move(worker_grads[size_t(w)]);
          else if (!worker_grads[size_t(w)].empty())
            for (size_t i = 0; i < grad_acc.size(); ++i)
              grad_acc[i] += worker_grads[size_t(w)][i];
        }
      }
      const S inv = S(1) / S(double(count));
      std::vector<const Mat<S>*> grad_ptrs;
      grad_ptrs.reserve(grad_acc.size());
      for (Mat<S>& g : grad_acc) {
        g *= inv;
        grad_ptrs.push_back(&g);
      }
      const double lr =
          cosine_lr<double>(tcfg.lr_init, tcfg.lr_min, step, total_steps);
      opt.step(param_ptrs, grad_ptrs, S(lr));
      const double mean_loss = loss_total / double(count);
      result.step_loss.push_back(mean_loss);
      epoch_loss_total += mean_loss;
      ++step;
      if (tcfg.log) {
        tcfg.log("epoch " + std::to_string(epoch + 1) + "/" +
                 std::to_string(tcfg.epochs) + " step " +
                 std::to_string(step) + "/" + std::to_string(total_steps) +
                 " loss " + std::to_string(mean_loss) + " lr " +
                 std::to_string(lr));
      }
    }
    result.epoch_mean_loss.push_back(epoch_loss_total /
                                     double(steps_per_epoch));
    if (!tcfg.checkpoint_dir.empty()) {
      save_params<S>(
          tcfg.checkpoint_dir + "/epoch" + std::to_string(epoch + 1) +
              ".ckpt",
          params, "{\"epoch\":" + std::to_string(epoch + 1) + "}");
    }
  }
  result.steps = step;
  return result;
}

struct EvalOptions {
  int n_fixations = 5;
  FixationPolicy policy = FixationPolicy::guided;
  uint64_t seed = 0;
};

struct EvalResult {
  std::vector<long long> correct_at;  // per fixation index
  long long n = 0;
  std::vector<double> accuracy() const {
    std::vector<double> out;
    out.reserve(correct_at.size());
    for (long long c : correct_at) out.push_back(double(c) / double(n));
    return out;
  }
};

// Top-1 accuracy at every fixation index, all read from the same episodes.
template <typename S>
EvalResult evaluate(const VitParams<S>& params, const Dataset& data,
                    const EvalOptions& opts) {
  if (data.samples.empty())
    throw std::invalid_argument("evaluate: empty dataset");
  EpisodeConfig ecfg;
  ecfg.n_fixations = opts.n_fixations;
  ecfg.policy = opts.policy;
  const FoveaLayout layout = FoveaLayout::canonical();
  EvalResult r;
  r.correct_at.assign(size_t(opts.n_fixations), 0);
  for (size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    EpisodeTrace<S> trace =
        run_episode(params, s.image, layout, ecfg,
                    stream_rng(opts.seed, kEvalContext, uint64_t(i)));
    for (size_t k = 0; k < trace.steps.size(); ++k)
      if (trace.steps[k].predicted == s.label)
        ++r.correct_at[k];
    ++r.n;
  }
  return r;
}

// Mean top-class probability over correctly predicted images after an
// initial random fixation plus one guided fixation. The cascade's stopping
// threshold.
template <typename S>
double compute_confidence_threshold(const VitParams<S>& params,
                                    const Dataset& data, uint64_t seed) {
  if (data.samples.empty())
    throw std::invalid_argument("compute_confidence_threshold: empty dataset");
  EpisodeConfig ecfg;
  ecfg.n_fixations = 2;
  ecfg.policy = FixationPolicy::guided;
  const FoveaLayout layout = FoveaLayout::canonical();
  double total = 0;
  long long correct = 0;
  for (size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    EpisodeTrace<S> trace =
        run_episode(params, s.image, layout, ecfg,
                    stream_rng(seed, kEvalContext, uint64_t(i)));
    const FixationStep<S>& last = trace.steps.back();
    if (last.predicted == s.label) {
      total += double(last.max_prob);
      ++correct;
    }
  }
  if (correct == 0)
    throw std::runtime_error(
        "compute_confidence_threshold: no correct predictions");
  return total / double(correct);
}

struct CostLedger {
  std::vector<long long> per_image;
  long long total = 0;
  long long baseline = 0;  // full-pass cost for every image

  void add(long long c) {
    per_image.push_back(c);
    total += c;
  }
  // exact total/baseline as a reduced fraction
  std::pair<long long, long long> relative_exact() const {
    const long long g = std::gcd(total, baseline);
    return {total / (g ? g : 1), baseline / (g ? g : 1)};
  }
  double relative() const { return double(total) / double(baseline); }
};

struct StageStat {
  int stage = 0;  // 1-based; the last stage is the full-resolution pass
  long long classified = 0;
  long long correct = 0;
};

struct EnsembleResult {
  std::vector<StageStat> stages;
  long long n = 0;
  long long correct = 0;
  double accuracy = 0;
  CostLedger ledger;
};

// Confidence cascade: each image runs a guided episode that stops at the
// first fixation whose top probability reaches tau (stage = that fixation);
// images that never reach it escalate to the full-resolution model, whose
// prediction is final. Escalation extends the episode, so an image
// classified at stage k costs exactly k fixations.
template <typename S>
EnsembleResult ensemble_evaluate(const VitParams<S>& fov,
                                 const VitParams<S>& unfov,
                                 const Dataset& data, double tau,
                                 int n_fixations, uint64_t seed) {
  if (data.samples.empty())
    throw std::invalid_argument("ensemble_evaluate: empty dataset");
  const FoveaLayout layout = FoveaLayout::canonical();
  EpisodeConfig ecfg;
  ecfg.n_fixations = n_fixations;
  ecfg.policy = FixationPolicy::guided;
  ecfg.stop_threshold = tau;

  EnsembleResult r;
  r.stages.resize(size_t(n_fixations) + 1);
  for (size_t k = 0; k < r.stages.size(); ++k)
    r.stages[k].stage = int(k) + 1;
  r.ledger.baseline = kFullPassCost * (long long)(data.samples.size());

  for (size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    EpisodeTrace<S> trace =
        run_episode(fov, s.image, layout, ecfg,
                    stream_rng(seed, kEvalContext, uint64_t(i)));
    int stage;
    int pred;
    long long cost = trace.cost;
    if (trace.stop_index > 0) {
      stage = trace.stop_index;
      pred = trace.predicted;
    } else {
      stage = n_fixations + 1;
      pred = classify_full<S>(unfov, s.image).first;
      cost += kFullPassCost;
    }
    StageStat& st = r.stages[size_t(stage - 1)];
    ++st.classified;
    const bool ok = pred == s.label;
    st.correct += ok;
    r.correct += ok;
    r.ledger.add(cost);
    ++r.n;
  }
  r.accuracy = double(r.correct) / double(r.n);
  return r;
}

}  // namespace fovit
