#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fovit/episode.hpp"

namespace fovit {

inline constexpr uint32_t kAttackContext = 0x4154544bu;

struct AttackConfig {
  enum class Kind { fgsm, pgd };
  Kind kind = Kind::fgsm;
  double epsilon = 0.0;      // max-norm budget in embedding units
  int pgd_steps = 10;
  double pgd_step_size = 0;  // <= 0 resolves to epsilon / 4
  bool random_start = true;  // pgd only
  uint64_t seed = 0;

  double resolved_step_size() const {
    return pgd_step_size != 0 ? pgd_step_size : epsilon / 4;
  }
  void validate() const {
    if (epsilon < 0) throw std::invalid_argument("attack: epsilon < 0");
    if (pgd_steps < 1) throw std::invalid_argument("attack: pgd_steps < 1");
    if (pgd_step_size < 0 || (epsilon > 0 && resolved_step_size() <= 0))
      throw std::invalid_argument("attack: step size must be positive");
  }
};

// A differentiable scalar loss of the embedded features. Returns the loss;
// when grad is non-null it is filled with d loss / d features.
template <typename S>
using FeatureObjective = std::function<S(const Mat<S>&, Mat<S>*)>;

// Final-fixation classification loss along a fixed fixation path. The
// parameter set is captured by pointer and must outlive the objective.
template <typename S>
FeatureObjective<S> fixation_path_objective(const VitParams<S>& params,
                                            std::vector<Fixation> path,
                                            int target) {
  const VitParams<S>* p = &params;
  return [p, path = std::move(path), target](const Mat<S>& feats,
                                             Mat<S>* grad) -> S {
    Tape<S> t;
    VitVars<S> vars = push_params(t, *p, false);
    Var<S> ep = t.leaf(feats, grad != nullptr);
    Var<S> loss = forced_final_loss(t, vars, p->cfg, ep,
                                    FoveaLayout::canonical(), path, target);
    if (grad) {
      t.backward(loss);
      *grad = t.grad(ep);
    }
    return t.value(loss)(0, 0);
  };
}

// Classification loss of the full-resolution pathway.
template <typename S>
FeatureObjective<S> full_sequence_objective(const VitParams<S>& params,
                                            int target) {
  const VitParams<S>* p = &params;
  return [p, target](const Mat<S>& feats, Mat<S>* grad) -> S {
    Tape<S> t;
    VitVars<S> vars = push_params(t, *p, false);
    Var<S> ep = t.leaf(feats, grad != nullptr);
    Var<S> loss = cross_entropy(
        t, full_sequence_logits(t, vars, p->cfg, ep), target);
    if (grad) {
      t.backward(loss);
      *grad = t.grad(ep);
    }
    return t.value(loss)(0, 0);
  };
}

// The fixation sequence an unperturbed guided episode takes; the path the
// attacker differentiates through.
template <typename S>
std::vector<Fixation> record_clean_path(const VitParams<S>& params,
                                        const Mat<S>& ep, int n_fixations,
                                        std::mt19937 rng) {
  EpisodeConfig ecfg;
  ecfg.n_fixations = n_fixations;
  EpisodeTrace<S> trace = run_episode_from_features(
      params, ep, FoveaLayout::canonical(), ecfg, std::move(rng));
  std::vector<Fixation> path;
  path.reserve(trace.steps.size());
  for (const FixationStep<S>& st : trace.steps) path.push_back(st.fix);
  return path;
}

// Pull y toward x, one representable value at a time, until the computed
// difference fits the max-norm budget exactly. Adding a +/-eps perturbation
// can round outward by an ulp; this repairs the handful of entries affected.
template <typename S>
void clamp_linf_exact(const Mat<S>& x, Mat<S>& y, S epsilon) {
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      S d = y(i, j) - x(i, j);
      while (d > epsilon || d < -epsilon) {
        y(i, j) = std::nextafter(y(i, j), x(i, j));
        d = y(i, j) - x(i, j);
      }
    }
  }
}

template <typename S>
struct AttackResult {
  Mat<S> features;  // perturbed embedded features
  Mat<S> delta;     // the constructed perturbation, entries in [-eps, eps]
};

namespace detail {

template <typename S>
Mat<S> sign_of(const Mat<S>& g) {
  return g.unaryExpr([](S v) { return S((v > S(0)) - (v < S(0))); });
}

// uniform draw in (-1, 1), from raw generator words so the sequence is
// platform-independent
inline double uniform_signed(std::mt19937& g) {
  return (double(g()) + 0.5) * 0x1p-32 * 2.0 - 1.0;
}

}  // namespace detail

// Single ascent step of size epsilon along the loss gradient's sign.
template <typename S>
AttackResult<S> fgsm_attack(const FeatureObjective<S>& objective,
                            const Mat<S>& ep, S epsilon) {
  if (epsilon < S(0)) throw std::invalid_argument("fgsm: epsilon < 0");
  Mat<S> grad;
  objective(ep, &grad);
  AttackResult<S> r;
  r.delta = epsilon * detail::sign_of(grad);
  r.features = ep + r.delta;
  clamp_linf_exact(ep, r.features, epsilon);
  return r;
}

// Iterated sign-gradient ascent with projection onto the max-norm ball
// around the clean features after every step.
template <typename S>
AttackResult<S> pgd_attack(const FeatureObjective<S>& objective,
                           const Mat<S>& ep, const AttackConfig& cfg,
                           std::mt19937& rng) {
  cfg.validate();
  const S epsilon = S(cfg.epsilon);
  const S alpha = S(cfg.resolved_step_size());
  Mat<S> delta = Mat<S>::Zero(ep.rows(), ep.cols());
  if (cfg.random_start) {
    for (Eigen::Index j = 0; j < delta.cols(); ++j)
      for (Eigen::Index i = 0; i < delta.rows(); ++i)
        delta(i, j) = epsilon * S(detail::uniform_signed(rng));
    delta = delta.cwiseMin(epsilon).cwiseMax(-epsilon);
  }
  Mat<S> grad;
  for (int step = 0; step < cfg.pgd_steps; ++step) {
    Mat<S> at = ep + delta;
    clamp_linf_exact(ep, at, epsilon);
    objective(at, &grad);
    delta += alpha * detail::sign_of(grad);
    delta = delta.cwiseMin(epsilon).cwiseMax(-epsilon);
  }
  AttackResult<S> r;
  r.delta = std::move(delta);
  r.features = ep + r.delta;
  clamp_linf_exact(ep, r.features, epsilon);
  return r;
}

struct SweepRow {
  std::string model;   // "foveated" | "unfoveated"
  std::string attack;  // "fgsm" | "pgd"
  double epsilon = 0;
  double accuracy = 0;
};

// Accuracy of both models under both attacks across a list of budgets. The
// foveated model re-selects its fixations on the perturbed features — only
// the attacker's gradient path is frozen to the clean episode.
template <typename S>
std::vector<SweepRow> robustness_sweep(const VitParams<S>& fov,
                                       const VitParams<S>& unfov,
                                       const Dataset& data,
                                       const std::vector<double>& epsilons,
                                       const AttackConfig& base,
                                       int n_fixations, uint64_t seed) {
  if (data.samples.empty())
    throw std::invalid_argument("robustness_sweep: empty dataset");
  const FoveaLayout layout = FoveaLayout::canonical();
  EpisodeConfig eval_cfg;
  eval_cfg.n_fixations = n_fixations;

  std::vector<SweepRow> rows;
  for (const char* attack : {"fgsm", "pgd"}) {
    const bool is_pgd = std::string(attack) == "pgd";
    for (double eps : epsilons) {
      AttackConfig cfg = base;
      cfg.kind = is_pgd ? AttackConfig::Kind::pgd : AttackConfig::Kind::fgsm;
      cfg.epsilon = eps;
      cfg.validate();
      long long fov_correct = 0, unfov_correct = 0;
      for (size_t i = 0; i < data.samples.size(); ++i) {
        const Sample& s = data.samples[i];

        Mat<S> ep_fov = embed_features(fov, s.image);
        std::vector<Fixation> path = record_clean_path(
            fov, ep_fov, n_fixations,
            stream_rng(seed, kEvalContext, uint64_t(i)));
        FeatureObjective<S> fov_obj =
            fixation_path_objective(fov, path, s.label);
        std::mt19937 attack_rng =
            stream_rng(cfg.seed, kAttackContext, uint64_t(i));
        Mat<S> hit_fov =
            is_pgd ? pgd_attack(fov_obj, ep_fov, cfg, attack_rng).features
                   : fgsm_attack(fov_obj, ep_fov, S(eps)).features;
        EpisodeTrace<S> trace = run_episode_from_features(
            fov, hit_fov, layout, eval_cfg,
            stream_rng(seed, kEvalContext, uint64_t(i)));
        fov_correct += trace.predicted == s.label;

        Mat<S> ep_unfov = embed_features(unfov, s.image);
        FeatureObjective<S> unfov_obj =
            full_sequence_objective(unfov, s.label);
        attack_rng = stream_rng(cfg.seed, kAttackContext, uint64_t(i));
        Mat<S> hit_unfov =
            is_pgd
                ? pgd_attack(unfov_obj, ep_unfov, cfg, attack_rng).features
                : fgsm_attack(unfov_obj, ep_unfov, S(eps)).features;
        unfov_correct +=
            classify_full_from_features(unfov, hit_unfov).first == s.label;
      }
      const double n = double(data.samples.size());
      rows.push_back({"foveated", attack, eps, double(fov_correct) / n});
      rows.push_back({"unfoveated", attack, eps, double(unfov_correct) / n});
    }
  }
  return rows;
}

}  // namespace fovit
