#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "fovit/attack.hpp"

using D = double;
using MatD = fovit::Mat<D>;

namespace {

fovit::ModelConfig tiny_config() {
  fovit::ModelConfig cfg;
  cfg.image_side = 112;
  cfg.patch_side = 8;
  cfg.channels = 3;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.depth = 1;
  cfg.mlp_ratio = 2;
  cfg.num_classes = 4;
  return cfg;
}

fovit::SyntheticBundle tiny_bundle() {
  fovit::SyntheticSpec spec;
  spec.classes = 4;
  spec.train_per_class = 2;
  spec.val_per_class = 1;
  spec.test_per_class = 2;
  spec.seed = 7;
  return fovit::make_synthetic(spec);
}

bool bits_equal(const MatD& a, const MatD& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(D) * size_t(a.size())) == 0;
}

struct PathSetup {
  fovit::VitParams<D> params;
  MatD ep;
  std::vector<fovit::Fixation> path;
  int label = 0;
  fovit::FeatureObjective<D> objective;
};

PathSetup make_setup(uint64_t init_seed, size_t image_index) {
  static fovit::SyntheticBundle bundle = tiny_bundle();
  PathSetup s{fovit::VitParams<D>::init(tiny_config(), init_seed)};
  const fovit::Sample& sample = bundle.test.samples[image_index];
  s.ep = fovit::embed_features(s.params, sample.image);
  s.path = fovit::record_clean_path(
      s.params, s.ep, 3, fovit::stream_rng(11, fovit::kEvalContext, 0));
  s.label = sample.label;
  s.objective = fovit::fixation_path_objective(s.params, s.path, s.label);
  return s;
}

}  // namespace

TEST_CASE("single-step attack: perturbation set, exact budget, identity "
          "at zero strength") {
  PathSetup s = make_setup(171, 0);
  const D eps = 0.25;
  fovit::AttackResult<D> r = fovit::fgsm_attack(s.objective, s.ep, eps);

  REQUIRE(r.features.rows() == s.ep.rows());
  REQUIRE(r.features.cols() == s.ep.cols());
  long long nonzero = 0;
  for (Eigen::Index j = 0; j < r.delta.cols(); ++j) {
    for (Eigen::Index i = 0; i < r.delta.rows(); ++i) {
      const D d = r.delta(i, j);
      const bool in_set = d == eps || d == -eps || d == 0.0;
      if (!in_set) CHECK(in_set);
      nonzero += d != 0.0;
      // exact arithmetic on the realized difference
      const D realized = r.features(i, j) - s.ep(i, j);
      CHECK(realized <= eps);
      CHECK(realized >= -eps);
    }
  }
  // a real gradient is almost never exactly zero anywhere
  CHECK(nonzero > r.delta.size() / 2);

  // the attack raises the loss it climbs
  MatD ignored;
  CHECK(s.objective(r.features, nullptr) > s.objective(s.ep, nullptr));

  fovit::AttackResult<D> zero = fovit::fgsm_attack(s.objective, s.ep, D(0));
  CHECK(bits_equal(zero.features, s.ep));

  fovit::AttackResult<D> again = fovit::fgsm_attack(s.objective, s.ep, eps);
  CHECK(bits_equal(again.features, r.features));

  CHECK_THROWS_AS(fovit::fgsm_attack(s.objective, s.ep, D(-0.1)),
                  std::invalid_argument);
}

TEST_CASE("one projected step at full strength collapses to the "
          "single-step attack") {
  PathSetup s = make_setup(181, 1);
  const D eps = 0.125;
  fovit::AttackConfig cfg;
  cfg.kind = fovit::AttackConfig::Kind::pgd;
  cfg.epsilon = eps;
  cfg.pgd_steps = 1;
  cfg.pgd_step_size = eps;
  cfg.random_start = false;
  std::mt19937 rng(5);
  fovit::AttackResult<D> iterated = fovit::pgd_attack(s.objective, s.ep, cfg, rng);
  fovit::AttackResult<D> single = fovit::fgsm_attack(s.objective, s.ep, eps);
  CHECK(bits_equal(iterated.features, single.features));
  CHECK(bits_equal(iterated.delta, single.delta));
}

TEST_CASE("projected ascent stays inside the ball") {
  PathSetup s = make_setup(191, 2);
  const D eps = 0.1;

  SUBCASE("oversized steps are projected back") {
    fovit::AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.pgd_steps = 4;
    cfg.pgd_step_size = eps;  // 4 full-strength steps must still fit
    cfg.random_start = false;
    std::mt19937 rng(5);
    fovit::AttackResult<D> r = fovit::pgd_attack(s.objective, s.ep, cfg, rng);
    long long at_boundary = 0;
    for (Eigen::Index j = 0; j < r.delta.cols(); ++j) {
      for (Eigen::Index i = 0; i < r.delta.rows(); ++i) {
        CHECK(r.delta(i, j) <= eps);
        CHECK(r.delta(i, j) >= -eps);
        const D realized = r.features(i, j) - s.ep(i, j);
        CHECK(realized <= eps);
        CHECK(realized >= -eps);
        at_boundary += r.delta(i, j) == eps || r.delta(i, j) == -eps;
      }
    }
    // repeated same-direction steps pin most components to the boundary
    CHECK(at_boundary > r.delta.size() / 2);
  }

  SUBCASE("random starts are inside the ball and reproducible") {
    fovit::AttackConfig cfg;
    cfg.epsilon = eps;
    cfg.pgd_steps = 2;
    cfg.random_start = true;
    std::mt19937 a(77), b(77), c(78);
    fovit::AttackResult<D> ra = fovit::pgd_attack(s.objective, s.ep, cfg, a);
    fovit::AttackResult<D> rb = fovit::pgd_attack(s.objective, s.ep, cfg, b);
    fovit::AttackResult<D> rc = fovit::pgd_attack(s.objective, s.ep, cfg, c);
    CHECK(bits_equal(ra.features, rb.features));
    // a different stream gives a different start
    CHECK_FALSE(bits_equal(ra.features, rc.features));
    for (Eigen::Index j = 0; j < ra.delta.cols(); ++j)
      for (Eigen::Index i = 0; i < ra.delta.rows(); ++i) {
        const D realized = ra.features(i, j) - s.ep(i, j);
        CHECK(realized <= eps);
        CHECK(realized >= -eps);
      }
  }

  SUBCASE("zero strength with a random start is still the identity") {
    fovit::AttackConfig cfg;
    cfg.epsilon = 0.0;
    cfg.pgd_steps = 3;
    cfg.random_start = true;
    std::mt19937 rng(9);
    fovit::AttackResult<D> r = fovit::pgd_attack(s.objective, s.ep, cfg, rng);
    CHECK(bits_equal(r.features, s.ep));
  }

  SUBCASE("config validation") {
    fovit::AttackConfig bad;
    bad.epsilon = -1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.epsilon = 0.1;
    bad.pgd_steps = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.pgd_steps = 5;
    bad.pgd_step_size = -2.0;
    CHECK(bad.resolved_step_size() == -2.0);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.pgd_step_size = 0;  // auto: epsilon / 4
    CHECK(bad.resolved_step_size() == doctest::Approx(0.025));
    bad.validate();
  }
}

TEST_CASE("iterated ascent beats the single step on nearly every image") {
  fovit::SyntheticBundle bundle = tiny_bundle();
  std::vector<const fovit::Dataset*> splits = {&bundle.train, &bundle.val,
                                               &bundle.test};
  fovit::VitParams<D> params = fovit::VitParams<D>::init(tiny_config(), 201);
  const D eps = 0.25;
  fovit::AttackConfig cfg;
  cfg.epsilon = eps;
  cfg.pgd_steps = 10;
  cfg.random_start = true;

  long long wins = 0, total = 0;
  size_t index = 0;
  for (const fovit::Dataset* split : splits) {
    for (const fovit::Sample& sample : split->samples) {
      MatD ep = fovit::embed_features(params, sample.image);
      std::vector<fovit::Fixation> path = fovit::record_clean_path(
          params, ep, 3, fovit::stream_rng(13, fovit::kEvalContext, index));
      fovit::FeatureObjective<D> obj =
          fovit::fixation_path_objective(params, path, sample.label);
      fovit::AttackResult<D> one = fovit::fgsm_attack(obj, ep, eps);
      std::mt19937 rng =
          fovit::stream_rng(13, fovit::kAttackContext, index);
      fovit::AttackResult<D> many = fovit::pgd_attack(obj, ep, cfg, rng);
      wins += obj(many.features, nullptr) >= obj(one.features, nullptr);
      ++total;
      ++index;
    }
  }
  CHECK(total == 20);
  CHECK(double(wins) >= 0.9 * double(total));
}

TEST_CASE("single-step attack on a linear-softmax model matches the "
          "analytic computation") {
  // logits = vec(x)^T W + b with x 3x5, so every quantity has a closed form
  std::mt19937 rng(4242);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const int m = 3, d = 5, K = 4, target = 2;
  MatD x0(m, d), W(m * d, K), b(1, K);
  for (Eigen::Index j = 0; j < x0.cols(); ++j)
    for (Eigen::Index i = 0; i < x0.rows(); ++i) x0(i, j) = dist(rng);
  for (Eigen::Index j = 0; j < W.cols(); ++j)
    for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = dist(rng);
  for (Eigen::Index j = 0; j < b.cols(); ++j) b(0, j) = dist(rng);

  auto logits_of = [&](const MatD& x) -> MatD {
    Eigen::Map<const MatD> flat(x.data(), 1, x.size());
    return flat * W + b;
  };
  auto ce_of = [&](const MatD& logits) {
    const double mx = logits.maxCoeff();
    return std::log((logits.array() - mx).exp().sum()) + mx -
           logits(0, target);
  };

  fovit::FeatureObjective<D> obj = [&](const MatD& feats,
                                       MatD* grad) -> D {
    fovit::Tape<D> t;
    Eigen::Map<const MatD> flat(feats.data(), 1, feats.size());
    fovit::Var<D> x = t.leaf(MatD(flat), grad != nullptr);
    fovit::Var<D> logits = fovit::add(
        t, fovit::matmul(t, x, t.constant(W)), t.constant(b));
    fovit::Var<D> loss = fovit::cross_entropy(t, logits, target);
    if (grad) {
      t.backward(loss);
      MatD g = t.grad(x);
      *grad = Eigen::Map<const MatD>(g.data(), feats.rows(), feats.cols());
    }
    return t.value(loss)(0, 0);
  };

  // analytic gradient: reshape of W (softmax - onehot)
  MatD logits0 = logits_of(x0);
  MatD p = fovit::softmax_vector(logits0);
  MatD err = p.transpose();
  err(target, 0) -= 1.0;
  MatD gvec = W * err;  // (m*d) x 1
  MatD g_analytic = Eigen::Map<const MatD>(gvec.data(), m, d);

  const D eps = 0.05;
  MatD delta_analytic =
      eps * g_analytic.unaryExpr(
                [](D v) { return D((v > 0.0) - (v < 0.0)); });
  const double loss_analytic = ce_of(logits_of(MatD(x0 + delta_analytic)));

  fovit::AttackResult<D> r = fovit::fgsm_attack(obj, x0, eps);
  CHECK(obj(r.features, nullptr) ==
        doctest::Approx(loss_analytic).epsilon(1e-6));
  for (Eigen::Index j = 0; j < r.delta.cols(); ++j)
    for (Eigen::Index i = 0; i < r.delta.rows(); ++i)
      CHECK(r.delta(i, j) == delta_analytic(i, j));
}

TEST_CASE("attack gradient agrees with finite differences on the "
          "embedded features") {
  PathSetup s = make_setup(211, 5);
  MatD grad;
  s.objective(s.ep, &grad);
  REQUIRE(grad.rows() == s.ep.rows());
  REQUIRE(grad.cols() == s.ep.cols());

  const double h = 1e-5;
  for (int k = 0; k < 15; ++k) {
    const Eigen::Index i = (7 * k + 3) % s.ep.rows();
    const Eigen::Index j = (5 * k + 1) % s.ep.cols();
    MatD up = s.ep, down = s.ep;
    up(i, j) += h;
    down(i, j) -= h;
    const double fd =
        (s.objective(up, nullptr) - s.objective(down, nullptr)) / (2 * h);
    const double g = grad(i, j);
    const double rel =
        std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-12});
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("robustness sweep: table shape, clean column, determinism") {
  fovit::ModelConfig cfg = tiny_config();
  fovit::VitParams<D> fov = fovit::VitParams<D>::init(cfg, 221);
  fovit::VitParams<D> unfov = fovit::VitParams<D>::init(cfg, 222);
  fovit::SyntheticBundle bundle = tiny_bundle();
  const fovit::Dataset& data = bundle.test;
  const uint64_t seed = 31;

  fovit::AttackConfig base;
  base.pgd_steps = 3;
  base.random_start = true;
  base.seed = seed;
  const std::vector<double> epsilons = {0.0, 1.0};
  std::vector<fovit::SweepRow> rows =
      fovit::robustness_sweep(fov, unfov, data, epsilons, base, 3, seed);
  REQUIRE(rows.size() == 2 * 2 * 2);  // kinds x epsilons x models

  // clean accuracies, computed independently
  const fovit::FoveaLayout layout = fovit::FoveaLayout::canonical();
  fovit::EpisodeConfig ecfg;
  ecfg.n_fixations = 3;
  long long fov_clean = 0, unfov_clean = 0;
  for (size_t i = 0; i < data.samples.size(); ++i) {
    fovit::EpisodeTrace<D> trace = fovit::run_episode(
        fov, data.samples[i].image, layout, ecfg,
        fovit::stream_rng(seed, fovit::kEvalContext, i));
    fov_clean += trace.predicted == data.samples[i].label;
    unfov_clean += fovit::classify_full<D>(unfov, data.samples[i].image).first ==
                   data.samples[i].label;
  }
  const double n = double(data.samples.size());
  for (const fovit::SweepRow& row : rows) {
    CHECK(row.accuracy >= 0.0);
    CHECK(row.accuracy <= 1.0);
    if (row.epsilon == 0.0) {
      const double clean =
          row.model == "foveated" ? fov_clean / n : unfov_clean / n;
      CHECK(row.accuracy == clean);
    }
  }
  // attacking the direct classification surface at huge strength cannot
  // beat the clean run
  double unfov_at_zero = -1, unfov_at_one = -1;
  for (const fovit::SweepRow& row : rows) {
    if (row.model == "unfoveated" && row.attack == "fgsm") {
      if (row.epsilon == 0.0) unfov_at_zero = row.accuracy;
      if (row.epsilon == 1.0) unfov_at_one = row.accuracy;
    }
  }
  CHECK(unfov_at_zero >= 0);
  CHECK(unfov_at_one >= 0);
  CHECK(unfov_at_one <= unfov_at_zero);

  std::vector<fovit::SweepRow> again =
      fovit::robustness_sweep(fov, unfov, data, epsilons, base, 3, seed);
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].model == again[i].model);
    CHECK(rows[i].attack == again[i].attack);
    CHECK(rows[i].epsilon == again[i].epsilon);
    CHECK(rows[i].accuracy == again[i].accuracy);
  }
}
