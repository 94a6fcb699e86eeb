#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "fovit/model.hpp"

using D = double;
using TapeD = fovit::Tape<D>;
using VarD = fovit::Var<D>;
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

MatD rand_mat(Eigen::Index r, Eigen::Index c, std::mt19937& rng,
              double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  MatD m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = dist(rng);
  return m;
}

}  // namespace

TEST_CASE("patchify maps pixels to the expected rows and columns") {
  fovit::ModelConfig cfg = tiny_config();
  fovit::ImageU8 img = fovit::ImageU8::create(112, 112, 3);
  // encode position into pixel values: value = (x * 7 + y * 3 + c) mod 256
  for (int y = 0; y < 112; ++y)
    for (int x = 0; x < 112; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(x, y, c) = uint8_t((x * 7 + y * 3 + c) % 256);

  MatD patches = fovit::patchify<D>(img, cfg);
  CHECK(patches.rows() == 196);
  CHECK(patches.cols() == 8 * 8 * 3);

  // block (bx=2, by=3) is row 3*14+2; pixel (px=5, py=6) channel 1 sits at
  // column 1*64 + 6*8 + 5
  const int bx = 2, by = 3, px = 5, py = 6, c = 1;
  const int row = by * 14 + bx;
  const int col = c * 64 + py * 8 + px;
  const int expect = ((bx * 8 + px) * 7 + (by * 8 + py) * 3 + c) % 256;
  CHECK(patches(row, col) == doctest::Approx(expect / 255.0).epsilon(1e-12));
  CHECK(patches.minCoeff() >= 0.0);
  CHECK(patches.maxCoeff() <= 1.0);

  fovit::ImageU8 small = fovit::ImageU8::create(56, 56, 3);
  CHECK_THROWS_AS(fovit::patchify<D>(small, cfg), std::invalid_argument);
}

TEST_CASE("embedding equals patch projection plus position row by row") {
  fovit::ModelConfig cfg = tiny_config();
  auto params = fovit::VitParams<D>::init(cfg, 42);
  std::mt19937 rng(1);
  fovit::ImageU8 img = fovit::ImageU8::create(112, 112, 3);
  for (auto& px : img.pixels) px = uint8_t(rng() & 0xff);

  MatD patches = fovit::patchify<D>(img, cfg);
  TapeD t;
  auto vars = fovit::push_params(t, params, false);
  VarD ep = fovit::embed_with_positions(t, vars, patches);
  const MatD& EP = t.value(ep);
  REQUIRE(EP.rows() == 196);
  REQUIRE(EP.cols() == cfg.dim);
  for (int r : {0, 57, 195}) {
    MatD expect = patches.row(r) * params.patch_w + params.patch_b +
                  params.pos.row(r);
    CHECK((EP.row(r) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("pooled token sequence matches the direct pooling computation") {
  fovit::ModelConfig cfg = tiny_config();
  const fovit::FoveaLayout layout = fovit::FoveaLayout::canonical();
  std::mt19937 rng(2);
  MatD ep = rand_mat(196, cfg.dim, rng);

  for (fovit::Fixation fix : {fovit::Fixation{0, 0}, fovit::Fixation{7, 3},
                              fovit::Fixation{13, 13}}) {
    auto [P, mask] = fovit::fixation_pooling<D>(layout, fix);
    REQUIRE(P.rows() == layout.capacity());
    MatD padded_direct;
    {
      MatD pooled = fovit::pool_features<D>(ep, layout, fix);
      auto [padded, m2] = fovit::pad_sequence<D>(pooled, layout.capacity());
      padded_direct = padded;
      REQUIRE(m2 == mask);
    }
    MatD via_matrix = P * ep;
    // summation order may differ between the padded and unpadded products
    CHECK((via_matrix - padded_direct).cwiseAbs().maxCoeff() < 1e-14);
    // single-block rows are verbatim feature copies, padding rows stay zero
    const fovit::ActiveSet active = fovit::active_regions(layout, fix);
    for (size_t i = 0; i < active.entries.size(); ++i) {
      const auto& e = active.entries[i];
      if (layout.regions()[size_t(e.region)].rf != 1) continue;
      const int src = e.by * fovit::kGridSide + e.bx;
      CHECK(std::memcmp(via_matrix.row(Eigen::Index(i)).eval().data(),
                        MatD(ep.row(src)).data(),
                        sizeof(D) * size_t(cfg.dim)) == 0);
    }
    for (Eigen::Index r = Eigen::Index(active.entries.size());
         r < layout.capacity(); ++r)
      CHECK(via_matrix.row(r).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("masked tokens cannot influence unmasked outputs") {
  fovit::ModelConfig cfg = tiny_config();
  auto params = fovit::VitParams<D>::init(cfg, 7);
  std::mt19937 rng(3);

  const int n = 12;
  MatD base = rand_mat(n, cfg.dim, rng);
  std::vector<bool> mask(n, true);
  mask[3] = mask[7] = mask[11] = false;

  MatD garbage = base;
  garbage.row(3).setConstant(1e6);
  garbage.row(7).setConstant(-42.0);
  garbage.row(11).setZero();
  garbage.row(11)(0) = 3e7;

  auto run = [&](const MatD& tokens) {
    TapeD t;
    auto vars = fovit::push_params(t, params, false);
    fovit::AttentionRecord<D> rec;
    VarD out = fovit::encode_and_read(t, vars, cfg, t.constant(tokens), &mask,
                                      &rec);
    VarD logits =
        fovit::logits_from_row(t, vars, fovit::slice_rows(t, out, 0, 1));
    return std::pair{MatD(t.value(out)), MatD(t.value(logits))};
  };

  auto [out_a, logits_a] = run(base);
  auto [out_b, logits_b] = run(garbage);
  for (int i = 0; i < n; ++i) {
    if (!mask[size_t(i)]) continue;
    INFO("row ", i);
    CHECK(std::memcmp(out_a.row(i).eval().data(), out_b.row(i).eval().data(),
                      sizeof(D) * size_t(cfg.dim)) == 0);
  }
  CHECK(std::memcmp(logits_a.data(), logits_b.data(),
                    sizeof(D) * size_t(cfg.num_classes)) == 0);
}

TEST_CASE("readout attention record is a proper distribution") {
  fovit::ModelConfig cfg = tiny_config();
  auto params = fovit::VitParams<D>::init(cfg, 9);
  const fovit::FoveaLayout layout = fovit::FoveaLayout::canonical();
  std::mt19937 rng(4);
  MatD ep = rand_mat(196, cfg.dim, rng);

  TapeD t;
  auto vars = fovit::push_params(t, params, false);
  VarD epv = t.constant(ep);
  fovit::AttentionRecord<D> rec;
  std::vector<bool> key_mask;
  fovit::fixation_forward(t, vars, cfg, epv, layout, fovit::Fixation{0, 0},
                          &rec, &key_mask);

  const int n = layout.capacity() + 1;
  REQUIRE(rec.per_head.rows() == cfg.heads);
  REQUIRE(rec.per_head.cols() == n);
  REQUIRE(rec.feature_weights.cols() == n - 1);
  for (int h = 0; h < cfg.heads; ++h) {
    CHECK(rec.per_head.row(h).sum() == doctest::Approx(1.0).epsilon(1e-12));
    for (int j = 0; j < n; ++j)
      if (!key_mask[size_t(j)]) CHECK(rec.per_head(h, j) == 0.0);
  }
  CHECK(rec.feature_weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rec.feature_weights.minCoeff() >= 0.0);
  // head-mean with the class self-weight dropped, renormalized
  MatD mean = rec.per_head.colwise().mean();
  MatD manual = mean.middleCols(1, n - 1) / mean.middleCols(1, n - 1).sum();
  CHECK((rec.feature_weights - manual).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("a lone unmasked feature token takes all the readout weight") {
  fovit::ModelConfig cfg = tiny_config();
  auto params = fovit::VitParams<D>::init(cfg, 11);
  std::mt19937 rng(5);
  MatD tokens = rand_mat(6, cfg.dim, rng);
  std::vector<bool> mask = {true, false, false, true, false, false};

  TapeD t;
  auto vars = fovit::push_params(t, params, false);
  fovit::AttentionRecord<D> rec;
  fovit::encode_and_read(t, vars, cfg, t.constant(tokens), &mask, &rec);
  CHECK(rec.feature_weights(0, 2) == doctest::Approx(1.0).epsilon(1e-12));
  for (int j : {0, 1, 3, 4}) CHECK(rec.feature_weights(0, j) == 0.0);
}

TEST_CASE("fusing fixation outputs is invariant to their order") {
  fovit::ModelConfig cfg = tiny_config();
  auto params = fovit::VitParams<D>::init(cfg, 13);
  std::mt19937 rng(6);
  const MatD a = rand_mat(1, cfg.dim, rng);
  const MatD b = rand_mat(1, cfg.dim, rng);
  const MatD c = rand_mat(1, cfg.dim, rng);

  auto run = [&](const std::vector<const MatD*>& order) {
    TapeD t;
    auto vars = fovit::push_params(t, params, false);
    std::vector<VarD> outs;
    for (const MatD* m : order) outs.push_back(t.constant(*m));
    VarD logits = fovit::fuse_fixations(t, vars, cfg, outs);
    return MatD(t.value(logits));
  };

  const MatD base = run({&a, &b, &c});
  CHECK((run({&c, &a, &b}) - base).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((run({&b, &c, &a}) - base).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(base.rows() == 1);
  CHECK(base.cols() == cfg.num_classes);
}

TEST_CASE("full-sequence pass produces finite class scores") {
  fovit::ModelConfig cfg = tiny_config();
  auto params = fovit::VitParams<D>::init(cfg, 17);
  std::mt19937 rng(8);
  MatD ep = rand_mat(196, cfg.dim, rng);

  TapeD t;
  t.check_finite = true;
  auto vars = fovit::push_params(t, params, false);
  fovit::AttentionRecord<D> rec;
  VarD logits =
      fovit::full_sequence_logits(t, vars, cfg, t.constant(ep), &rec);
  CHECK(t.value(logits).rows() == 1);
  CHECK(t.value(logits).cols() == cfg.num_classes);
  CHECK(t.value(logits).allFinite());
  CHECK(rec.per_head.cols() == 197);
  CHECK(rec.feature_weights.cols() == 196);
  CHECK(rec.feature_weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("every parameter receives gradient from an episode-style loss") {
  fovit::ModelConfig cfg = tiny_config();
  auto params = fovit::VitParams<D>::init(cfg, 19);
  const fovit::FoveaLayout layout = fovit::FoveaLayout::canonical();
  std::mt19937 rng(9);
  fovit::ImageU8 img = fovit::ImageU8::create(112, 112, 3);
  for (auto& px : img.pixels) px = uint8_t(rng() & 0xff);
  MatD patches = fovit::patchify<D>(img, cfg);

  TapeD t;
  auto vars = fovit::push_params(t, params, true);
  VarD ep = fovit::embed_with_positions(t, vars, patches);
  fovit::AttentionRecord<D> rec;
  VarD c1 = fovit::fixation_forward(t, vars, cfg, ep, layout,
                                    fovit::Fixation{4, 4}, &rec);
  VarD c2 = fovit::fixation_forward(t, vars, cfg, ep, layout,
                                    fovit::Fixation{10, 2}, &rec);
  VarD l1 = fovit::fuse_fixations(t, vars, cfg, {c1});
  VarD l2 = fovit::fuse_fixations(t, vars, cfg, {c1, c2});
  VarD loss = fovit::add_scalars(
      t, {fovit::cross_entropy(t, l1, 2), fovit::cross_entropy(t, l2, 2)});
  t.backward(loss);

  std::vector<fovit::Mat<D>> grads = fovit::collect_grads(t, vars);
  size_t i = 0;
  std::vector<std::string> names;
  fovit::visit_params<D>(params, [&](const std::string& name, MatD&) {
    names.push_back(name);
  });
  REQUIRE(names.size() == grads.size());
  for (i = 0; i < grads.size(); ++i) {
    INFO("parameter ", names[i]);
    REQUIRE(grads[i].size() > 0);
    CHECK(grads[i].cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("analytic gradients match finite differences through a fixation") {
  fovit::ModelConfig cfg = tiny_config();
  const fovit::FoveaLayout layout = fovit::FoveaLayout::canonical();
  auto params = fovit::VitParams<D>::init(cfg, 23);
  std::mt19937 rng(10);
  const MatD ep0 = rand_mat(196, cfg.dim, rng, -0.5, 0.5);
  const int target = 1;

  auto eval = [&](const fovit::VitParams<D>& p, const MatD& ep_in) {
    TapeD t;
    auto vars = fovit::push_params(t, p, false);
    VarD ep = t.constant(ep_in);
    fovit::AttentionRecord<D> rec;
    VarD c1 = fovit::fixation_forward(t, vars, cfg, ep, layout,
                                      fovit::Fixation{3, 3}, &rec);
    VarD c2 = fovit::fixation_forward(t, vars, cfg, ep, layout,
                                      fovit::Fixation{7, 7}, &rec);
    VarD logits = fovit::fuse_fixations(t, vars, cfg, {c1, c2});
    return t.value(fovit::cross_entropy(t, logits, target))(0, 0);
  };

  // analytic pass
  TapeD t;
  auto vars = fovit::push_params(t, params, true);
  VarD ep = t.parameter(ep0);
  fovit::AttentionRecord<D> rec;
  VarD c1 = fovit::fixation_forward(t, vars, cfg, ep, layout,
                                    fovit::Fixation{3, 3}, &rec);
  VarD c2 = fovit::fixation_forward(t, vars, cfg, ep, layout,
                                    fovit::Fixation{7, 7}, &rec);
  VarD logits = fovit::fuse_fixations(t, vars, cfg, {c1, c2});
  t.backward(fovit::cross_entropy(t, logits, target));

  const double h = 1e-6;
  auto check_coords = [&](const MatD& analytic, auto&& perturb,
                          const MatD& ref, int stride) {
    int checked = 0;
    for (Eigen::Index idx = 0; idx < ref.size(); idx += stride) {
      const Eigen::Index i = idx % ref.rows();
      const Eigen::Index j = idx / ref.rows();
      const double fp = perturb(i, j, h);
      const double fm = perturb(i, j, -h);
      const double num = (fp - fm) / (2 * h);
      const double ana = analytic(i, j);
      const double denom = std::max({1.0, std::abs(num), std::abs(ana)});
      INFO("coeff (", i, ",", j, ") numeric=", num, " analytic=", ana);
      CHECK(std::abs(num - ana) / denom < 2e-6);
      ++checked;
    }
    CHECK(checked >= 5);
  };

  // input features (the adversarial-attack gradient path)
  check_coords(
      t.grad(ep),
      [&](Eigen::Index i, Eigen::Index j, double d) {
        MatD e = ep0;
        e(i, j) += d;
        return eval(params, e);
      },
      ep0, 257);

  auto perturb_param = [&](MatD fovit::VitParams<D>::* field) {
    return [&, field](Eigen::Index i, Eigen::Index j, double d) {
      fovit::VitParams<D> p = params;
      (p.*field)(i, j) += d;
      return eval(p, ep0);
    };
  };
  check_coords(t.grad(vars.cls), perturb_param(&fovit::VitParams<D>::cls),
               params.cls, 3);
  check_coords(t.grad(vars.fix), perturb_param(&fovit::VitParams<D>::fix),
               params.fix, 3);
  check_coords(t.grad(vars.head_w),
               perturb_param(&fovit::VitParams<D>::head_w), params.head_w, 13);
  check_coords(t.grad(vars.ln_f_g),
               perturb_param(&fovit::VitParams<D>::ln_f_g), params.ln_f_g, 3);

  // a few tensors inside the trunk blocks
  auto perturb_block = [&](int blk, MatD fovit::BlockParams<D>::* field) {
    return [&, blk, field](Eigen::Index i, Eigen::Index j, double d) {
      fovit::VitParams<D> p = params;
      (p.blocks[size_t(blk)].*field)(i, j) += d;
      return eval(p, ep0);
    };
  };
  check_coords(t.grad(vars.blocks[0].wqkv),
               perturb_block(0, &fovit::BlockParams<D>::wqkv),
               params.blocks[0].wqkv, 97);
  check_coords(t.grad(vars.blocks[1].w2),
               perturb_block(1, &fovit::BlockParams<D>::w2),
               params.blocks[1].w2, 53);
  check_coords(t.grad(vars.blocks[2].ln1_g),
               perturb_block(2, &fovit::BlockParams<D>::ln1_g),
               params.blocks[2].ln1_g, 3);
}

TEST_CASE("parameter init is deterministic and checkpoints round-trip") {
  fovit::ModelConfig cfg = tiny_config();
  auto a = fovit::VitParams<float>::init(cfg, 1234);
  auto b = fovit::VitParams<float>::init(cfg, 1234);
  auto c = fovit::VitParams<float>::init(cfg, 1235);

  bool identical = true;
  bool differs = false;
  fovit::visit_params<float>(a, [&](const std::string& name,
                                    fovit::Mat<float>& m) {
    fovit::Mat<float>* mb = nullptr;
    fovit::Mat<float>* mc = nullptr;
    fovit::visit_params<float>(b, [&](const std::string& n2,
                                      fovit::Mat<float>& m2) {
      if (n2 == name) mb = &m2;
    });
    fovit::visit_params<float>(c, [&](const std::string& n2,
                                      fovit::Mat<float>& m2) {
      if (n2 == name) mc = &m2;
    });
    REQUIRE(mb != nullptr);
    if (std::memcmp(m.data(), mb->data(), sizeof(float) * size_t(m.size())) !=
        0)
      identical = false;
    if (std::memcmp(m.data(), mc->data(), sizeof(float) * size_t(m.size())) !=
        0)
      differs = true;
  });
  CHECK(identical);
  CHECK(differs);

  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "fovit_model_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();
  fovit::save_params<float>(path, a, "{\"seed\":1234}");
  auto loaded = fovit::VitParams<float>::init(cfg, 999);
  const std::string meta = fovit::load_params<float>(path, loaded);
  CHECK(meta == "{\"seed\":1234}");
  bool same = true;
  fovit::visit_params<float>(a, [&](const std::string& name,
                                    fovit::Mat<float>& m) {
    fovit::visit_params<float>(loaded, [&](const std::string& n2,
                                           fovit::Mat<float>& m2) {
      if (n2 == name &&
          std::memcmp(m.data(), m2.data(),
                      sizeof(float) * size_t(m.size())) != 0)
        same = false;
    });
  });
  CHECK(same);
  fs::remove_all(dir);
}

TEST_CASE("configuration validation rejects inconsistent settings") {
  fovit::ModelConfig cfg = tiny_config();
  cfg.validate();
  fovit::ModelConfig bad = cfg;
  bad.image_side = 100;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.dim = 15;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.heads = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
