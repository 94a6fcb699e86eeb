#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <type_traits>
#include <string>
#include <vector>

#include "fovit/checkpoint.hpp"
#include "fovit/geometry.hpp"
#include "fovit/image.hpp"
#include "fovit/tape.hpp"

namespace fovit {

struct ModelConfig {
  int image_side = 112;
  int patch_side = 8;
  int channels = 3;
  int dim = 64;
  int heads = 4;
  int depth = 4;  // plain encoder blocks before the readout + fusion blocks
  int mlp_ratio = 4;
  int num_classes = 10;

  int patch_dim() const { return patch_side * patch_side * channels; }
  int mlp_dim() const { return dim * mlp_ratio; }
  // plain blocks, then the attention-readout block, then the fusion block
  int total_blocks() const { return depth + 2; }
  int readout_block() const { return depth; }
  int fusion_block() const { return depth + 1; }

  void validate() const {
    if (image_side <= 0 || patch_side <= 0 ||
        image_side != kGridSide * patch_side)
      throw std::invalid_argument(
          "ModelConfig: image_side must be 14 * patch_side");
    if (channels <= 0 || dim <= 0 || heads <= 0 || depth < 0 ||
        mlp_ratio <= 0 || num_classes <= 0)
      throw std::invalid_argument("ModelConfig: non-positive field");
    if (dim % heads != 0)
      throw std::invalid_argument("ModelConfig: dim must divide by heads");
  }
};

template <typename S>
struct BlockParams {
  Mat<S> ln1_g, ln1_b;
  Mat<S> wqkv, bqkv;
  Mat<S> wo, bo;
  Mat<S> ln2_g, ln2_b;
  Mat<S> w1, b1;
  Mat<S> w2, b2;
};

// All weights of the model, in plain matrices. The same trunk serves both the
// fixation path (class token + pooled tokens) and the full-sequence path
// (class token + every patch token).
template <typename S>
struct VitParams {
  ModelConfig cfg;
  Mat<S> patch_w, patch_b;  // patch_dim x dim, 1 x dim
  Mat<S> pos;               // 196 x dim, added before pooling
  Mat<S> cls;               // 1 x dim
  Mat<S> fix;               // 1 x dim, query token of the fusion block
  std::vector<BlockParams<S>> blocks;  // total_blocks()
  Mat<S> ln_f_g, ln_f_b;    // 1 x dim
  Mat<S> head_w, head_b;    // dim x num_classes, 1 x num_classes

  static VitParams init(const ModelConfig& cfg, uint64_t seed);
};

namespace detail {

inline double unit_open(std::mt19937_64& g) {
  return (double(g() >> 11) + 0.5) * 0x1p-53;
}

inline double gauss(std::mt19937_64& g) {
  const double u1 = unit_open(g);
  const double u2 = unit_open(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <typename S>
Mat<S> gauss_mat(Eigen::Index r, Eigen::Index c, double sigma,
                 std::mt19937_64& g) {
  Mat<S> m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = S(sigma * gauss(g));
  return m;
}

}  // namespace detail

template <typename S>
VitParams<S> VitParams<S>::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 g(seed);
  const double sigma = 0.02;
  VitParams<S> p;
  p.cfg = cfg;
  const int d = cfg.dim;
  p.patch_w = detail::gauss_mat<S>(cfg.patch_dim(), d, sigma, g);
  p.patch_b = Mat<S>::Zero(1, d);
  p.pos = detail::gauss_mat<S>(kGridBlocks, d, sigma, g);
  p.cls = detail::gauss_mat<S>(1, d, sigma, g);
  p.fix = detail::gauss_mat<S>(1, d, sigma, g);
  p.blocks.resize(size_t(cfg.total_blocks()));
  for (auto& b : p.blocks) {
    b.ln1_g = Mat<S>::Ones(1, d);
    b.ln1_b = Mat<S>::Zero(1, d);
    b.wqkv = detail::gauss_mat<S>(d, 3 * d, sigma, g);
    b.bqkv = Mat<S>::Zero(1, 3 * d);
    b.wo = detail::gauss_mat<S>(d, d, sigma, g);
    b.bo = Mat<S>::Zero(1, d);
    b.ln2_g = Mat<S>::Ones(1, d);
    b.ln2_b = Mat<S>::Zero(1, d);
    b.w1 = detail::gauss_mat<S>(d, cfg.mlp_dim(), sigma, g);
    b.b1 = Mat<S>::Zero(1, cfg.mlp_dim());
    b.w2 = detail::gauss_mat<S>(cfg.mlp_dim(), d, sigma, g);
    b.b2 = Mat<S>::Zero(1, d);
  }
  p.ln_f_g = Mat<S>::Ones(1, d);
  p.ln_f_b = Mat<S>::Zero(1, d);
  p.head_w = detail::gauss_mat<S>(d, cfg.num_classes, sigma, g);
  p.head_b = Mat<S>::Zero(1, cfg.num_classes);
  return p;
}

// Visits every tensor as (name, matrix) in a fixed order shared by the
// optimizer, the gradient collector and the checkpoint format.
template <typename S, typename M, typename F>
void visit_params(M&& p, F&& f) {
  f("patch_w", p.patch_w);
  f("patch_b", p.patch_b);
  f("pos", p.pos);
  f("cls", p.cls);
  f("fix", p.fix);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "blk" + std::to_string(i) + ".";
    f(pre + "ln1_g", b.ln1_g);
    f(pre + "ln1_b", b.ln1_b);
    f(pre + "wqkv", b.wqkv);
    f(pre + "bqkv", b.bqkv);
    f(pre + "wo", b.wo);
    f(pre + "bo", b.bo);
    f(pre + "ln2_g", b.ln2_g);
    f(pre + "ln2_b", b.ln2_b);
    f(pre + "w1", b.w1);
    f(pre + "b1", b.b1);
    f(pre + "w2", b.w2);
    f(pre + "b2", b.b2);
  }
  f("ln_f_g", p.ln_f_g);
  f("ln_f_b", p.ln_f_b);
  f("head_w", p.head_w);
  f("head_b", p.head_b);
}

template <typename S>
void save_params(const std::string& path, const VitParams<S>& p,
                 const std::string& meta) {
  std::vector<std::pair<std::string, const Mat<S>*>> tensors;
  visit_params<S>(p, [&](const std::string& name, const Mat<S>& m) {
    tensors.emplace_back(name, &m);
  });
  save_checkpoint<S>(path, tensors, meta);
}

// Loads into an initialized parameter set so every tensor's expected shape is
// known; mismatched names or shapes are errors.
template <typename S>
std::string load_params(const std::string& path, VitParams<S>& p) {
  Checkpoint<S> ck = load_checkpoint<S>(path);
  size_t used = 0;
  visit_params<S>(p, [&](const std::string& name, Mat<S>& m) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end())
      throw std::runtime_error("load_params: missing tensor " + name);
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw std::runtime_error("load_params: shape mismatch for " + name);
    m = it->second;
    ++used;
  });
  if (used != ck.tensors.size())
    throw std::runtime_error("load_params: checkpoint has extra tensors");
  return ck.meta;
}

// Tape handles for every parameter, pushed in visit order.
template <typename S>
struct VitVars {
  struct BlockVars {
    Var<S> ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  Var<S> patch_w, patch_b, pos, cls, fix;
  std::vector<BlockVars> blocks;
  Var<S> ln_f_g, ln_f_b, head_w, head_b;
};

template <typename S>
VitVars<S> push_params(Tape<S>& t, const VitParams<S>& p, bool trainable) {
  VitVars<S> v;
  std::vector<Var<S>*> slots;
  v.blocks.resize(p.blocks.size());
  auto collect = [&](VitVars<S>& vv) {
    slots.push_back(&vv.patch_w);
    slots.push_back(&vv.patch_b);
    slots.push_back(&vv.pos);
    slots.push_back(&vv.cls);
    slots.push_back(&vv.fix);
    for (auto& b : vv.blocks) {
      slots.push_back(&b.ln1_g);
      slots.push_back(&b.ln1_b);
      slots.push_back(&b.wqkv);
      slots.push_back(&b.bqkv);
      slots.push_back(&b.wo);
      slots.push_back(&b.bo);
      slots.push_back(&b.ln2_g);
      slots.push_back(&b.ln2_b);
      slots.push_back(&b.w1);
      slots.push_back(&b.b1);
      slots.push_back(&b.w2);
      slots.push_back(&b.b2);
    }
    slots.push_back(&vv.ln_f_g);
    slots.push_back(&vv.ln_f_b);
    slots.push_back(&vv.head_w);
    slots.push_back(&vv.head_b);
  };
  collect(v);
  size_t i = 0;
  visit_params<S>(const_cast<VitParams<S>&>(p),
                  [&](const std::string&, Mat<S>& m) {
                    *slots[i++] = t.leaf(m, trainable);
                  });
  return v;
}

// Gradients in the same order as visit_params, collected after backward().
template <typename S>
std::vector<Mat<S>> collect_grads(const Tape<S>& t, const VitVars<S>& v) {
  std::vector<Mat<S>> out;
  out.push_back(t.grad(v.patch_w));
  out.push_back(t.grad(v.patch_b));
  out.push_back(t.grad(v.pos));
  out.push_back(t.grad(v.cls));
  out.push_back(t.grad(v.fix));
  for (const auto& b : v.blocks) {
    out.push_back(t.grad(b.ln1_g));
    out.push_back(t.grad(b.ln1_b));
    out.push_back(t.grad(b.wqkv));
    out.push_back(t.grad(b.bqkv));
    out.push_back(t.grad(b.wo));
    out.push_back(t.grad(b.bo));
    out.push_back(t.grad(b.ln2_g));
    out.push_back(t.grad(b.ln2_b));
    out.push_back(t.grad(b.w1));
    out.push_back(t.grad(b.b1));
    out.push_back(t.grad(b.w2));
    out.push_back(t.grad(b.b2));
  }
  out.push_back(t.grad(v.ln_f_g));
  out.push_back(t.grad(v.ln_f_b));
  out.push_back(t.grad(v.head_w));
  out.push_back(t.grad(v.head_b));
  return out;
}

// Image -> 196 x patch_dim matrix of raw patches, one row per grid block in
// row-major block order. Within a patch, columns run channel-major then
// row-major over pixels. Values are scaled to [0, 1].
template <typename S>
Mat<S> patchify(const ImageU8& img, const ModelConfig& cfg) {
  if (img.width != cfg.image_side || img.height != cfg.image_side ||
      img.channels != cfg.channels)
    throw std::invalid_argument("patchify: image does not match config");
  const int p = cfg.patch_side;
  Mat<S> out(kGridBlocks, cfg.patch_dim());
  for (int by = 0; by < kGridSide; ++by) {
    for (int bx = 0; bx < kGridSide; ++bx) {
      const int row = by * kGridSide + bx;
      for (int c = 0; c < cfg.channels; ++c)
        for (int py = 0; py < p; ++py)
          for (int px = 0; px < p; ++px)
            out(row, c * p * p + py * p + px) =
                S(img.at(bx * p + px, by * p + py, c)) / S(255);
    }
  }
  return out;
}

// Patch embedding plus position embedding: rows of the result are the
// per-block features every pooling region averages over.
template <typename S>
Var<S> embed_with_positions(Tape<S>& t, const VitVars<S>& v,
                            const Mat<S>& patches) {
  Var<S> x = add_row_broadcast(
      t, matmul(t, t.constant(patches), v.patch_w), v.patch_b);
  return add(t, x, v.pos);
}

// Attention weights of the sequence's first token, captured at the readout
// block. `per_head` holds one attention row per head; `feature_weights` is
// the head mean with the token's self-weight dropped and the rest
// renormalized, aligned with tokens 1..n-1.
template <typename S>
struct AttentionRecord {
  Mat<S> per_head;         // heads x n
  Mat<S> feature_weights;  // 1 x (n - 1)
};

template <typename S>
Var<S> block_forward(Tape<S>& t, Var<S> x,
                     const typename VitVars<S>::BlockVars& b, int heads,
                     const std::vector<bool>* key_mask = nullptr,
                     std::type_identity_t<AttentionRecord<S>*> record =
                         nullptr) {
  const Eigen::Index n = t.value(x).rows();
  const Eigen::Index d = t.value(x).cols();
  const Eigen::Index dh = d / heads;
  const S inv_sqrt_dh = S(1) / std::sqrt(S(dh));

  Var<S> h = layer_norm_rows(t, x, b.ln1_g, b.ln1_b);
  Var<S> qkv = linear(t, h, b.wqkv, b.bqkv);
  std::vector<Var<S>> head_outs;
  head_outs.reserve(size_t(heads));
  for (int i = 0; i < heads; ++i) {
    Var<S> q = slice_cols(t, qkv, i * dh, dh);
    Var<S> k = slice_cols(t, qkv, d + i * dh, dh);
    Var<S> val = slice_cols(t, qkv, 2 * d + i * dh, dh);
    Var<S> scores =
        scale(t, matmul(t, q, transpose(t, k)), inv_sqrt_dh);
    Var<S> w = softmax_rows(t, scores, key_mask);
    if (record) {
      if (i == 0) record->per_head.resize(heads, n);
      record->per_head.row(i) = t.value(w).row(0);
    }
    head_outs.push_back(matmul(t, w, val));
  }
  if (record) {
    Mat<S> mean = record->per_head.colwise().mean();
    Mat<S> fw = mean.middleCols(1, n - 1);
    const S total = fw.sum();
    if (total > S(0)) fw /= total;
    record->feature_weights = fw;
  }
  Var<S> attn = linear(t, concat_cols(t, head_outs), b.wo, b.bo);
  x = add(t, x, attn);
  Var<S> h2 = layer_norm_rows(t, x, b.ln2_g, b.ln2_b);
  Var<S> m = linear(t, gelu(t, linear(t, h2, b.w1, b.b1)), b.w2, b.b2);
  return add(t, x, m);
}

// Runs the plain encoder blocks and then the readout block, capturing the
// first token's attention there. Returns the full token matrix.
template <typename S>
Var<S> encode_and_read(Tape<S>& t, const VitVars<S>& v, const ModelConfig& cfg,
                       Var<S> tokens, const std::vector<bool>* key_mask,
                       std::type_identity_t<AttentionRecord<S>*> record) {
  for (int i = 0; i < cfg.depth; ++i)
    tokens = block_forward(t, tokens, v.blocks[size_t(i)], cfg.heads,
                           key_mask, nullptr);
  return block_forward(t, tokens,
                       v.blocks[size_t(cfg.readout_block())], cfg.heads,
                       key_mask, record);
}

template <typename S>
Var<S> logits_from_row(Tape<S>& t, const VitVars<S>& v, Var<S> row) {
  Var<S> n = layer_norm_rows(t, row, v.ln_f_g, v.ln_f_b);
  return linear(t, n, v.head_w, v.head_b);
}

// Fuses the per-fixation class outputs: a dedicated query token attends over
// them in one block (no position information, so the result is invariant to
// their order) and its row becomes the classification feature.
template <typename S>
Var<S> fuse_fixations(Tape<S>& t, const VitVars<S>& v, const ModelConfig& cfg,
                      const std::vector<Var<S>>& class_outputs) {
  if (class_outputs.empty())
    throw std::invalid_argument("fuse_fixations: no class outputs");
  std::vector<Var<S>> rows;
  rows.reserve(class_outputs.size() + 1);
  rows.push_back(v.fix);
  for (Var<S> c : class_outputs) rows.push_back(c);
  Var<S> tokens = concat_rows(t, rows);
  tokens = block_forward(t, tokens, v.blocks[size_t(cfg.fusion_block())],
                         cfg.heads, nullptr, nullptr);
  return logits_from_row(t, v, slice_rows(t, tokens, 0, 1));
}

// Pooling matrix padded to the fixed sequence capacity, plus the matching
// token validity mask. Rows beyond the active count are all zero.
template <typename S>
std::pair<Mat<S>, std::vector<bool>> fixation_pooling(const FoveaLayout& layout,
                                                      Fixation fix) {
  const ActiveSet active = active_regions(layout, fix);
  const int cap = layout.capacity();
  Mat<S> P = Mat<S>::Zero(cap, kGridBlocks);
  P.topRows(active.entries.size()) = pooling_matrix<S>(layout, active);
  std::vector<bool> mask(size_t(cap), false);
  for (size_t i = 0; i < active.entries.size(); ++i) mask[i] = true;
  return {std::move(P), std::move(mask)};
}

// One fixation's trunk pass: class token plus pooled peripheral tokens.
// Returns the class-token row (the fixation's class output) and fills
// `record` with the readout-block attention over the pooled tokens.
template <typename S>
Var<S> fixation_forward(Tape<S>& t, const VitVars<S>& v,
                        const ModelConfig& cfg, Var<S> ep,
                        const FoveaLayout& layout, Fixation fix,
                        std::type_identity_t<AttentionRecord<S>*> record,
                        std::vector<bool>* mask_out = nullptr) {
  auto [P, region_mask] = fixation_pooling<S>(layout, fix);
  Var<S> pooled = premul(t, P, ep);  // capacity x dim
  Var<S> tokens = concat_rows<S>(t, {v.cls, pooled});
  std::vector<bool> key_mask(region_mask.size() + 1, true);
  for (size_t i = 0; i < region_mask.size(); ++i)
    key_mask[i + 1] = region_mask[i];
  if (mask_out) *mask_out = key_mask;
  Var<S> out = encode_and_read(t, v, cfg, tokens, &key_mask, record);
  return slice_rows(t, out, 0, 1);
}

// Full-sequence pass: class token plus all 196 patch tokens through every
// block (the two fusion-path blocks run as ordinary encoder blocks here),
// classified from the class token.
template <typename S>
Var<S> full_sequence_logits(Tape<S>& t, const VitVars<S>& v,
                            const ModelConfig& cfg, Var<S> ep,
                            std::type_identity_t<AttentionRecord<S>*> record =
                                nullptr) {
  Var<S> tokens = concat_rows<S>(t, {v.cls, ep});
  for (int i = 0; i < cfg.depth; ++i)
    tokens = block_forward(t, tokens, v.blocks[size_t(i)], cfg.heads, nullptr,
                           nullptr);
  tokens = block_forward(t, tokens, v.blocks[size_t(cfg.readout_block())],
                         cfg.heads, nullptr, record);
  tokens = block_forward(t, tokens, v.blocks[size_t(cfg.fusion_block())],
                         cfg.heads, nullptr, nullptr);
  return logits_from_row(t, v, slice_rows(t, tokens, 0, 1));
}

}  // namespace fovit
