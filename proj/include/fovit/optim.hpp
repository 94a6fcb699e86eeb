#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "fovit/tape.hpp"

namespace fovit {

// Cosine decay pinned at both ends: step 0 gives lr_init and the final step
// (total_steps - 1) gives lr_min.
template <typename S>
S cosine_lr(S lr_init, S lr_min, long long step, long long total_steps) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps");
  if (step < 0 || step >= total_steps)
    throw std::invalid_argument("cosine_lr: step out of range");
  if (total_steps == 1) return lr_init;
  const double phase =
      M_PI * double(step) / double(total_steps - 1);
  return S(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(phase)));
}

// AdamW with decoupled weight decay. Moment buffers are created on the first
// step and keyed by parameter order, so the parameter list must be identical
// (same tensors, same order) on every call.
template <typename S>
class AdamW {
 public:
  struct Options {
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
    S weight_decay = S(1e-8);
  };

  explicit AdamW(Options opt = {}) : opt_(opt) {}

  const Options& options() const { return opt_; }
  long long steps_taken() const { return t_; }

  void step(const std::vector<Mat<S>*>& params,
            const std::vector<const Mat<S>*>& grads, S lr) {
    if (params.size() != grads.size())
      throw std::invalid_argument("AdamW::step: params/grads size mismatch");
    if (m_.empty()) {
      m_.reserve(params.size());
      v_.reserve(params.size());
      for (const Mat<S>* p : params) {
        m_.push_back(Mat<S>::Zero(p->rows(), p->cols()));
        v_.push_back(Mat<S>::Zero(p->rows(), p->cols()));
      }
    }
    if (m_.size() != params.size())
      throw std::invalid_argument("AdamW::step: parameter count changed");
    ++t_;
    const S bc1 = S(1) - S(std::pow(double(opt_.beta1), double(t_)));
    const S bc2 = S(1) - S(std::pow(double(opt_.beta2), double(t_)));
    for (size_t i = 0; i < params.size(); ++i) {
      Mat<S>& p = *params[i];
      const Mat<S>& g = *grads[i];
      if (p.rows() != g.rows() || p.cols() != g.cols())
        throw std::invalid_argument("AdamW::step: grad shape mismatch");
      m_[i] = opt_.beta1 * m_[i] + (S(1) - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i].array() +
              (S(1) - opt_.beta2) * g.array().square();
      p.array() -= lr * ((m_[i].array() / bc1) /
                             ((v_[i].array() / bc2).sqrt() + opt_.eps) +
                         opt_.weight_decay * p.array());
    }
  }

 private:
  Options opt_;
  long long t_ = 0;
  std::vector<Mat<S>> m_;
  std::vector<Mat<S>> v_;
};

}  // namespace fovit
