#pragma once

// Class-balanced binary cross-entropy on logits (label 1 = fake).

#include <cmath>
#include <span>
#include <vector>

#include "sef/errors.hpp"

namespace sef {

struct ClassWeights {
  double real = 1.0;
  double fake = 1.0;
};

// w_y = N / (2 n_y), so both classes carry equal total mass. A class absent
// from the batch keeps weight 1 (its weight never multiplies anything).
inline ClassWeights balanced_class_weights(std::span<const int> labels) {
  if (labels.empty()) throw InvalidInput("balanced_class_weights: empty batch");
  double n_fake = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw InvalidInput("labels must be 0 (real) or 1 (fake)");
    n_fake += y;
  }
  const double n = static_cast<double>(labels.size()), n_real = n - n_fake;
  ClassWeights w;
  if (n_real > 0) w.real = n / (2.0 * n_real);
  if (n_fake > 0) w.fake = n / (2.0 * n_fake);
  return w;
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

inline double bce_with_logit(double z, int y) { return softplus(z) - y * z; }

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> dlogits;  // dL/dz_i
};

// sum_i w(y_i) * BCE_i / sum_i w(y_i)
inline LossAndGrad balanced_bce_grad(std::span<const double> logits, std::span<const int> labels,
                                     const ClassWeights& cw) {
  if (logits.empty()) throw InvalidInput("balanced_bce: empty batch");
  if (logits.size() != labels.size()) throw InvalidInput("balanced_bce: logits/labels size mismatch");
  double total_w = 0.0;
  for (int y : labels) total_w += y ? cw.fake : cw.real;
  LossAndGrad out;
  out.dlogits.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double w = (labels[i] ? cw.fake : cw.real) / total_w;
    const double z = logits[i];
    out.loss += w * bce_with_logit(z, labels[i]);
    const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    out.dlogits[i] = w * (p - labels[i]);
  }
  return out;
}

inline double balanced_bce(std::span<const double> logits, std::span<const int> labels, const ClassWeights& cw) {
  return balanced_bce_grad(logits, labels, cw).loss;
}

inline double balanced_bce(std::span<const double> logits, std::span<const int> labels) {
  return balanced_bce(logits, labels, balanced_class_weights(labels));
}

}  // namespace sef
