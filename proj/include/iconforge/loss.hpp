#pragma once

#include "iconforge/autodiff.hpp"
#include "iconforge/transform.hpp"
#include "iconforge/volume.hpp"

namespace iconforge {

struct LossConfig {
  double lambda = 1.5;
  int lncc_radius = 2;  // 5^3 box window
  double variance_epsilon = 1e-5;

  void validate() const;
};

// sim terms are 1 - LNCC; total = sim_ab + sim_ba + lambda * reg.
struct LossBreakdown {
  double sim_ab = 0.0;
  double sim_ba = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

double lncc_similarity(const Volume& a, const Volume& b, const LossConfig& cfg = {});

// Mean over interior nodes of ||J(phi_ab o phi_ba) - I||_F^2 with
// forward-difference Jacobians.
double gradicon_regularizer(const TransformMap& phi_ab, const TransformMap& phi_ba);

LossBreakdown total_loss(const Volume& ia, const Volume& ib, const TransformMap& phi_ab,
                         const TransformMap& phi_ba, const LossConfig& cfg = {});

struct LossGradients {
  LossBreakdown loss;
  Tensor d_phi_ab;  // same layout as TransformMap::tensor()
  Tensor d_phi_ba;
};

// Exact adjoints of total_loss with respect to both map value fields.
LossGradients loss_gradients(const Volume& ia, const Volume& ib, const TransformMap& phi_ab,
                             const TransformMap& phi_ba, const LossConfig& cfg = {});

// Records the full loss on a tape. The returned Var is the scalar total;
// `breakdown` receives the double-precision terms.
ad::Var record_total_loss(ad::Tape& tape, const ad::Var& ia, const ad::Var& ib,
                          const ad::Var& phi_ab, const ad::Var& phi_ba, const LossConfig& cfg,
                          LossBreakdown& breakdown);

}  // namespace iconforge
