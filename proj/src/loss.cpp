#include "iconforge/loss.hpp"

#include "iconforge/error.hpp"

namespace iconforge {

void LossConfig::validate() const {
  if (!(lambda > 0.0)) throw Error("config", "lambda must be positive");
  if (lncc_radius < 1) throw Error("config", "lncc radius must be >= 1");
  if (!(variance_epsilon > 0.0)) throw Error("config", "variance epsilon must be positive");
}

double lncc_similarity(const Volume& a, const Volume& b, const LossConfig& cfg) {
  if (a.dims() != b.dims()) throw Error("shape", "lncc inputs have different dims");
  return kernels::lncc_forward(a.values(), b.values(), a.dims(), cfg.lncc_radius,
                               cfg.variance_epsilon, nullptr);
}

double gradicon_regularizer(const TransformMap& phi_ab, const TransformMap& phi_ba) {
  if (phi_ab.dims() != phi_ba.dims()) throw Error("shape", "maps live on different grids");
  return kernels::jacobian_penalty_forward(compose(phi_ab, phi_ba).tensor());
}

ad::Var record_total_loss(ad::Tape& tape, const ad::Var& ia, const ad::Var& ib,
                          const ad::Var& phi_ab, const ad::Var& phi_ba, const LossConfig& cfg,
                          LossBreakdown& breakdown) {
  cfg.validate();
  if (!ia.value().same_shape(ib.value()) || phi_ab.value().dims != ia.value().dims ||
      !phi_ab.value().same_shape(phi_ba.value())) {
    throw Error("shape", "loss inputs must share one grid");
  }
  const auto warped_a = ad::warp(tape, ia, phi_ab);
  const auto warped_b = ad::warp(tape, ib, phi_ba);
  const auto sim_ab = ad::lncc_similarity(tape, warped_a, ib, cfg.lncc_radius,
                                          cfg.variance_epsilon, &breakdown.sim_ab);
  const auto sim_ba = ad::lncc_similarity(tape, warped_b, ia, cfg.lncc_radius,
                                          cfg.variance_epsilon, &breakdown.sim_ba);
  const auto reg = ad::gradicon_regularizer(tape, phi_ab, phi_ba, &breakdown.reg);
  breakdown.total = breakdown.sim_ab + breakdown.sim_ba + cfg.lambda * breakdown.reg;
  return ad::add(tape, ad::add(tape, sim_ab, sim_ba), ad::scale(tape, reg, cfg.lambda));
}

LossBreakdown total_loss(const Volume& ia, const Volume& ib, const TransformMap& phi_ab,
                         const TransformMap& phi_ba, const LossConfig& cfg) {
  if (ia.dims() != ib.dims()) throw Error("shape", "images have different dims");
  ad::Tape tape(false);
  LossBreakdown out;
  record_total_loss(tape, tape.constant(to_tensor(ia)), tape.constant(to_tensor(ib)),
                    tape.constant(phi_ab.tensor()), tape.constant(phi_ba.tensor()), cfg, out);
  return out;
}

LossGradients loss_gradients(const Volume& ia, const Volume& ib, const TransformMap& phi_ab,
                             const TransformMap& phi_ba, const LossConfig& cfg) {
  if (ia.dims() != ib.dims()) throw Error("shape", "images have different dims");
  ad::Tape tape;
  LossGradients out;
  const auto ab = tape.variable(phi_ab.tensor());
  const auto ba = tape.variable(phi_ba.tensor());
  const auto total = record_total_loss(tape, tape.constant(to_tensor(ia)),
                                       tape.constant(to_tensor(ib)), ab, ba, cfg, out.loss);
  tape.backward(total);
  out.d_phi_ab = ab.grad();
  out.d_phi_ba = ba.grad();
  return out;
}

}  // namespace iconforge
