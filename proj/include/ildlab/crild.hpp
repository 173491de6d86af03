#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "ildlab/distill.hpp"
#include "ildlab/model.hpp"
#include "ildlab/rng.hpp"

namespace ildlab {

enum class PairingRule { UniformOther };

struct CRConfig {
    double alpha = 1.0;
    std::size_t warmup_T = 1;
    double w_mha_cr = 0.0;
    double w_ir_cr = 0.0;
    PairingRule pairing = PairingRule::UniformOther;
    // Consistency targets are fixed (detached) by default; switchable for
    // ablation.
    bool detach_targets = true;
    // Ablation: also distill on the unmixed batch in the same step.
    bool include_original_batch = false;

    void validate() const;
};

struct CrildBreakdown {
    double lambda = 1.0;
    double l_mha = 0.0;
    double l_ir = 0.0;
    double r_mha = 0.0;
    double r_ir = 0.0;
    double w_mha = 0.0; // warm-up-scaled coefficients actually applied
    double w_ir = 0.0;
    double total = 0.0;
};

double sample_lambda(double alpha, Rng& rng);

// For each batch row i, a uniformly drawn partner j != i (self only when
// the batch has a single row).
std::vector<std::size_t> sample_pairing(std::size_t batch_size, Rng& rng);

// Row mask of the mixed batch: the union of both masks for interior
// lambda, collapsing to the surviving side's mask at the endpoints.
std::vector<double> mixed_row_mask(const std::vector<double>& mask_i,
                                   const std::vector<double>& mask_j, double lambda);

// Seam for the consistency terms: anything that turns embeddings + mask
// into a trace. Tests substitute linear stubs; production binds the
// student's eval-mode forward.
using TraceFn = std::function<ForwardTrace(const Tensor&, const std::vector<double>&)>;

Tensor cr_mha_with(const TraceFn& fwd, const Tensor& h_i, const Tensor& h_j,
                   const std::vector<double>& mask_i, const std::vector<double>& mask_j,
                   double lambda, bool detach_target = true);
Tensor cr_ir_with(const TraceFn& fwd, const Tensor& h_i, const Tensor& h_j,
                  const std::vector<double>& mask_i, const std::vector<double>& mask_j,
                  double lambda, bool detach_target = true);

Tensor cr_mha(const TransformerModel& student, const Tensor& h_i, const Tensor& h_j,
              const std::vector<double>& mask_i, const std::vector<double>& mask_j,
              double lambda, bool detach_target = true);
Tensor cr_ir(const TransformerModel& student, const Tensor& h_i, const Tensor& h_j,
             const std::vector<double>& mask_i, const std::vector<double>& mask_j,
             double lambda, bool detach_target = true);

// min(t/T, 1) * w: zero at t = 0, saturating at w for t >= T.
double warmup_coefficient(std::size_t t, std::size_t warmup_T, double w);

// One full training-step loss: pair sampling, one lambda, mixed
// embeddings through both models, mapped distillation losses on the mixed
// traces, warm-up-scaled consistency terms at the last student layer.
// pair_rng drives pairing and lambda; dropout_rng only the student's
// dropout. force_lambda bypasses the Beta draw (tests, ablations).
Tensor crild_step_loss(const TransformerModel& teacher, const TransformerModel& student,
                       const ObjectiveConfig& objective, const Batch& batch,
                       const std::vector<LayerPair>& pairs, const CRConfig& cr,
                       std::size_t t, Tape& tape, Rng& pair_rng, Rng* dropout_rng,
                       CrildBreakdown* breakdown = nullptr,
                       std::optional<double> force_lambda = std::nullopt);

} // namespace ildlab
