#pragma once

#include <cstddef>
#include <vector>

#include "ildlab/model.hpp"
#include "ildlab/tensor.hpp"

namespace ildlab {

enum class MhaMetric { KLD, MSE };
enum class IrVariant { Pool, Patience };

// One mapped layer pair; layers are 1-based encoder indices (1..L), so a
// pair addresses trace.hidden[layer] and trace.attn[layer - 1].
struct LayerPair {
    std::size_t teacher_layer = 0;
    std::size_t student_layer = 0;
    double weight = 1.0;
};

// Holds the objective switches plus the state they own: the learnable
// hidden-state projection and the logit temperature.
struct ObjectiveConfig {
    bool mha_enabled = true;
    MhaMetric mha_metric = MhaMetric::KLD;
    bool ir_enabled = true;
    IrVariant ir_variant = IrVariant::Pool;
    double pl_temperature = 1.0;
    Tensor projection; // [d_teacher, d_student], identity-initialized

    void validate() const;
};

// Rectangular identity, used to initialize the projection so that equal
// dims start as a no-op.
Tensor identity_projection(std::size_t d_teacher, std::size_t d_student);

ObjectiveConfig make_objective_config(std::size_t d_teacher, std::size_t d_student);

Tensor loss_mha(const ForwardTrace& trace_t, const ForwardTrace& trace_s,
                const std::vector<LayerPair>& pairs, MhaMetric metric);
Tensor loss_ir_pool(const ForwardTrace& trace_t, const ForwardTrace& trace_s,
                    const std::vector<LayerPair>& pairs, const Tensor& projection);
Tensor loss_ir_patience(const ForwardTrace& trace_t, const ForwardTrace& trace_s,
                        const std::vector<LayerPair>& pairs);
Tensor loss_pl(const Tensor& teacher_logits, const Tensor& student_logits, double temperature);

} // namespace ildlab
