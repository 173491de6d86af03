#include "ildlab/crild.hpp"

#include <cmath>
#include <string>

#include "ildlab/errors.hpp"

namespace ildlab {

namespace {

void check_lambda(double lambda, const char* who) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ContractError(std::string(who) + ": lambda outside [0,1]");
}

TraceFn eval_forward(const TransformerModel& model) {
    return [&model](const Tensor& h0, const std::vector<double>& mask) {
        return model.forward_embedded(h0, mask);
    };
}

Batch permuted_batch(const Batch& b, const std::vector<std::size_t>& order) {
    Batch out;
    out.batch_size = b.batch_size;
    out.seq_len = b.seq_len;
    out.tokens.resize(b.tokens.size());
    out.mask.resize(b.mask.size());
    out.labels.resize(b.labels.size());
    out.clean_labels.resize(b.clean_labels.size());
    for (std::size_t r = 0; r < b.batch_size; ++r) {
        const std::size_t src = order[r];
        for (std::size_t s = 0; s < b.seq_len; ++s) {
            out.tokens[r * b.seq_len + s] = b.tokens[src * b.seq_len + s];
            out.mask[r * b.seq_len + s] = b.mask[src * b.seq_len + s];
        }
        out.labels[r] = b.labels[src];
        out.clean_labels[r] = b.clean_labels[src];
    }
    return out;
}

void guard_term(double value, const char* term) {
    if (std::isnan(value))
        throw NumericError(std::string("crild_step_loss: ") + term + " is NaN");
}

} // namespace

void CRConfig::validate() const {
    if (!(alpha > 0.0))
        throw ConfigError("cr config: alpha must be positive");
    if (warmup_T < 1)
        throw ConfigError("cr config: warmup horizon must be at least 1");
    if (w_mha_cr < 0.0 || w_ir_cr < 0.0)
        throw ConfigError("cr config: consistency coefficients must be nonnegative");
}

double sample_lambda(double alpha, Rng& rng) {
    if (!(alpha > 0.0))
        throw ConfigError("sample_lambda: alpha must be positive");
    return rng.beta(alpha, alpha);
}

std::vector<std::size_t> sample_pairing(std::size_t batch_size, Rng& rng) {
    if (batch_size == 0)
        throw ContractError("sample_pairing: empty batch");
    std::vector<std::size_t> partner(batch_size, 0);
    if (batch_size == 1)
        return partner;
    for (std::size_t i = 0; i < batch_size; ++i) {
        std::size_t j = rng.uniform_int(batch_size - 1);
        if (j >= i)
            ++j;
        partner[i] = j;
    }
    return partner;
}

std::vector<double> mixed_row_mask(const std::vector<double>& mask_i,
                                   const std::vector<double>& mask_j, double lambda) {
    check_lambda(lambda, "mixed_row_mask");
    if (mask_i.size() != mask_j.size())
        throw DimError("mixed_row_mask: mask sizes differ");
    if (lambda == 1.0)
        return mask_i;
    if (lambda == 0.0)
        return mask_j;
    std::vector<double> out(mask_i.size());
    for (std::size_t k = 0; k < out.size(); ++k)
        out[k] = mask_i[k] != 0.0 || mask_j[k] != 0.0 ? 1.0 : 0.0;
    return out;
}

Tensor cr_mha_with(const TraceFn& fwd, const Tensor& h_i, const Tensor& h_j,
                   const std::vector<double>& mask_i, const std::vector<double>& mask_j,
                   double lambda, bool detach_target) {
    check_lambda(lambda, "cr_mha");
    const std::vector<double> mm = mixed_row_mask(mask_i, mask_j, lambda);
    ForwardTrace tm = fwd(mixup(h_i, h_j, lambda), mm);
    ForwardTrace ti = fwd(h_i, mask_i);
    ForwardTrace tj = fwd(h_j, mask_j);
    const auto& heads_m = tm.attn.back();
    const auto& heads_i = ti.attn.back();
    const auto& heads_j = tj.attn.back();
    if (heads_m.size() != heads_i.size() || heads_m.size() != heads_j.size())
        throw ConfigError("cr_mha: head count mismatch across forwards");
    Tensor sum;
    for (std::size_t a = 0; a < heads_m.size(); ++a) {
        Tensor target = mixup(heads_i[a], heads_j[a], lambda);
        if (detach_target)
            target = detach(target);
        Tensor term = kld_rows(heads_m[a], target);
        sum = sum.values->empty() && !sum.tracked() ? term : add(sum, term);
    }
    return scale(sum, 1.0 / static_cast<double>(heads_m.size()));
}

Tensor cr_ir_with(const TraceFn& fwd, const Tensor& h_i, const Tensor& h_j,
                  const std::vector<double>& mask_i, const std::vector<double>& mask_j,
                  double lambda, bool detach_target) {
    check_lambda(lambda, "cr_ir");
    const std::vector<double> mm = mixed_row_mask(mask_i, mask_j, lambda);
    ForwardTrace tm = fwd(mixup(h_i, h_j, lambda), mm);
    ForwardTrace ti = fwd(h_i, mask_i);
    ForwardTrace tj = fwd(h_j, mask_j);
    Tensor target = mixup(ti.hidden.back(), tj.hidden.back(), lambda);
    if (detach_target)
        target = detach(target);
    return mse_masked(tm.hidden.back(), target, mm);
}

Tensor cr_mha(const TransformerModel& student, const Tensor& h_i, const Tensor& h_j,
              const std::vector<double>& mask_i, const std::vector<double>& mask_j,
              double lambda, bool detach_target) {
    return cr_mha_with(eval_forward(student), h_i, h_j, mask_i, mask_j, lambda,
                       detach_target);
}

Tensor cr_ir(const TransformerModel& student, const Tensor& h_i, const Tensor& h_j,
             const std::vector<double>& mask_i, const std::vector<double>& mask_j,
             double lambda, bool detach_target) {
    return cr_ir_with(eval_forward(student), h_i, h_j, mask_i, mask_j, lambda,
                      detach_target);
}

double warmup_coefficient(std::size_t t, std::size_t warmup_T, double w) {
    if (warmup_T < 1)
        throw ConfigError("warmup_coefficient: horizon must be at least 1");
    if (w < 0.0)
        throw ConfigError("warmup_coefficient: weight must be nonnegative");
    const double ramp = static_cast<double>(t) / static_cast<double>(warmup_T);
    return (ramp < 1.0 ? ramp : 1.0) * w;
}

Tensor crild_step_loss(const TransformerModel& teacher, const TransformerModel& student,
                       const ObjectiveConfig& objective, const Batch& batch,
                       const std::vector<LayerPair>& pairs, const CRConfig& cr,
                       std::size_t t, Tape& tape, Rng& pair_rng, Rng* dropout_rng,
                       CrildBreakdown* breakdown, std::optional<double> force_lambda) {
    cr.validate();
    objective.validate();
    batch.validate();

    const std::vector<std::size_t> partner = sample_pairing(batch.batch_size, pair_rng);
    const double lambda =
        force_lambda ? *force_lambda : sample_lambda(cr.alpha, pair_rng);
    check_lambda(lambda, "crild_step_loss");
    const Batch batch_j = permuted_batch(batch, partner);
    const std::vector<double> mm = mixed_row_mask(batch.mask, batch_j.mask, lambda);

    // Student side is tracked; the mixed forward runs in train mode and is
    // the only consumer of dropout draws unless the original batch is
    // included as well.
    Tensor hs_i = student.embed(batch, &tape);
    Tensor hs_j = student.embed(batch_j, &tape);
    Tensor hs_mix = mixup(hs_i, hs_j, lambda);
    ForwardTrace st_mix = student.forward_embedded(hs_mix, mm, true, &tape, dropout_rng);

    Tensor ht_i = teacher.embed(batch);
    Tensor ht_j = teacher.embed(batch_j);
    Tensor ht_mix = mixup(ht_i, ht_j, lambda);
    ForwardTrace tt_mix = teacher.forward_embedded(ht_mix, mm);

    CrildBreakdown bd;
    bd.lambda = lambda;

    Tensor total;
    auto push = [&](const Tensor& term) {
        total = total.values->empty() && !total.tracked() ? term : add(total, term);
    };

    if (objective.mha_enabled) {
        Tensor l = loss_mha(tt_mix, st_mix, pairs, objective.mha_metric);
        bd.l_mha = l.item();
        guard_term(bd.l_mha, "l_mha");
        push(l);
    }
    if (objective.ir_enabled) {
        Tensor l = objective.ir_variant == IrVariant::Pool
                       ? loss_ir_pool(tt_mix, st_mix, pairs,
                                      tape.leaf(objective.projection))
                       : loss_ir_patience(tt_mix, st_mix, pairs);
        bd.l_ir = l.item();
        guard_term(bd.l_ir, "l_ir");
        push(l);
    }

    if (cr.include_original_batch) {
        ForwardTrace st_orig = student.forward(batch, true, &tape, dropout_rng);
        ForwardTrace tt_orig = teacher.forward(batch);
        if (objective.mha_enabled) {
            Tensor l = loss_mha(tt_orig, st_orig, pairs, objective.mha_metric);
            bd.l_mha += l.item();
            guard_term(bd.l_mha, "l_mha");
            push(l);
        }
        if (objective.ir_enabled) {
            Tensor l = objective.ir_variant == IrVariant::Pool
                           ? loss_ir_pool(tt_orig, st_orig, pairs,
                                          tape.leaf(objective.projection))
                           : loss_ir_patience(tt_orig, st_orig, pairs);
            bd.l_ir += l.item();
            guard_term(bd.l_ir, "l_ir");
            push(l);
        }
    }

    bd.w_mha = warmup_coefficient(t, cr.warmup_T, cr.w_mha_cr);
    bd.w_ir = warmup_coefficient(t, cr.warmup_T, cr.w_ir_cr);

    if (bd.w_mha > 0.0 || bd.w_ir > 0.0) {
        // Consistency targets: eval-mode student forwards on the original
        // embeddings, detached unless configured otherwise.
        Tensor hi = cr.detach_targets ? detach(hs_i) : hs_i;
        Tensor hj = cr.detach_targets ? detach(hs_j) : hs_j;
        ForwardTrace st_i = student.forward_embedded(hi, batch.mask);
        ForwardTrace st_j = student.forward_embedded(hj, batch_j.mask);

        if (bd.w_mha > 0.0) {
            const auto& heads_m = st_mix.attn.back();
            const auto& heads_i = st_i.attn.back();
            const auto& heads_j = st_j.attn.back();
            Tensor sum;
            for (std::size_t a = 0; a < heads_m.size(); ++a) {
                Tensor target = mixup(heads_i[a], heads_j[a], lambda);
                if (cr.detach_targets)
                    target = detach(target);
                Tensor term = kld_rows(heads_m[a], target);
                sum = sum.values->empty() && !sum.tracked() ? term : add(sum, term);
            }
            Tensor r = scale(sum, 1.0 / static_cast<double>(heads_m.size()));
            bd.r_mha = r.item();
            guard_term(bd.r_mha, "r_mha");
            push(scale(r, bd.w_mha));
        }
        if (bd.w_ir > 0.0) {
            Tensor target = mixup(st_i.hidden.back(), st_j.hidden.back(), lambda);
            if (cr.detach_targets)
                target = detach(target);
            Tensor r = mse_masked(st_mix.hidden.back(), target, mm);
            bd.r_ir = r.item();
            guard_term(bd.r_ir, "r_ir");
            push(scale(r, bd.w_ir));
        }
    }

    bd.total = total.item();
    guard_term(bd.total, "total");
    if (breakdown)
        *breakdown = bd;
    return total;
}

} // namespace ildlab
