#include "ildlab/distill.hpp"

#include <string>

#include "ildlab/errors.hpp"

namespace ildlab {

namespace {

void check_pairs(const ForwardTrace& trace_t, const ForwardTrace& trace_s,
                 const std::vector<LayerPair>& pairs, const char* who) {
    if (pairs.empty())
        throw ConfigError(std::string(who) + ": empty layer pair list");
    const std::size_t lt = trace_t.attn.size();
    const std::size_t ls = trace_s.attn.size();
    for (const auto& p : pairs) {
        if (p.teacher_layer < 1 || p.teacher_layer > lt)
            throw ConfigError(std::string(who) + ": teacher layer " +
                              std::to_string(p.teacher_layer) + " out of range 1.." +
                              std::to_string(lt));
        if (p.student_layer < 1 || p.student_layer > ls)
            throw ConfigError(std::string(who) + ": student layer " +
                              std::to_string(p.student_layer) + " out of range 1.." +
                              std::to_string(ls));
        if (p.weight < 0.0)
            throw ConfigError(std::string(who) + ": negative pair weight");
    }
    if (trace_t.batch_size != trace_s.batch_size || trace_t.seq_len != trace_s.seq_len)
        throw DimError(std::string(who) + ": teacher and student traces describe "
                                          "different batches");
}

bool unset(const Tensor& t) {
    return !t.values || t.values->empty();
}

// Accumulates weight * term into total (which starts empty).
void add_weighted(Tensor& total, const Tensor& term, double weight) {
    Tensor scaled = scale(term, weight);
    total = unset(total) ? scaled : add(total, scaled);
}

} // namespace

void ObjectiveConfig::validate() const {
    if (!mha_enabled && !ir_enabled)
        throw ConfigError("objective config: no intermediate objective enabled");
    if (!(pl_temperature > 0.0))
        throw ConfigError("objective config: temperature must be positive");
    if (!unset(projection) && projection.shape.size() != 2)
        throw ConfigError("objective config: projection must be a matrix");
}

Tensor identity_projection(std::size_t d_teacher, std::size_t d_student) {
    Tensor w = Tensor::zeros({d_teacher, d_student});
    const std::size_t k = d_teacher < d_student ? d_teacher : d_student;
    for (std::size_t i = 0; i < k; ++i)
        w.v()[i * d_student + i] = 1.0;
    return w;
}

ObjectiveConfig make_objective_config(std::size_t d_teacher, std::size_t d_student) {
    ObjectiveConfig cfg;
    cfg.projection = identity_projection(d_teacher, d_student);
    return cfg;
}

Tensor loss_mha(const ForwardTrace& trace_t, const ForwardTrace& trace_s,
                const std::vector<LayerPair>& pairs, MhaMetric metric) {
    check_pairs(trace_t, trace_s, pairs, "loss_mha");
    Tensor total;
    for (const auto& p : pairs) {
        const auto& heads_t = trace_t.attn[p.teacher_layer - 1];
        const auto& heads_s = trace_s.attn[p.student_layer - 1];
        if (heads_t.size() != heads_s.size())
            throw ConfigError("loss_mha: head count mismatch (" +
                              std::to_string(heads_t.size()) + " vs " +
                              std::to_string(heads_s.size()) + ")");
        Tensor layer_sum;
        for (std::size_t a = 0; a < heads_t.size(); ++a) {
            Tensor ref = detach(heads_t[a]);
            Tensor term = metric == MhaMetric::KLD ? kld_rows(ref, heads_s[a])
                                                   : mse(ref, heads_s[a]);
            layer_sum = unset(layer_sum) ? term : add(layer_sum, term);
        }
        add_weighted(total, scale(layer_sum, 1.0 / static_cast<double>(heads_t.size())),
                     p.weight);
    }
    return total;
}

Tensor loss_ir_pool(const ForwardTrace& trace_t, const ForwardTrace& trace_s,
                    const std::vector<LayerPair>& pairs, const Tensor& projection) {
    check_pairs(trace_t, trace_s, pairs, "loss_ir_pool");
    if (unset(projection) || projection.shape.size() != 2)
        throw ConfigError("loss_ir_pool: projection must be a [d_teacher, d_student] matrix");
    const std::size_t rows = trace_s.batch_size * trace_s.seq_len;
    const std::size_t d_t = projection.shape[0];
    const std::size_t d_s = projection.shape[1];
    Tensor total;
    for (const auto& p : pairs) {
        Tensor hs = reshape(trace_s.hidden[p.student_layer], {rows, d_s});
        Tensor ht = detach(reshape(trace_t.hidden[p.teacher_layer], {rows, d_t}));
        Tensor projected = matmul_nt(hs, projection);
        add_weighted(total, mse_masked(ht, projected, trace_s.row_mask), p.weight);
    }
    return total;
}

Tensor loss_ir_patience(const ForwardTrace& trace_t, const ForwardTrace& trace_s,
                        const std::vector<LayerPair>& pairs) {
    check_pairs(trace_t, trace_s, pairs, "loss_ir_patience");
    Tensor total;
    for (const auto& p : pairs) {
        Tensor ht = l2_normalize_rows(detach(trace_t.cls[p.teacher_layer]));
        Tensor hs = l2_normalize_rows(trace_s.cls[p.student_layer]);
        add_weighted(total, mse(ht, hs), p.weight);
    }
    return total;
}

Tensor loss_pl(const Tensor& teacher_logits, const Tensor& student_logits,
               double temperature) {
    if (!(temperature > 0.0))
        throw ConfigError("loss_pl: temperature must be positive");
    // Soft cross-entropy shifted by the teacher's own soft entropy, i.e.
    // KL(p_T || p_S). The shift carries no student gradient; it puts the
    // floor at exactly zero when the logits agree.
    const Tensor zt = detach(teacher_logits);
    return sub(soft_cross_entropy(zt, student_logits, temperature),
               soft_cross_entropy(zt, zt, temperature));
}

} // namespace ildlab
