#include "ildlab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ildlab/checkpoint.hpp"
#include "ildlab/errors.hpp"

namespace ildlab {

namespace {

using json = nlohmann::json;

bool unset(const Tensor& t) { return !t.values || t.values->empty(); }

double batch_correct(const Tensor& logits, const std::vector<std::size_t>& labels) {
    const std::size_t rows = logits.dim(0), d = logits.dim(1);
    const auto& z = logits.v();
    double correct = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < d; ++c)
            if (z[r * d + c] > z[r * d + best])
                best = c;
        correct += best == labels[r];
    }
    return correct;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

const char* method_name(DistillMethod m) {
    switch (m) {
    case DistillMethod::KdOnly: return "kd_only";
    case DistillMethod::Ild: return "ild";
    default: return "crild";
    }
}

const char* strategy_name(MappingStrategy s) {
    switch (s) {
    case MappingStrategy::Last: return "last";
    case MappingStrategy::Uniform: return "uniform";
    default: return "emd";
    }
}

} // namespace

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    if (params_.empty())
        throw ConfigError("adam: empty parameter list");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& [name, p] : params_) {
        if (unset(p))
            throw ConfigError("adam: parameter '" + name + "' has no storage");
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

double Adam::step(const Tape& tape, double lr, double clip_norm) {
    if (!(lr > 0.0) || !(clip_norm > 0.0))
        throw ConfigError("adam: lr and clip_norm must be positive");
    std::vector<std::vector<double>> grads;
    grads.reserve(params_.size());
    double sq = 0.0;
    for (const auto& [name, p] : params_) {
        grads.push_back(tape.grad(p));
        for (double g : grads.back())
            sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm))
        throw NumericError("adam: gradient norm is not finite");
    const double scale = norm > clip_norm ? clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i].second.values;
        auto& m = m_[i];
        auto& v = v_[i];
        const auto& g = grads[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k] * scale;
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
            p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
        }
    }
    return norm;
}

double warmup_lr(double peak, std::size_t step, std::size_t total_steps, double frac) {
    if (!(peak > 0.0))
        throw ConfigError("warmup_lr: peak rate must be positive");
    if (frac < 0.0 || frac > 1.0)
        throw ConfigError("warmup_lr: warmup fraction outside [0,1]");
    const auto warm = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(frac * static_cast<double>(total_steps))));
    const double ramp = static_cast<double>(step + 1) / static_cast<double>(warm);
    return peak * std::min(1.0, ramp);
}

void TrainHyper::validate() const {
    if (!(lr > 0.0))
        throw ConfigError("train hyper: lr must be positive");
    if (batch_size == 0)
        throw ConfigError("train hyper: batch size must be positive");
    if (!(clip_norm > 0.0))
        throw ConfigError("train hyper: clip norm must be positive");
    if (warmup_frac < 0.0 || warmup_frac > 1.0)
        throw ConfigError("train hyper: warmup fraction outside [0,1]");
}

EvalResult evaluate(const TransformerModel& model, const std::vector<Example>& pool,
                    std::size_t batch_size) {
    if (pool.empty())
        throw DataError("evaluate: empty example pool");
    if (batch_size == 0)
        throw ConfigError("evaluate: batch size must be positive");
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    double loss_sum = 0.0, correct = 0.0;
    for (std::size_t i = 0; i < pool.size(); i += batch_size) {
        const std::size_t count = std::min(batch_size, pool.size() - i);
        const Batch b = gather_batch(pool, order, i, count);
        const ForwardTrace tr = model.forward(b);
        loss_sum += cross_entropy_labels(tr.logits, b.clean_labels).item() *
                    static_cast<double>(count);
        correct += batch_correct(tr.logits, b.clean_labels);
    }
    const double n = static_cast<double>(pool.size());
    return {loss_sum / n, correct / n};
}

std::pair<TransformerModel, RunReport> train_teacher(const ModelConfig& cfg,
                                                     const Dataset& ds,
                                                     const TrainHyper& hyper,
                                                     std::uint64_t seed,
                                                     const std::string& checkpoint_prefix) {
    const auto start = std::chrono::steady_clock::now();
    cfg.validate();
    hyper.validate();
    if (ds.spec.regression)
        throw ConfigError("train_teacher: regression tasks are not supported");
    if (ds.spec.num_classes != cfg.num_classes)
        throw ConfigError("train_teacher: model heads " + std::to_string(cfg.num_classes) +
                          " classes but the task has " + std::to_string(ds.spec.num_classes));
    if (ds.train.empty())
        throw DataError("train_teacher: empty train split");

    TransformerModel model(cfg, Rng::derive(seed, "teacher_init"));
    RunReport report;
    report.seed = seed;
    report.config_echo = json{{"epochs", hyper.epochs},
                              {"lr", hyper.lr},
                              {"batch_size", hyper.batch_size},
                              {"clip_norm", hyper.clip_norm},
                              {"warmup_frac", hyper.warmup_frac}}
                             .dump();

    if (hyper.epochs > 0) {
        Adam adam(model.named_params());
        Rng order_rng = Rng::stream(seed, "teacher_order");
        Rng dropout_rng = Rng::stream(seed, "teacher_dropout");
        const std::size_t n = ds.train.size();
        const std::size_t steps_per_epoch = (n + hyper.batch_size - 1) / hyper.batch_size;
        const std::size_t total_steps = hyper.epochs * steps_per_epoch;
        TransformerModel last_good = model.clone();
        std::size_t step = 0;
        for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
            const auto order = order_rng.permutation(n);
            double loss_sum = 0.0, correct = 0.0;
            for (std::size_t i = 0; i < n; i += hyper.batch_size) {
                const std::size_t count = std::min(hyper.batch_size, n - i);
                const Batch b = gather_batch(ds.train, order, i, count);
                const double lr = warmup_lr(hyper.lr, step, total_steps, hyper.warmup_frac);
                Tape tape;
                const ForwardTrace tr = model.forward(b, true, &tape, &dropout_rng);
                const Tensor loss = cross_entropy_labels(tr.logits, b.labels);
                if (!std::isfinite(loss.item())) {
                    if (!checkpoint_prefix.empty())
                        checkpoint::save_model(checkpoint_prefix, last_good);
                    throw NumericError(
                        "train_teacher: loss diverged at step " + std::to_string(step) +
                        (checkpoint_prefix.empty()
                             ? std::string("; no checkpoint path given")
                             : "; last good checkpoint at " + checkpoint_prefix));
                }
                tape.backward(loss);
                adam.step(tape, lr, hyper.clip_norm);
                report.steps.push_back(
                    {"teacher", report.steps.size(), lr, loss.item(), 0, 0, 0, 0, 0, 1.0});
                loss_sum += loss.item();
                correct += batch_correct(tr.logits, b.labels);
                ++step;
            }
            last_good = model.clone();
            const EvalResult dev = evaluate(model, ds.dev, hyper.batch_size);
            report.epochs.push_back({"teacher", epoch,
                                     loss_sum / static_cast<double>(steps_per_epoch),
                                     correct / static_cast<double>(n), dev.loss, dev.accuracy});
        }
    }

    report.final_dev_metric = evaluate(model, ds.dev, hyper.batch_size).accuracy;
    report.wall_time_seconds = seconds_since(start);
    if (!checkpoint_prefix.empty())
        checkpoint::save_model(checkpoint_prefix, model);
    return {std::move(model), std::move(report)};
}

void DistillPlan::validate() const {
    if (!(ild_lr > 0.0) || !(pld_lr > 0.0))
        throw ConfigError("distill plan: learning rates must be positive");
    if (batch_size == 0)
        throw ConfigError("distill plan: batch size must be positive");
    if (!(clip_norm > 0.0))
        throw ConfigError("distill plan: clip norm must be positive");
    if (warmup_frac < 0.0 || warmup_frac > 1.0)
        throw ConfigError("distill plan: warmup fraction outside [0,1]");
    if (fixed_lambda && (*fixed_lambda < 0.0 || *fixed_lambda > 1.0))
        throw ConfigError("distill plan: fixed lambda outside [0,1]");
    if (method != DistillMethod::KdOnly) {
        if (!objective.mha_enabled && !objective.ir_enabled)
            throw ConfigError("distill plan: no intermediate objective enabled");
        mapping.validate();
    }
    if (method == DistillMethod::Crild) {
        cr.validate();
        if (mapping.strategy == MappingStrategy::Emd)
            throw ConfigError("distill plan: consistency plans use a fixed layer mapping");
    }
    if (!(objective.pl_temperature > 0.0))
        throw ConfigError("distill plan: prediction temperature must be positive");
}

std::string plan_to_json(const DistillPlan& plan) {
    json j{{"method", method_name(plan.method)},
           {"objective",
            {{"mha_enabled", plan.objective.mha_enabled},
             {"mha_metric", plan.objective.mha_metric == MhaMetric::KLD ? "kld" : "mse"},
             {"ir_enabled", plan.objective.ir_enabled},
             {"ir_variant", plan.objective.ir_variant == IrVariant::Pool ? "pool" : "patience"},
             {"pl_temperature", plan.objective.pl_temperature}}},
           {"ild_epochs", plan.ild_epochs},
           {"pld_epochs", plan.pld_epochs},
           {"ild_lr", plan.ild_lr},
           {"pld_lr", plan.pld_lr},
           {"batch_size", plan.batch_size},
           {"phase_order", plan.phase_order == PhaseOrder::Sequential ? "sequential" : "joint"},
           {"clip_norm", plan.clip_norm},
           {"warmup_frac", plan.warmup_frac}};
    if (plan.method != DistillMethod::KdOnly)
        j["mapping"] = {{"strategy", strategy_name(plan.mapping.strategy)},
                        {"teacher_layers", plan.mapping.teacher_layers},
                        {"student_layers", plan.mapping.student_layers},
                        {"emd_refresh_interval", plan.mapping.emd_refresh_interval}};
    if (plan.method == DistillMethod::Crild)
        j["cr"] = {{"alpha", plan.cr.alpha},
                   {"warmup_T", plan.cr.warmup_T},
                   {"w_mha_cr", plan.cr.w_mha_cr},
                   {"w_ir_cr", plan.cr.w_ir_cr},
                   {"detach_targets", plan.cr.detach_targets},
                   {"include_original_batch", plan.cr.include_original_batch}};
    if (plan.fixed_lambda)
        j["fixed_lambda"] = *plan.fixed_lambda;
    return j.dump();
}

std::pair<TransformerModel, RunReport> distill(const DistillPlan& plan,
                                               const TransformerModel& teacher,
                                               const TransformerModel& student_init,
                                               const Dataset& target,
                                               const Dataset* supplementary,
                                               std::uint64_t seed) {
    const auto start = std::chrono::steady_clock::now();
    plan.validate();
    if (supplementary && plan.phase_order == PhaseOrder::Joint)
        throw ConfigError("distill: joint plans take no supplementary dataset");
    const ModelConfig& tc = teacher.config();
    const ModelConfig& sc = student_init.config();
    if (tc.num_heads != sc.num_heads)
        throw ConfigError("distill: teacher and student head counts differ");
    if (tc.vocab_size != sc.vocab_size || tc.num_classes != sc.num_classes)
        throw ConfigError("distill: teacher and student disagree on vocabulary or classes");

    const bool runs_ild = plan.method != DistillMethod::KdOnly && plan.ild_epochs > 0;
    if (runs_ild) {
        if (plan.mapping.teacher_layers != tc.num_layers ||
            plan.mapping.student_layers != sc.num_layers)
            throw ConfigError("distill: mapping layer counts disagree with the models");
        if (plan.objective.ir_enabled && plan.objective.ir_variant == IrVariant::Patience &&
            tc.hidden_dim != sc.hidden_dim)
            throw ConfigError("distill: patience variant needs equal hidden widths; "
                              "use the pooled variant's projection instead");
    }

    ObjectiveConfig objective = plan.objective;
    const bool trains_projection =
        objective.ir_enabled && objective.ir_variant == IrVariant::Pool;
    if (trains_projection) {
        if (unset(objective.projection))
            objective.projection = identity_projection(tc.hidden_dim, sc.hidden_dim);
        if (objective.projection.shape.size() != 2 ||
            objective.projection.dim(0) != tc.hidden_dim ||
            objective.projection.dim(1) != sc.hidden_dim)
            throw ConfigError("distill: projection shape disagrees with the model widths");
    }
    objective.validate();

    TransformerModel student = student_init.clone();
    RunReport report;
    report.seed = seed;
    report.config_echo = plan_to_json(plan);

    const auto run_phase = [&](const std::string& phase, const std::vector<Example>& pool,
                               std::size_t epochs, double peak_lr, bool with_projection,
                               bool scores, auto&& step_fn) {
        if (epochs == 0)
            return;
        if (pool.empty())
            throw DataError("distill: empty " + phase + " pool");
        auto params = student.named_params();
        if (with_projection)
            params.emplace_back("ir_projection", objective.projection);
        Adam adam(std::move(params));
        Rng dropout_rng = Rng::stream(seed, phase + "_dropout");
        Rng order_rng = Rng::stream(seed, phase + "_order");
        const std::size_t n = pool.size();
        const std::size_t steps_per_epoch = (n + plan.batch_size - 1) / plan.batch_size;
        const std::size_t total_steps = epochs * steps_per_epoch;
        std::size_t step = 0;
        for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
            const auto order = order_rng.permutation(n);
            double loss_sum = 0.0, correct = 0.0;
            for (std::size_t i = 0; i < n; i += plan.batch_size) {
                const std::size_t count = std::min(plan.batch_size, n - i);
                const Batch b = gather_batch(pool, order, i, count);
                const double lr = warmup_lr(peak_lr, step, total_steps, plan.warmup_frac);
                StepRecord rec;
                rec.phase = phase;
                rec.step = report.steps.size();
                rec.lr = lr;
                Tape tape;
                const Tensor loss = step_fn(b, tape, rec, dropout_rng, correct);
                if (!std::isfinite(loss.item()))
                    throw NumericError("distill: " + phase + " loss is not finite at step " +
                                       std::to_string(step));
                tape.backward(loss);
                adam.step(tape, lr, plan.clip_norm);
                rec.total = loss.item();
                report.steps.push_back(rec);
                loss_sum += rec.total;
                ++step;
            }
            const EvalResult dev = evaluate(student, target.dev, plan.batch_size);
            report.epochs.push_back({phase, epoch,
                                     loss_sum / static_cast<double>(steps_per_epoch),
                                     scores ? correct / static_cast<double>(n) : 0.0, dev.loss,
                                     dev.accuracy});
        }
    };

    // ILD objective terms on unmixed traces; shared by the ild and joint
    // phases. A refresh of the transport mapping happens on schedule before
    // the student's training forward.
    std::vector<LayerPair> pairs;
    std::size_t ild_step = 0;
    const bool emd = plan.mapping.strategy == MappingStrategy::Emd;
    if (runs_ild && !emd)
        pairs = plan.mapping.strategy == MappingStrategy::Last
                    ? map_last(tc.num_layers, sc.num_layers)
                    : map_uniform(tc.num_layers, sc.num_layers);

    const auto ild_terms = [&](const ForwardTrace& tr_t, const ForwardTrace& tr_s, Tape& tape,
                               StepRecord& rec) {
        Tensor total;
        if (objective.mha_enabled) {
            const Tensor x = loss_mha(tr_t, tr_s, pairs, objective.mha_metric);
            rec.l_mha = x.item();
            total = x;
        }
        if (objective.ir_enabled) {
            const Tensor x = objective.ir_variant == IrVariant::Pool
                                 ? loss_ir_pool(tr_t, tr_s, pairs, tape.leaf(objective.projection))
                                 : loss_ir_patience(tr_t, tr_s, pairs);
            rec.l_ir = x.item();
            total = unset(total) ? x : add(total, x);
        }
        return total;
    };

    const auto ild_step_fn = [&](const Batch& b, Tape& tape, StepRecord& rec, Rng& drop,
                                 double&) {
        const ForwardTrace tr_t = teacher.forward(b);
        if (emd && ild_step % plan.mapping.emd_refresh_interval == 0)
            pairs = map_emd(emd_costs(tr_t, student.forward(b), objective)).pairs();
        ++ild_step;
        const ForwardTrace tr_s = student.forward(b, true, &tape, &drop);
        return ild_terms(tr_t, tr_s, tape, rec);
    };

    Rng pair_rng = Rng::stream(seed, "cr_pairs");
    const auto crild_step_fn = [&](const Batch& b, Tape& tape, StepRecord& rec, Rng& drop,
                                   double&) {
        CrildBreakdown bd;
        const Tensor loss =
            crild_step_loss(teacher, student, objective, b, pairs, plan.cr, ild_step, tape,
                            pair_rng, &drop, &bd, plan.fixed_lambda);
        ++ild_step;
        rec.l_mha = bd.l_mha;
        rec.l_ir = bd.l_ir;
        rec.r_mha = bd.r_mha;
        rec.r_ir = bd.r_ir;
        rec.lambda = bd.lambda;
        return loss;
    };

    const auto pld_step_fn = [&](const Batch& b, Tape& tape, StepRecord& rec, Rng& drop,
                                 double& correct) {
        const ForwardTrace tr_t = teacher.forward(b);
        const ForwardTrace tr_s = student.forward(b, true, &tape, &drop);
        const Tensor x = loss_pl(tr_t.logits, tr_s.logits, objective.pl_temperature);
        rec.l_pl = x.item();
        correct += batch_correct(tr_s.logits, b.clean_labels);
        return x;
    };

    const auto joint_step_fn = [&](const Batch& b, Tape& tape, StepRecord& rec, Rng& drop,
                                   double& correct) {
        Tensor total;
        if (plan.method == DistillMethod::Crild) {
            total = crild_step_fn(b, tape, rec, drop, correct);
            const ForwardTrace tr_t = teacher.forward(b);
            const ForwardTrace tr_s = student.forward(b, true, &tape, &drop);
            const Tensor x = loss_pl(tr_t.logits, tr_s.logits, objective.pl_temperature);
            rec.l_pl = x.item();
            correct += batch_correct(tr_s.logits, b.clean_labels);
            total = add(total, x);
        } else {
            const ForwardTrace tr_t = teacher.forward(b);
            if (emd && ild_step % plan.mapping.emd_refresh_interval == 0)
                pairs = map_emd(emd_costs(tr_t, student.forward(b), objective)).pairs();
            ++ild_step;
            const ForwardTrace tr_s = student.forward(b, true, &tape, &drop);
            total = ild_terms(tr_t, tr_s, tape, rec);
            const Tensor x = loss_pl(tr_t.logits, tr_s.logits, objective.pl_temperature);
            rec.l_pl = x.item();
            correct += batch_correct(tr_s.logits, b.clean_labels);
            total = add(total, x);
        }
        return total;
    };

    const std::vector<Example>& ild_pool = supplementary ? supplementary->train : target.train;
    if (plan.phase_order == PhaseOrder::Sequential || plan.method == DistillMethod::KdOnly) {
        if (runs_ild) {
            if (plan.method == DistillMethod::Crild)
                run_phase("ild", ild_pool, plan.ild_epochs, plan.ild_lr, trains_projection,
                          false, crild_step_fn);
            else
                run_phase("ild", ild_pool, plan.ild_epochs, plan.ild_lr, trains_projection,
                          false, ild_step_fn);
        }
        run_phase("pld", target.train, plan.pld_epochs, plan.pld_lr, false, true, pld_step_fn);
    } else {
        run_phase("joint", target.train, plan.ild_epochs, plan.ild_lr, trains_projection, true,
                  joint_step_fn);
    }

    report.final_dev_metric = evaluate(student, target.dev, plan.batch_size).accuracy;
    report.wall_time_seconds = seconds_since(start);
    return {std::move(student), std::move(report)};
}

void save_report(const std::string& prefix, const RunReport& report) {
    {
        std::ofstream out(prefix + ".jsonl");
        if (!out)
            throw DataError("save_report: cannot open " + prefix + ".jsonl");
        for (const EpochRecord& e : report.epochs) {
            const json j{{"phase", e.phase},
                         {"epoch", e.epoch},
                         {"train_loss", e.train_loss},
                         {"train_accuracy", e.train_accuracy},
                         {"dev_loss", e.dev_loss},
                         {"dev_accuracy", e.dev_accuracy}};
            out << j.dump() << "\n";
        }
        if (!out.flush())
            throw DataError("save_report: write failed for " + prefix + ".jsonl");
    }
    std::size_t ild_steps = 0, pld_steps = 0, joint_steps = 0, teacher_steps = 0;
    for (const StepRecord& s : report.steps) {
        if (s.phase == "ild")
            ++ild_steps;
        else if (s.phase == "pld")
            ++pld_steps;
        else if (s.phase == "joint")
            ++joint_steps;
        else
            ++teacher_steps;
    }
    const json summary{{"seed", report.seed},
                       {"final_dev_metric", report.final_dev_metric},
                       {"wall_time_seconds", report.wall_time_seconds},
                       {"steps", {{"teacher", teacher_steps},
                                  {"ild", ild_steps},
                                  {"pld", pld_steps},
                                  {"joint", joint_steps}}},
                       {"config", json::parse(report.config_echo)}};
    std::ofstream out(prefix + ".json");
    if (!out)
        throw DataError("save_report: cannot open " + prefix + ".json");
    out << summary.dump(2) << "\n";
    if (!out.flush())
        throw DataError("save_report: write failed for " + prefix + ".json");
}

GridReport run_experiment_grid(const std::vector<NamedPlan>& plans,
                               const std::vector<std::uint64_t>& seeds,
                               const CellRunner& run_cell) {
    if (plans.empty())
        throw ConfigError("grid: need at least one plan");
    if (seeds.empty())
        throw ConfigError("grid: need at least one seed");
    if (!run_cell)
        throw ConfigError("grid: no cell runner given");
    GridReport grid;
    grid.all_ok = true;
    for (const NamedPlan& np : plans) {
        for (std::uint64_t seed : seeds) {
            CellResult cell;
            cell.plan = np.name;
            cell.seed = seed;
            try {
                cell.report = run_cell(np, seed);
                cell.metric = cell.report.final_dev_metric;
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.ok = false;
                cell.error = e.what();
                grid.all_ok = false;
            }
            grid.cells.push_back(std::move(cell));
        }
    }
    for (const NamedPlan& np : plans) {
        PlanAggregate agg;
        agg.plan = np.name;
        agg.seeds = seeds.size();
        double sum = 0.0;
        std::vector<double> vals;
        for (const CellResult& c : grid.cells)
            if (c.plan == np.name && c.ok) {
                vals.push_back(c.metric);
                sum += c.metric;
            }
        agg.succeeded = vals.size();
        if (!vals.empty()) {
            agg.mean = sum / static_cast<double>(vals.size());
            if (vals.size() > 1) {
                double sq = 0.0;
                for (double v : vals)
                    sq += (v - agg.mean) * (v - agg.mean);
                agg.stddev = std::sqrt(sq / static_cast<double>(vals.size() - 1));
            }
        }
        grid.aggregates.push_back(std::move(agg));
    }
    return grid;
}

std::string grid_to_json(const GridReport& grid) {
    json cells = json::array();
    for (const CellResult& c : grid.cells) {
        json jc{{"plan", c.plan}, {"seed", c.seed}, {"ok", c.ok}, {"metric", c.metric}};
        if (!c.ok)
            jc["error"] = c.error;
        cells.push_back(std::move(jc));
    }
    json aggs = json::array();
    for (const PlanAggregate& a : grid.aggregates)
        aggs.push_back(json{{"plan", a.plan},
                            {"seeds", a.seeds},
                            {"succeeded", a.succeeded},
                            {"mean", a.mean},
                            {"stddev", a.stddev}});
    return json{{"cells", std::move(cells)},
                {"aggregates", std::move(aggs)},
                {"all_ok", grid.all_ok}}
        .dump(2);
}

} // namespace ildlab
