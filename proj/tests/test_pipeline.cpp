#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "ildlab/checkpoint.hpp"
#include "ildlab/pipeline.hpp"

using namespace ildlab;

namespace {

TaskSpec tiny_task() {
    TaskSpec s;
    s.family = TaskFamily::SingleSentence;
    s.rule_seed = 3;
    s.vocab_size = 32;
    s.num_classes = 2;
    s.nominal_seq_len = 12;
    s.effective_len_target = 9;
    s.dataset_size = 80;
    return s;
}

ModelConfig tiny_teacher_cfg() {
    ModelConfig c;
    c.num_layers = 2;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.ffn_dim = 32;
    c.vocab_size = 32;
    c.max_seq_len = 12;
    c.num_classes = 2;
    c.dropout_rate = 0.1;
    return c;
}

DistillPlan tiny_plan(DistillMethod method) {
    DistillPlan p;
    p.method = method;
    p.mapping.strategy = MappingStrategy::Last;
    p.mapping.teacher_layers = 2;
    p.mapping.student_layers = 1;
    p.ild_epochs = 1;
    p.pld_epochs = 1;
    p.ild_lr = 1e-3;
    p.pld_lr = 1e-3;
    p.batch_size = 16;
    return p;
}

std::vector<std::vector<double>> snapshot(const TransformerModel& m) {
    std::vector<std::vector<double>> out;
    for (const auto& [name, p] : m.named_params())
        out.push_back(p.v());
    return out;
}

bool same_params(const TransformerModel& a, const TransformerModel& b) {
    const auto pa = a.named_params(), pb = b.named_params();
    if (pa.size() != pb.size())
        return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i].second.v() != pb[i].second.v())
            return false;
    return true;
}

} // namespace

TEST_CASE("adam first step matches hand arithmetic") {
    Tensor p({2}, {1.0, -3.0});
    Adam adam({{"p", p}});
    Tape tape;
    const Tensor loss = mse(tape.leaf(p), Tensor::zeros({2}));
    tape.backward(loss);
    // d loss / d p = p / 1 (mse mean over 2 entries, factor 2/2)
    const double norm = adam.step(tape, 0.1, 1e9);
    CHECK(norm == doctest::Approx(std::sqrt(10.0)).epsilon(1e-12));
    const double e0 = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    const double e1 = -3.0 + 0.1 * 3.0 / (3.0 + 1e-8);
    CHECK(p.v()[0] == doctest::Approx(e0).epsilon(1e-12));
    CHECK(p.v()[1] == doctest::Approx(e1).epsilon(1e-12));
}

TEST_CASE("gradient clipping rescales to the same direction") {
    Tensor pa({2}, {1.0, -3.0});
    Tensor pb({2}, {1.0, -3.0});
    Adam adam_a({{"p", pa}});
    Adam adam_b({{"p", pb}});
    Tape ta;
    {
        const Tensor loss = mse(ta.leaf(pa), Tensor::zeros({2}));
        ta.backward(loss);
    }
    Tape tb;
    {
        const Tensor loss = scale(mse(tb.leaf(pb), Tensor::zeros({2})), 2.0);
        tb.backward(loss);
    }
    adam_a.step(ta, 0.05, 0.5);
    adam_b.step(tb, 0.05, 0.5);
    CHECK(pa.v() == pb.v());
}

TEST_CASE("warmup schedule ramps linearly then holds") {
    CHECK(warmup_lr(1.0, 0, 100, 0.1) == doctest::Approx(0.1));
    CHECK(warmup_lr(1.0, 4, 100, 0.1) == doctest::Approx(0.5));
    CHECK(warmup_lr(1.0, 9, 100, 0.1) == doctest::Approx(1.0));
    CHECK(warmup_lr(1.0, 50, 100, 0.1) == 1.0);
    CHECK(warmup_lr(2.0, 0, 100, 0.0) == 2.0);
    CHECK_THROWS_AS(warmup_lr(0.0, 0, 10, 0.1), ConfigError);
    CHECK_THROWS_AS(warmup_lr(1.0, 0, 10, 1.5), ConfigError);
}

TEST_CASE("zero-epoch training returns the initialized model unchanged") {
    Dataset ds = generate_task(tiny_task(), 41);
    TrainHyper h;
    h.epochs = 0;
    auto [model, report] = train_teacher(tiny_teacher_cfg(), ds, h, 17);
    TransformerModel init(tiny_teacher_cfg(), Rng::derive(17, "teacher_init"));
    CHECK(same_params(model, init));
    CHECK(report.steps.empty());
    CHECK(report.epochs.empty());
    CHECK(report.final_dev_metric == evaluate(init, ds.dev, h.batch_size).accuracy);
}

TEST_CASE("teacher training is seed-deterministic") {
    Dataset ds = generate_task(tiny_task(), 42);
    TrainHyper h;
    h.epochs = 2;
    h.lr = 1e-3;
    h.batch_size = 16;
    auto [m1, r1] = train_teacher(tiny_teacher_cfg(), ds, h, 5);
    auto [m2, r2] = train_teacher(tiny_teacher_cfg(), ds, h, 5);
    CHECK(same_params(m1, m2));
    CHECK(r1.final_dev_metric == r2.final_dev_metric);
    REQUIRE(r1.steps.size() == r2.steps.size());
    for (std::size_t i = 0; i < r1.steps.size(); ++i)
        CHECK(r1.steps[i].total == r2.steps[i].total);
    auto [m3, r3] = train_teacher(tiny_teacher_cfg(), ds, h, 6);
    CHECK_FALSE(same_params(m1, m3));
}

TEST_CASE("teacher learns a clean tiny task") {
    TaskSpec spec = tiny_task();
    spec.dataset_size = 250;
    Dataset ds = generate_task(spec, 43);
    TrainHyper h;
    h.epochs = 12;
    h.lr = 3e-3;
    h.batch_size = 16;
    auto [model, report] = train_teacher(tiny_teacher_cfg(), ds, h, 7);
    REQUIRE(report.epochs.size() == 12);
    CHECK(report.epochs.back().train_accuracy >= 0.85);
    CHECK(report.final_dev_metric >= 0.8);
    CHECK(report.wall_time_seconds > 0.0);
    for (const EpochRecord& e : report.epochs) {
        CHECK(e.phase == "teacher");
        CHECK(std::isfinite(e.dev_loss));
    }
}

TEST_CASE("diverging teacher aborts with the last good checkpoint") {
    Dataset ds = generate_task(tiny_task(), 44);
    TrainHyper h;
    h.epochs = 4;
    h.lr = 1e8;
    h.clip_norm = 1e12;
    h.batch_size = 16;
    const std::string prefix = "teacher_diverged_test";
    CHECK_THROWS_AS(train_teacher(tiny_teacher_cfg(), ds, h, 8, prefix), NumericError);
    TransformerModel saved = checkpoint::load_model(prefix);
    for (const auto& [name, p] : saved.named_params())
        for (double v : p.v())
            CHECK(std::isfinite(v));
    std::remove((prefix + ".json").c_str());
    std::remove((prefix + ".bin").c_str());
}

TEST_CASE("teacher rejects mismatched task and validates hyper") {
    Dataset ds = generate_task(tiny_task(), 45);
    ModelConfig cfg = tiny_teacher_cfg();
    cfg.num_classes = 3;
    CHECK_THROWS_AS(train_teacher(cfg, ds, TrainHyper{}, 1), ConfigError);
    TrainHyper bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(train_teacher(tiny_teacher_cfg(), ds, bad, 1), ConfigError);
}

TEST_CASE("kd-only plans run zero ild steps") {
    Dataset ds = generate_task(tiny_task(), 46);
    TransformerModel teacher(tiny_teacher_cfg(), 21);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 22);
    DistillPlan plan = tiny_plan(DistillMethod::KdOnly);
    auto [model, report] = distill(plan, teacher, student, ds, nullptr, 9);
    CHECK(!report.steps.empty());
    for (const StepRecord& s : report.steps)
        CHECK(s.phase == "pld");
    for (const EpochRecord& e : report.epochs)
        CHECK(e.phase == "pld");
}

TEST_CASE("sequential plans finish ild before pld and honor the supplementary pool") {
    Dataset target = generate_task(tiny_task(), 47);
    Rng srng(12);
    Dataset supp = make_supplementary(target.spec, 40, 6, 0.5, srng, 48);
    TransformerModel teacher(tiny_teacher_cfg(), 23);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 24);
    DistillPlan plan = tiny_plan(DistillMethod::Ild);
    auto [model, report] = distill(plan, teacher, student, target, &supp, 10);
    bool seen_pld = false;
    std::size_t ild_steps = 0, pld_steps = 0;
    for (const StepRecord& s : report.steps) {
        if (s.phase == "pld") {
            seen_pld = true;
            ++pld_steps;
        } else {
            REQUIRE(s.phase == "ild");
            CHECK_FALSE(seen_pld);
            ++ild_steps;
        }
    }
    CHECK(ild_steps == (supp.train.size() + plan.batch_size - 1) / plan.batch_size);
    CHECK(pld_steps == (target.train.size() + plan.batch_size - 1) / plan.batch_size);
}

TEST_CASE("teacher parameters are bit-identical after distillation") {
    Dataset ds = generate_task(tiny_task(), 49);
    TransformerModel teacher(tiny_teacher_cfg(), 25);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 26);
    const auto before = snapshot(teacher);
    DistillPlan plan = tiny_plan(DistillMethod::Crild);
    plan.cr.w_mha_cr = 1.0;
    plan.cr.w_ir_cr = 1.0;
    plan.cr.warmup_T = 2;
    auto [model, report] = distill(plan, teacher, student, ds, nullptr, 11);
    const auto after = snapshot(teacher);
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(before[i] == after[i]);
}

TEST_CASE("plain ild equals a consistency plan pinned to lambda one with zero weights") {
    Dataset ds = generate_task(tiny_task(), 50);
    TransformerModel teacher(tiny_teacher_cfg(), 27);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 28);
    DistillPlan plain = tiny_plan(DistillMethod::Ild);
    plain.pld_epochs = 0;
    DistillPlan pinned = tiny_plan(DistillMethod::Crild);
    pinned.pld_epochs = 0;
    pinned.fixed_lambda = 1.0;
    auto [m1, r1] = distill(plain, teacher, student, ds, nullptr, 12);
    auto [m2, r2] = distill(pinned, teacher, student, ds, nullptr, 12);
    REQUIRE(r1.steps.size() == r2.steps.size());
    for (std::size_t i = 0; i < r1.steps.size(); ++i) {
        CHECK(r1.steps[i].total == r2.steps[i].total);
        CHECK(r2.steps[i].r_mha == 0.0);
        CHECK(r2.steps[i].r_ir == 0.0);
        CHECK(r2.steps[i].total ==
              doctest::Approx(r2.steps[i].l_mha + r2.steps[i].l_ir).epsilon(1e-12));
    }
    CHECK(same_params(m1, m2));
}

TEST_CASE("joint plans sum intermediate and prediction losses per step") {
    Dataset ds = generate_task(tiny_task(), 51);
    TransformerModel teacher(tiny_teacher_cfg(), 29);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 30);
    DistillPlan plan = tiny_plan(DistillMethod::Ild);
    plan.phase_order = PhaseOrder::Joint;
    auto [model, report] = distill(plan, teacher, student, ds, nullptr, 13);
    CHECK(!report.steps.empty());
    for (const StepRecord& s : report.steps) {
        CHECK(s.phase == "joint");
        CHECK(s.l_pl > 0.0);
        CHECK(s.total ==
              doctest::Approx(s.l_mha + s.l_ir + s.l_pl).epsilon(1e-12));
    }
    Rng srng(1);
    Dataset supp = make_supplementary(ds.spec, 40, 6, 0.5, srng, 52);
    CHECK_THROWS_AS(distill(plan, teacher, student, ds, &supp, 13), ConfigError);
}

TEST_CASE("distillation is seed-deterministic") {
    Dataset ds = generate_task(tiny_task(), 53);
    TransformerModel teacher(tiny_teacher_cfg(), 31);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 32);
    DistillPlan plan = tiny_plan(DistillMethod::Crild);
    plan.cr.w_mha_cr = 0.5;
    plan.cr.w_ir_cr = 0.5;
    plan.cr.warmup_T = 2;
    auto [m1, r1] = distill(plan, teacher, student, ds, nullptr, 14);
    auto [m2, r2] = distill(plan, teacher, student, ds, nullptr, 14);
    CHECK(same_params(m1, m2));
    CHECK(r1.final_dev_metric == r2.final_dev_metric);
    auto [m3, r3] = distill(plan, teacher, student, ds, nullptr, 15);
    CHECK_FALSE(same_params(m1, m3));
}

TEST_CASE("transport-mapped distillation refreshes on schedule and runs") {
    Dataset ds = generate_task(tiny_task(), 54);
    TransformerModel teacher(tiny_teacher_cfg(), 33);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 34);
    DistillPlan plan = tiny_plan(DistillMethod::Ild);
    plan.mapping.strategy = MappingStrategy::Emd;
    plan.mapping.emd_refresh_interval = 2;
    plan.pld_epochs = 0;
    auto [model, report] = distill(plan, teacher, student, ds, nullptr, 16);
    CHECK(!report.steps.empty());
    for (const StepRecord& s : report.steps) {
        CHECK(s.phase == "ild");
        CHECK(std::isfinite(s.total));
    }
}

TEST_CASE("distill plan validation rejects broken recipes") {
    Dataset ds = generate_task(tiny_task(), 55);
    TransformerModel teacher(tiny_teacher_cfg(), 35);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 36);

    DistillPlan bad = tiny_plan(DistillMethod::Ild);
    bad.ild_lr = 0.0;
    CHECK_THROWS_AS(distill(bad, teacher, student, ds, nullptr, 1), ConfigError);

    bad = tiny_plan(DistillMethod::Ild);
    bad.objective.mha_enabled = false;
    bad.objective.ir_enabled = false;
    CHECK_THROWS_AS(distill(bad, teacher, student, ds, nullptr, 1), ConfigError);

    bad = tiny_plan(DistillMethod::Crild);
    bad.mapping.strategy = MappingStrategy::Emd;
    CHECK_THROWS_AS(distill(bad, teacher, student, ds, nullptr, 1), ConfigError);

    bad = tiny_plan(DistillMethod::Ild);
    bad.mapping.teacher_layers = 3;
    CHECK_THROWS_AS(distill(bad, teacher, student, ds, nullptr, 1), ConfigError);

    bad = tiny_plan(DistillMethod::Ild);
    bad.fixed_lambda = 1.5;
    CHECK_THROWS_AS(distill(bad, teacher, student, ds, nullptr, 1), ConfigError);

    ModelConfig narrow = tiny_teacher_cfg();
    narrow.num_layers = 1;
    narrow.hidden_dim = 8;
    narrow.ffn_dim = 16;
    TransformerModel thin(narrow, 37);
    DistillPlan patience = tiny_plan(DistillMethod::Ild);
    patience.objective.ir_variant = IrVariant::Patience;
    CHECK_THROWS_AS(distill(patience, teacher, thin, ds, nullptr, 1), ConfigError);
}

TEST_CASE("evaluation scores clean labels even on noisy pools") {
    Dataset ds = generate_task(tiny_task(), 56);
    Rng rng(2);
    Dataset noisy = inject_label_noise(ds, 1.0, rng);
    TransformerModel model(tiny_teacher_cfg(), 38);
    const EvalResult a = evaluate(model, ds.train, 16);
    const EvalResult b = evaluate(model, noisy.train, 16);
    CHECK(a.loss == b.loss);
    CHECK(a.accuracy == b.accuracy);
}

TEST_CASE("experiment grid aggregates and isolates failures") {
    std::vector<NamedPlan> plans{{"a", tiny_plan(DistillMethod::Ild)},
                                 {"b", tiny_plan(DistillMethod::KdOnly)}};
    const std::vector<std::uint64_t> seeds{3, 1, 2};
    const CellRunner runner = [](const NamedPlan& np, std::uint64_t seed) {
        if (np.name == "b" && seed == 1)
            throw NumericError("synthetic cell failure");
        RunReport r;
        r.seed = seed;
        r.final_dev_metric = static_cast<double>(seed) + (np.name == "a" ? 10.0 : 20.0);
        return r;
    };
    const GridReport grid = run_experiment_grid(plans, seeds, runner);
    REQUIRE(grid.cells.size() == 6);
    CHECK_FALSE(grid.all_ok);
    std::size_t failed = 0;
    for (const CellResult& c : grid.cells)
        if (!c.ok) {
            ++failed;
            CHECK(c.plan == "b");
            CHECK(c.seed == 1);
            CHECK(c.error == "synthetic cell failure");
        }
    CHECK(failed == 1);

    REQUIRE(grid.aggregates.size() == 2);
    for (const PlanAggregate& agg : grid.aggregates) {
        std::vector<double> vals;
        for (const CellResult& c : grid.cells)
            if (c.plan == agg.plan && c.ok)
                vals.push_back(c.metric);
        double mean = 0.0;
        for (double v : vals)
            mean += v;
        mean /= static_cast<double>(vals.size());
        double sq = 0.0;
        for (double v : vals)
            sq += (v - mean) * (v - mean);
        const double stddev =
            vals.size() > 1 ? std::sqrt(sq / static_cast<double>(vals.size() - 1)) : 0.0;
        CHECK(agg.succeeded == vals.size());
        CHECK(std::abs(agg.mean - mean) < 1e-12);
        CHECK(std::abs(agg.stddev - stddev) < 1e-12);
    }

    const GridReport shuffled = run_experiment_grid(plans, {1, 2, 3}, runner);
    for (std::size_t i = 0; i < grid.aggregates.size(); ++i) {
        CHECK(grid.aggregates[i].mean == shuffled.aggregates[i].mean);
        CHECK(grid.aggregates[i].stddev == shuffled.aggregates[i].stddev);
    }

    const GridReport single = run_experiment_grid({plans[0]}, {9}, runner);
    CHECK(single.all_ok);
    CHECK(single.aggregates[0].mean == single.cells[0].metric);
    CHECK(single.aggregates[0].stddev == 0.0);

    CHECK_THROWS_AS(run_experiment_grid({}, seeds, runner), ConfigError);
    CHECK_THROWS_AS(run_experiment_grid(plans, {}, runner), ConfigError);
}

TEST_CASE("run reports land on disk as epoch lines plus a summary") {
    Dataset ds = generate_task(tiny_task(), 57);
    TransformerModel teacher(tiny_teacher_cfg(), 39);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 1, 40);
    DistillPlan plan = tiny_plan(DistillMethod::Ild);
    auto [model, report] = distill(plan, teacher, student, ds, nullptr, 18);
    const std::string prefix = "pipeline_report_test";
    save_report(prefix, report);
    std::ifstream jsonl(prefix + ".jsonl");
    REQUIRE(jsonl.good());
    std::size_t lines = 0;
    std::string line;
    while (std::getline(jsonl, line))
        ++lines;
    CHECK(lines == report.epochs.size());
    std::ifstream summary(prefix + ".json");
    REQUIRE(summary.good());
    std::string text((std::istreambuf_iterator<char>(summary)),
                     std::istreambuf_iterator<char>());
    CHECK(text.find("final_dev_metric") != std::string::npos);
    CHECK(text.find("\"ild\"") != std::string::npos);
    std::remove((prefix + ".jsonl").c_str());
    std::remove((prefix + ".json").c_str());
}
