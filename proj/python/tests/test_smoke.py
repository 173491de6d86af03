import math

import pytest

import ildlab as il


def tiny_spec():
    spec = il.TaskSpec()
    spec.vocab_size = 32
    spec.num_classes = 2
    spec.nominal_seq_len = 12
    spec.effective_len_target = 9
    spec.dataset_size = 150
    spec.rule_seed = 5
    return spec


def tiny_model_cfg():
    cfg = il.ModelConfig()
    cfg.num_layers = 2
    cfg.hidden_dim = 16
    cfg.num_heads = 2
    cfg.ffn_dim = 32
    cfg.vocab_size = 32
    cfg.max_seq_len = 12
    cfg.num_classes = 2
    return cfg


def test_dataset_generation_is_deterministic():
    a = il.generate_task(tiny_spec(), 3)
    b = il.generate_task(tiny_spec(), 3)
    assert len(a.train) == 120 and len(a.dev) == 30
    assert [e.tokens for e in a.train] == [e.tokens for e in b.train]
    c = il.generate_task(tiny_spec(), 4)
    assert [e.tokens for e in a.train] != [e.tokens for e in c.train]


def test_dataset_roundtrip(tmp_path):
    ds = il.generate_task(tiny_spec(), 3)
    path = str(tmp_path / "task.jsonl")
    il.save_dataset(path, ds)
    back = il.load_dataset(path)
    assert [e.tokens for e in back.dev] == [e.tokens for e in ds.dev]
    assert back.spec.vocab_size == 32


def test_validation_errors_surface_as_python_exceptions():
    spec = tiny_spec()
    spec.effective_len_target = 40
    with pytest.raises(ValueError):
        il.generate_task(spec, 3)
    with pytest.raises(ValueError):
        il.beta_quadrature(-1.0)


def test_beta_quadrature_matches_closed_moments():
    for alpha in (0.5, 1.0, 3.0):
        assert il.beta_moment_check(alpha).max_abs_diff < 1e-13


def test_theorem_three_way_agreement():
    rng = il.Rng.stream(7, "taylor")
    setup = il.random_taylor_setup(rng, 5, 3, 2, 1, 1.0)
    rep = il.verify_theorem1(setup)
    assert rep.max_abs_diff < 1e-10


def test_emd_degenerates_to_identity_on_diagonal_costs():
    plan = il.map_emd([[0.0, 1.0], [1.0, 0.0]])
    assert plan.total_cost == pytest.approx(0.0)
    pairs = plan.pairs()
    assert {(p.teacher_layer, p.student_layer) for p in pairs} == {(1, 1), (2, 2)}


def test_teacher_then_crild_distill_runs(tmp_path):
    ds = il.generate_task(tiny_spec(), 3)
    hyper = il.TrainHyper()
    hyper.epochs = 1
    hyper.batch_size = 32
    teacher, report = il.train_teacher(tiny_model_cfg(), ds, hyper, 7)
    assert 0.0 <= report.final_dev_metric <= 1.0
    assert report.epochs[0].phase == "teacher"

    student = il.TransformerModel.init_student_truncated(teacher, 1, 11)
    plan = il.DistillPlan()
    plan.method = il.DistillMethod.Crild
    plan.mapping.strategy = il.MappingStrategy.Last
    plan.mapping.teacher_layers = 2
    plan.mapping.student_layers = 1
    plan.ild_epochs = 1
    plan.pld_epochs = 1
    plan.cr.alpha = 1.0
    plan.cr.warmup_T = 4
    plan.cr.w_mha_cr = 1.0
    plan.cr.w_ir_cr = 1.0
    model, rep = il.distill(plan, teacher, student, ds, None, 13)
    assert 0.0 <= rep.final_dev_metric <= 1.0
    phases = {s.phase for s in rep.steps}
    assert phases == {"ild", "pld"}
    assert all(math.isfinite(s.total) for s in rep.steps)

    prefix = str(tmp_path / "student")
    il.save_model(prefix, model)
    again = il.load_model(prefix)
    assert again.param_count() == model.param_count()
    ev = il.evaluate(again, ds.dev, 32)
    assert ev.accuracy == pytest.approx(rep.final_dev_metric)


def test_noise_probe_and_linear_probe():
    ds = il.generate_task(tiny_spec(), 3)
    model = il.TransformerModel(tiny_model_cfg(), 9)
    probe = il.noise_robustness_probe(model, ds.dev, [0.0, 0.5], 2, 17)
    assert len(probe.values) == 2
    assert probe.values[0] == probe.summary["clean_loss"]
    acc = il.linear_probe(model, ds, 0, 30, 0.05)
    assert 0.0 <= acc <= 1.0
