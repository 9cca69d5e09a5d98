import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftforge.attacks import AttackConfig, fit_projection_box
from driftforge.dataset import SynthConfig, TimeSplitSpec, synth_generate
from driftforge.errors import DataError
from driftforge.gan import GanArch, GanTrainConfig
from driftforge.harness import (
    CSV_HEADER,
    CellData,
    ExperimentConfig,
    TrainingMethod,
    build_minibatch,
    cell_data,
    confusion,
    degradation_matrix,
    degradation_study,
    evaluate,
    prepare,
    rates,
    read_results,
    robustness_eval,
    run_experiment,
    select_threshold,
    train_classifier,
)
from driftforge.nn import LayerSpec, MlpModel


def tagged_pools(d=3):
    clean = np.zeros((50, d))
    mal = np.ones((50, d))
    aux = lambda n, rng, mal_rows: np.full((n, d), 2.0)
    return clean, mal, aux


def test_minibatch_normal_balanced():
    clean, mal, _ = tagged_pools()
    X, y = build_minibatch("normal", clean, mal, None, 512, np.random.default_rng(0))
    assert (y == 0).sum() == 256 and (y == 1).sum() == 256
    assert np.all(X[y == 0] == 0) and np.all(X[y == 1] == 1)


@pytest.mark.parametrize("method", ["ccygan", "upper_bound", "adv_fgsm"])
def test_minibatch_aux_composition(method):
    clean, mal, aux = tagged_pools()
    X, y = build_minibatch(method, clean, mal, aux, 512, np.random.default_rng(0))
    assert (y == 0).sum() == 256
    assert np.sum(X[:, 0] == 1) == 192
    assert np.sum(X[:, 0] == 2) == 64
    assert np.all(y[X[:, 0] > 0] == 1)


def test_minibatch_adversarial_full_mode():
    rng = np.random.default_rng(0)
    clean = rng.normal(size=(500, 3))
    mal = rng.normal(size=(500, 3)) + 10
    aux = lambda n, rng, rows: rows + 100
    X, y = build_minibatch("adv_fgsm", clean, mal, aux, 128, rng, full_mode=True)
    assert X.shape == (128, 3)
    np.testing.assert_array_equal(X[:32], X[32:64])  # clean listed twice
    assert len(np.unique(X[:64], axis=0)) <= 32
    np.testing.assert_array_equal(X[96:], X[64:96] + 100)
    assert list(y) == [0] * 64 + [1] * 64


def test_minibatch_errors():
    clean, mal, aux = tagged_pools()
    with pytest.raises(DataError):
        build_minibatch("ccygan", clean, mal, None, 64, np.random.default_rng(0))
    with pytest.raises(DataError):
        build_minibatch("normal", clean[:0], mal, None, 64, np.random.default_rng(0))


def test_threshold_fixture_counts():
    scores = np.r_[0.9, 0.5, 0.1, np.full(97, 0.05)]
    thr = select_threshold(scores, 0.01)
    assert np.sum(scores > thr) <= 1
    assert thr == 0.9


def test_threshold_hand_enumeration():
    thr = select_threshold(np.array([0.8, 0.2]), 0.5)
    assert thr == 0.8
    assert np.sum(np.array([0.8, 0.2]) > thr) == 0


def test_threshold_all_ties():
    s = np.full(20, 0.3)
    assert np.sum(s > select_threshold(s, 0.1)) == 0


def test_threshold_empty():
    with pytest.raises(DataError):
        select_threshold(np.array([]), 0.1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=300), st.sampled_from([0.1, 0.01, 0.001, 0.5, 0.37]))
def test_threshold_realized_fpr_bounded(scores, target):
    s = np.array(scores)
    thr = select_threshold(s, target)
    assert np.mean(s > thr) <= target


def test_confusion_oracle():
    scores = np.array([0.9, 0.8, 0.4, 0.2, 0.7, 0.3, 0.6, 0.1])
    labels = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    tp, fp, tn, fn = confusion(scores, labels, 0.5)
    assert (tp, fp, tn, fn) == (2, 2, 2, 2)
    tpr, fpr, f1, acc = rates(tp, fp, tn, fn)
    assert (tpr, fpr, acc) == (0.5, 0.5, 0.5)
    assert f1 == pytest.approx(0.5)


def test_rates_conventions():
    assert rates(5, 0, 5, 0) == (1.0, 0.0, 1.0, 1.0)
    tpr, fpr, f1, acc = rates(0, 0, 5, 5)
    assert (tpr, fpr, f1) == (0.0, 0.0, 0.0)
    tpr, fpr, f1, acc = rates(0, 1, 4, 0)
    assert math.isnan(tpr) and math.isnan(f1) and fpr == 0.2


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_rates_in_unit_interval_and_f1_recomputable(tp, fp, tn, fn):
    tpr, fpr, f1, acc = rates(tp, fp, tn, fn)
    for v in (tpr, fpr, f1, acc):
        assert math.isnan(v) or 0 <= v <= 1
    if tp > 0:
        p = tp / (tp + fp)
        assert f1 == pytest.approx(2 * p * tpr / (p + tpr))


def constant_model(p_malware_logit):
    model = MlpModel([LayerSpec.dense(2, 2)]).eval()
    model.params[0]["W"][...] = 0.0
    model.params[0]["b"][...] = [0.0, p_malware_logit]
    return model


def test_evaluate_perfect_and_degenerate():
    X = np.array([[0.0, 0], [0, 0], [1, 1], [1, 1]])
    y = np.array([0, 0, 1, 1])
    model = MlpModel([LayerSpec.dense(2, 2)]).eval()
    model.params[0]["W"][...] = [[0.0, 5.0], [0.0, 5.0]]
    model.params[0]["b"][...] = [0.0, -5.0]
    r = evaluate(model, 0.5, X, y)
    assert (r.tpr, r.fpr, r.f1) == (1.0, 0.0, 1.0)
    r = evaluate(constant_model(-50.0), 0.5, X, y)
    assert (r.tpr, r.fpr, r.f1) == (0.0, 0.0, 0.0)


def separable_cell(n=600, d=4, seed=0, gap=6.0):
    rng = np.random.default_rng(seed)
    def pool(label, m):
        return rng.normal(size=(m, d)) + (gap if label else 0.0)
    clean, mal = pool(0, n), pool(1, n)
    val_X = np.vstack([pool(0, 300), pool(1, 300)])
    val_y = np.r_[np.zeros(300, int), np.ones(300, int)]
    test_X = np.vstack([pool(0, 100), pool(1, 100)])
    test_y = np.r_[np.zeros(100, int), np.ones(100, int)]
    from driftforge.dataset import Normalizer
    ident = Normalizer(np.full(d, -1e9), np.full(d, 1e9), np.zeros(d), np.ones(d))
    return CellData(TimeSplitSpec(2, 1), ident, fit_projection_box(np.vstack([clean, mal])), clean, mal,
                    val_X, val_y, test_X, test_y, np.full(200, 2), clean, mal[:50], mal)


def small_config(**kw):
    base = dict(max_epochs=3, classifier_hidden=(16,), minibatch_size=64, seeds=(0,))
    base.update(kw)
    return ExperimentConfig(**base)


def test_train_separable_reaches_high_tpr():
    data = separable_cell()
    res = train_classifier(TrainingMethod("normal"), data, small_config(), 0)
    assert res.selected[0.01].val_tpr >= 0.99
    assert set(res.selected) == {0.1, 0.01, 0.001}
    assert len(res.history.val_tpr) == 3


def test_train_is_deterministic_and_selects_earliest_best():
    data = separable_cell(gap=1.5)
    cfg = small_config(max_epochs=5)
    a = train_classifier(TrainingMethod("normal"), data, cfg, 7)
    b = train_classifier(TrainingMethod("normal"), data, cfg, 7)
    assert a.history.val_tpr == b.history.val_tpr
    assert a.history.train_loss == b.history.train_loss
    for t in cfg.fpr_targets:
        curve = [h[t] for h in a.history.val_tpr]
        assert a.selected[t].epoch == int(np.argmax(curve))
        m = a.model_for(t)
        scores_val = evaluate(m, a.selected[t].threshold, data.val_X, data.val_y)
        assert scores_val.fpr <= t
        assert scores_val.tpr == a.selected[t].val_tpr


def test_train_adversarial_runs():
    data = separable_cell()
    method = TrainingMethod("adv_fgsm", attack=AttackConfig("fgsm", 0.1))
    res = train_classifier(method, data, small_config(feature_mode="full"), 0)
    assert res.selected[0.1].val_tpr > 0.9


def test_training_method_payloads():
    with pytest.raises(ValueError):
        TrainingMethod("adv_fgsm")
    with pytest.raises(ValueError):
        TrainingMethod("adv_pgd", attack=AttackConfig("fgsm"))
    with pytest.raises(ValueError):
        TrainingMethod("ccygan")
    with pytest.raises(ValueError):
        TrainingMethod("bogus")


def test_robustness_self_comparison_and_null_attack():
    data = separable_cell(gap=2.0)
    res = train_classifier(TrainingMethod("normal"), data, small_config(), 0)
    model = res.model_for(0.01)
    thr = res.selected[0.01].threshold
    mal = data.test_X[data.test_y == 1]
    a, b = robustness_eval(model, model, AttackConfig("fgsm", 0.3), mal, data.box, (thr, thr))
    assert a == b
    clean_tpr = evaluate(model, thr, mal, np.ones(len(mal), int)).tpr
    z, _ = robustness_eval(model, model, AttackConfig("fgsm", 0.0), mal, data.box, (thr, thr))
    assert z == clean_tpr


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(fpr_targets=(0.0,))
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())
    with pytest.raises(ValueError):
        ExperimentConfig(methods=("normal", "magic"))
    assert ExperimentConfig(feature_mode="full").batch_size == 128
    assert ExperimentConfig().batch_size == 512


def synth_table(seed=0, n_periods=6, per=300, dim=8, families=3, **kw):
    return synth_generate(SynthConfig(n_families=families, n_periods=n_periods, dim=dim,
                                      samples_per_period_per_class=per, seed=seed, **kw))


def test_cell_pools_have_no_leakage():
    table = synth_table()
    prepared = prepare(table, ExperimentConfig(w1=2))
    part = prepared.partition
    spec = prepared.splits[1]
    data = cell_data(part, spec)
    start = part.period_start(spec.k)
    ts = part.table.timestamps
    # recover past pools by matching rows back to the table
    past = (part.period < spec.k) & (part.period >= spec.k - spec.w1)
    assert len(data.clean) + len(data.malware) == np.sum(past & (part.roles == 0))
    assert np.all(ts[past] < start)
    assert len(data.future_malware) > 0
    assert np.all(data.test_period == spec.k)


def test_sweep_counting_and_identical_test_pools(tmp_path):
    table = synth_table()
    cfg = small_config(w1=2, splits=[4], methods=("normal", "upper_bound"), fpr_targets=(0.01,), seeds=(0, 1, 2))
    recs = run_experiment(cfg, table, tmp_path / "r.csv")
    assert len(recs) == 6
    normal = [r for r in recs if r.method == "normal"]
    ub = [r for r in recs if r.method == "upper_bound"]
    for a, b in zip(normal, ub):
        assert a.tp + a.fn == b.tp + b.fn and a.fp + a.tn == b.fp + b.tn
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)


def test_resume_matches_uninterrupted(tmp_path):
    table = synth_table(1)
    cfg = small_config(w1=2, methods=("normal", "upper_bound", "ccygan"), seeds=(0, 1),
                       gan=GanTrainConfig(total_steps=5, minibatch=16, arch=GanArch((8,), (8,))))
    full = tmp_path / "full.csv"
    part = tmp_path / "part.csv"
    run_experiment(cfg, table, full)
    run_experiment(cfg, table, part, stop_after=5)
    with open(part, "a") as fh:
        fh.write("5,normal,0.1,0,5,0.3")  # torn row from a crash mid-write
    run_experiment(cfg, table, part, resume=True)
    assert full.read_bytes() == part.read_bytes()
    assert (tmp_path / "full.csv.skips.csv").read_bytes() == (tmp_path / "part.csv.skips.csv").read_bytes()
    # rerun is byte identical too
    again = tmp_path / "again.csv"
    run_experiment(cfg, table, again)
    assert full.read_bytes() == again.read_bytes()
    assert len(read_results(full)) > 0


def test_resume_rejects_other_config(tmp_path):
    table = synth_table(2)
    cfg = small_config(w1=2, splits=[3], methods=("normal",))
    run_experiment(cfg, table, tmp_path / "r.csv", stop_after=0)
    with pytest.raises(DataError):
        run_experiment(small_config(w1=2, splits=[3], methods=("normal",), max_epochs=4), table,
                       tmp_path / "r.csv", resume=True)


def test_degradation_shape():
    table = synth_table(3, n_periods=6)
    cfg = small_config(w1=2, fpr_targets=(0.01,))
    prepared = prepare(table, cfg)
    recs = degradation_study(prepared.partition, cfg)
    ks, M = degradation_matrix(recs, 0.01, prepared.partition.n_periods)
    assert ks == [3, 4, 5, 6]
    assert M.shape == (4, 6)
    for i, k in enumerate(ks):
        assert np.all(np.isnan(M[i, : k - 1])) and not np.any(np.isnan(M[i, k - 1:]))


def test_robustness_study_rows(tmp_path):
    table = synth_table(4)
    cfg = small_config(study="robustness", w1=2, splits=[3], methods=("normal", "adv_fgsm"),
                       robustness_attacks=("fgsm",), fpr_targets=(0.01,), feature_mode="full")
    recs = run_experiment(cfg, table)
    assert [r.method for r in recs] == ["normal", "normal@fgsm", "adv_fgsm", "adv_fgsm@fgsm"]
    assert recs[0].fp == recs[1].fp  # clean samples are not attacked
