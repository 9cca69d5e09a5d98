import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftforge.dataset import (
    DAY,
    MALWARE,
    TEST,
    TRAIN,
    VAL,
    WEEK,
    Sample,
    SampleTable,
    SynthConfig,
    TimeSplitSpec,
    assign_roles,
    fit_normalizer,
    ingest_jsonl,
    make_split_view,
    partition_by_time,
    synth_generate,
    write_jsonl,
)
from driftforge.errors import DataError
from oracles import nearest_rank_quantile


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def _record(i, ts, label="malware", family="fam", feats=(1.0, 2.0)):
    return {"id": f"x{i}", "timestamp": ts, "label": label, "family": family, "features": list(feats)}


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert len(ingest_jsonl(p)) == 0


def test_ingest_three_lines(tmp_path):
    p = tmp_path / "three.jsonl"
    recs = [
        _record(0, 100, "malware", "zeus", (0.5, -1.0, 3.0)),
        _record(1, 200, "benign", None, (0.0, 0.0, 0.0)),
        _record(2, 300, "unlabeled", None, (1e300, -2.5e-300, 7.0)),
    ]
    _write_lines(p, recs)
    table = ingest_jsonl(p)
    assert len(table) == 3
    for rec, s in zip(recs, table):
        assert s.id == rec["id"]
        assert s.timestamp == rec["timestamp"]
        assert s.label == rec["label"]
        assert s.family == rec["family"]
        assert s.features.tolist() == rec["features"]


def test_ingest_dimension_mismatch_names_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    _write_lines(p, [_record(0, 1, feats=[0.0] * 2381), _record(1, 2, feats=[0.0] * 2380)])
    with pytest.raises(DataError, match="line 2"):
        ingest_jsonl(p)


@pytest.mark.parametrize(
    "line",
    [
        "{not json",
        json.dumps({"id": "a", "timestamp": 1, "label": "evil", "family": None, "features": [1]}),
        json.dumps({"id": "a", "timestamp": 1.5, "label": "benign", "family": None, "features": [1]}),
        json.dumps({"id": "a", "timestamp": 1, "label": "benign", "family": None}),
    ],
)
def test_ingest_rejects_malformed(tmp_path, line):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(_record(0, 1, feats=[1.0])) + "\n" + line + "\n")
    with pytest.raises(DataError, match="line 2"):
        ingest_jsonl(p)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.integers(0, 2**40),
            st.sampled_from(["malware", "benign", "unlabeled"]),
            st.one_of(st.none(), st.text(min_size=1, max_size=8)),
            st.lists(finite, min_size=3, max_size=3),
        ),
        max_size=6,
    )
)
def test_roundtrip_is_identity(tmp_path_factory, rows):
    samples = [Sample(f"id{i}", ts, lab, fam, np.array(f)) for i, (ts, lab, fam, f) in enumerate(rows)]
    table = SampleTable.from_samples(samples)
    p = tmp_path_factory.mktemp("rt") / "d.jsonl"
    write_jsonl(table, p)
    back = ingest_jsonl(p)
    assert list(back) == samples
    assert all(np.array_equal(a.features, b.features) for a, b in zip(back, samples))


def _table(timestamps, labels=None):
    n = len(timestamps)
    labels = labels if labels is not None else [MALWARE] * n
    return SampleTable([f"s{i}" for i in range(n)], timestamps, labels, ["f"] * n, np.zeros((n, 1)))


def test_partition_weekly_boundary():
    base = 1561939200  # a Monday, but weeks are epoch aligned (Thursdays)
    part = partition_by_time(_table([base + 0 * DAY, base + 7 * DAY]), WEEK)
    assert part.n_periods == 2
    assert part.sizes() == [1, 1]


def test_partition_single_month():
    base = 1561939200
    part = partition_by_time(_table([base + d * DAY for d in (0, 3, 20)]), 30 * DAY, origin=base)
    assert part.n_periods == 1


def test_partition_matches_calendar_oracle():
    rng = np.random.default_rng(4)
    start = dt.datetime(2019, 7, 1, tzinfo=dt.timezone.utc)
    stamps = sorted(int(start.timestamp()) + int(s) for s in rng.integers(0, 183 * DAY, 100))
    part = partition_by_time(_table(stamps), WEEK)
    first = dt.datetime.fromtimestamp(min(stamps), dt.timezone.utc).date()
    epoch = dt.date(1970, 1, 1)
    origin_day = first - dt.timedelta(days=(first - epoch).days % 7)
    oracle = []
    for s in stamps:
        day = dt.datetime.fromtimestamp(s, dt.timezone.utc).date()
        oracle.append((day - origin_day).days // 7)
    oracle = np.array(oracle) - min(oracle) + 1
    np.testing.assert_array_equal(part.period, oracle)
    for i in range(1, part.n_periods):
        a, b = part.members(i), np.flatnonzero(part.period > i)
        if len(a) and len(b):
            assert part.table.timestamps[a].max() < part.table.timestamps[b].min()


def test_partition_keeps_interior_empty_period():
    part = partition_by_time(_table([0, 3 * WEEK]), WEEK)
    assert part.sizes() == [1, 0, 0, 1]


def test_roles_ten_samples():
    part = partition_by_time(_table(list(range(10))), WEEK)
    roles = assign_roles(part, seed=3)
    assert np.bincount(roles, minlength=3).tolist() == [7, 2, 1]


def test_roles_single_sample_is_train():
    part = partition_by_time(_table([5]), WEEK)
    assert assign_roles(part, seed=0).tolist() == [TRAIN]


def test_roles_deterministic():
    part = partition_by_time(_table(list(range(0, 50 * DAY, DAY))), WEEK)
    np.testing.assert_array_equal(assign_roles(part, seed=9), assign_roles(part, seed=9))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 8 * WEEK), min_size=1, max_size=200), st.integers(0, 1000))
def test_roles_partition_counts(stamps, seed):
    part = partition_by_time(_table(stamps), WEEK)
    roles = assign_roles(part, seed=seed)
    assert set(np.unique(roles)) <= {TRAIN, VAL, TEST}
    for i in range(1, part.n_periods + 1):
        m = part.members(i)
        counts = np.bincount(roles[m], minlength=3)
        for c, r in zip(counts, (0.7, 0.2, 0.1)):
            assert abs(c - r * len(m)) <= 1


def test_normalizer_constant_feature():
    norm = fit_normalizer(np.full((10, 1), 3.0))
    assert np.all(norm.apply(np.array([[3.0], [5.0], [-1.0]])) == 0)


def test_normalizer_sorted_values():
    rng = np.random.default_rng(0)
    vals = rng.permutation(np.arange(1.0, 101.0))
    norm = fit_normalizer(vals[:, None])
    assert norm.q01[0] == nearest_rank_quantile(vals.tolist(), 0.01)
    assert norm.q99[0] == nearest_rank_quantile(vals.tolist(), 0.99)
    z = norm.apply(vals[:, None])
    assert abs(z.mean()) < 1e-9
    assert abs(z.var() - 1) < 1e-6


def test_normalizer_clamps_before_standardizing():
    X = np.arange(1.0, 101.0)[:, None]
    norm = fit_normalizer(X)
    np.testing.assert_array_equal(norm.apply([[1e9]]), norm.apply(norm.q99[None, :]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_normalizer_roundtrip_property(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_cauchy(size=(int(rng.integers(20, 200)), 4)) * rng.uniform(0.1, 100, 4)
    z = fit_normalizer(X).apply(X)
    assert np.all(np.abs(z.mean(axis=0)) <= 1e-9)
    assert np.all(np.abs(z.var(axis=0) - 1) <= 1e-6)


def _five_period_partition(seed=0):
    stamps = [p * WEEK + j * 3600 for p in range(5) for j in range(20)]
    labels = [MALWARE if j % 2 else 0 for p in range(5) for j in range(20)]
    part = partition_by_time(_table(stamps, labels), WEEK)
    return part.with_roles(assign_roles(part, seed=seed))


def test_split_view_periods():
    part = _five_period_partition()
    view = make_split_view(part, TimeSplitSpec(k=4, w1=3, w2=0))
    assert set(part.period[view.train_idx]) == {1, 2, 3}
    assert set(part.period[view.val_idx]) == {1, 2, 3}
    assert set(part.period[view.test_idx]) == {4}
    assert np.all(part.roles[view.test_idx] == TEST)
    assert view.leakage_ok()


def test_upper_bound_view_adds_future_train_role():
    part = _five_period_partition()
    spec = TimeSplitSpec(k=4, w1=3, w2=0)
    normal = make_split_view(part, spec, "normal")
    ub = make_split_view(part, spec, "upper_bound")
    extra = np.setdiff1d(ub.train_idx, normal.train_idx)
    expected = np.flatnonzero((part.period == 4) & (part.roles == TRAIN))
    np.testing.assert_array_equal(extra, expected)
    np.testing.assert_array_equal(ub.test_idx, normal.test_idx)
    np.testing.assert_array_equal(ub.val_idx, normal.val_idx)
    np.testing.assert_array_equal(ub.future_train_idx(), expected)


def test_split_view_excludes_unlabeled():
    part = _five_period_partition()
    labels = part.table.labels.copy()
    labels[:50] = -1
    t = part.table
    part2 = partition_by_time(SampleTable(t.ids, t.timestamps, labels, t.families, t.X), WEEK)
    part2 = part2.with_roles(part.roles)
    view = make_split_view(part2, TimeSplitSpec(4, 3))
    for pool in (view.train_idx, view.val_idx, view.test_idx):
        assert np.all(labels[pool] >= 0)


@pytest.mark.parametrize("spec", [TimeSplitSpec(3, 3), TimeSplitSpec(5, 2, 1), TimeSplitSpec(6, 2)])
def test_split_view_out_of_range(spec):
    with pytest.raises(DataError):
        make_split_view(_five_period_partition(), spec)


def _small_synth(**kw):
    base = dict(n_families=3, n_periods=4, dim=6, samples_per_period_per_class=300, seed=1)
    base.update(kw)
    return SynthConfig(**base)


def test_synth_is_deterministic():
    a = synth_generate(_small_synth())
    b = synth_generate(_small_synth())
    assert a.ids == b.ids
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.timestamps, b.timestamps)
    assert list(a.families) == list(b.families)


def test_synth_velocity_moves_family_mean():
    cfg = _small_synth(
        drift_velocity=0.8, adoption_rate=0.0, adaptation_strength=0.0,
        samples_per_period_per_class=6000, n_families=2,
    )
    table, truth = synth_generate(cfg, return_truth=True)
    part = partition_by_time(table, cfg.period_length)
    fam = table.families == "fam00"
    means = [table.X[fam & (part.period == i)].mean(axis=0) for i in range(1, cfg.n_periods + 1)]
    step = truth.family_means[1, 0] - truth.family_means[0, 0]
    assert np.linalg.norm(step) == pytest.approx(0.8)
    # each coordinate mean has standard error 1/sqrt(3000)
    for i in range(cfg.n_periods - 1):
        np.testing.assert_allclose(means[i + 1] - means[i], step, atol=5 * np.sqrt(2 / 3000))


def test_synth_families_pass_benign_centre_mid_timeline():
    cfg = _small_synth(n_periods=5, dim=12, drift_velocity=1.5, separation=2.5, toward_benign=0.0,
                       adoption_rate=0.0, adaptation_strength=0.0, samples_per_period_per_class=30)
    _, truth = synth_generate(cfg, return_truth=True)
    centre = truth.benign_means.mean(axis=0)
    dist = np.linalg.norm(truth.family_means - centre, axis=2)  # (period, family)
    np.testing.assert_allclose(dist[2], 2.5, rtol=1e-12)
    # sqrt(sep^2 + (offset * v)^2) on either side of the midpoint
    np.testing.assert_allclose(dist[0], np.hypot(2.5, 3.0), rtol=1e-12)
    np.testing.assert_allclose(dist[1], dist[3], rtol=1e-12)


def test_synth_labels_and_periods():
    cfg = _small_synth()
    table = synth_generate(cfg)
    part = partition_by_time(table, cfg.period_length)
    assert part.n_periods == cfg.n_periods
    for i in range(1, cfg.n_periods + 1):
        m = part.members(i)
        assert np.sum(table.labels[m] == MALWARE) == cfg.samples_per_period_per_class
        assert np.sum(table.labels[m] == 0) == cfg.samples_per_period_per_class
    assert all((f is None) == (y == 0) for f, y in zip(table.families, table.labels))
