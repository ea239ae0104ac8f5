import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctseg import metrics
from ctseg.errors import ShapeError, UndefinedMetric
from ctseg.metrics import ConfusionCounts
from oracles import brute_metrics, random_case


def _mask(shape, coords):
    m = np.zeros(shape, bool)
    for c in coords:
        m[c] = True
    return m


def test_confusion_hand_example():
    ref = _mask((12, 1, 1), [(0, 0, 0), (1, 0, 0)])
    pred = _mask((12, 1, 1), [(1, 0, 0), (2, 0, 0)])
    c = metrics.confusion(ref, pred, np.ones((12, 1, 1), bool))
    assert c == ConfusionCounts(1, 1, 1, 9)
    assert c.domain_size == 12
    assert metrics.dsc(c) == 0.5
    assert metrics.jc(c) == pytest.approx(1 / 3, abs=1e-15)
    assert metrics.fp_fn_ratios(c)[0] == pytest.approx(0.1)


def test_confusion_identity_and_empty_domain(rng):
    m = rng.random((4, 4, 2)) < 0.5
    c = metrics.confusion(m, m)
    assert c.fp == c.fn == 0
    assert metrics.confusion(m, ~m, np.zeros(m.shape, bool)) == ConfusionCounts(0, 0, 0, 0)


def test_misaligned_grids():
    with pytest.raises(ShapeError):
        metrics.confusion(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))
    with pytest.raises(ShapeError):
        metrics.me_mae(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 2), bool), np.zeros((2, 2, 1)))


def test_dsc_jc_edge_cases():
    assert metrics.dsc(ConfusionCounts(5, 0, 0, 3)) == 1
    assert metrics.jc(ConfusionCounts(5, 0, 0, 3)) == 1
    assert metrics.dsc(ConfusionCounts(0, 3, 4, 1)) == 0
    with pytest.raises(UndefinedMetric):
        metrics.dsc(ConfusionCounts(0, 0, 0, 9))
    with pytest.raises(UndefinedMetric):
        metrics.jc(ConfusionCounts(0, 0, 0, 9))


def test_ratios_edge_cases():
    assert metrics.fp_fn_ratios(ConfusionCounts(4, 0, 0, 6)) == (0, 0)
    assert metrics.fp_fn_ratios(ConfusionCounts(0, 0, 4, 6))[1] == 1
    with pytest.raises(UndefinedMetric):
        metrics.fp_fn_ratios(ConfusionCounts(2, 0, 0, 0))


def test_me_mae_examples():
    ref = _mask((4, 1, 1), [(0, 0, 0), (1, 0, 0), (2, 0, 0)])
    pred = _mask((4, 1, 1), [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)])
    vol = np.array([0.2, 0.3, 0.9, 0.4]).reshape(4, 1, 1)
    me, mae = metrics.me_mae(ref, pred, vol)
    assert me == pytest.approx(0.1) and mae == pytest.approx(0.1)
    assert metrics.me_mae(pred, ref, vol) == pytest.approx((-0.1, 0.1))
    assert metrics.me_mae(ref, ref, vol) == (0.0, 0.0)
    with pytest.raises(UndefinedMetric):
        metrics.me_mae(np.zeros((2, 1, 1), bool), np.zeros((2, 1, 1), bool), np.zeros((2, 1, 1)))


def test_hu_volume_examples():
    ref = np.zeros((10, 10, 2), bool)
    ref[:, :, 0] = True  # 100 voxels
    pred = ref.copy()
    pred[:5, 0, 1] = True  # 105 voxels
    hu = np.full(ref.shape, -700.0)
    hu[:, :, 1] = 7.9  # lifts the predicted mean
    rel_hu, abs_hu, rel_vol, abs_vol = metrics.hu_volume_diffs(ref, pred, hu, (1, 1, 1))
    assert rel_vol == pytest.approx(5.0) and abs_vol == pytest.approx(5.0)
    mu_p = (100 * -700 + 5 * 7.9) / 105
    assert rel_hu == pytest.approx(100 * (mu_p + 700) / -700)
    assert rel_hu < 0 and abs_hu == -rel_hu


def test_relative_mean_hu_worked_example():
    ref = np.array([True, False]).reshape(2, 1, 1)
    pred = np.array([False, True]).reshape(2, 1, 1)
    hu = np.array([-700.0, -682.0]).reshape(2, 1, 1)
    assert metrics.relative_mean_hu_pct(ref, pred, hu) == pytest.approx(-2.5714285714, abs=1e-9)


def test_perfect_prediction(rng):
    ref = rng.random((6, 6, 3)) < 0.4
    hu = rng.uniform(-1000, 0, size=ref.shape)
    cm = metrics.evaluate_case(ref, ref.copy(), hu, (hu + 1024) / 1424)
    assert cm.dsc == 1 and cm.jc == 1
    assert cm.me == cm.mae == cm.fpr == cm.fnr == 0
    assert cm.rel_vol_pct == 0 and cm.rel_mean_hu_pct == 0
    assert cm.flags == []


def test_empty_prediction_flags():
    ref = np.zeros((4, 4, 1), bool)
    ref[1:3, 1:3] = True
    hu = np.full(ref.shape, -800.0)
    cm = metrics.evaluate_case(ref, np.zeros_like(ref), hu, hu * 0)
    assert cm.dsc == 0 and cm.fnr == 1 and cm.rel_vol_pct == -100
    assert math.isnan(cm.rel_mean_hu_pct)
    assert cm.flags == ["rel_mean_hu_pct", "abs_rel_mean_hu_pct"]


def test_both_empty_flags_everything_but_fpr():
    z = np.zeros((3, 3, 1), bool)
    cm = metrics.evaluate_case(z, z, np.zeros(z.shape), np.zeros(z.shape))
    assert cm.fpr == 0
    assert set(cm.flags) == set(metrics.METRIC_FIELDS) - {"fpr"}


def _check_against_oracle(ref, pred, hu, norm, domain, spacing):
    want = brute_metrics(ref, pred, hu, norm, domain, spacing)
    got = metrics.evaluate_case(ref, pred, hu, norm, domain, spacing)
    c = metrics.confusion(ref, pred, domain)
    assert (c.tp, c.fp, c.fn, c.tn) == want["counts"]
    for name in ("dsc", "jc", "fpr", "fnr"):
        w = want[name]
        assert (math.isnan(getattr(got, name)) if w is None else getattr(got, name) == w), name
    for name in ("me", "mae", "rel_vol_pct", "rel_mean_hu_pct"):
        w = want[name]
        g = getattr(got, name)
        if w is None:
            assert math.isnan(g), name
        else:
            assert abs(g - w) <= 1e-12 * max(1.0, abs(w)), name
    for name in ("rel_vol_pct", "rel_mean_hu_pct"):
        g = getattr(got, name)
        a = getattr(got, "abs_" + name)
        assert (math.isnan(g) and math.isnan(a)) or a == abs(g)


def test_hand_built_8x8x4_case():
    ref = np.zeros((8, 8, 4), bool)
    ref[2:6, 1:4, 1:3] = True
    pred = np.zeros_like(ref)
    pred[3:7, 2:4, 1:4] = True
    hu = np.arange(ref.size, dtype=float).reshape(ref.shape) - 900
    _check_against_oracle(ref, pred, hu, (hu + 1024) / 1424, np.ones(ref.shape, bool), (0.7, 0.7, 5.0))


def test_oracle_random_volumes(rng):
    for _ in range(40):
        _check_against_oracle(*random_case(rng))


@given(st.integers(0, 2**32 - 1))
def test_metric_invariants(seed):
    r = np.random.default_rng(seed)
    ref, pred, hu, norm, domain, spacing = random_case(r)
    a = metrics.evaluate_case(ref, pred, hu, norm, domain, spacing)
    b = metrics.evaluate_case(pred, ref, hu, norm, domain, spacing)
    if not math.isnan(a.dsc):
        assert 0 <= a.jc <= a.dsc <= 1
        assert abs(a.jc - a.dsc / (2 - a.dsc)) <= 1e-12
        assert a.dsc == b.dsc and a.jc == b.jc
    for v in (a.fpr, a.fnr):
        assert math.isnan(v) or 0 <= v <= 1
    if not math.isnan(a.me):
        assert a.me == pytest.approx(-b.me, abs=1e-12) and a.mae == pytest.approx(b.mae, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_traversal_order_free(seed):
    r = np.random.default_rng(seed)
    ref, pred, hu, norm, domain, spacing = random_case(r, (6, 6, 4))
    perm = r.permutation(ref.size)

    def shuffle(a):
        return a.ravel()[perm].reshape(a.shape)

    a = metrics.evaluate_case(ref, pred, hu, norm, domain, spacing)
    b = metrics.evaluate_case(shuffle(ref), shuffle(pred), shuffle(hu), shuffle(norm), shuffle(domain), spacing)
    for k, v in a.values().items():
        w = getattr(b, k)
        assert (math.isnan(v) and math.isnan(w)) or v == pytest.approx(w, rel=1e-12, abs=1e-12)


def test_csv_roundtrip(tmp_path, rng):
    cases = []
    for i in range(4):
        ref, pred, hu, norm, domain, spacing = random_case(rng)
        cases.append(metrics.evaluate_case(ref, pred, hu, norm, domain, spacing, f"c{i}", "normal"))
    cases.append(metrics.evaluate_case(np.zeros((2, 2, 1), bool), np.zeros((2, 2, 1), bool),
                                       np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), case_id="empty", cohort="covid"))
    path = tmp_path / "m.csv"
    metrics.write_csv(cases, path)
    assert path.read_text().splitlines()[0] == ",".join(metrics.CSV_FIELDS)
    back = metrics.read_csv(path)
    for a, b in zip(cases, back):
        assert a.case_id == b.case_id and a.flags == b.flags
        for k, v in a.values().items():
            w = getattr(b, k)
            assert (math.isnan(v) and math.isnan(w)) or v == w
