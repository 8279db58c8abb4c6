import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mfrl import calibration as cal

probs_st = st.integers(1, 40).flatmap(
    lambda n: st.tuples(arrays(np.float64, (n, 3), elements=st.floats(1e-3, 1.0)),
                        arrays(np.int64, n, elements=st.integers(0, 2))))


def _brute(conf, correct, B=15):
    # enumerate bins explicitly with the top edge closed
    n = len(conf)
    ece, mce = 0.0, 0.0
    for b in range(B):
        lo, hi = b / B, (b + 1) / B
        members = [i for i in range(n) if (lo <= conf[i] < hi) or (b == B - 1 and conf[i] == 1.0)]
        if not members:
            continue
        acc = sum(correct[i] for i in members) / len(members)
        avg = sum(conf[i] for i in members) / len(members)
        ece += len(members) / n * abs(acc - avg)
        mce = max(mce, abs(acc - avg))
    return ece, mce


@given(probs_st)
def test_metrics_match_brute_force(pl):
    raw, labels = pl
    probs = raw / raw.sum(axis=1, keepdims=True)
    conf = probs.max(axis=1)
    correct = probs.argmax(axis=1) == labels
    e, m = _brute(list(conf), list(correct))
    assert abs(cal.ece(conf, correct) - e) <= 1e-12
    assert abs(cal.mce(conf, correct) - m) <= 1e-12
    brier = sum(sum((probs[i, k] - (k == labels[i])) ** 2 for k in range(3)) for i in range(len(labels)))
    assert abs(cal.brier(probs, labels) - brier / len(labels)) <= 1e-12
    assert cal.mce(conf, correct) >= cal.ece(conf, correct)


def test_confidence_one_lands_in_top_bin():
    assert cal.bin_index(np.array([1.0, 0.0, 14 / 15]))[0] == 14
    assert cal.bin_index(np.array([0.0]))[0] == 0


def test_perfect_calibration_has_zero_ece():
    conf = np.full(10, 0.7)
    correct = np.array([1] * 7 + [0] * 3)
    assert cal.ece(conf, correct) == pytest.approx(0.0, abs=1e-15)


def test_brier_accepts_one_hot():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert cal.brier(p, np.array([1, 0])) == cal.brier(p, np.eye(2)[[1, 0]])


def test_metric_input_validation():
    with pytest.raises(ValueError):
        cal.ece([], [])
    with pytest.raises(ValueError):
        cal.ece([1.2], [1])
    with pytest.raises(ValueError):
        cal.ece([0.5, 0.5], [1])


def test_reliability_rows_are_consistent(rng):
    p = rng.dirichlet(np.ones(4), size=200)
    y = rng.integers(0, 4, 200)
    rep = cal.report_from_probs(p, y)
    rows = list(rep.rows())
    assert len(rows) == 15 and sum(r[4] for r in rows) == 200
    # ECE re-aggregated from the rows
    e = sum(r[4] / 200 * abs(r[3] - r[2]) for r in rows if r[4])
    assert e == pytest.approx(rep.ece, abs=1e-15)


def test_mean_ci():
    m, ci = cal.mean_ci([0.0, 1.0])
    assert m == 0.5 and ci == pytest.approx(1.96 * 0.5 / math.sqrt(2))


def test_spectrum_against_gram_eigenvalues(rng):
    Phi = rng.normal(size=(30, 6)) @ np.diag([5, 3, 1, 0.5, 0.1, 0.01])
    rep = cal.spectrum(Phi)
    eig = np.sqrt(np.clip(np.sort(np.linalg.eigvalsh(Phi.T @ Phi))[::-1], 0, None))
    assert np.allclose(rep.sigma, eig, rtol=1e-8)
    assert rep.sigma_norm[0] == 1.0 and np.all(np.diff(rep.sigma_norm) <= 0)
    sn = eig / eig[0]
    assert rep.metric == pytest.approx(-np.sum(sn * np.log(sn)), rel=1e-8)
    assert rep.energy[-1] == pytest.approx(1.0)
    assert rep.top_share(2) == pytest.approx(np.sum(eig[:2] ** 2) / np.sum(eig ** 2))


def test_spectrum_rank_one_has_zero_metric():
    Phi = np.outer(np.arange(1.0, 6.0), np.array([1.0, 2.0, 3.0]))
    rep = cal.spectrum(Phi)
    assert rep.metric == pytest.approx(0.0, abs=1e-6)
    assert rep.top_share(1) == pytest.approx(1.0)


def test_spectrum_degenerate_and_invalid():
    assert cal.spectrum(np.zeros((4, 3))).degenerate
    with pytest.raises(ValueError):
        cal.spectrum(np.zeros((0, 3)))


@given(arrays(np.float64, 5, elements=st.floats(0.01, 10)), st.floats(0.1, 100))
def test_effective_rank_metric_is_scale_invariant(s, c):
    assert cal.effective_rank_metric(s * c) == pytest.approx(cal.effective_rank_metric(s), rel=1e-9, abs=1e-12)
