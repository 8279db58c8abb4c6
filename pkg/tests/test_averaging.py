import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mfrl.averaging import (EmaState, SwaState, average_snapshots, ema_of_snapshots, ema_update,
                            swa_accumulate)
from mfrl.nn import ParamVector, ShapeError

SHAPES = [(2, 2), (1, 2)]
vecs = st.lists(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)), min_size=1, max_size=12)


def _pv(v):
    return ParamVector(np.array(v, dtype=np.float64), SHAPES)


@given(vecs)
def test_swa_equals_arithmetic_mean(snaps):
    avg = average_snapshots([_pv(s) for s in snaps])
    assert np.allclose(avg.values, np.mean(snaps, axis=0), rtol=1e-12, atol=1e-9)


def test_single_snapshot_is_copied():
    s = _pv(np.arange(6.0))
    state = swa_accumulate(SwaState(), s)
    s.values[:] = 0
    assert np.array_equal(state.average().values, np.arange(6.0))
    assert state.count == 1


def test_swa_rejects_mismatched_snapshot():
    state = swa_accumulate(SwaState(), _pv(np.zeros(6)))
    with pytest.raises(ShapeError):
        swa_accumulate(state, ParamVector(np.zeros(3), [(1, 2), (1, 1)]))


def test_empty_average_raises():
    with pytest.raises(ValueError):
        SwaState().average()


@given(vecs, st.floats(0, 1))
def test_ema_matches_loop_oracle(snaps, a):
    init = np.ones(6)
    out = ema_of_snapshots([_pv(s) for s in snaps], a, init=_pv(init))
    ref = init.copy()
    for s in snaps:
        ref = a * ref + (1 - a) * np.asarray(s)
    assert np.allclose(out.values, ref, rtol=1e-12, atol=1e-9)


def test_ema_degenerate_factors():
    snaps = [_pv(np.full(6, float(i))) for i in range(1, 4)]
    init = _pv(np.zeros(6))
    assert np.array_equal(ema_of_snapshots(snaps, 0.0, init).values, snaps[-1].values)
    assert np.array_equal(ema_of_snapshots(snaps, 1.0, init).values, init.values)


def test_ema_first_update_seeds():
    state = ema_update(EmaState(a=0.5), _pv(np.full(6, 3.0)))
    assert np.array_equal(state.avg.values, np.full(6, 3.0))


@pytest.mark.parametrize("a", [-0.1, 1.5])
def test_ema_rejects_factor_outside_unit_interval(a):
    with pytest.raises(ValueError):
        EmaState(a=a)
