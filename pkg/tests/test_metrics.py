import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gert.metrics import LinkState, batch_metrics, compute_metrics, metrics_from_arrays

from oracles import metrics_reference

amp = st.tuples(st.floats(1e-6, 1e-2), st.floats(0, 2 * math.pi)).map(lambda t: cmath.rect(*t))
path_sets = st.lists(st.tuples(amp, st.floats(1e-7, 5e-6)), min_size=1, max_size=12)


def test_two_equal_paths():
    m = metrics_from_arrays([1e-3, 1e-3j], [200e-9, 300e-9])
    assert m.mean_excess_delay_ns == pytest.approx(50.0, abs=1e-9)
    assert m.delay_spread_ns == pytest.approx(50.0, abs=1e-9)
    assert m.k_factor_db == 0.0


def test_single_path_and_empty():
    m = metrics_from_arrays([1e-4], [1e-6])
    assert m.connected and m.delay_spread_ns == 0.0 and m.k_factor_db == math.inf
    assert m.path_gain_db == pytest.approx(-80.0)
    out = metrics_from_arrays([], [])
    assert out.state is LinkState.OUTAGE
    assert out.path_gain_db is None and out.delay_spread_ns is None and out.k_factor_db is None


def test_threshold_and_combine():
    assert not metrics_from_arrays([1e-7], [1e-6], pg_threshold_db=-130).connected
    assert metrics_from_arrays([1e-6], [1e-6], pg_threshold_db=-130).connected
    m = metrics_from_arrays([1e-3, -1e-3], [1e-6, 1.1e-6], combine="coherent")
    assert m.state is LinkState.OUTAGE  # exact cancellation
    c = metrics_from_arrays([1e-3, 1e-3], [1e-6, 1.1e-6], combine="coherent")
    assert c.path_gain_db == pytest.approx(20 * math.log10(2e-3))
    with pytest.raises(ValueError):
        metrics_from_arrays([1e-3], [0.0], combine="bogus")


class _PS:
    def __init__(self, a, t):
        self.a, self.t = np.asarray(a), np.asarray(t)

    def amplitudes(self):
        return self.a

    def delays(self):
        return self.t


@settings(max_examples=1000, deadline=None)
@given(path_sets, st.floats(-1e-6, 1e-6), st.floats(0, 2 * math.pi), st.floats(0.1, 10))
def test_invariances_and_reference(paths, shift, phase, gain):
    a = np.array([p[0] for p in paths])
    t = np.array([p[1] for p in paths])
    base = metrics_from_arrays(a, t, pg_threshold_db=-1e9)
    ref = metrics_reference(a, t)
    assert base.path_gain_db == pytest.approx(ref[0], abs=1e-9)
    assert base.mean_excess_delay_ns == pytest.approx(ref[1], rel=1e-9, abs=1e-9)
    assert base.delay_spread_ns == pytest.approx(ref[2], rel=1e-7, abs=1e-6)
    assert base.k_factor_db == pytest.approx(ref[3], rel=1e-9, abs=1e-9)
    assert 0 <= base.delay_spread_ns <= (t.max() - t.min()) * 1e9 + 1e-9
    shifted = metrics_from_arrays(a, t + shift + 1e-6, pg_threshold_db=-1e9)
    assert shifted.mean_excess_delay_ns == pytest.approx(base.mean_excess_delay_ns, rel=1e-6, abs=1e-6)
    assert shifted.delay_spread_ns == pytest.approx(base.delay_spread_ns, rel=1e-6, abs=1e-5)
    rot = metrics_from_arrays(a * cmath.exp(1j * phase), t, pg_threshold_db=-1e9)
    assert rot.path_gain_db == pytest.approx(base.path_gain_db, abs=1e-9)
    assert rot.mean_excess_delay_ns == pytest.approx(base.mean_excess_delay_ns, rel=1e-12, abs=1e-12)
    assert rot.delay_spread_ns == pytest.approx(base.delay_spread_ns, rel=1e-9, abs=1e-9)
    assert rot.k_factor_db == pytest.approx(base.k_factor_db, rel=1e-12, abs=1e-12)
    scaled = metrics_from_arrays(a * gain, t, pg_threshold_db=-1e9)
    assert scaled.path_gain_db == pytest.approx(base.path_gain_db + 20 * math.log10(gain), abs=1e-9)
    assert scaled.k_factor_db == pytest.approx(base.k_factor_db, rel=1e-9, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(path_sets.filter(lambda ps: len(ps) >= 2), st.floats(1.01, 4.0))
def test_k_decreases_when_weak_path_grows(paths, factor):
    a = np.array([p[0] for p in paths])
    t = np.array([p[1] for p in paths])
    p = np.abs(a) ** 2
    i = int(np.argmin(p))
    if p.max() / p[i] < 1.05:
        return
    k0 = metrics_from_arrays(a, t, pg_threshold_db=-1e9).k_factor_db
    b = a.copy()
    # stay below the dominant path
    b[i] *= min(factor, 0.999 * math.sqrt(p.max() / p[i]))
    k1 = metrics_from_arrays(b, t, pg_threshold_db=-1e9).k_factor_db
    assert k1 < k0


def test_batch_matches_scalar():
    rng = np.random.default_rng(3)
    n_rx = 40
    counts = rng.integers(0, 6, n_rx)
    rx = np.repeat(np.arange(n_rx), counts)
    a = rng.lognormal(-9, 2, rx.size) * np.exp(1j * rng.uniform(0, 2 * np.pi, rx.size))
    t = rng.uniform(1e-7, 2e-6, rx.size)
    for combine in ("incoherent", "coherent"):
        got = batch_metrics(rx, a, t, n_rx, -130.0, combine)
        for r in range(n_rx):
            m = metrics_from_arrays(a[rx == r], t[rx == r], -130.0, combine)
            assert got["connected"][r] == m.connected
            if m.connected:
                assert got["pg_db"][r] == pytest.approx(m.path_gain_db, abs=1e-9)
                assert got["med_ns"][r] == pytest.approx(m.mean_excess_delay_ns, rel=1e-9, abs=1e-9)
                assert got["ds_ns"][r] == pytest.approx(m.delay_spread_ns, rel=1e-7, abs=1e-6)
                assert got["k_db"][r] == pytest.approx(m.k_factor_db)
            else:
                assert np.isnan(got["pg_db"][r])


def test_compute_metrics_uses_path_set_protocol():
    m = compute_metrics(_PS([1e-3, 1e-3], [0.0, 100e-9]))
    assert m.mean_excess_delay_ns == pytest.approx(50.0)
