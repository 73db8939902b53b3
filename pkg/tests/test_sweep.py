import csv
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gert.geodata import BuildingFootprint, TerrainGrid
from gert.perturb import PerturbationSpec, apply_perturbation_with_record
from gert.scene import assemble_scene
from gert.sweep import (CellMetricsGrid, SweepResult, aggregate_cells, build_rx_grid,
                        covariance_ellipse, dispersion_pairs, distance_profile, outage_histogram,
                        result_from_raw, run_sweep, summary_table, write_grid_meta, write_outputs)
from gert.tracer import TraceConfig


def _samples(pg, connected=None):
    pg = np.asarray(pg, dtype=float)[:, None]
    alive = np.isfinite(pg) if connected is None else np.asarray(connected)[:, None]
    z = np.where(alive, 0.0, np.nan)
    return {"pg_db": pg, "med_ns": z, "ds_ns": z, "k_db": z, "connected": alive,
            "n_paths": alive.astype(int)}


def test_aggregate_hand_examples():
    c = aggregate_cells(_samples([-80, -82, -84]))
    assert c.pg_std_db[0] == pytest.approx(2.0, abs=1e-12)
    pg = [np.nan] * 10 + [-90.0 + 0.1 * i for i in range(40)]
    c = aggregate_cells(_samples(pg))
    assert c.outage_freq[0] == pytest.approx(0.2)
    c = aggregate_cells(_samples([np.nan] * 49 + [-90.0]))
    assert np.isnan(c.pg_std_db[0]) and c.outage_freq[0] == pytest.approx(0.98)
    c = aggregate_cells(_samples([-70.0]))
    assert all(np.isnan(c.field(f)[0]) for f in ("pg_std_db", "med_std_ns", "ds_std_ns", "k_std_db"))


def test_min_samples_and_infinite_k():
    s = _samples([-80, -81, -82])
    s["k_db"] = np.array([[math.inf], [3.0], [5.0]])
    c = aggregate_cells(s, min_samples=2)
    assert c.k_std_db[0] == pytest.approx(statistics.stdev([3.0, 5.0]))
    assert np.isnan(aggregate_cells(s, min_samples=4).pg_std_db[0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_conservation_and_order_freedom(k, n, seed):
    rng = np.random.default_rng(seed)
    alive = rng.random((k, n)) < 0.7
    samples = {f: np.where(alive, rng.normal(-90, 5, (k, n)), np.nan)
               for f in ("pg_db", "med_ns", "ds_ns", "k_db")}
    samples.update(connected=alive, n_paths=np.where(alive, 3, rng.integers(0, 2, (k, n))))
    a = aggregate_cells(samples)
    assert np.all(a.outage_count + a.alive_count == k)
    perm = rng.permutation(k)
    b = aggregate_cells({key: v[perm] for key, v in samples.items()})
    for f in ("pg_std_db", "med_std_ns", "ds_std_ns", "k_std_db"):
        np.testing.assert_allclose(a.field(f), b.field(f), rtol=1e-12, equal_nan=True)
    assert np.array_equal(a.outage_count, b.outage_count)


def _cells(values, k=5):
    v = np.asarray(values, dtype=float)
    z = np.zeros(v.size, dtype=np.int64)
    return CellMetricsGrid(v, v, v, v, z, z + k, z, k)


def test_distance_profile():
    bins = distance_profile(_cells(np.full(30, 1.5)), np.full(30, 40.0), 25.0)
    assert len(bins) == 1 and bins[0].means["pg_std_db"] == 1.5 and not bins[0].low_confidence
    d = np.linspace(0, 299.9, 3000)
    bins = distance_profile(_cells(d / 100), d, 25.0)
    assert len(bins) == 12
    for b in bins:
        assert b.means["pg_std_db"] == pytest.approx((b.lo + b.hi) / 2 / 100, abs=1e-3)
    few = distance_profile(_cells([1.0, np.nan, 2.0]), [1.0, 2.0, 3.0], 10.0)
    assert few[0].counts["pg_std_db"] == 2 and few[0].low_confidence
    with pytest.raises(ValueError):
        distance_profile(_cells([1.0]), [1.0], 0.0)


def test_dispersion_pairs():
    x = np.arange(10.0)
    pairs = {(p.x, p.y): p for p in dispersion_pairs({"a": x, "b": x, "c": -x}, ("a", "b", "c"))}
    assert pairs[("a", "b")].r == pytest.approx(1.0)
    assert pairs[("a", "c")].r == pytest.approx(-1.0)
    short = dispersion_pairs({"a": [1.0, 2.0, np.nan], "b": [1.0, 3.0, 2.0]}, ("a", "b"))[0]
    assert not short.defined and short.n == 2
    axes, ang = covariance_ellipse(np.diag([4.0, 1.0]))
    assert axes == pytest.approx((4.0, 2.0)) and ang == pytest.approx(0.0, abs=1e-12)
    axes, ang = covariance_ellipse(np.diag([1.0, 9.0]))
    assert axes == pytest.approx((6.0, 2.0)) and abs(ang) == pytest.approx(90.0)


def test_outage_histogram_examples():
    k = 50
    z = np.zeros(4, dtype=np.int64)
    ok = CellMetricsGrid(*(np.zeros(4),) * 4, z, z + k, z, k)
    h = outage_histogram([ok])
    assert h.counts[0] == 4 and h.counts.sum() == 4
    one = CellMetricsGrid(*(np.zeros(4),) * 4, np.array([0, 0, 0, 3]), np.array([50, 50, 50, 47]), z, k)
    assert outage_histogram([one]).counts[3] == 1
    dead = CellMetricsGrid(*(np.zeros(2),) * 4, np.array([50, 50]), np.array([0, 0]),
                           np.array([50, 10]), k)
    h = outage_histogram([dead, one])
    assert h.always_dead == 1 and h.counts[50] == 1 and h.counts.sum() == 5


def test_summary_table_formula():
    k = 3
    z = np.zeros(2, dtype=np.int64)
    g = [CellMetricsGrid(*(np.full(2, s),) * 4, z, z + k, z, k) for s in (2.0, 4.0)]
    res = SweepResult(None, np.zeros((2, 3)), ["height"], {"height": k},
                      {(0, "height"): g[0], (1, "height"): g[1]})
    (row,) = summary_table(res)
    assert row.stats["PG"] == pytest.approx((math.sqrt(10), 2.0, 4.0))
    single = SweepResult(None, np.zeros((1, 3)), ["height"], {"height": k}, {(0, "height"): g[1]})
    assert summary_table(single)[0].stats["MED"] == pytest.approx((4.0, 4.0, 4.0))


def test_rx_grid_invariants():
    z = np.add.outer(np.linspace(0, 8, 11), np.linspace(0, 5, 21))
    t = TerrainGrid(21, 11, 10.0, 0.0, 0.0, z)
    fp = BuildingFootprint(0, np.array([[50, 30], [90, 30], [90, 70], [50, 70.0]]), 12.0)
    s = assemble_scene([fp], t)
    g = build_rx_grid(s, spacing_m=5.0)
    x, y, h = g.points.T
    assert np.all((x >= 0) & (x <= 200) & (y >= 0) & (y <= 100))
    assert not np.any((x > 50) & (x < 90) & (y > 30) & (y < 70))
    np.testing.assert_allclose(h - s.terrain_elevation(x, y), 1.5, rtol=0, atol=1e-12)
    assert np.isnan(g.raster(np.ones(len(g)))).sum() == g.nx * g.ny - len(g)


def test_empty_scene_material_kind_has_zero_pg_std():
    s = assemble_scene([], TerrainGrid.flat(0, 0, 100, 100))
    g = build_rx_grid(s, 20.0)
    res = run_sweep(s, [[50, 50, 10]], [PerturbationSpec("material", count=2)], g, TraceConfig(1, True))
    c = res.cells[(0, "material")]
    assert np.all(c.pg_std_db == 0.0)
    k1 = run_sweep(s, [[50, 50, 10]], [PerturbationSpec("height", count=1)], g, TraceConfig(0, False))
    assert np.all(np.isnan(k1.cells[(0, "height")].pg_std_db))


def test_tx_must_be_above_terrain():
    s = assemble_scene([], TerrainGrid.flat(0, 0, 100, 100, z=5.0))
    g = build_rx_grid(s, 50.0)
    with pytest.raises(ValueError, match="above the terrain"):
        run_sweep(s, [[50, 50, 4]], [PerturbationSpec("height", count=1)], g)


def _wall_scene():
    t = TerrainGrid.flat(0, 0, 200, 100)
    fp = BuildingFootprint(0, np.array([[40, 0], [60, 0], [60, 100], [40, 100.0]]), 10.0)
    return assemble_scene([fp], t)


def test_threshold_scene_outage_matches_crossing_oracle():
    # LOS clears the far roof edge (x=60, z=10) iff the ray height there exceeds 10 + dh;
    # at -88 dB only LOS-bearing cells stay connected, diffraction alone does not
    s = _wall_scene()
    tx = np.array([0.0, 50.0, 60.0])
    g = build_rx_grid(s, 2.0, bounds=(61, 44, 130, 56))
    spec = PerturbationSpec("height", count=50, master_seed=4)
    res = run_sweep(s, [tx], [spec], g, TraceConfig(0, True), pg_threshold_db=-88.0)
    c = res.cells[(0, "height")]
    dh = np.array([apply_perturbation_with_record(s, spec, k)[1].height[next(iter(s.buildings))]
                   for k in range(50)])
    f = (60.0 - tx[0]) / (g.points[:, 0] - tx[0])
    clearance = tx[2] + f * (g.points[:, 2] - tx[2]) - 10.0
    expected = (dh[None, :] > clearance[:, None]).sum(axis=1)
    assert np.array_equal(c.outage_count, expected)
    h = outage_histogram([c])
    assert h.always_dead == 0
    ends = h.counts[:3].sum() + h.counts[-3:].sum()
    assert ends > 0.8 * len(g)
    assert h.counts[0] > 0 and h.counts[-1] > 0


def test_workers_do_not_change_results(tmp_path):
    s = _wall_scene()
    g = build_rx_grid(s, 10.0)
    specs = [PerturbationSpec(k, count=3, master_seed=11) for k in ("material", "position")]
    cfg = TraceConfig(1, True)
    a = run_sweep(s, [[20, 20, 15], [150, 80, 8]], specs, g, cfg, workers=1, retain_raw=True)
    b = run_sweep(s, [[20, 20, 15], [150, 80, 8]], specs, g, cfg, workers=2, retain_raw=True)
    for key in a.raw:
        for f in a.raw[key]:
            assert np.array_equal(a.raw[key][f], b.raw[key][f], equal_nan=True)
    for out, r in (("a", a), ("b", b)):
        write_outputs(r, tmp_path / out)
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_outputs_and_raw_roundtrip(tmp_path):
    s = _wall_scene()
    g = build_rx_grid(s, 10.0)
    specs = [PerturbationSpec("height", count=4, master_seed=2)]
    res = run_sweep(s, [[20, 20, 15]], specs, g, TraceConfig(1, True), retain_raw=True,
                    pg_threshold_db=-100.0)
    write_outputs(res, tmp_path)
    write_grid_meta(g, tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"cells_0_height.csv", "profile_height.csv", "dispersion.csv", "outage_hist_height.csv",
            "summary.csv", "heat_0_height_pg_std_db.pgm", "heat_0_height_pg_std_db.json"} <= names
    with open(tmp_path / "cells_0_height.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(g)
    assert list(rows[0]) == ["x", "y", "distance_m", "pg_std_db", "med_std_ns", "ds_std_ns",
                             "k_std_db", "outage_freq", "alive_count"]
    back = result_from_raw(tmp_path, ["height"])
    c0, c1 = res.cells[(0, "height")], back.cells[(0, "height")]
    for f in ("pg_std_db", "med_std_ns", "ds_std_ns", "k_std_db", "outage_freq"):
        assert np.array_equal(c0.field(f), c1.field(f), equal_nan=True)
    pgm = (tmp_path / "heat_0_height_pg_std_db.pgm").read_bytes()
    assert pgm.startswith(f"P5\n{g.nx} {g.ny}\n255\n".encode())
