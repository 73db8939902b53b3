"""End-to-end acceptance checks, one test per criterion (test_cNN_*).

A summary line per criterion is printed at the end of the session by the hook
in conftest.py.  The synthetic-city sweep (criteria 9 to 11) runs twice and
takes several minutes.
"""

import csv
import json
import math
import statistics
import time

import numpy as np
import pytest

from gert.cli import main
from gert.emwave import C0, Material, fresnel_reflection, utd_coefficient
from gert.geodata import BuildingFootprint, TerrainGrid
from gert.metrics import metrics_from_arrays
from gert.perturb import PerturbationSpec, apply_perturbation_with_record
from gert.scene import MaterialPolicy, assemble_scene, export_scene, import_scene, scenes_equal
from gert.sweep import build_rx_grid, run_sweep, write_grid_meta, write_outputs
from gert.synthetic import box_scene, manhattan_scene
from gert.tracer import TraceConfig, find_paths

from oracles import (box_reflections_bruteforce, friis_gain_db, sommerfeld_half_plane,
                     two_ray_gain_db, utd_half_plane_total)
from scenegen import random_scene

F = 3.5e9


# -- 1. free-space law ------------------------------------------------------------------------

def test_c01_free_space_law():
    s = assemble_scene([], TerrainGrid.flat(-10, -10, 1100, 10))
    cfg = TraceConfig(0, False)
    find_paths(s, None, [0, 0, 10], [50, 0, 10], cfg)  # compile kernels
    assert friis_gain_db(100, F) == pytest.approx(-83.33, abs=0.005)
    t0 = time.perf_counter()
    for d in np.logspace(1, 3, 10):
        ps = find_paths(s, None, [0, 0, 10], [d, 0, 10], cfg)
        (p,) = ps.paths
        assert abs(20 * math.log10(abs(p.amplitude)) - friis_gain_db(d, F)) < 0.05
    assert time.perf_counter() - t0 < 1.0


# -- 2. two-ray oracle ------------------------------------------------------------------------

def test_c02_two_ray_over_near_pec_ground():
    ht, hr = 10.0, 1.5
    mat = Material("near_pec", 1.0, 1e7)
    s = assemble_scene([], TerrainGrid.flat(-10, -50, 1100, 50),
                       MaterialPolicy(terrain="near_pec", custom={"near_pec": mat}))
    eps = complex(1.0, -1e7 / (2 * math.pi * F * 8.8541878128e-12))
    # interference nulls of the oracle: path difference an integer number of wavelengths
    lam = C0 / F
    dense = np.linspace(40, 1010, 200_001)
    dr = np.hypot(dense, ht + hr) - np.hypot(dense, ht - hr)
    nulls = dense[np.flatnonzero(np.diff(np.floor(dr / lam)) != 0)]
    cfg = TraceConfig(1, False)
    find_paths(s, None, [0, 0, ht], [60, 0, hr], cfg)
    t0 = time.perf_counter()
    checked = 0
    for d in np.linspace(50, 1000, 50):
        ps = find_paths(s, None, [0, 0, ht], [d, 0, hr], cfg)
        if nulls.size and np.min(np.abs(nulls - d)) < 1.0:
            continue
        got = 20 * math.log10(abs(ps.amplitudes().sum()))
        assert abs(got - two_ray_gain_db(d, ht, hr, F, eps)) < 0.2, d
        checked += 1
    assert time.perf_counter() - t0 < 5.0
    assert checked >= 25


# -- 3. image-method completeness -------------------------------------------------------------

def test_c03_box_matches_bruteforce_enumeration():
    size = (20.0, 16.0, 12.0)
    s = box_scene(size)
    assert sum(len(m.triangles) for m in s.meshes) <= 100
    tx, rx = [3.3, 4.1, 2.7], [15.2, 11.9, 8.3]
    t0 = time.perf_counter()
    for order in (1, 2, 3):
        ps = find_paths(s, None, tx, rx, TraceConfig(order, False))
        got = {}
        for p in ps.by_kind("reflection"):
            walls = []
            for q in p.vertices[1:-1]:
                hits = [(ax, v) for ax in range(3) for v in (0.0, size[ax]) if abs(q[ax] - v) < 1e-7]
                assert len(hits) == 1
                walls.append(hits[0])
            got[tuple(walls)] = p.vertices[1:-1]
        ref = box_reflections_bruteforce(size, tx, rx, order)
        assert len(got) == len(ps.by_kind("reflection")) == len(ref)
        assert set(got) == set(ref)
        for key, pts in ref.items():
            assert np.max(np.abs(got[key] - pts)) < 1e-6
    assert time.perf_counter() - t0 < 30.0


# -- 4. Fresnel suite -------------------------------------------------------------------------

def test_c04_fresnel_suite():
    _, tm = fresnel_reflection(4.0, math.atan(2.0))
    assert abs(tm) < 1e-10
    rng = np.random.default_rng(4)
    n = 10_000
    eps = rng.uniform(1.0, 100.0, n) - 1j * rng.uniform(0.0, 1e3, n)
    theta = rng.uniform(0.0, math.pi / 2, n)
    te, tm = fresnel_reflection(eps, theta)
    assert np.all(np.abs(te) <= 1 + 1e-12) and np.all(np.abs(tm) <= 1 + 1e-12)
    te, tm = fresnel_reflection(4.0, math.radians(89.9))
    assert min(abs(te), abs(tm)) > 0.999, (abs(te), abs(tm))


# -- 5. UTD suite -----------------------------------------------------------------------------

def test_c05_utd_half_plane():
    k, rho, src = 2 * math.pi, 10.0, math.radians(60)  # rho = 10 wavelengths
    isb = src + math.pi
    phis = isb + np.radians(np.arange(-10, 11) * 0.1)
    for pol in ("soft", "hard"):
        u = [utd_half_plane_total(utd_coefficient, k, rho, p, src, pol) for p in phis]
        for a, b in zip(u[:-1], u[1:]):
            assert abs(a - b) <= 0.02 * max(abs(a), abs(b))
        phi = isb + math.radians(30)
        ref = sommerfeld_half_plane(k, rho, phi, src, pol)
        assert abs(utd_half_plane_total(utd_coefficient, k, rho, phi, src, pol) - ref) <= 0.05 * abs(ref)


# -- 6. metrics identities --------------------------------------------------------------------

def test_c06_metrics_identities():
    m = metrics_from_arrays([1e-3, 1e-3j], [200e-9, 300e-9])
    assert m.mean_excess_delay_ns == 50.0 and m.delay_spread_ns == 50.0 and m.k_factor_db == 0.0
    m = metrics_from_arrays([1e-4], [1e-6])
    assert m.delay_spread_ns == 0.0 and m.k_factor_db == math.inf
    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        a = rng.uniform(1e-6, 1e-2, n) * np.exp(1j * rng.uniform(0, 2 * math.pi, n))
        t = rng.uniform(1e-7, 5e-6, n)
        base = metrics_from_arrays(a, t, pg_threshold_db=-1e9)
        shifted = metrics_from_arrays(a, t + rng.uniform(-1e-7, 1e-6), pg_threshold_db=-1e9)
        rotated = metrics_from_arrays(a * np.exp(1j * rng.uniform(0, 2 * math.pi)), t,
                                      pg_threshold_db=-1e9)
        for other in (shifted, rotated):
            assert other.path_gain_db == pytest.approx(base.path_gain_db, abs=1e-9)
            assert other.mean_excess_delay_ns == pytest.approx(base.mean_excess_delay_ns, rel=1e-6, abs=1e-6)
            assert other.delay_spread_ns == pytest.approx(base.delay_spread_ns, rel=1e-6, abs=1e-6)
            assert other.k_factor_db == pytest.approx(base.k_factor_db, abs=1e-9)


# -- 7. perturbation statistics ---------------------------------------------------------------

def test_c07_perturbation_statistics():
    city = manhattan_scene(blocks=10)  # 100 buildings
    ids = sorted(city.buildings)

    def records(kind):
        spec = PerturbationSpec(kind, count=100, master_seed=777)
        return [apply_perturbation_with_record(city, spec, k)[1] for k in range(100)]

    h = np.array([r.height[b] for r in records("height") for b in ids])
    assert h.size == 10_000 and abs(h.std(ddof=1) - 1.0) < 0.03
    d = np.array([r.position[b] for r in records("position") for b in ids]).ravel()
    assert d.size == 20_000 and abs(d.std(ddof=1) - 0.4) < 0.03 * 0.4
    eps0, sig0 = city.materials[ids[0]].at(city.frequency_hz)
    recs = records("material")
    de = np.array([r.eps[b] for r in recs for b in ids])
    ds = np.array([r.sigma[b] for r in recs for b in ids])
    assert de.size == 10_000
    assert abs(de.std(ddof=1) - 0.1 * eps0) < 0.03 * 0.1 * eps0
    assert abs(ds.std(ddof=1) - 0.1 * sig0) < 0.03 * 0.1 * sig0


# -- 8. censored aggregation ------------------------------------------------------------------

def _oracle_std(values, alive):
    xs = [float(v) for v, ok in zip(values, alive) if ok and math.isfinite(v)]
    return statistics.stdev(xs) if len(xs) >= 2 else None


def test_c08_censored_aggregation_matches_oracle(tmp_path):
    terrain = TerrainGrid.flat(0, 0, 200, 200)
    # 4 m squares centred on lattice points, between receiver cell centres
    fps = [BuildingFootprint(i, np.array([[x - 2, y - 2], [x + 2, y - 2], [x + 2, y + 2], [x - 2, y + 2.0]]),
                             float(8 + 3 * i))
           for i, (x, y) in enumerate([(50, 50), (150, 60), (90, 140), (140, 150)])]
    s = assemble_scene(fps, terrain)
    g = build_rx_grid(s, 10.0)
    assert (g.nx, g.ny, len(g)) == (20, 20, 400)
    specs = [PerturbationSpec(k, count=20, master_seed=88) for k in ("height", "position")]
    res = run_sweep(s, [[100.0, 100.0, 12.0]], specs, g, TraceConfig(2, True), retain_raw=True,
                    pg_threshold_db=-95.0)
    write_outputs(res, tmp_path)
    write_grid_meta(g, tmp_path)
    names = {"pg_db": "pg_std_db", "med_ns": "med_std_ns", "ds_ns": "ds_std_ns", "k_db": "k_std_db"}
    partial = 0
    for kind in ("height", "position"):
        raw = {key: np.load(tmp_path / "raw" / f"raw_0_{kind}_{key}.npy")
               for key in list(names) + ["connected"]}
        with open(tmp_path / f"cells_0_{kind}.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 400
        for c, row in enumerate(rows):
            alive = [bool(v) for v in raw["connected"][:, c]]
            assert raw["connected"].shape[0] == 20
            freq = sum(not v for v in alive) / 20
            assert float(row["outage_freq"]) == pytest.approx(freq, rel=1e-12, abs=0)
            partial += 0 < freq < 1
            for src, dst in names.items():
                ref = _oracle_std(raw[src][:, c].tolist(), alive)
                if ref is None:
                    assert row[dst] == ""
                else:
                    assert float(row[dst]) == pytest.approx(ref, rel=1e-12, abs=1e-300)
    assert partial > 0  # the threshold actually censors some samples


# -- 9 to 11. synthetic-city sweep ------------------------------------------------------------

CITY = """
[scene]
source = "manhattan"

[scene.manhattan]
blocks = 8
block_m = 20.0
street_m = 30.0
height_m = 20.0

[trace]
max_reflection_order = 3
diffraction = true

[[tx]]
position = [100.0, 100.0, 10.0]

[[tx]]
position = [250.0, 150.0, 10.0]

[[tx]]
position = [150.0, 300.0, 10.0]

[grid]
spacing_m = 10.0

[perturbation]
count = 20

[run]
seed = 2024
"""


@pytest.fixture(scope="module")
def city_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("city")
    cfg = root / "city.toml"
    cfg.write_text(CITY)
    out = {}
    for workers in (1, 8):
        d = root / f"w{workers}"
        t0 = time.perf_counter()
        code = main(["sweep", "--config", str(cfg), "--out", str(d), "--threads", str(workers)])
        out[workers] = (code, d, time.perf_counter() - t0)
    return out


def _summary(run_dir):
    with open(run_dir / "summary.csv") as fh:
        return {r["perturbation"]: r for r in csv.DictReader(fh)}


def test_c09_perturbation_ordering(city_runs):
    code, run, seconds = city_runs[1]
    assert code == 0
    assert json.loads((run / "run_meta.json").read_text())["n_cells"] == 1344
    s = _summary(run)
    assert float(s["height"]["sigma_PG_avg"]) > float(s["material"]["sigma_PG_avg"])
    assert float(s["position"]["sigma_MED_avg"]) > 3 * float(s["material"]["sigma_MED_avg"])
    assert seconds < 600


def test_c10_correlation_signs(city_runs):
    code, run, _ = city_runs[1]
    assert code == 0
    # all perturbation types combined, points pooled over every transmitter
    with open(run / "dispersion.csv") as fh:
        rows = {(r["x"], r["y"]): float(r["pearson_r"]) for r in csv.DictReader(fh) if r["kind"] == "all"}
    assert rows[("med_std_ns", "ds_std_ns")] > 0
    assert rows[("pg_std_db", "outage_freq")] < 0


def test_c11_worker_count_does_not_change_outputs(city_runs):
    (c1, a, _), (c8, b, _) = city_runs[1], city_runs[8]
    assert c1 == 0 and c8 == 0

    def tree(root):
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file() and p.name != "run_meta.json"}

    ta, tb = tree(a), tree(b)
    assert len(ta) > 100 and set(ta) == set(tb)
    assert [n for n in ta if ta[n] != tb[n]] == []


# -- 12. scene round-trip ---------------------------------------------------------------------

def test_c12_scene_roundtrip(tmp_path):
    for seed in range(100):
        s = random_scene(seed)
        d1, d2 = tmp_path / f"a{seed}", tmp_path / f"b{seed}"
        export_scene(s, d1)
        back = import_scene(d1)
        assert scenes_equal(s, back), seed
        export_scene(back, d2)
        for p in sorted(d1.rglob("*")):
            if p.is_file():
                assert p.read_bytes() == (d2 / p.relative_to(d1)).read_bytes(), (seed, p.name)
