"""Monte Carlo sweep over transmitters, perturbation families and a receiver grid,
with censored per-cell aggregation and the analysis products built on it."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import DEFAULT_PG_THRESHOLD_DB, batch_metrics
from .perturb import PerturbationKind, PerturbationSpec, apply_perturbation
from .scene import Scene
from .tracer import TraceConfig, TraceEngine

logger = logging.getLogger(__name__)

RX_HEIGHT_M = 1.5
STD_FIELDS = ("pg_std_db", "med_std_ns", "ds_std_ns", "k_std_db")
SAMPLE_FIELDS = ("pg_db", "med_ns", "ds_ns", "k_db")
DISPERSION_FIELDS = STD_FIELDS + ("outage_freq",)
LOW_CONFIDENCE_CELLS = 10


class SweepError(RuntimeError):
    pass


# -- receiver grid ------------------------------------------------------------------------

def points_in_polygon(x, y, ring) -> np.ndarray:
    """Even-odd rule, vectorized over points."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inside = np.zeros(x.shape, dtype=bool)
    xr, yr = ring[:, 0], ring[:, 1]
    n = len(ring)
    for i in range(n):
        x1, y1 = xr[i], yr[i]
        x2, y2 = xr[(i + 1) % n], yr[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xi)
    return inside


@dataclass
class RxGrid:
    points: np.ndarray  # (N, 3) receiver positions
    ij: np.ndarray  # (N, 2) lattice (row, col) indices
    nx: int
    ny: int
    x_start: float
    y_start: float
    spacing_m: float
    height_m: float = RX_HEIGHT_M
    _dist: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.points)

    def distance_to(self, tx) -> np.ndarray:
        """Horizontal distance of every cell to ``tx`` (cached)."""
        key = (float(tx[0]), float(tx[1]))
        d = self._dist.get(key)
        if d is None:
            d = np.hypot(self.points[:, 0] - key[0], self.points[:, 1] - key[1])
            self._dist[key] = d
        return d

    def raster(self, values) -> np.ndarray:
        """(ny, nx) image with nan where no cell exists; row 0 is the southern row."""
        img = np.full((self.ny, self.nx), np.nan)
        img[self.ij[:, 0], self.ij[:, 1]] = values
        return img


def build_rx_grid(scene: Scene, spacing_m: float = 5.0, height_m: float = RX_HEIGHT_M,
                  x_start: float | None = None, y_start: float | None = None,
                  exclude_footprints: bool = True, bounds=None) -> RxGrid:
    """Lattice of receivers ``height_m`` above the terrain, skipping building interiors."""
    if spacing_m <= 0:
        raise ValueError("spacing_m must be > 0")
    t = scene.terrain.vertices
    xmin, ymin = t[:, 0].min(), t[:, 1].min()
    xmax, ymax = t[:, 0].max(), t[:, 1].max()
    if bounds is not None:
        xmin, ymin = max(xmin, bounds[0]), max(ymin, bounds[1])
        xmax, ymax = min(xmax, bounds[2]), min(ymax, bounds[3])
    x0 = xmin + spacing_m / 2 if x_start is None else x_start
    y0 = ymin + spacing_m / 2 if y_start is None else y_start
    nx = int(math.floor((xmax - x0) / spacing_m + 1e-9)) + 1
    ny = int(math.floor((ymax - y0) / spacing_m + 1e-9)) + 1
    if nx < 1 or ny < 1:
        raise ValueError("receiver grid is empty")
    ii, jj = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    x = x0 + jj * spacing_m
    y = y0 + ii * spacing_m
    keep = (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)
    if exclude_footprints:
        for info in scene.buildings.values():
            keep &= ~points_in_polygon(x, y, info.footprint.outer_ring)
    x, y, ii, jj = x[keep], y[keep], ii[keep], jj[keep]
    z = scene.terrain_elevation(x, y) + height_m
    ok = np.isfinite(z)
    pts = np.column_stack([x[ok], y[ok], z[ok]])
    return RxGrid(pts, np.column_stack([ii[ok], jj[ok]]), nx, ny, x0, y0, spacing_m, height_m)


# -- per-cell aggregation ----------------------------------------------------------------

@dataclass
class CellMetricsGrid:
    """Per-cell statistics over K perturbations; nan marks an absent std."""

    pg_std_db: np.ndarray
    med_std_ns: np.ndarray
    ds_std_ns: np.ndarray
    k_std_db: np.ndarray
    outage_count: np.ndarray
    alive_count: np.ndarray
    dead_count: np.ndarray  # samples with no path at all
    count: int

    @property
    def outage_freq(self) -> np.ndarray:
        return self.outage_count / self.count

    @property
    def always_dead(self) -> np.ndarray:
        return self.dead_count == self.count

    def field(self, name: str) -> np.ndarray:
        return self.outage_freq if name == "outage_freq" else getattr(self, name)


def _censored_std(samples, alive, min_samples):
    """Sample std (ddof=1) per column over rows where ``alive`` and finite."""
    ok = alive & np.isfinite(samples)
    n = ok.sum(axis=0)
    # shift by one retained sample per column so constant columns give exactly 0
    first = np.argmax(ok, axis=0)
    ref = np.where(ok.any(axis=0), samples[first, np.arange(samples.shape[1])], 0.0)
    samples = samples - ref
    x = np.where(ok, samples, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = x.sum(axis=0) / n
        dev = np.where(ok, samples - mean, 0.0)
        var = (dev * dev).sum(axis=0) / (n - 1)
    return np.where(n >= max(2, min_samples), np.sqrt(var), np.nan)


def aggregate_cells(samples: dict, min_samples: int = 2) -> CellMetricsGrid:
    """Aggregate K samples per cell.

    ``samples`` maps pg_db/med_ns/ds_ns/k_db to (K, n_cells) arrays (nan for
    outage) plus ``connected`` and ``n_paths``.  Only connected samples enter the
    std; infinite K-factors are additionally excluded from the K std.
    """
    alive = np.asarray(samples["connected"], dtype=bool)
    if alive.ndim == 1:
        alive = alive[:, None]
    count = alive.shape[0]
    n_paths = np.asarray(samples.get("n_paths", np.where(alive, 1, 0)))
    if n_paths.ndim == 1:
        n_paths = n_paths[:, None]
    std = {}
    for src, dst in zip(SAMPLE_FIELDS, STD_FIELDS):
        arr = np.asarray(samples[src], dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        std[dst] = _censored_std(arr, alive, min_samples)
    alive_count = alive.sum(axis=0).astype(np.int64)
    return CellMetricsGrid(std["pg_std_db"], std["med_std_ns"], std["ds_std_ns"], std["k_std_db"],
                           (count - alive_count).astype(np.int64), alive_count,
                           (n_paths == 0).sum(axis=0).astype(np.int64), count)


# -- sweep ---------------------------------------------------------------------------------

@dataclass
class SweepResult:
    grid: RxGrid
    tx_list: np.ndarray
    kinds: list
    counts: dict  # kind -> K
    cells: dict  # (tx index, kind) -> CellMetricsGrid
    raw: dict = field(default_factory=dict)  # (tx index, kind) -> samples, when retained
    scene_name: str = "scene"


_WORKER: dict = {}


def _init_worker(scene, grid_points, cfg, specs, tx_list, pg_threshold_db, combine, backend):
    _WORKER.clear()
    _WORKER.update(scene=scene, rx=grid_points, cfg=cfg, specs=specs, tx=tx_list,
                   pg=pg_threshold_db, combine=combine, backend=backend, base={})


def _base_trace(tx_i):
    """Unperturbed geometry trace for one transmitter, cached per process."""
    hit = _WORKER["base"].get(tx_i)
    if hit is None:
        eng = TraceEngine(_WORKER["scene"], _WORKER["cfg"], backend=_WORKER["backend"])
        hit = (eng, eng.trace(_WORKER["tx"][tx_i], _WORKER["rx"]))
        _WORKER["base"][tx_i] = hit
    return hit


def _samples_from_batch(batch, n_rx):
    m = batch_metrics(batch.rx_index, batch.amplitude, batch.delay_s, n_rx, _WORKER["pg"],
                      _WORKER["combine"])
    m["n_paths"] = np.bincount(batch.rx_index, minlength=n_rx)
    return m


def _run_task(task):
    tx_i, spec_i, k = task
    spec = _WORKER["specs"][spec_i]
    rx = _WORKER["rx"]
    tx = _WORKER["tx"][tx_i]
    try:
        scene = apply_perturbation(_WORKER["scene"], spec, k, tx_id=tx_i)
        if spec.kind is PerturbationKind.MATERIAL:
            base_eng, base_batch = _base_trace(tx_i)
            eng = TraceEngine(scene, _WORKER["cfg"], accel=base_eng.accel, backend=_WORKER["backend"])
            batch = eng.reevaluate(base_batch, tx, rx)
        else:
            eng = TraceEngine(scene, _WORKER["cfg"], backend=_WORKER["backend"])
            batch = eng.trace(tx, rx)
        return _samples_from_batch(batch, len(rx))
    except Exception as exc:
        cell = _locate_failure(scene if "scene" in locals() else _WORKER["scene"], tx, rx)
        raise SweepError(f"trace failed for tx={tx_i}, kind={spec.kind.value}, k={k}, "
                         f"cell={cell}: {exc!r}") from exc


def _locate_failure(scene, tx, rx):
    try:
        eng = TraceEngine(scene, _WORKER["cfg"], backend=_WORKER["backend"])
    except Exception:
        return None
    for i, r in enumerate(rx):
        try:
            eng.trace(tx, r[None])
        except Exception:
            return i
    return None


def run_sweep(scene: Scene, tx_list, specs, grid: RxGrid, trace_cfg: TraceConfig | None = None,
              workers: int = 1, pg_threshold_db: float = DEFAULT_PG_THRESHOLD_DB,
              combine: str = "incoherent", min_samples: int = 2, retain_raw: bool = False,
              backend: str | None = None, scene_name: str = "scene") -> SweepResult:
    """Trace every (transmitter, perturbation family, index) and aggregate per cell.

    Tasks are independent; results are collected in task order, so the output
    does not depend on ``workers``.
    """
    cfg = trace_cfg or TraceConfig()
    tx_arr = np.atleast_2d(np.asarray(tx_list, dtype=np.float64))
    specs = list(specs)
    kinds = [s.kind.value for s in specs]
    if len(set(kinds)) != len(kinds):
        raise ValueError("each perturbation kind may appear only once")
    ground = scene.terrain_elevation(tx_arr[:, 0], tx_arr[:, 1])
    if np.any(np.isfinite(ground) & (tx_arr[:, 2] <= ground)):
        raise ValueError("every transmitter must be above the terrain")
    tasks = [(t, s, k) for t in range(len(tx_arr)) for s, spec in enumerate(specs)
             for k in range(spec.count)]
    init = (scene, grid.points, cfg, specs, tx_arr, pg_threshold_db, combine, backend)
    group_size = {(t, s): specs[s].count for t in range(len(tx_arr)) for s in range(len(specs))}
    buffers: dict = {}
    cells, raw = {}, {}

    def consume(task, res):
        t, s, k = task
        buf = buffers.setdefault((t, s), [None] * specs[s].count)
        buf[k] = res
        if all(r is not None for r in buf):
            stacked = {key: np.stack([r[key] for r in buf]) for key in buf[0]}
            cells[(t, kinds[s])] = aggregate_cells(stacked, min_samples)
            if retain_raw:
                raw[(t, kinds[s])] = stacked
            del buffers[(t, s)]

    if workers <= 1:
        _init_worker(*init)
        try:
            for task in tasks:
                consume(task, _run_task(task))
        finally:
            _WORKER.clear()
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=init) as ex:
            for task, res in zip(tasks, ex.map(_run_task, tasks, chunksize=1)):
                consume(task, res)
    assert not buffers and len(cells) == len(group_size)
    return SweepResult(grid, tx_arr, kinds, {s.kind.value: s.count for s in specs}, cells, raw,
                       scene_name)


# -- analysis products ----------------------------------------------------------------------

@dataclass
class ProfileBin:
    lo: float
    hi: float
    n_cells: int
    means: dict  # std field -> mean over cells where present (nan if none)
    counts: dict  # std field -> contributing cells

    @property
    def low_confidence(self) -> bool:
        return self.counts["pg_std_db"] < LOW_CONFIDENCE_CELLS


def distance_profile(cells: CellMetricsGrid, distances, bin_width_m: float = 25.0) -> list[ProfileBin]:
    """Mean of each std field per horizontal-distance bin."""
    if bin_width_m <= 0:
        raise ValueError("bin_width_m must be > 0")
    d = np.asarray(distances, dtype=np.float64)
    idx = np.floor(d / bin_width_m).astype(np.int64)
    out = []
    for b in np.unique(idx):
        sel = idx == b
        means, counts = {}, {}
        for name in STD_FIELDS:
            v = cells.field(name)[sel]
            v = v[np.isfinite(v)]
            counts[name] = int(v.size)
            means[name] = float(v.mean()) if v.size else math.nan
        out.append(ProfileBin(b * bin_width_m, (b + 1) * bin_width_m, int(sel.sum()), means, counts))
    return out


@dataclass
class DispersionPair:
    x: str
    y: str
    n: int
    r: float | None = None
    mean: tuple | None = None
    semi_axes: tuple | None = None  # (major, minor), 2 sigma
    angle_deg: float | None = None  # major axis from +x

    @property
    def defined(self) -> bool:
        return self.r is not None


def covariance_ellipse(cov) -> tuple[tuple[float, float], float]:
    """2-sigma semi-axes (major, minor) and major-axis angle in degrees."""
    w, v = np.linalg.eigh(np.asarray(cov, dtype=np.float64))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    axes = tuple(float(2.0 * math.sqrt(max(x, 0.0))) for x in w)
    ang = math.degrees(math.atan2(v[1, 0], v[0, 0]))
    if ang <= -90.0:
        ang += 180.0
    elif ang > 90.0:
        ang -= 180.0
    return axes, ang


def dispersion_pairs(points: dict, fields=DISPERSION_FIELDS) -> list[DispersionPair]:
    """Pearson r and a 2-sigma covariance ellipse for every pair of fields.

    ``points`` maps field name to a 1-D array (one entry per tx/cell point);
    each pair uses the observations where both values are present.
    """
    out = []
    for a, b in itertools.combinations(fields, 2):
        x = np.asarray(points[a], dtype=np.float64)
        y = np.asarray(points[b], dtype=np.float64)
        ok = np.isfinite(x) & np.isfinite(y)
        x, y = x[ok], y[ok]
        pair = DispersionPair(a, b, int(x.size))
        if x.size >= 3:
            cov = np.cov(np.vstack([x, y]), ddof=1)
            sx, sy = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
            if sx > 0 and sy > 0:
                pair.r = float(np.clip(cov[0, 1] / (sx * sy), -1.0, 1.0))
                pair.mean = (float(x.mean()), float(y.mean()))
                pair.semi_axes, pair.angle_deg = covariance_ellipse(cov)
        out.append(pair)
    return out


def dispersion_points(result: SweepResult, kinds=None) -> dict:
    """Pooled per-(tx, cell) points for the dispersion analysis."""
    kinds = result.kinds if kinds is None else kinds
    pts = {f: [] for f in DISPERSION_FIELDS}
    for (t, kind), cells in sorted(result.cells.items()):
        if kind not in kinds:
            continue
        for f in DISPERSION_FIELDS:
            pts[f].append(cells.field(f))
    return {f: np.concatenate(v) if v else np.empty(0) for f, v in pts.items()}


@dataclass
class OutageHistogram:
    counts: np.ndarray  # index = outage count 0..K, always-dead cells excluded
    always_dead: int


def outage_histogram(cells_list) -> OutageHistogram:
    """Histogram over cells of the number of perturbations in outage (pooled over inputs)."""
    cells_list = list(cells_list)
    k = cells_list[0].count
    counts = np.zeros(k + 1, dtype=np.int64)
    dead = 0
    for c in cells_list:
        if c.count != k:
            raise ValueError("cannot pool histograms with different K")
        d = c.always_dead
        dead += int(d.sum())
        counts += np.bincount(c.outage_count[~d], minlength=k + 1)
    return OutageHistogram(counts, dead)


@dataclass
class SummaryRow:
    scene: str
    kind: str
    stats: dict  # metric -> (avg, min, max)
    per_tx_variance: dict  # metric -> list of per-tx mean variances


SUMMARY_METRICS = (("PG", "pg_std_db"), ("MED", "med_std_ns"), ("DS", "ds_std_ns"), ("K", "k_std_db"))


def summary_table(result: SweepResult) -> list[SummaryRow]:
    """Per kind: sqrt of the mean (over transmitters) of the per-tx mean cell variance."""
    rows = []
    n_tx = len(result.tx_list)
    for kind in result.kinds:
        stats, per_tx = {}, {}
        for label, fld in SUMMARY_METRICS:
            v = []
            for t in range(n_tx):
                s = result.cells[(t, kind)].field(fld)
                s = s[np.isfinite(s)]
                v.append(float(np.mean(s * s)) if s.size else math.nan)
            arr = np.array(v)
            fin = arr[np.isfinite(arr)]
            per_tx[label] = v
            if fin.size:
                stats[label] = (math.sqrt(fin.mean()), math.sqrt(fin.min()), math.sqrt(fin.max()))
            else:
                stats[label] = (math.nan, math.nan, math.nan)
        rows.append(SummaryRow(result.scene_name, kind, stats, per_tx))
    return rows


# -- writers ---------------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def write_pgm(path: Path, img: np.ndarray) -> dict:
    """8-bit binary PGM, linear min/max mapping; nan pixels are written as 0."""
    fin = img[np.isfinite(img)]
    lo = float(fin.min()) if fin.size else 0.0
    hi = float(fin.max()) if fin.size else 0.0
    scale = 254.0 / (hi - lo) if hi > lo else 0.0
    pix = np.where(np.isfinite(img), 1.0 + np.round((img - lo) * scale), 0.0).astype(np.uint8)
    ny, nx = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(pix[::-1].tobytes())  # north row first
    return {"min": lo, "max": hi, "nodata_value": 0, "levels": [1, 255]}


def write_outputs(result: SweepResult, out_dir, bin_width_m: float = 25.0, heatmaps: bool = True):
    """Write the CSV/PGM products of a sweep into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = result.grid
    for (t, kind), cells in sorted(result.cells.items()):
        dist = grid.distance_to(result.tx_list[t])
        rows = zip(grid.points[:, 0], grid.points[:, 1], dist, cells.pg_std_db, cells.med_std_ns,
                   cells.ds_std_ns, cells.k_std_db, cells.outage_freq, cells.alive_count)
        _write_csv(out / f"cells_{t}_{kind}.csv",
                   ["x", "y", "distance_m", "pg_std_db", "med_std_ns", "ds_std_ns", "k_std_db",
                    "outage_freq", "alive_count"], rows)
        if heatmaps:
            for fld in DISPERSION_FIELDS:
                meta = write_pgm(out / f"heat_{t}_{kind}_{fld}.pgm", grid.raster(cells.field(fld)))
                meta.update(field=fld, tx=t, kind=kind, nx=grid.nx, ny=grid.ny,
                            x_start=grid.x_start, y_start=grid.y_start, spacing_m=grid.spacing_m)
                (out / f"heat_{t}_{kind}_{fld}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for kind in result.kinds:
        rows = []
        for t in range(len(result.tx_list)):
            for b in distance_profile(result.cells[(t, kind)], grid.distance_to(result.tx_list[t]),
                                      bin_width_m):
                rows.append([t, b.lo, b.hi, b.n_cells, b.low_confidence]
                            + [b.means[f] for f in STD_FIELDS] + [b.counts[f] for f in STD_FIELDS])
        _write_csv(out / f"profile_{kind}.csv",
                   ["tx", "bin_lo_m", "bin_hi_m", "n_cells", "low_confidence"] + list(STD_FIELDS)
                   + [f"n_{f}" for f in STD_FIELDS], rows)
        per_tx = [outage_histogram([result.cells[(t, kind)]]) for t in range(len(result.tx_list))]
        pooled = outage_histogram(result.cells[(t, kind)] for t in range(len(result.tx_list)))
        k = result.counts[kind]
        rows = [[i] + [h.counts[i] for h in per_tx] + [pooled.counts[i]] for i in range(k + 1)]
        rows.append(["always_dead"] + [h.always_dead for h in per_tx] + [pooled.always_dead])
        _write_csv(out / f"outage_hist_{kind}.csv",
                   ["outage_count"] + [f"tx{t}" for t in range(len(per_tx))] + ["pooled"], rows)
    rows = []
    for group in result.kinds + ["pooled"]:
        kinds = result.kinds if group == "pooled" else [group]
        for p in dispersion_pairs(dispersion_points(result, kinds)):
            mean = p.mean or (None, None)
            axes = p.semi_axes or (None, None)
            rows.append([group, p.x, p.y, p.n, p.r, mean[0], mean[1], axes[0], axes[1], p.angle_deg])
    _write_csv(out / "dispersion.csv", ["kind", "x", "y", "n", "pearson_r", "mean_x", "mean_y",
                                        "semi_major", "semi_minor", "angle_deg"], rows)
    rows = []
    for row in summary_table(result):
        vals = []
        for label, _ in SUMMARY_METRICS:
            vals += list(row.stats[label])
        rows.append([row.scene, row.kind] + vals)
    header = ["scene", "perturbation"]
    for label, _ in SUMMARY_METRICS:
        header += [f"sigma_{label}_avg", f"sigma_{label}_min", f"sigma_{label}_max"]
    _write_csv(out / "summary.csv", header, rows)
    if result.raw:
        raw_dir = out / "raw"
        raw_dir.mkdir(exist_ok=True)
        for (t, kind), samples in sorted(result.raw.items()):
            for key in sorted(samples):
                np.save(raw_dir / f"raw_{t}_{kind}_{key}.npy", samples[key])
        np.save(raw_dir / "rx_points.npy", grid.points)
        np.save(raw_dir / "rx_ij.npy", grid.ij)
        np.save(raw_dir / "tx_points.npy", result.tx_list)


def load_raw(out_dir, kinds, n_tx) -> dict:
    raw_dir = Path(out_dir) / "raw"
    raw = {}
    for t in range(n_tx):
        for kind in kinds:
            samples = {}
            for key in SAMPLE_FIELDS + ("connected", "n_paths"):
                p = raw_dir / f"raw_{t}_{kind}_{key}.npy"
                if not p.is_file():
                    raise FileNotFoundError(f"raw samples missing: {p}")
                samples[key] = np.load(p)
            raw[(t, kind)] = samples
    return raw


def result_from_raw(out_dir, kinds, scene_name="scene", min_samples=2) -> SweepResult:
    """Rebuild a SweepResult from retained raw samples (no tracing)."""
    raw_dir = Path(out_dir) / "raw"
    pts = np.load(raw_dir / "rx_points.npy")
    ij = np.load(raw_dir / "rx_ij.npy")
    tx = np.load(raw_dir / "tx_points.npy")
    meta = json.loads((Path(out_dir) / "grid.json").read_text())
    grid = RxGrid(pts, ij, meta["nx"], meta["ny"], meta["x_start"], meta["y_start"],
                  meta["spacing_m"], meta["height_m"])
    raw = load_raw(out_dir, kinds, len(tx))
    cells = {key: aggregate_cells(s, min_samples) for key, s in raw.items()}
    counts = {k: int(raw[(0, k)]["connected"].shape[0]) for k in kinds}
    return SweepResult(grid, tx, list(kinds), counts, cells, raw, scene_name)


def write_grid_meta(grid: RxGrid, out_dir):
    meta = {"nx": grid.nx, "ny": grid.ny, "x_start": grid.x_start, "y_start": grid.y_start,
            "spacing_m": grid.spacing_m, "height_m": grid.height_m, "n_cells": len(grid)}
    (Path(out_dir) / "grid.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def default_workers() -> int:
    return os.cpu_count() or 1
