"""Command-line entry point: fetch, build, trace, sweep and report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .geodata import GeoRegion, TerrainGrid, latlon_to_local, parse_dem, parse_footprints_with_stats
from .perturb import PerturbationSpec
from .scene import MaterialPolicy, Scene, assemble_scene, export_scene, import_scene
from .synthetic import manhattan_scene
from .tracer import TraceConfig, find_paths

logger = logging.getLogger("gert")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CONFIG_ECHO = "config.toml"
RUN_META = "run_meta.json"


class StageError(RuntimeError):
    """Runtime failure tagged with the pipeline stage and offending input."""

    def __init__(self, stage: str, what: str, exc: BaseException | str):
        super().__init__(f"{stage}: {what}: {exc}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"usage: {message}")


# -- pipeline helpers ---------------------------------------------------------------------

def _region(cfg: RunConfig) -> GeoRegion:
    r = cfg.scene.region
    return GeoRegion(r.lat_min, r.lat_max, r.lon_min, r.lon_max, r.origin_lat, r.origin_lon)


def fetch_inputs(cfg: RunConfig, transport=None) -> dict:
    """Download (or read from cache) whatever the config does not supply as local files."""
    from . import fetch

    out = {}
    region = _region(cfg)
    if cfg.scene.footprints is None:
        src = fetch.FetchSource(cfg.scene.footprint_source)
        out["footprints"] = fetch.fetch_footprints(src, region, transport)
        out["footprints_cache"] = str(fetch.cache_path(src, region))
    if cfg.scene.dem is None and cfg.scene.fetch_dem:
        src = fetch.FetchSource(fetch.SourceKind.USGS_DEM)
        out["dem"] = fetch.fetch_dem(region, src, transport)
        out["dem_cache"] = str(fetch.cache_path(src, region))
    return out


def build_scene(cfg: RunConfig, transport=None) -> Scene:
    s = cfg.scene
    if s.source == "directory":
        try:
            return import_scene(cfg.path(s.directory))
        except Exception as exc:
            raise StageError("build", f"scene directory {cfg.path(s.directory)}", exc) from exc
    policy = MaterialPolicy(building=s.building_material, terrain=s.terrain_material)
    if s.source == "manhattan":
        m = s.manhattan
        try:
            return manhattan_scene(m.blocks, m.block_m, m.street_m, m.height_m, cfg.trace.frequency_hz,
                                   policy)
        except KeyError as exc:
            raise ConfigError(f"scene: {exc.args[0]}") from None
    region = _region(cfg)
    fetched = fetch_inputs(cfg, transport) if (s.footprints is None or s.fetch_dem) else {}
    fp_name = str(cfg.path(s.footprints)) if s.footprints else fetched.get("footprints_cache")
    try:
        raw = cfg.path(s.footprints).read_bytes() if s.footprints else fetched["footprints"]
        fps, stats = parse_footprints_with_stats(raw, region, default_height_m=s.default_height_m,
                                                 meters_per_level=s.meters_per_level)
    except Exception as exc:
        raise StageError("build", f"footprints {fp_name}", exc) from exc
    logger.info("footprints: %d kept of %d polygons", len(fps), stats.polygons_seen)
    if s.dem is not None or "dem" in fetched:
        dem_name = str(cfg.path(s.dem)) if s.dem else fetched["dem_cache"]
        try:
            raw = cfg.path(s.dem).read_bytes() if s.dem else fetched["dem"]
            terrain, filled = parse_dem(raw, region, crs=s.dem_crs if s.dem else "local")
        except Exception as exc:
            raise StageError("build", f"terrain {dem_name}", exc) from exc
        if filled:
            logger.warning("terrain: filled %d NODATA samples", filled)
    else:
        xmin, ymin, xmax, ymax = region.local_bounds()
        terrain = TerrainGrid.flat(xmin, ymin, xmax, ymax, s.terrain_z_m)
    try:
        return assemble_scene(fps, terrain, policy, cfg.trace.frequency_hz, region.origin)
    except KeyError as exc:
        raise ConfigError(f"scene: {exc.args[0]}") from None
    except Exception as exc:
        raise StageError("build", "scene assembly", exc) from exc


def resolve_tx(cfg: RunConfig, scene: Scene) -> np.ndarray:
    out = []
    for i, tx in enumerate(cfg.tx):
        if tx.position is not None:
            p = [float(v) for v in tx.position]
        else:
            x, y = latlon_to_local(tx.lat, tx.lon, scene.origin)
            z = scene.terrain_elevation(np.array([x]), np.array([y]))[0]
            if not np.isfinite(z):
                raise ConfigError(f"tx[{i}]: ({tx.lat}, {tx.lon}) lies outside the scene terrain")
            p = [x, y, float(z) + tx.height_m]
        out.append(p)
    if not out:
        raise ConfigError("tx: at least one [[tx]] entry is required")
    return np.array(out, dtype=np.float64)


def trace_config(cfg: RunConfig) -> TraceConfig:
    t = cfg.trace
    return TraceConfig(t.max_reflection_order, t.diffraction, t.frequency_hz, t.polarization)


def specs_from_config(cfg: RunConfig) -> list[PerturbationSpec]:
    p = cfg.perturbation
    return [PerturbationSpec(k, p.sigma_height_m, p.sigma_position_m, p.material_rel_sigma, p.count,
                             cfg.run.seed, p.per_vertex_position) for k in p.kinds]


def _absolute_paths(cfg: RunConfig) -> RunConfig:
    s = cfg.scene
    scene = dataclasses.replace(s, **{k: str(cfg.path(getattr(s, k)).resolve())
                                      for k in ("footprints", "dem", "directory") if getattr(s, k)})
    return dataclasses.replace(cfg, scene=scene)


def write_echo(cfg: RunConfig, out: Path, extra: dict | None = None, file_run=None):
    """Resolved config (deterministic) plus a metadata file holding anything time-dependent.

    ``threads`` and ``out`` do not influence results, so the echo keeps their
    values from the config file; the effective values go to the metadata.
    """
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg if file_run is None else dataclasses.replace(
        cfg, run=dataclasses.replace(cfg.run, threads=file_run.threads, out=file_run.out))
    (out / CONFIG_ECHO).write_text(dump_config(_absolute_paths(echo)))
    meta = {"gert_version": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "threads": cfg.run.threads, "out": str(out)}
    meta.update(extra or {})
    (out / RUN_META).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------------------

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    run = cfg.run
    if getattr(args, "seed", None) is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed: must be a 64-bit unsigned integer")
        run = dataclasses.replace(run, seed=args.seed)
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads: must be >= 1")
        run = dataclasses.replace(run, threads=args.threads)
    if getattr(args, "out", None) is not None:
        run = dataclasses.replace(run, out=str(Path(args.out).resolve()))
    return dataclasses.replace(cfg, run=run)


def _out_dir(cfg: RunConfig) -> Path:
    return cfg.path(cfg.run.out)


def cmd_fetch(args) -> int:
    cfg = load_config(args.config)
    if cfg.scene.source != "files":
        raise ConfigError("fetch: scene.source must be 'files'")
    got = fetch_inputs(cfg)
    for key in ("footprints_cache", "dem_cache"):
        if key in got:
            print(f"{key.split('_')[0]}: {got[key]}")
    if not got:
        print("nothing to fetch: all inputs are local files")
    return EXIT_OK


def cmd_build(args) -> int:
    base = load_config(args.config)
    cfg = _apply_overrides(base, args)
    scene = build_scene(cfg)
    out = _out_dir(cfg)
    try:
        manifest = export_scene(scene, out / "scene")
    except OSError as exc:
        raise StageError("build", f"output directory {out}", exc) from exc
    write_echo(cfg, out, file_run=base.run)
    print(f"scene: {len(scene.buildings)} buildings, "
          f"{sum(len(m.triangles) for m in scene.meshes)} triangles -> {manifest}")
    return EXIT_OK


def _vec3(text: str, flag: str) -> np.ndarray:
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError:
        v = []
    if len(v) != 3:
        raise ConfigError(f"{flag}: expected x,y,z, got {text!r}")
    return np.array(v)


def cmd_trace(args) -> int:
    tx, rx = _vec3(args.tx, "--tx"), _vec3(args.rx, "--rx")
    try:
        scene = import_scene(args.scene)
    except Exception as exc:
        raise StageError("trace", f"scene {args.scene}", exc) from exc
    try:
        cfg = TraceConfig(args.order, not args.no_diffraction, args.frequency)
    except ValueError as exc:
        raise ConfigError(f"trace: {exc}") from None
    try:
        ps = find_paths(scene, None, tx, rx, cfg)
    except ValueError as exc:
        raise ConfigError(f"trace: {exc}") from None
    from .metrics import compute_metrics

    rows = []
    for i, p in enumerate(sorted(ps.paths, key=lambda p: p.delay_s)):
        gain = 20 * np.log10(abs(p.amplitude)) if p.amplitude != 0 else -np.inf
        rows.append({"index": i, "kind": p.kind, "order": p.order, "delay_ns": p.delay_s * 1e9,
                     "length_m": p.length_m, "gain_db": gain,
                     "phase_deg": float(np.degrees(np.angle(p.amplitude))),
                     "objects": [it.object_id for it in p.interactions],
                     "vertices": p.vertices.tolist()})
    m = compute_metrics(ps)
    if args.json:
        print(json.dumps({"paths": rows, "metrics": dataclasses.asdict(m)}, indent=1, default=str))
        return EXIT_OK
    print(f"{len(rows)} path(s)")
    print(f"{'#':>3} {'kind':<12} {'ord':>3} {'delay_ns':>12} {'length_m':>10} {'gain_db':>9} objects")
    for r in rows:
        print(f"{r['index']:>3} {r['kind']:<12} {r['order']:>3} {r['delay_ns']:>12.4f} "
              f"{r['length_m']:>10.3f} {r['gain_db']:>9.2f} {r['objects']}")
    if m.connected:
        print(f"PG {m.path_gain_db:.2f} dB, MED {m.mean_excess_delay_ns:.2f} ns, "
              f"DS {m.delay_spread_ns:.2f} ns, K {m.k_factor_db:.2f} dB")
    else:
        print("link: outage")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from . import sweep

    base = load_config(args.config)
    cfg = _apply_overrides(base, args)
    scene = build_scene(cfg)
    txs = resolve_tx(cfg, scene)
    g = cfg.grid
    grid = sweep.build_rx_grid(scene, g.spacing_m, g.height_m, g.x_start, g.y_start, bounds=g.bounds)
    if len(grid) == 0:
        raise ConfigError("grid: no receiver cells inside the scene")
    out = _out_dir(cfg)
    write_echo(cfg, out, {"n_cells": len(grid), "n_tx": len(txs)}, base.run)
    t0 = time.perf_counter()
    try:
        result = sweep.run_sweep(scene, txs, specs_from_config(cfg), grid, trace_config(cfg),
                                 cfg.run.threads, cfg.metrics.pg_threshold_db, cfg.metrics.combine,
                                 cfg.metrics.min_samples, cfg.run.retain_raw, cfg.trace.backend,
                                 cfg.scene.source)
    except ValueError as exc:
        raise ConfigError(f"sweep: {exc}") from None
    except Exception as exc:
        raise StageError("sweep", f"config {args.config}", exc) from exc
    elapsed = time.perf_counter() - t0
    sweep.write_grid_meta(grid, out)
    sweep.write_outputs(result, out, cfg.metrics.profile_bin_m, cfg.run.heatmaps)
    meta = json.loads((out / RUN_META).read_text())
    meta.update(finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"), sweep_seconds=round(elapsed, 3))
    (out / RUN_META).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    _print_summary(sweep.summary_table(result))
    print(f"outputs written to {out}")
    return EXIT_OK


def _print_summary(rows):
    print(f"{'perturbation':<16}" + "".join(f"{'s_' + m + ' avg/min/max':>28}" for m in ("PG", "MED", "DS", "K")))
    for r in rows:
        cells = "".join(f"{'%.2f/%.2f/%.2f' % r.stats[m]:>28}" for m in ("PG", "MED", "DS", "K"))
        print(f"{r.kind:<16}{cells}")


def cmd_report(args) -> int:
    from . import sweep

    run_dir = Path(args.run)
    echo = run_dir / CONFIG_ECHO
    cfg = load_config(echo)
    out = Path(args.out) if args.out else run_dir
    try:
        result = sweep.result_from_raw(run_dir, cfg.perturbation.kinds, cfg.scene.source,
                                       cfg.metrics.min_samples)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise StageError("report", f"run directory {run_dir}", exc) from exc
    out.mkdir(parents=True, exist_ok=True)
    sweep.write_grid_meta(result.grid, out)
    result.raw = {} if out == run_dir else result.raw
    sweep.write_outputs(result, out, cfg.metrics.profile_bin_m, cfg.run.heatmaps)
    _print_summary(sweep.summary_table(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gert", description="Urban ray tracing and geometry/material sensitivity sweeps.")
    p.add_argument("--version", action="version", version=f"gert {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fetch", help="download footprints/terrain for the configured region into the cache")
    f.add_argument("--config", required=True)
    f.set_defaults(func=cmd_fetch)

    def common(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--out")

    b = sub.add_parser("build", help="build a scene directory from the configured inputs")
    common(b)
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("trace", help="trace one Tx/Rx pair and print the paths")
    t.add_argument("--scene", required=True, help="scene directory")
    t.add_argument("--tx", required=True, help="x,y,z")
    t.add_argument("--rx", required=True, help="x,y,z")
    t.add_argument("--order", type=int, default=5)
    t.add_argument("--no-diffraction", action="store_true")
    t.add_argument("--frequency", type=float, default=3.5e9)
    t.add_argument("--json", action="store_true")
    t.set_defaults(func=cmd_trace)

    s = sub.add_parser("sweep", help="run the Monte Carlo sweep")
    common(s)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="recompute CSV/PGM products from a sweep's raw samples")
    r.add_argument("--run", required=True, help="sweep output directory")
    r.add_argument("--out", help="write products here instead of the run directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"gert: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"gert {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"gert {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"gert {args.command}: runtime error: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
