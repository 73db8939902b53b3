"""Run configuration: a strict TOML schema with defaults applied and unknown keys rejected."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .perturb import PerturbationKind


class ConfigError(ValueError):
    pass


@dataclass
class RegionConfig:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    origin_lat: float | None = None
    origin_lon: float | None = None


@dataclass
class ManhattanConfig:
    blocks: int = 8
    block_m: float = 20.0
    street_m: float = 30.0
    height_m: float = 20.0


@dataclass
class SceneConfig:
    source: str = "files"  # files | directory | manhattan
    footprints: str | None = None  # GeoJSON path; fetched when absent
    footprint_source: str = "osm_overpass"
    dem: str | None = None  # Esri ASCII path (local frame unless dem_crs = "wgs84")
    dem_crs: str = "local"
    fetch_dem: bool = False  # flat terrain when neither dem nor fetch_dem
    terrain_z_m: float = 0.0
    directory: str | None = None
    default_height_m: float = 6.0
    meters_per_level: float = 3.0
    building_material: str = "itu_concrete"
    terrain_material: str = "itu_medium_dry_ground"
    region: RegionConfig | None = None
    manhattan: ManhattanConfig = field(default_factory=ManhattanConfig)


@dataclass
class TraceSection:
    frequency_hz: float = 3.5e9
    max_reflection_order: int = 5
    diffraction: bool = True
    scattering: bool = False
    antenna: str = "isotropic"
    polarization: str = "vertical"
    backend: str | None = None


@dataclass
class TxConfig:
    position: list | None = None  # local [x, y, z]
    lat: float | None = None
    lon: float | None = None
    height_m: float | None = None  # above terrain, with lat/lon


@dataclass
class GridConfig:
    spacing_m: float = 5.0
    height_m: float = 1.5
    x_start: float | None = None
    y_start: float | None = None
    bounds: list | None = None  # [xmin, ymin, xmax, ymax]


@dataclass
class PerturbationConfig:
    count: int = 50
    sigma_height_m: float = 1.0
    sigma_position_m: float = 0.4
    material_rel_sigma: float = 0.10
    per_vertex_position: bool = False
    kinds: list = field(default_factory=lambda: [k.value for k in PerturbationKind])


@dataclass
class MetricsConfig:
    pg_threshold_db: float = -130.0
    combine: str = "incoherent"
    min_samples: int = 2
    profile_bin_m: float = 25.0


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1
    out: str = "out"
    retain_raw: bool = True
    heatmaps: bool = True


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    trace: TraceSection = field(default_factory=TraceSection)
    tx: list = field(default_factory=list)
    grid: GridConfig = field(default_factory=GridConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunSection = field(default_factory=RunSection)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


_NESTED = {"region": RegionConfig, "manhattan": ManhattanConfig}
_SECTIONS = {"scene": SceneConfig, "trace": TraceSection, "grid": GridConfig,
             "perturbation": PerturbationConfig, "metrics": MetricsConfig, "run": RunSection}


def _coerce(where: str, name: str, ftype: str, value):
    base = ftype.replace(" | None", "")
    if value is None:
        return None
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{name}: expected a number, got {value!r}")
        return float(value)
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}.{name}: expected an integer, got {value!r}")
        return value
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}.{name}: expected true/false, got {value!r}")
        return value
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}.{name}: expected a string, got {value!r}")
        return value
    if base == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{where}.{name}: expected an array, got {value!r}")
        return value
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in _NESTED and cls is SceneConfig:
            kwargs[name] = _build(_NESTED[name], value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(where, name, str(fields[name].type), value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _validate(cfg: RunConfig):
    s, t, p, m = cfg.scene, cfg.trace, cfg.perturbation, cfg.metrics
    if s.source not in ("files", "directory", "manhattan"):
        raise ConfigError(f"scene.source: must be files, directory or manhattan, got {s.source!r}")
    if s.source == "directory" and not s.directory:
        raise ConfigError("scene.directory: required when scene.source = 'directory'")
    if s.source == "files":
        if s.region is None:
            raise ConfigError("scene.region: required when scene.source = 'files'")
        if s.footprint_source not in ("osm_overpass", "ms_footprints"):
            raise ConfigError(f"scene.footprint_source: unknown source {s.footprint_source!r}")
    if s.dem_crs not in ("local", "wgs84"):
        raise ConfigError("scene.dem_crs: must be 'local' or 'wgs84'")
    if t.scattering:
        raise ConfigError("trace.scattering: diffuse scattering is not modeled; set false")
    if t.antenna != "isotropic":
        raise ConfigError("trace.antenna: only 'isotropic' is supported")
    if t.polarization != "vertical":
        raise ConfigError("trace.polarization: only 'vertical' is supported")
    if not 0 <= t.max_reflection_order <= 7:
        raise ConfigError("trace.max_reflection_order: must be in [0, 7]")
    if t.frequency_hz <= 0:
        raise ConfigError("trace.frequency_hz: must be > 0")
    if t.backend not in (None, "numba", "numpy"):
        raise ConfigError("trace.backend: must be 'numba' or 'numpy'")
    for i, tx in enumerate(cfg.tx):
        local = tx.position is not None
        geo = tx.lat is not None or tx.lon is not None
        if local == geo:
            raise ConfigError(f"tx[{i}]: give either position = [x, y, z] or lat/lon/height_m")
        if local and (len(tx.position) != 3
                      or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in tx.position)):
            raise ConfigError(f"tx[{i}].position: expected three numbers")
        if geo and (tx.lat is None or tx.lon is None or tx.height_m is None):
            raise ConfigError(f"tx[{i}]: lat, lon and height_m are all required")
    if cfg.grid.spacing_m <= 0:
        raise ConfigError("grid.spacing_m: must be > 0")
    if cfg.grid.bounds is not None and len(cfg.grid.bounds) != 4:
        raise ConfigError("grid.bounds: expected [xmin, ymin, xmax, ymax]")
    if p.count < 1:
        raise ConfigError("perturbation.count: must be >= 1")
    if min(p.sigma_height_m, p.sigma_position_m, p.material_rel_sigma) < 0:
        raise ConfigError("perturbation: sigmas must be >= 0")
    known = {k.value for k in PerturbationKind}
    bad = [k for k in p.kinds if k not in known]
    if bad or not p.kinds or len(set(p.kinds)) != len(p.kinds):
        raise ConfigError(f"perturbation.kinds: must be distinct values from {sorted(known)}")
    if m.combine not in ("incoherent", "coherent"):
        raise ConfigError("metrics.combine: must be 'incoherent' or 'coherent'")
    if m.min_samples < 2:
        raise ConfigError("metrics.min_samples: must be >= 2")
    if m.profile_bin_m <= 0:
        raise ConfigError("metrics.profile_bin_m: must be > 0")
    if not 0 <= cfg.run.seed < 2 ** 64:
        raise ConfigError("run.seed: must be a 64-bit unsigned integer")
    if cfg.run.threads < 1:
        raise ConfigError("run.threads: must be >= 1")


def config_from_dict(doc: dict, base_dir=".") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a table")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"tx"})
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    kwargs = {name: _build(cls, doc[name], name) for name, cls in _SECTIONS.items() if name in doc}
    txs = doc.get("tx", [])
    if not isinstance(txs, list):
        raise ConfigError("tx: expected an array of tables ([[tx]])")
    kwargs["tx"] = [_build(TxConfig, t, f"tx[{i}]") for i, t in enumerate(txs)]
    cfg = RunConfig(**kwargs, base_dir=Path(base_dir))
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return config_from_dict(doc, path.parent)


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_strip_none(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    """Fully resolved configuration (defaults applied); TOML has no null, so unset keys are omitted."""
    d = dataclasses.asdict(cfg)
    d.pop("base_dir")
    return _strip_none(d)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


EXAMPLE_CONFIG = """\
# gert run configuration.  Unknown keys are rejected.
# Relative paths are resolved against this file's directory.

[scene]
source = "manhattan"          # files | directory | manhattan
# footprints = "buildings.geojson"   # source = "files"; fetched into the cache when omitted
# footprint_source = "osm_overpass"  # or "ms_footprints"
# dem = "terrain.asc"                # Esri ASCII grid; flat terrain when omitted
# fetch_dem = false                  # true: download the USGS 1 m DEM instead
building_material = "itu_concrete"
terrain_material = "itu_medium_dry_ground"

# [scene.region]               # required for source = "files"
# lat_min = 48.135
# lat_max = 48.142
# lon_min = 11.565
# lon_max = 11.575

[scene.manhattan]
blocks = 8
block_m = 20.0
street_m = 30.0
height_m = 20.0

[trace]
frequency_hz = 3.5e9          # 3.5 GHz carrier
antenna = "isotropic"         # isotropic Tx and Rx
polarization = "vertical"
max_reflection_order = 5      # up to 5 reflections
diffraction = true            # edge diffraction on
scattering = false            # no diffuse scattering

[[tx]]
position = [190.0, 200.0, 25.0]   # local x, y, z in meters
# lat = 48.138; lon = 11.57; height_m = 25.0  (height above terrain)

[grid]
spacing_m = 5.0
height_m = 1.5                # receivers 1.5 m above terrain

[perturbation]
count = 50                    # K perturbations per family
sigma_height_m = 1.0
sigma_position_m = 0.4
material_rel_sigma = 0.10     # 10 % of the initial permittivity and conductivity
kinds = ["material", "position", "height", "height_position", "all"]

[metrics]
pg_threshold_db = -130.0      # receiver sensitivity floor for outage
combine = "incoherent"
min_samples = 2
profile_bin_m = 25.0

[run]
seed = 0
threads = 1
out = "out"
retain_raw = true
"""
