"""Building footprint and terrain ingestion.

Geographic inputs (WGS84 GeoJSON, Esri ASCII grids) are mapped into a local
east/north metric frame anchored at a region origin using an equirectangular
projection, which is accurate to well below a decimeter over the few-km
regions a ray-tracing scene covers.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_HEIGHT_M = 6.0
METERS_PER_LEVEL = 3.0
MIN_FOOTPRINT_AREA_M2 = 1.0


class GeoDataError(ValueError):
    """Raised for malformed footprint or elevation inputs."""


@dataclass(frozen=True)
class GeoRegion:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    origin_lat: float | None = None
    origin_lon: float | None = None

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise ValueError("lat_min must be < lat_max")
        if not self.lon_min < self.lon_max:
            raise ValueError("lon_min must be < lon_max")
        if self.origin_lat is None:
            object.__setattr__(self, "origin_lat", 0.5 * (self.lat_min + self.lat_max))
        if self.origin_lon is None:
            object.__setattr__(self, "origin_lon", 0.5 * (self.lon_min + self.lon_max))
        if not (self.lat_min <= self.origin_lat <= self.lat_max
                and self.lon_min <= self.origin_lon <= self.lon_max):
            raise ValueError("region origin must lie inside the region")

    @property
    def origin(self) -> tuple[float, float]:
        return (self.origin_lat, self.origin_lon)

    def local_bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the region in the local frame."""
        x0, y0 = latlon_to_local(self.lat_min, self.lon_min, self.origin)
        x1, y1 = latlon_to_local(self.lat_max, self.lon_max, self.origin)
        return (x0, y0, x1, y1)


class HeightSource(str, enum.Enum):
    EXPLICIT = "explicit"
    LEVELS_RULE = "levels_rule"
    DEFAULT_RULE = "default_rule"


@dataclass
class BuildingFootprint:
    id: int
    outer_ring: np.ndarray  # (n, 2) local meters, CCW, implicitly closed
    height_m: float
    height_source: HeightSource = HeightSource.EXPLICIT

    def __post_init__(self):
        self.outer_ring = np.asarray(self.outer_ring, dtype=np.float64).reshape(-1, 2)
        if self.height_m <= 0:
            raise ValueError(f"footprint {self.id}: height must be > 0, got {self.height_m}")

    @property
    def area(self) -> float:
        return shoelace_area(self.outer_ring)


@dataclass
class TerrainGrid:
    """Regular elevation lattice in the local frame.

    ``elevation[i, j]`` is the sample at ``(x0 + j * cell_size_m, y0 + i * cell_size_m)``;
    row 0 is the southern edge.
    """

    ncols: int
    nrows: int
    cell_size_m: float
    x0: float
    y0: float
    elevation: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.elevation = np.asarray(self.elevation, dtype=np.float64)
        if self.ncols < 2 or self.nrows < 2:
            raise ValueError("terrain grid needs at least 2x2 samples")
        if self.cell_size_m <= 0:
            raise ValueError("cell_size_m must be > 0")
        if self.elevation.shape != (self.nrows, self.ncols):
            raise ValueError(
                f"elevation shape {self.elevation.shape} != ({self.nrows}, {self.ncols})")
        if not np.all(np.isfinite(self.elevation)):
            raise ValueError("terrain grid contains non-finite samples")

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0,
                self.x0 + (self.ncols - 1) * self.cell_size_m,
                self.y0 + (self.nrows - 1) * self.cell_size_m)

    def sample(self, x, y):
        """Bilinear elevation at local (x, y); points outside are clamped to the edge."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        u = np.clip((x - self.x0) / self.cell_size_m, 0.0, self.ncols - 1)
        v = np.clip((y - self.y0) / self.cell_size_m, 0.0, self.nrows - 1)
        j = np.minimum(np.floor(u).astype(int), self.ncols - 2)
        i = np.minimum(np.floor(v).astype(int), self.nrows - 2)
        fu = u - j
        fv = v - i
        e = self.elevation
        return ((1 - fu) * (1 - fv) * e[i, j] + fu * (1 - fv) * e[i, j + 1]
                + (1 - fu) * fv * e[i + 1, j] + fu * fv * e[i + 1, j + 1])

    @classmethod
    def flat(cls, xmin, ymin, xmax, ymax, z=0.0, cell_size_m=None) -> "TerrainGrid":
        """Flat grid covering the rectangle; a single cell unless ``cell_size_m`` is given."""
        w, h = xmax - xmin, ymax - ymin
        if cell_size_m is None:
            if not math.isclose(w, h):
                # one square cell must cover both sides
                side = max(w, h)
                return cls(2, 2, side, xmin, ymin, np.full((2, 2), float(z)))
            cell_size_m = w
        ncols = int(math.ceil(w / cell_size_m - 1e-9)) + 1
        nrows = int(math.ceil(h / cell_size_m - 1e-9)) + 1
        return cls(ncols, nrows, cell_size_m, xmin, ymin, np.full((nrows, ncols), float(z)))


# -- projection -------------------------------------------------------------

def latlon_to_local(lat, lon, origin):
    """Equirectangular projection of (lat, lon) degrees to local (x east, y north) meters."""
    lat0, lon0 = origin
    k = EARTH_RADIUS_M * math.pi / 180.0
    x = k * (np.asarray(lon, dtype=np.float64) - lon0) * math.cos(math.radians(lat0))
    y = k * (np.asarray(lat, dtype=np.float64) - lat0)
    if np.ndim(x) == 0:
        return float(x), float(y)
    return x, y


def local_to_latlon(x, y, origin):
    """Exact inverse of :func:`latlon_to_local`."""
    lat0, lon0 = origin
    k = EARTH_RADIUS_M * math.pi / 180.0
    lat = np.asarray(y, dtype=np.float64) / k + lat0
    lon = np.asarray(x, dtype=np.float64) / (k * math.cos(math.radians(lat0))) + lon0
    if np.ndim(lat) == 0:
        return float(lat), float(lon)
    return lat, lon


# -- polygon helpers ----------------------------------------------------------

def shoelace_area(ring) -> float:
    """Signed area of an implicitly closed ring (positive when CCW)."""
    r = np.asarray(ring, dtype=np.float64)
    x, y = r[:, 0], r[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def ring_is_simple(ring) -> bool:
    """True when no two non-adjacent edges of the closed ring touch or cross."""
    r = np.asarray(ring, dtype=np.float64)
    n = len(r)
    if n < 3:
        return False
    for i in range(n):
        a1, a2 = r[i], r[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(a1, a2, r[j], r[(j + 1) % n]):
                return False
    return True


def clean_ring(ring, tol: float = 1e-9) -> np.ndarray:
    """Drop the closing duplicate, repeated vertices and collinear vertices."""
    r = [tuple(p) for p in np.asarray(ring, dtype=np.float64)]
    if len(r) > 1 and np.allclose(r[0], r[-1], atol=tol, rtol=0):
        r = r[:-1]
    out = []
    for p in r:
        if not out or abs(p[0] - out[-1][0]) > tol or abs(p[1] - out[-1][1]) > tol:
            out.append(p)
    if len(out) > 1 and abs(out[0][0] - out[-1][0]) <= tol and abs(out[0][1] - out[-1][1]) <= tol:
        out.pop()
    changed = True
    while changed and len(out) >= 3:
        changed = False
        for i in range(len(out)):
            a, b, c = out[i - 1], out[i], out[(i + 1) % len(out)]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            scale = max(1.0, math.hypot(c[0] - a[0], c[1] - a[1]))
            if abs(cross) <= tol * scale:
                out.pop(i)
                changed = True
                break
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def clip_ring_to_box(ring, xmin, ymin, xmax, ymax) -> np.ndarray:
    """Sutherland-Hodgman clip of a ring against an axis-aligned box."""
    pts = [tuple(p) for p in np.asarray(ring, dtype=np.float64)]
    planes = [(0, xmin, 1), (0, xmax, -1), (1, ymin, 1), (1, ymax, -1)]
    for axis, bound, sign in planes:
        if not pts:
            break
        inside = [sign * (p[axis] - bound) >= 0 for p in pts]
        out = []
        for k in range(len(pts)):
            cur, prev = pts[k], pts[k - 1]
            cin, pin = inside[k], inside[k - 1]
            if cin != pin:
                t = (bound - prev[axis]) / (cur[axis] - prev[axis])
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            if cin:
                out.append(cur)
        pts = out
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


# -- footprints ---------------------------------------------------------------

def _as_float(value):
    if value is None or isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        token = value.strip().split()[0] if value.strip() else ""
        token = token.rstrip("m")
        try:
            return float(token)
        except ValueError:
            return None
    return None


def _height_for(props, default_height_m, meters_per_level):
    h = _as_float(props.get("height"))
    if h is not None and h > 0:
        return h, HeightSource.EXPLICIT
    levels = _as_float(props.get("levels", props.get("building:levels")))
    if levels is not None and levels > 0:
        return levels * meters_per_level, HeightSource.LEVELS_RULE
    return default_height_m, HeightSource.DEFAULT_RULE


def _load_json(data):
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        line = data.splitlines()[exc.lineno - 1] if data.splitlines() else ""
        raise GeoDataError(
            f"malformed GeoJSON at line {exc.lineno}, column {exc.colno}: {exc.msg}: {line.strip()[:80]!r}"
        ) from exc


@dataclass
class FootprintStats:
    polygons_seen: int = 0
    outside_region: int = 0
    degenerate_dropped: int = 0
    non_simple_dropped: int = 0


def parse_footprints_with_stats(data, region: GeoRegion, *, default_height_m=DEFAULT_HEIGHT_M,
                                meters_per_level=METERS_PER_LEVEL):
    doc = _load_json(data)
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise GeoDataError("GeoJSON document must be a FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise GeoDataError("FeatureCollection has no 'features' list")

    xmin, ymin, xmax, ymax = region.local_bounds()
    stats = FootprintStats()
    footprints = []
    poly_index = 0
    for fi, feat in enumerate(features):
        if not isinstance(feat, dict) or feat.get("type") != "Feature":
            raise GeoDataError(f"feature {fi}: not a GeoJSON Feature")
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        coords = geom.get("coordinates")
        if gtype == "Polygon":
            polygons = [coords]
        elif gtype == "MultiPolygon":
            polygons = coords
        else:
            raise GeoDataError(f"feature {fi}: unsupported geometry type {gtype!r}")
        props = feat.get("properties") or {}
        height, source = _height_for(props, default_height_m, meters_per_level)
        for poly in polygons:
            pid = poly_index
            poly_index += 1
            stats.polygons_seen += 1
            try:
                outer = np.asarray(poly[0], dtype=np.float64)[:, :2]
            except (IndexError, TypeError, ValueError) as exc:
                raise GeoDataError(f"feature {fi}: malformed polygon coordinates") from exc
            x, y = latlon_to_local(outer[:, 1], outer[:, 0], region.origin)
            ring = clip_ring_to_box(np.column_stack([x, y]), xmin, ymin, xmax, ymax)
            if len(ring) == 0:
                stats.outside_region += 1
                continue
            ring = clean_ring(ring)
            if len(ring) < 3 or abs(shoelace_area(ring)) < MIN_FOOTPRINT_AREA_M2:
                stats.degenerate_dropped += 1
                continue
            if shoelace_area(ring) < 0:
                ring = ring[::-1].copy()
            if not ring_is_simple(ring):
                stats.non_simple_dropped += 1
                continue
            footprints.append(BuildingFootprint(pid, ring, height, source))
    if stats.degenerate_dropped:
        logger.warning("dropped %d degenerate footprint polygon(s) (area < %.1f m^2)",
                       stats.degenerate_dropped, MIN_FOOTPRINT_AREA_M2)
    if stats.non_simple_dropped:
        logger.warning("dropped %d self-intersecting footprint polygon(s)", stats.non_simple_dropped)
    return footprints, stats


def parse_footprints(data, region: GeoRegion, **kwargs) -> list[BuildingFootprint]:
    """Parse a GeoJSON FeatureCollection into footprints in the region's local frame.

    Polygons are clipped to the region box; holes are ignored.  Heights come
    from the ``height`` property, else ``levels`` (or ``building:levels``)
    times ``meters_per_level``, else ``default_height_m``.
    """
    return parse_footprints_with_stats(data, region, **kwargs)[0]


# -- elevation ------------------------------------------------------------------

_REQUIRED_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def _fill_nodata(values: np.ndarray, mask: np.ndarray) -> int:
    """Replace masked cells by their nearest valid cell; ties go to the first in row-major order."""
    bad = np.argwhere(mask)
    good = np.argwhere(~mask)
    if len(bad) == 0:
        return 0
    if len(good) == 0:
        raise GeoDataError("elevation grid contains only NODATA values")
    for start in range(0, len(bad), 256):
        chunk = bad[start:start + 256]
        d2 = ((chunk[:, None, :] - good[None, :, :]) ** 2).sum(axis=2)
        nearest = good[np.argmin(d2, axis=1)]  # argmin keeps the first (row-major) tie
        values[chunk[:, 0], chunk[:, 1]] = values[nearest[:, 0], nearest[:, 1]]
    return len(bad)


def parse_dem(data, region: GeoRegion | None = None, *, crs: str = "local"):
    """Parse an Esri ASCII grid.  Returns ``(TerrainGrid, nodata_fill_count)``.

    With ``crs="local"`` header coordinates are meters in the region's local
    frame (the layout written by :mod:`gert.fetch`).  With ``crs="wgs84"`` they
    are degrees; samples are projected and resampled onto a square metric
    lattice.  When a region is given the grid is cropped to it (plus one cell).
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("ascii", errors="replace")
    tokens = data.split()
    header = {}
    pos = 0
    while pos + 1 < len(tokens) and tokens[pos][0].isalpha():
        header[tokens[pos].lower()] = tokens[pos + 1]
        pos += 2
    if "xllcenter" in header:
        header.setdefault("xllcorner", header["xllcenter"])
    if "yllcenter" in header:
        header.setdefault("yllcorner", header["yllcenter"])
    for key in _REQUIRED_KEYS:
        if key not in header:
            raise GeoDataError(f"missing header key: {key}")
    try:
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        cs = float(header["cellsize"])
        xll, yll = float(header["xllcorner"]), float(header["yllcorner"])
        nodata = float(header["nodata_value"]) if "nodata_value" in header else None
    except ValueError as exc:
        raise GeoDataError(f"bad header value: {exc}") from exc
    centered = "xllcenter" in header
    body = tokens[pos:]
    if len(body) != ncols * nrows:
        raise GeoDataError(f"body has {len(body)} values, expected nrows*ncols = {nrows * ncols}")
    try:
        values = np.array(body, dtype=np.float64).reshape(nrows, ncols)
    except ValueError as exc:
        raise GeoDataError(f"non-numeric elevation value: {exc}") from exc
    mask = ~np.isfinite(values)
    if nodata is not None:
        mask |= values == nodata
    filled = _fill_nodata(values, mask)  # ties resolved in file (north-first) order
    values = values[::-1].copy()

    half = 0.0 if centered else 0.5 * cs
    if crs == "local":
        grid = TerrainGrid(ncols, nrows, cs, xll + half, yll + half, values)
    elif crs == "wgs84":
        if region is None:
            raise GeoDataError("a region is required to project a WGS84 grid")
        grid = _resample_geographic(values, xll + half, yll + half, cs, region)
    else:
        raise ValueError(f"unknown crs {crs!r}")
    if region is not None:
        grid = _crop(grid, region.local_bounds())
    return grid, filled


def _resample_geographic(values, lon0, lat0, cs_deg, region):
    nrows, ncols = values.shape
    x0, y0 = latlon_to_local(lat0, lon0, region.origin)
    x1, y1 = latlon_to_local(lat0 + (nrows - 1) * cs_deg, lon0 + (ncols - 1) * cs_deg, region.origin)
    dx = (x1 - x0) / (ncols - 1)
    dy = (y1 - y0) / (nrows - 1)
    step = min(dx, dy)
    nc = max(2, int(math.floor((x1 - x0) / step + 1e-9)) + 1)
    nr = max(2, int(math.floor((y1 - y0) / step + 1e-9)) + 1)
    src = TerrainGrid(ncols, nrows, 1.0, 0.0, 0.0, values)
    xs = x0 + step * np.arange(nc)
    ys = y0 + step * np.arange(nr)
    gx, gy = np.meshgrid((xs - x0) / dx, (ys - y0) / dy)
    return TerrainGrid(nc, nr, step, x0, y0, src.sample(gx, gy))


def _crop(grid: TerrainGrid, bounds) -> TerrainGrid:
    xmin, ymin, xmax, ymax = bounds
    cs = grid.cell_size_m
    j0 = max(0, int(math.floor((xmin - grid.x0) / cs)))
    j1 = min(grid.ncols - 1, int(math.ceil((xmax - grid.x0) / cs)))
    i0 = max(0, int(math.floor((ymin - grid.y0) / cs)))
    i1 = min(grid.nrows - 1, int(math.ceil((ymax - grid.y0) / cs)))
    if j1 - j0 < 1 or i1 - i0 < 1:
        raise GeoDataError("elevation grid does not overlap the region")
    return TerrainGrid(j1 - j0 + 1, i1 - i0 + 1, cs, grid.x0 + j0 * cs, grid.y0 + i0 * cs,
                       grid.elevation[i0:i1 + 1, j0:j1 + 1].copy())
