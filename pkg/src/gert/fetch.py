"""Optional network clients for footprints and terrain, with an on-disk cache.

Everything downstream accepts local files; these helpers only populate them.
HTTP goes through a ``transport`` callable so that tests can replay recorded
responses without touching the network.

Overpass query used for OSM footprints (``{s},{w},{n},{e}`` is the bbox)::

    [out:json][timeout:{timeout}];
    (
      way["building"]({s},{w},{n},{e});
      relation["building"]["type"="multipolygon"]({s},{w},{n},{e});
    );
    out body;
    >;
    out skel qt;
"""

from __future__ import annotations

import csv
import enum
import gzip
import hashlib
import io
import json
import logging
import math
import os
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .geodata import GeoRegion, TerrainGrid, latlon_to_local, local_to_latlon

logger = logging.getLogger(__name__)

MAX_RETRIES = 5
MS_QUADKEY_LEVEL = 9
OVERPASS_QUERY = """[out:json][timeout:{timeout}];
(
  way["building"]({s},{w},{n},{e});
  relation["building"]["type"="multipolygon"]({s},{w},{n},{e});
);
out body;
>;
out skel qt;
"""

# (method, url, body or None, timeout_s) -> (status, payload)
Transport = Callable[[str, str, "bytes | None", float], "tuple[int, bytes]"]


class FetchError(RuntimeError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class SourceKind(str, enum.Enum):
    OSM_OVERPASS = "osm_overpass"
    MS_FOOTPRINTS = "ms_footprints"
    USGS_DEM = "usgs_dem"


DEFAULT_ENDPOINTS = {
    SourceKind.OSM_OVERPASS: "https://overpass-api.de/api/interpreter",
    SourceKind.MS_FOOTPRINTS: "https://minedbuildings.z5.web.core.windows.net/global-buildings/dataset-links.csv",
    SourceKind.USGS_DEM: ("https://tnmaccess.nationalmap.gov/api/v1/products?"
                          "datasets=Digital%20Elevation%20Model%20(DEM)%201%20meter"
                          "&bbox={w},{s},{e},{n}&prodFormats=GeoTIFF&outputFormat=JSON"),
}


@dataclass(frozen=True)
class FetchSource:
    kind: SourceKind
    endpoint: str | None = None
    timeout_s: float = 120.0
    retry_count: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        if self.endpoint is None:
            object.__setattr__(self, "endpoint", DEFAULT_ENDPOINTS[self.kind])
        if not 0 <= self.retry_count <= MAX_RETRIES:
            raise ValueError(f"retry_count must be in [0, {MAX_RETRIES}]")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")


def urllib_transport(method, url, body, timeout_s):
    req = urllib.request.Request(url, data=body, method=method,
                                 headers={"User-Agent": "gert-fetch/0.1"})
    try:
        with urllib.request.urlopen(req, timeout=timeout_s) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read() or b""


# -- cache --------------------------------------------------------------------------------

def cache_dir() -> Path:
    env = os.environ.get("GERT_CACHE_DIR")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "gert"


def cache_key(source: FetchSource, region: GeoRegion) -> str:
    ident = json.dumps([source.kind.value, source.endpoint,
                        [region.lat_min, region.lat_max, region.lon_min, region.lon_max,
                         region.origin_lat, region.origin_lon]])
    return hashlib.sha256(ident.encode()).hexdigest()[:32]


def cache_path(source: FetchSource, region: GeoRegion) -> Path:
    return cache_dir() / source.kind.value / (cache_key(source, region) + ".bin")


def _cache_write(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# -- HTTP with retries --------------------------------------------------------------------

_LOCKS: dict = {}
_LOCKS_GUARD = threading.Lock()


def _source_lock(kind: SourceKind) -> threading.Lock:
    with _LOCKS_GUARD:
        return _LOCKS.setdefault(kind, threading.Lock())


class Client:
    """Issues requests for one source: one in flight at a time, bounded retries."""

    def __init__(self, source: FetchSource, transport: Transport | None = None,
                 sleep: Callable[[float], None] = time.sleep, backoff_s: float = 2.0):
        self.source = source
        self.transport = transport or urllib_transport
        self.sleep = sleep
        self.backoff_s = backoff_s
        self.calls = 0

    def request(self, url: str, body: bytes | None = None) -> bytes:
        method = "POST" if body is not None else "GET"
        last_status, last_exc = None, None
        for attempt in range(self.source.retry_count + 1):
            if attempt:
                self.sleep(self.backoff_s * 2 ** (attempt - 1))
            with _source_lock(self.source.kind):
                self.calls += 1
                try:
                    status, payload = self.transport(method, url, body, self.source.timeout_s)
                except (OSError, TimeoutError) as exc:
                    last_exc, last_status = exc, None
                    logger.warning("%s: %s failed (attempt %d): %s", self.source.kind.value, url,
                                   attempt + 1, exc)
                    continue
            if 200 <= status < 300:
                return payload
            last_status, last_exc = status, None
            if status not in (408, 429) and status < 500:
                break  # client errors are not retried
            logger.warning("%s: HTTP %d from %s (attempt %d)", self.source.kind.value, status, url,
                           attempt + 1)
        detail = f"HTTP {last_status}" if last_status is not None else repr(last_exc)
        raise FetchError(f"{self.source.kind.value}: request to {url} failed after "
                         f"{self.calls} attempt(s), last error {detail}", last_status)


def _cached(source, region, refresh, produce):
    path = cache_path(source, region)
    if path.is_file() and not refresh:
        return path.read_bytes()
    payload = produce()
    _cache_write(path, payload)
    return payload


def _bbox(region: GeoRegion) -> dict:
    return {"s": region.lat_min, "w": region.lon_min, "n": region.lat_max, "e": region.lon_max}


# -- footprints ---------------------------------------------------------------------------

def _empty_collection(what: str) -> bytes:
    logger.warning("%s: no buildings in region, returning an empty FeatureCollection", what)
    return _dump_collection([])


def _dump_collection(features) -> bytes:
    return json.dumps({"type": "FeatureCollection", "features": features},
                      separators=(",", ":"), sort_keys=True).encode()


def _osm_props(tags: dict) -> dict:
    props = {}
    if "height" in tags:
        props["height"] = tags["height"]
    if "building:levels" in tags:
        props["levels"] = tags["building:levels"]
    return props


def _stitch(ways: list[list[int]]) -> list[list[int]]:
    """Join open way segments into closed rings by matching end nodes."""
    rings, open_ = [], [list(w) for w in ways if len(w) >= 2]
    while open_:
        cur = open_.pop(0)
        progress = True
        while cur[0] != cur[-1] and progress:
            progress = False
            for i, w in enumerate(open_):
                if w[0] == cur[-1]:
                    cur += w[1:]
                elif w[-1] == cur[-1]:
                    cur += w[::-1][1:]
                elif w[-1] == cur[0]:
                    cur = w[:-1] + cur
                elif w[0] == cur[0]:
                    cur = w[::-1][:-1] + cur
                else:
                    continue
                open_.pop(i)
                progress = True
                break
        if cur[0] == cur[-1] and len(cur) >= 4:
            rings.append(cur)
    return rings


def overpass_to_geojson(payload: bytes) -> bytes:
    """Convert an Overpass JSON response to a GeoJSON FeatureCollection."""
    doc = json.loads(payload)
    elements = doc.get("elements", [])
    nodes = {e["id"]: (e["lon"], e["lat"]) for e in elements if e.get("type") == "node"}
    ways = {e["id"]: e for e in elements if e.get("type") == "way"}
    features, member_ways = [], set()

    def ring(ids):
        if any(i not in nodes for i in ids):
            return None
        return [list(nodes[i]) for i in ids]

    for e in elements:
        if e.get("type") != "relation" or "building" not in e.get("tags", {}):
            continue
        outer = [m["ref"] for m in e.get("members", []) if m.get("type") == "way" and m.get("role") == "outer"]
        member_ways.update(outer)
        polys = []
        for r in _stitch([ways[w]["nodes"] for w in outer if w in ways]):
            coords = ring(r)
            if coords:
                polys.append([coords])
        if polys:
            features.append({"type": "Feature", "id": f"relation/{e['id']}",
                             "properties": _osm_props(e["tags"]),
                             "geometry": {"type": "MultiPolygon", "coordinates": polys}})
    for wid, w in ways.items():
        tags = w.get("tags", {})
        if "building" not in tags or wid in member_ways:
            continue
        ids = w.get("nodes", [])
        if len(ids) < 4 or ids[0] != ids[-1]:
            continue
        coords = ring(ids)
        if coords:
            features.append({"type": "Feature", "id": f"way/{wid}", "properties": _osm_props(tags),
                             "geometry": {"type": "Polygon", "coordinates": [coords]}})
    return _dump_collection(features)


def tile_quadkey(lat: float, lon: float, level: int) -> str:
    """Bing Maps quadkey of the Web-Mercator tile containing (lat, lon)."""
    lat = min(max(lat, -85.05112878), 85.05112878)
    n = 2 ** level
    x = int(math.floor((lon + 180.0) / 360.0 * n))
    s = math.sin(math.radians(lat))
    y = int(math.floor((0.5 - math.log((1 + s) / (1 - s)) / (4 * math.pi)) * n))
    x, y = min(max(x, 0), n - 1), min(max(y, 0), n - 1)
    return _xy_quadkey(x, y, level)


def _xy_quadkey(x, y, level):
    digits = []
    for i in range(level, 0, -1):
        mask = 1 << (i - 1)
        digits.append(str((1 if x & mask else 0) + (2 if y & mask else 0)))
    return "".join(digits)


def region_quadkeys(region: GeoRegion, level: int = MS_QUADKEY_LEVEL) -> list[str]:
    """All quadkeys of tiles intersecting the region."""
    a = tile_quadkey(region.lat_max, region.lon_min, level)
    b = tile_quadkey(region.lat_min, region.lon_max, level)

    def xy(q):
        x = y = 0
        for ch in q:
            d = int(ch)
            x, y = (x << 1) | (d & 1), (y << 1) | (d >> 1)
        return x, y

    (x0, y0), (x1, y1) = xy(a), xy(b)
    return [_xy_quadkey(x, y, level) for y in range(y0, y1 + 1) for x in range(x0, x1 + 1)]


def _feature_in_region(feat, region: GeoRegion) -> bool:
    geom = feat.get("geometry") or {}
    coords = geom.get("coordinates")
    if not coords:
        return False
    polys = [coords] if geom.get("type") == "Polygon" else coords
    pts = np.array([p for poly in polys for p in poly[0]], dtype=np.float64)
    return not (pts[:, 0].max() < region.lon_min or pts[:, 0].min() > region.lon_max
                or pts[:, 1].max() < region.lat_min or pts[:, 1].min() > region.lat_max)


def _ms_features(payload: bytes):
    if payload[:2] == b"\x1f\x8b":
        payload = gzip.decompress(payload)
    text = payload.decode("utf-8").strip()
    if text.startswith("{") and '"FeatureCollection"' in text[:200]:
        yield from json.loads(text)["features"]
        return
    for line in text.splitlines():
        line = line.strip()
        if line:
            feat = json.loads(line)
            if feat.get("type") != "Feature":
                feat = {"type": "Feature", "properties": feat.get("properties", {}), "geometry": feat}
            yield feat


def fetch_footprints(source: FetchSource, region: GeoRegion, transport: Transport | None = None,
                     refresh: bool = False, client: Client | None = None) -> bytes:
    """GeoJSON FeatureCollection bytes of the buildings in ``region`` (cached)."""
    client = client or Client(source, transport)
    if source.kind is SourceKind.OSM_OVERPASS:
        def produce():
            q = OVERPASS_QUERY.format(timeout=int(source.timeout_s), **_bbox(region))
            body = urllib.parse.urlencode({"data": q}).encode()
            try:
                out = overpass_to_geojson(client.request(source.endpoint, body))
            except (json.JSONDecodeError, KeyError) as exc:
                raise FetchError(f"osm_overpass: malformed response for region {region}: {exc}") from exc
            return out if json.loads(out)["features"] else _empty_collection("osm_overpass")
    elif source.kind is SourceKind.MS_FOOTPRINTS:
        def produce():
            wanted = set(region_quadkeys(region))
            index = client.request(source.endpoint).decode("utf-8")
            urls = sorted({row["Url"] for row in csv.DictReader(io.StringIO(index))
                           if row.get("QuadKey", "").zfill(MS_QUADKEY_LEVEL) in wanted})
            feats = []
            for url in urls:
                feats += [f for f in _ms_features(client.request(url)) if _feature_in_region(f, region)]
            return _dump_collection(feats) if feats else _empty_collection("ms_footprints")
    else:
        raise ValueError(f"{source.kind.value} is not a footprint source")
    return _cached(source, region, refresh, produce)


# -- terrain ------------------------------------------------------------------------------

_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_GEOKEYS = 34735
_TAG_NODATA = 42113
_KEY_PROJECTED_CRS = 3072
_KEY_GEOGRAPHIC_CRS = 2048


@dataclass
class GeoRaster:
    values: np.ndarray  # (rows, cols), row 0 = north
    x_ul: float  # outer corner of pixel (0, 0) in raster CRS units
    y_ul: float
    dx: float
    dy: float
    epsg: int  # CRS of x/y
    nodata: float | None = None


def read_geotiff(payload: bytes) -> GeoRaster:
    """Single-band GeoTIFF with tiepoint/pixel-scale georeferencing."""
    from PIL import Image

    try:
        img = Image.open(io.BytesIO(payload))
        tags = img.tag_v2
        values = np.asarray(img, dtype=np.float64)
    except Exception as exc:
        raise FetchError(f"unreadable GeoTIFF: {exc}") from exc
    scale = tags.get(_TAG_PIXEL_SCALE)
    tie = tags.get(_TAG_TIEPOINT)
    if scale is None or tie is None:
        raise FetchError("GeoTIFF lacks pixel-scale/tiepoint georeferencing")
    i0, j0, _, x, y, _ = tie[:6]
    keys = tags.get(_TAG_GEOKEYS) or ()
    epsg = 4326
    for k in range(4, len(keys) - 3, 4):
        if keys[k] in (_KEY_PROJECTED_CRS, _KEY_GEOGRAPHIC_CRS) and keys[k + 1] == 0:
            epsg = int(keys[k + 3])
            if keys[k] == _KEY_PROJECTED_CRS:
                break
    nd = tags.get(_TAG_NODATA)
    nodata = float(str(nd).strip("\x00 ")) if nd not in (None, "") else None
    return GeoRaster(values, x - i0 * scale[0], y + j0 * scale[1], float(scale[0]), float(scale[1]),
                     epsg, nodata)


def _to_raster_crs(lat, lon, epsg):
    if epsg in (4326, 4269, 4258):
        return lon, lat
    try:
        from pyproj import Transformer
    except ImportError as exc:
        raise FetchError(f"raster CRS EPSG:{epsg} needs pyproj (pip install gert[fetch])") from exc
    return Transformer.from_crs(4326, epsg, always_xy=True).transform(lon, lat)


def raster_to_local_grid(raster: GeoRaster, region: GeoRegion, cell_size_m: float | None = None,
                         margin_m: float = 0.0) -> TerrainGrid:
    """Bilinearly resample ``raster`` onto a square lattice covering ``region`` in the local frame."""
    xmin, ymin, xmax, ymax = region.local_bounds()
    xmin, ymin, xmax, ymax = xmin - margin_m, ymin - margin_m, xmax + margin_m, ymax + margin_m
    if cell_size_m is None:
        if raster.epsg in (4326, 4269, 4258):
            xs, ys = latlon_to_local(np.array([region.origin_lat, region.origin_lat + raster.dy]),
                                     np.array([region.origin_lon, region.origin_lon + raster.dx]),
                                     region.origin)
            cell_size_m = float(min(abs(xs[1] - xs[0]), abs(ys[1] - ys[0])))
        else:
            cell_size_m = float(min(raster.dx, raster.dy))
    nc = max(2, int(math.ceil((xmax - xmin) / cell_size_m - 1e-9)) + 1)
    nr = max(2, int(math.ceil((ymax - ymin) / cell_size_m - 1e-9)) + 1)
    gx, gy = np.meshgrid(xmin + cell_size_m * np.arange(nc), ymin + cell_size_m * np.arange(nr))
    lat, lon = local_to_latlon(gx, gy, region.origin)
    rx, ry = _to_raster_crs(lat, lon, raster.epsg)
    u = (np.asarray(rx) - raster.x_ul) / raster.dx - 0.5  # pixel-centre coordinates
    v = (raster.y_ul - np.asarray(ry)) / raster.dy - 0.5
    rows, cols = raster.values.shape
    if u.min() < -0.5 or v.min() < -0.5 or u.max() > cols - 0.5 or v.max() > rows - 0.5:
        raise FetchError(f"usgs_dem: region {region} is not covered by the elevation product")
    vals = raster.values.astype(np.float64)
    bad = ~np.isfinite(vals)
    if raster.nodata is not None:
        bad |= vals == raster.nodata
    if bad.any():
        if bad.all():
            raise FetchError(f"usgs_dem: elevation product has no data over region {region}")
        vals = np.where(bad, np.nan, vals)
    u = np.clip(u, 0, cols - 1)
    v = np.clip(v, 0, rows - 1)
    j = np.minimum(np.floor(u).astype(int), max(cols - 2, 0))
    i = np.minimum(np.floor(v).astype(int), max(rows - 2, 0))
    fu, fv = u - j, v - i
    j1, i1 = np.minimum(j + 1, cols - 1), np.minimum(i + 1, rows - 1)
    z = ((1 - fu) * (1 - fv) * vals[i, j] + fu * (1 - fv) * vals[i, j1]
         + (1 - fu) * fv * vals[i1, j] + fu * fv * vals[i1, j1])
    if not np.all(np.isfinite(z)):
        raise FetchError(f"usgs_dem: coverage gap (nodata) inside region {region}")
    return TerrainGrid(nc, nr, cell_size_m, xmin, ymin, z)


def grid_to_ascii(grid: TerrainGrid) -> bytes:
    """Esri ASCII grid in the local frame (cell-centre registered), north row first."""
    lines = [f"ncols {grid.ncols}", f"nrows {grid.nrows}", f"xllcenter {grid.x0!r}",
             f"yllcenter {grid.y0!r}", f"cellsize {grid.cell_size_m!r}", "nodata_value -9999"]
    for row in grid.elevation[::-1]:
        lines.append(" ".join(repr(float(v)) for v in row))
    return ("\n".join(lines) + "\n").encode("ascii")


def _mosaic(rasters: list[GeoRaster]) -> GeoRaster:
    if len(rasters) == 1:
        return rasters[0]
    r0 = rasters[0]
    if any(r.epsg != r0.epsg or not math.isclose(r.dx, r0.dx) or not math.isclose(r.dy, r0.dy)
           for r in rasters):
        raise FetchError("usgs_dem: covering tiles differ in CRS or resolution")
    x0 = min(r.x_ul for r in rasters)
    y0 = max(r.y_ul for r in rasters)
    x1 = max(r.x_ul + r.values.shape[1] * r.dx for r in rasters)
    y1 = min(r.y_ul - r.values.shape[0] * r.dy for r in rasters)
    cols = int(round((x1 - x0) / r0.dx))
    rows = int(round((y0 - y1) / r0.dy))
    out = np.full((rows, cols), np.nan)
    for r in rasters:
        vals = r.values.astype(np.float64)
        if r.nodata is not None:
            vals = np.where(vals == r.nodata, np.nan, vals)
        j = int(round((r.x_ul - x0) / r0.dx))
        i = int(round((y0 - r.y_ul) / r0.dy))
        dst = out[i:i + vals.shape[0], j:j + vals.shape[1]]
        np.copyto(dst, vals, where=np.isnan(dst))
    return GeoRaster(out, x0, y0, r0.dx, r0.dy, r0.epsg, None)


def fetch_dem(region: GeoRegion, source: FetchSource | None = None, transport: Transport | None = None,
              refresh: bool = False, client: Client | None = None, margin_m: float = 10.0) -> bytes:
    """Esri ASCII grid bytes (local frame) of the terrain covering ``region`` (cached)."""
    source = source or FetchSource(SourceKind.USGS_DEM)
    if source.kind is not SourceKind.USGS_DEM:
        raise ValueError(f"{source.kind.value} is not a terrain source")
    client = client or Client(source, transport)

    def produce():
        listing = json.loads(client.request(source.endpoint.format(**_bbox(region))))
        urls = sorted({it["downloadURL"] for it in listing.get("items", []) if it.get("downloadURL")})
        if not urls:
            raise FetchError(f"usgs_dem: no elevation product covers region {region}")
        rasters = [read_geotiff(client.request(u)) for u in urls]
        return grid_to_ascii(raster_to_local_grid(_mosaic(rasters), region, margin_m=margin_m))

    return _cached(source, region, refresh, produce)
