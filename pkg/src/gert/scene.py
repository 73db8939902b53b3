"""Triangle-mesh scenes built from footprints and terrain, with manifest + PLY I/O."""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

from .emwave import Material, get_material
from .geodata import (BuildingFootprint, HeightSource, TerrainGrid, ring_is_simple,
                      shoelace_area)

try:
    import tomllib
except ModuleNotFoundError:  # py < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

MIN_TRIANGLE_AREA = 1e-6
TERRAIN_ID = 0
MANIFEST_NAME = "scene.toml"


class SceneError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    object_id: int
    object_kind: str  # "building" | "terrain"

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.object_kind not in ("building", "terrain"):
            raise SceneError(f"unknown object kind {self.object_kind!r}")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def validate(self):
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise SceneError(f"object {self.object_id}: vertex index out of range")
        if len(self.triangles) and self.triangle_areas().min() < MIN_TRIANGLE_AREA:
            raise SceneError(f"object {self.object_id}: zero-area triangle")


@dataclass
class BuildingInfo:
    base_elevation_m: float
    height_m: float
    footprint: BuildingFootprint


@dataclass
class Scene:
    meshes: list[TriangleMesh]
    materials: dict[int, Material]
    buildings: dict[int, BuildingInfo]
    origin: tuple[float, float]
    frequency_hz: float = 3.5e9
    material_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.frequency_hz <= 0:
            raise SceneError("frequency_hz must be > 0")
        terrain = [m for m in self.meshes if m.object_kind == "terrain"]
        if len(terrain) != 1:
            raise SceneError(f"scene needs exactly one terrain mesh, found {len(terrain)}")
        ids = [m.object_id for m in self.meshes]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate object ids")
        for m in self.meshes:
            m.validate()
            if m.object_kind == "building" and m.object_id not in self.materials:
                raise SceneError(f"building {m.object_id} has no material")

    @property
    def terrain(self) -> TriangleMesh:
        return next(m for m in self.meshes if m.object_kind == "terrain")

    def mesh(self, object_id: int) -> TriangleMesh:
        for m in self.meshes:
            if m.object_id == object_id:
                return m
        raise KeyError(object_id)

    def building_meshes(self) -> list[TriangleMesh]:
        return [m for m in self.meshes if m.object_kind == "building"]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        allv = np.concatenate([m.vertices for m in self.meshes])
        return allv.min(axis=0), allv.max(axis=0)

    def copy(self) -> "Scene":
        return copy.deepcopy(self)

    def terrain_elevation(self, x, y) -> np.ndarray:
        """Terrain height under local (x, y) by point-in-triangle lookup (nan outside)."""
        t = self.terrain
        pts = np.column_stack([np.ravel(x), np.ravel(y)]).astype(np.float64)
        v = t.vertices[t.triangles]
        a, b, c = v[:, 0], v[:, 1], v[:, 2]
        out = np.full(len(pts), np.nan)
        for s in range(0, len(pts), 512):
            p = pts[s:s + 512, None, :]
            d = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
            l1 = ((b[:, 1] - c[:, 1]) * (p[..., 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (p[..., 1] - c[:, 1])) / d
            l2 = ((c[:, 1] - a[:, 1]) * (p[..., 0] - c[:, 0]) + (a[:, 0] - c[:, 0]) * (p[..., 1] - c[:, 1])) / d
            l3 = 1.0 - l1 - l2
            inside = (l1 >= -1e-12) & (l2 >= -1e-12) & (l3 >= -1e-12)
            first = np.argmax(inside, axis=1)
            hit = inside[np.arange(len(first)), first]
            z = l1 * a[:, 2] + l2 * b[:, 2] + l3 * c[:, 2]
            out[s:s + 512] = np.where(hit, z[np.arange(len(first)), first], np.nan)
        return out.reshape(np.shape(x))


# -- triangulation ----------------------------------------------------------------

def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _in_triangle(p, a, b, c, tol):
    return _cross(a, b, p) >= -tol and _cross(b, c, p) >= -tol and _cross(c, a, p) >= -tol


def triangulate_polygon(ring) -> np.ndarray:
    """Ear-clipping triangulation of a simple CCW ring; returns (n-2, 3) CCW index triples."""
    pts = np.asarray(ring, dtype=np.float64)
    n = len(pts)
    if n < 3:
        raise SceneError("polygon needs at least 3 vertices")
    if not ring_is_simple(pts):
        raise SceneError("self-intersecting polygon")
    if shoelace_area(pts) <= 0:
        raise SceneError("polygon ring must be counter-clockwise")
    scale = float(np.ptp(pts, axis=0).max()) or 1.0
    tol = 1e-12 * scale * scale
    idx = list(range(n))
    tris = []
    while len(idx) > 3:
        m = len(idx)
        best = None
        for k in range(m):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % m]
            a, b, c = pts[i0], pts[i1], pts[i2]
            if _cross(a, b, c) <= tol:
                continue
            blocked = False
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                p = pts[j]
                if (p == a).all() or (p == b).all() or (p == c).all():
                    continue
                if _in_triangle(p, a, b, c, tol):
                    blocked = True
                    break
            if not blocked:
                best = k
                break
        if best is None:
            raise SceneError("ear clipping failed; polygon is not simple")
        m = len(idx)
        tris.append((idx[best - 1], idx[best], idx[(best + 1) % m]))
        idx.pop(best)
    tris.append((idx[0], idx[1], idx[2]))
    return np.array(tris, dtype=np.int64)


def triangulate_footprint(fp: BuildingFootprint) -> np.ndarray:
    return triangulate_polygon(fp.outer_ring)


# -- meshes -------------------------------------------------------------------------

def extrude_building(fp: BuildingFootprint, terrain: TerrainGrid | None,
                     object_id: int | None = None) -> TriangleMesh:
    """Walls + flat roof; the base sits at the lowest terrain sample under the ring."""
    if fp.height_m <= 0:
        raise SceneError(f"building {fp.id}: height must be > 0")
    ring = fp.outer_ring
    n = len(ring)
    if terrain is None:
        base = 0.0
    else:
        x0, y0, x1, y1 = terrain.extent
        tol = 1e-6
        if (ring[:, 0].min() < x0 - tol or ring[:, 0].max() > x1 + tol
                or ring[:, 1].min() < y0 - tol or ring[:, 1].max() > y1 + tol):
            raise SceneError(f"building {fp.id}: footprint outside terrain extent")
        base = float(np.min(terrain.sample(ring[:, 0], ring[:, 1])))
    top = base + fp.height_m
    verts = np.empty((2 * n, 3))
    verts[:n, :2] = ring
    verts[:n, 2] = base
    verts[n:, :2] = ring
    verts[n:, 2] = top
    i = np.arange(n)
    j = (i + 1) % n
    walls = np.empty((2 * n, 3), dtype=np.int64)
    walls[0::2] = np.column_stack([i, j, n + j])
    walls[1::2] = np.column_stack([i, n + j, n + i])
    roof = triangulate_polygon(ring) + n
    mesh = TriangleMesh(verts, np.concatenate([walls, roof]),
                        fp.id if object_id is None else object_id, "building")
    mesh.validate()
    return mesh


def build_terrain_mesh(terrain: TerrainGrid, object_id: int = TERRAIN_ID) -> TriangleMesh:
    nr, nc, cs = terrain.nrows, terrain.ncols, terrain.cell_size_m
    xs = terrain.x0 + cs * np.arange(nc)
    ys = terrain.y0 + cs * np.arange(nr)
    gx, gy = np.meshgrid(xs, ys)
    verts = np.column_stack([gx.ravel(), gy.ravel(), terrain.elevation.ravel()])
    ii, jj = np.meshgrid(np.arange(nr - 1), np.arange(nc - 1), indexing="ij")
    v00 = (ii * nc + jj).ravel()
    v10, v01 = v00 + 1, v00 + nc
    v11 = v01 + 1
    tris = np.empty((2 * len(v00), 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])
    return TriangleMesh(verts, tris, object_id, "terrain")


@dataclass
class MaterialPolicy:
    building: str = "itu_concrete"
    terrain: str = "itu_medium_dry_ground"
    overrides: dict[int, str] = field(default_factory=dict)  # footprint id -> material name
    custom: dict[str, Material] = field(default_factory=dict)

    def resolve(self, name: str) -> Material:
        if name in self.custom:
            return self.custom[name]
        return get_material(name)


def assemble_scene(footprints, terrain: TerrainGrid, material_policy: MaterialPolicy | None = None,
                   frequency_hz: float = 3.5e9, origin=(0.0, 0.0)) -> Scene:
    """Extrude every footprint over the terrain and tag materials.

    Object ids follow input order: the terrain is 0 and footprint ``k`` becomes ``k + 1``.
    """
    policy = material_policy or MaterialPolicy()
    meshes = [build_terrain_mesh(terrain, TERRAIN_ID)]
    materials = {TERRAIN_ID: policy.resolve(policy.terrain)}
    names = {TERRAIN_ID: policy.terrain}
    buildings = {}
    for k, fp in enumerate(footprints):
        oid = k + 1
        mesh = extrude_building(fp, terrain, oid)
        meshes.append(mesh)
        name = policy.overrides.get(fp.id, policy.building)
        materials[oid] = policy.resolve(name)
        names[oid] = name
        base = float(mesh.vertices[:, 2].min())
        buildings[oid] = BuildingInfo(base, fp.height_m, fp)
    return Scene(meshes, materials, buildings, tuple(origin), frequency_hz, names)


# -- PLY + manifest I/O ---------------------------------------------------------------

_PLY_FACE_DTYPE = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])


def write_ply(path, vertices, triangles):
    vertices = np.ascontiguousarray(vertices, dtype="<f8")
    faces = np.empty(len(triangles), dtype=_PLY_FACE_DTYPE)
    faces["n"] = 3
    faces["idx"] = np.asarray(triangles, dtype="<i4")
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(vertices)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              f"element face {len(faces)}\n"
              "property list uchar int vertex_indices\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vertices.tobytes())
        fh.write(faces.tobytes())


def read_ply(path):
    path = Path(path)
    if not path.is_file():
        raise SceneError(f"mesh file not found: {path}")
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise SceneError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise SceneError(f"{path}: only binary little-endian PLY is supported")
    counts = {}
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            counts[parts[1]] = int(parts[2])
    nv, nf = counts.get("vertex", 0), counts.get("face", 0)
    body = raw[end + len(b"end_header\n"):]
    need = nv * 24 + nf * _PLY_FACE_DTYPE.itemsize
    if len(body) != need:
        raise SceneError(f"{path}: truncated or oversized body ({len(body)} bytes, expected {need})")
    verts = np.frombuffer(body[:nv * 24], dtype="<f8").reshape(nv, 3).astype(np.float64)
    faces = np.frombuffer(body[nv * 24:], dtype=_PLY_FACE_DTYPE)
    if nf and np.any(faces["n"] != 3):
        raise SceneError(f"{path}: only triangular faces are supported")
    tris = faces["idx"].astype(np.int64)
    if nf and (tris.min() < 0 or tris.max() >= nv):
        raise SceneError(f"{path}: vertex index out of range")
    return verts, tris


def _material_entry(mat: Material) -> dict:
    entry = {"eps_r": float(mat.eps_r), "sigma": float(mat.sigma_s_per_m)}
    if mat.itu_params is not None:
        entry["itu_params"] = [float(v) for v in mat.itu_params]
    return entry


def export_scene(scene: Scene, directory) -> Path:
    """Write ``scene.toml`` plus one binary PLY per mesh; returns the manifest path."""
    directory = Path(directory)
    (directory / "meshes").mkdir(parents=True, exist_ok=True)
    objects = []
    for mesh in scene.meshes:
        rel = f"meshes/object_{mesh.object_id:05d}.ply"
        write_ply(directory / rel, mesh.vertices, mesh.triangles)
        obj = {"id": int(mesh.object_id), "kind": mesh.object_kind, "mesh_file": rel,
               "n_vertices": int(len(mesh.vertices)), "n_triangles": int(len(mesh.triangles))}
        mat = scene.materials.get(mesh.object_id)
        if mat is not None:
            obj["material"] = scene.material_names.get(mesh.object_id, mat.name)
            obj["material_label"] = mat.name
            obj.update(_material_entry(mat))
        info = scene.buildings.get(mesh.object_id)
        if info is not None:
            fp = info.footprint
            obj["base_elevation_m"] = float(info.base_elevation_m)
            obj["height_m"] = float(info.height_m)
            obj["footprint_id"] = int(fp.id)
            obj["footprint_height_m"] = float(fp.height_m)
            obj["height_source"] = fp.height_source.value
            obj["footprint"] = [[float(x), float(y)] for x, y in fp.outer_ring]
        objects.append(obj)
    manifest = {"format": "gert-scene", "version": 1,
                "origin": [float(scene.origin[0]), float(scene.origin[1])],
                "frequency_hz": float(scene.frequency_hz), "object": objects}
    path = directory / MANIFEST_NAME
    with open(path, "wb") as fh:
        tomli_w.dump(manifest, fh)
    return path


def import_scene(directory) -> Scene:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.is_file():
        raise SceneError(f"manifest not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise SceneError(f"{path}: {exc}") from exc
    if doc.get("format") != "gert-scene":
        raise SceneError(f"{path}: not a gert scene manifest")
    meshes, materials, names, buildings = [], {}, {}, {}
    for obj in doc.get("object", []):
        oid = int(obj["id"])
        verts, tris = read_ply(directory / obj["mesh_file"])
        if len(verts) != obj.get("n_vertices", len(verts)) or len(tris) != obj.get("n_triangles", len(tris)):
            raise SceneError(f"{obj['mesh_file']}: manifest/mesh size mismatch for object {oid}")
        meshes.append(TriangleMesh(verts, tris, oid, obj["kind"]))
        if "eps_r" in obj:
            itu = tuple(obj["itu_params"]) if "itu_params" in obj else None
            materials[oid] = Material(obj.get("material_label", obj["material"]),
                                      obj["eps_r"], obj["sigma"], itu)
            names[oid] = obj["material"]
        if "footprint" in obj:
            fp = BuildingFootprint(int(obj["footprint_id"]), np.array(obj["footprint"], dtype=np.float64),
                                   float(obj["footprint_height_m"]), HeightSource(obj["height_source"]))
            buildings[oid] = BuildingInfo(float(obj["base_elevation_m"]), float(obj["height_m"]), fp)
    return Scene(meshes, materials, buildings, tuple(doc["origin"]), float(doc["frequency_hz"]), names)


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Bit-exact comparison of geometry and value-exact comparison of materials."""
    if a.origin != b.origin or a.frequency_hz != b.frequency_hz or len(a.meshes) != len(b.meshes):
        return False
    for ma, mb in zip(a.meshes, b.meshes):
        if (ma.object_id != mb.object_id or ma.object_kind != mb.object_kind
                or ma.vertices.shape != mb.vertices.shape or ma.triangles.shape != mb.triangles.shape
                or ma.vertices.tobytes() != mb.vertices.tobytes()
                or not np.array_equal(ma.triangles, mb.triangles)):
            return False
    if a.materials != b.materials:
        return False
    if a.buildings.keys() != b.buildings.keys():
        return False
    for k, ia in a.buildings.items():
        ib = b.buildings[k]
        if (ia.base_elevation_m != ib.base_elevation_m or ia.height_m != ib.height_m
                or ia.footprint.outer_ring.tobytes() != ib.footprint.outer_ring.tobytes()):
            return False
    return True


def scene_files(directory) -> list[str]:
    return sorted(os.listdir(Path(directory) / "meshes"))
