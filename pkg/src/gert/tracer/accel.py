"""Ray-casting acceleration: a flat BVH over all scene triangles, planar facets
and convex diffraction edges.

Ray queries have two implementations with identical semantics: BVH traversal
kernels (numba when available) and brute-force vectorized numpy.  Ties on the
hit distance resolve to the lowest triangle index in both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from .._jit import njit
from ..scene import Scene

LEAF_SIZE = 4
NORMAL_TOL = 1e-9
SEGMENT_TRIM_M = 1e-6


@dataclass
class Facets:
    """Maximal sets of coplanar, edge-adjacent triangles of one object."""

    normal: np.ndarray  # (F, 3) unit outward normals
    offset: np.ndarray  # (F,)  plane n.x = offset
    object_id: np.ndarray  # (F,)
    tri_ptr: np.ndarray  # (F+1,) CSR into tri_idx
    tri_idx: np.ndarray  # triangle ids (scene order)
    hull_ptr: np.ndarray  # (F+1,) CSR into hull_pts
    hull_pts: np.ndarray  # convex hull vertices, CCW about the normal

    def __len__(self):
        return len(self.offset)


@dataclass
class Edges:
    """Convex building edges usable as diffracting wedges."""

    a: np.ndarray  # (E, 3) start point
    t: np.ndarray  # (E, 3) unit direction
    length: np.ndarray
    n0: np.ndarray  # face-0 outward normal
    t0: np.ndarray  # unit in-face direction of face 0, away from the edge
    nn: np.ndarray
    tn: np.ndarray
    wedge_n: np.ndarray  # exterior angle / pi
    object_id: np.ndarray
    facet0: np.ndarray
    facetn: np.ndarray

    def __len__(self):
        return len(self.length)


@dataclass
class AccelStructure:
    v0: np.ndarray  # (T, 3) triangle vertices in scene order
    v1: np.ndarray
    v2: np.ndarray
    tri_object: np.ndarray  # (T,) object id per triangle
    tri_facet: np.ndarray  # (T,) facet id per triangle
    # BVH (depth-first layout); leaves index bvh_tris[start:start+count]
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray  # -1 for leaves; right child is node_right
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    bvh_tris: np.ndarray
    facets: Facets
    edges: Edges

    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    def intersect(self, origins, directions, tmin=0.0, tmax=np.inf, backend=None):
        """Nearest hits for a batch of rays: (t, triangle id) with (inf, -1) on a miss."""
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
        if _resolve(backend) == "numpy":
            return brute_force_intersect(self.v0, self.v1, self.v2, o, d, tmin, tmax)
        return _bvh_intersect_batch(o, d, float(tmin), float(tmax), *self._bvh_args())

    def segments_blocked(self, a, b, trim=SEGMENT_TRIM_M, backend=None) -> np.ndarray:
        a = np.ascontiguousarray(np.atleast_2d(a), dtype=np.float64)
        b = np.ascontiguousarray(np.atleast_2d(b), dtype=np.float64)
        if _resolve(backend) == "numpy":
            return brute_force_blocked(self.v0, self.v1, self.v2, a, b, trim)
        return _bvh_blocked_batch(a, b, trim, *self._bvh_args())

    def _bvh_args(self):
        return (self.v0, self.v1, self.v2, self.node_lo, self.node_hi, self.node_left,
                self.node_right, self.node_start, self.node_count, self.bvh_tris)


def _resolve(backend):
    from .. import _jit
    if backend is None:
        return "numba" if _jit.use_numba() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


# -- construction --------------------------------------------------------------------

def _build_bvh(lo, hi):
    """Median-split BVH over primitive boxes; returns flat arrays + primitive order."""
    cent = 0.5 * (lo + hi)
    n_prim = len(lo)
    order = np.arange(n_prim)
    nodes_lo, nodes_hi, left, right, start, count = [], [], [], [], [], []

    def new_node():
        nodes_lo.append(None)
        nodes_hi.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    stack = [(new_node(), 0, n_prim)]
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        nodes_lo[node] = lo[idx].min(axis=0) if e > s else np.full(3, np.inf)
        nodes_hi[node] = hi[idx].max(axis=0) if e > s else np.full(3, -np.inf)
        if e - s <= LEAF_SIZE:
            start[node], count[node] = s, e - s
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        srt = idx[np.argsort(c[:, axis], kind="stable")]
        order[s:e] = srt
        mid = s + (e - s) // 2
        lch, rch = new_node(), new_node()
        left[node], right[node] = lch, rch
        stack.append((rch, mid, e))
        stack.append((lch, s, mid))
    return (np.array(nodes_lo).reshape(-1, 3), np.array(nodes_hi).reshape(-1, 3),
            np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
            np.array(start, dtype=np.int64), np.array(count, dtype=np.int64), order.astype(np.int64))


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, i):
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]
            i = p[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def _plane_basis(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


def _convex_hull_3d(points, n):
    u, v = _plane_basis(n)
    p2 = np.column_stack([points @ u, points @ v])
    p2u, first = np.unique(np.round(p2, 12), axis=0, return_index=True)
    pts = points[first]
    if len(pts) < 3:
        return pts
    try:
        hull = ConvexHull(p2[first])
        ring = pts[hull.vertices]  # CCW in the (u, v) basis, i.e. about n
    except Exception:  # collinear sliver; keep all points
        ring = pts
    return ring


def _merge_facets(v0, v1, v2, tri_obj, tri_mesh_ids):
    """Union coplanar triangles sharing a mesh edge within one object."""
    nrm = np.cross(v1 - v0, v2 - v0)
    nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    off = np.einsum("ij,ij->i", nrm, v0)
    uf = _UnionFind(len(v0))
    edge_tris: dict = {}
    for t, (oid, tri) in enumerate(zip(tri_obj, tri_mesh_ids)):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            key = (int(oid), min(a, b), max(a, b))
            edge_tris.setdefault(key, []).append(t)
    for tris in edge_tris.values():
        for i in range(len(tris)):
            for j in range(i + 1, len(tris)):
                ti, tj = tris[i], tris[j]
                scale = max(1.0, abs(off[ti]))
                if (nrm[ti] @ nrm[tj] > 1.0 - NORMAL_TOL
                        and abs(off[ti] - off[tj]) <= NORMAL_TOL * scale):
                    uf.union(ti, tj)
    roots = np.array([uf.find(i) for i in range(len(v0))], dtype=np.int64)
    uniq, tri_facet = np.unique(roots, return_inverse=True)
    return nrm, off, tri_facet.astype(np.int64), uniq, edge_tris


def build_facets(v0, v1, v2, tri_obj, tri_mesh_ids):
    nrm, off, tri_facet, roots, edge_tris = _merge_facets(v0, v1, v2, tri_obj, tri_mesh_ids)
    nf = len(roots)
    order = np.argsort(tri_facet, kind="stable")
    counts = np.bincount(tri_facet, minlength=nf)
    tri_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    normal = np.empty((nf, 3))
    offset = np.empty(nf)
    fobj = np.empty(nf, dtype=np.int64)
    hulls = []
    for f in range(nf):
        tris = order[tri_ptr[f]:tri_ptr[f + 1]]
        r = roots[f]
        normal[f], offset[f], fobj[f] = nrm[r], off[r], tri_obj[r]
        pts = np.concatenate([v0[tris], v1[tris], v2[tris]])
        hulls.append(_convex_hull_3d(pts, normal[f]))
    hull_ptr = np.concatenate([[0], np.cumsum([len(h) for h in hulls])]).astype(np.int64)
    hull_pts = np.concatenate(hulls) if hulls else np.empty((0, 3))
    facets = Facets(normal, offset, fobj, tri_ptr, order.astype(np.int64), hull_ptr, hull_pts)
    return facets, tri_facet, edge_tris


def build_edges(v0, v1, v2, tri_obj, tri_mesh_ids, tri_facet, facets, edge_tris, vertex_lookup,
                building_ids):
    rows = []
    for (oid, ia, ib), tris in edge_tris.items():
        if oid not in building_ids or len(tris) != 2:
            continue
        t0, t1 = tris
        f0, f1 = tri_facet[t0], tri_facet[t1]
        if f0 == f1:
            continue
        a = vertex_lookup[oid][ia]
        b = vertex_lookup[oid][ib]
        opp0 = _opposite(v0, v1, v2, tri_mesh_ids, t0, ia, ib)
        opp1 = _opposite(v0, v1, v2, tri_mesh_ids, t1, ia, ib)
        n0, n1 = facets.normal[f0], facets.normal[f1]
        # convex iff each face lies behind the other's plane
        if n0 @ (opp1 - a) >= -1e-9 or n1 @ (opp0 - a) >= -1e-9:
            continue
        d = b - a
        length = float(np.linalg.norm(d))
        t = d / length
        in0 = (opp0 - a) - ((opp0 - a) @ t) * t
        in1 = (opp1 - a) - ((opp1 - a) @ t) * t
        in0 /= np.linalg.norm(in0)
        in1 /= np.linalg.norm(in1)
        interior = math.acos(float(np.clip(in0 @ in1, -1.0, 1.0)))
        rows.append((a, t, length, n0, in0, n1, in1, (2.0 * math.pi - interior) / math.pi, oid, f0, f1))
    if not rows:
        z3 = np.empty((0, 3))
        zi = np.empty(0, dtype=np.int64)
        return Edges(z3, z3, np.empty(0), z3, z3, z3, z3, np.empty(0), zi, zi, zi)
    cols = list(zip(*rows))
    return Edges(np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
                 np.array(cols[4]), np.array(cols[5]), np.array(cols[6]), np.array(cols[7]),
                 np.array(cols[8], dtype=np.int64), np.array(cols[9], dtype=np.int64),
                 np.array(cols[10], dtype=np.int64))


def _opposite(v0, v1, v2, tri_mesh_ids, t, ia, ib):
    for k, vk in enumerate((v0, v1, v2)):
        if tri_mesh_ids[t][k] not in (ia, ib):
            return vk[t]
    raise AssertionError("degenerate triangle")


def build_accel(scene: Scene | None) -> AccelStructure:
    """Flatten the scene into triangle arrays and build BVH, facets and edges."""
    v0s, v1s, v2s, objs, ids = [], [], [], [], []
    lookup = {}
    building_ids = set()
    for mesh in (scene.meshes if scene is not None else []):
        tri = mesh.triangles
        v = mesh.vertices
        v0s.append(v[tri[:, 0]])
        v1s.append(v[tri[:, 1]])
        v2s.append(v[tri[:, 2]])
        objs.append(np.full(len(tri), mesh.object_id, dtype=np.int64))
        ids.append(tri)
        lookup[mesh.object_id] = v
        if mesh.object_kind == "building":
            building_ids.add(mesh.object_id)
    if v0s:
        v0, v1, v2 = (np.ascontiguousarray(np.concatenate(x)) for x in (v0s, v1s, v2s))
        tri_obj = np.concatenate(objs)
        tri_ids = np.concatenate(ids)
    else:
        v0 = v1 = v2 = np.empty((0, 3))
        tri_obj = np.empty(0, dtype=np.int64)
        tri_ids = np.empty((0, 3), dtype=np.int64)
    facets, tri_facet, edge_tris = build_facets(v0, v1, v2, tri_obj, tri_ids)
    edges = build_edges(v0, v1, v2, tri_obj, tri_ids, tri_facet, facets, edge_tris, lookup,
                        building_ids)
    lo = np.minimum(np.minimum(v0, v1), v2)
    hi = np.maximum(np.maximum(v0, v1), v2)
    bvh = _build_bvh(lo, hi)
    return AccelStructure(v0, v1, v2, tri_obj, tri_facet, *bvh, facets, edges)


# -- kernels ---------------------------------------------------------------------------

@njit
def _ray_triangle(ox, oy, oz, dx, dy, dz, a, b, c):
    """Two-sided Moller-Trumbore; returns t or inf."""
    e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    px, py, pz = dy * e2z - dz * e2y, dz * e2x - dx * e2z, dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det == 0.0:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = ox - a[0], oy - a[1], oz - a[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx, qy, qz = sy * e1z - sz * e1y, sz * e1x - sx * e1z, sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@njit
def _box_hit(ox, oy, oz, ix, iy, iz, lo, hi, tmin, tmax):
    t0, t1 = tmin, tmax
    for k in range(3):
        o = ox if k == 0 else (oy if k == 1 else oz)
        inv = ix if k == 0 else (iy if k == 1 else iz)
        if np.isinf(inv):
            if o < lo[k] or o > hi[k]:
                return False
            continue
        ta = (lo[k] - o) * inv
        tb = (hi[k] - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@njit
def _inv(d):
    return np.inf if d == 0.0 else 1.0 / d


@njit
def bvh_nearest(o, d, tmin, tmax, v0, v1, v2, node_lo, node_hi, node_left, node_right,
                node_start, node_count, bvh_tris):
    best_t = np.inf
    best_i = -1
    if len(node_lo) == 0 or len(bvh_tris) == 0:
        return best_t, best_i
    ix, iy, iz = _inv(d[0]), _inv(d[1]), _inv(d[2])
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        lim = best_t if best_t < tmax else tmax
        if not _box_hit(o[0], o[1], o[2], ix, iy, iz, node_lo[node], node_hi[node], tmin, lim):
            continue
        if node_left[node] < 0:
            for k in range(node_start[node], node_start[node] + node_count[node]):
                tri = bvh_tris[k]
                t = _ray_triangle(o[0], o[1], o[2], d[0], d[1], d[2], v0[tri], v1[tri], v2[tri])
                if tmin < t < tmax and (t < best_t or (t == best_t and tri < best_i)):
                    best_t = t
                    best_i = tri
        else:
            stack[sp] = node_right[node]
            sp += 1
            stack[sp] = node_left[node]
            sp += 1
    return best_t, best_i


@njit
def bvh_any_hit(o, d, tmin, tmax, v0, v1, v2, node_lo, node_hi, node_left, node_right,
                node_start, node_count, bvh_tris):
    if len(node_lo) == 0 or len(bvh_tris) == 0:
        return False
    ix, iy, iz = _inv(d[0]), _inv(d[1]), _inv(d[2])
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _box_hit(o[0], o[1], o[2], ix, iy, iz, node_lo[node], node_hi[node], tmin, tmax):
            continue
        if node_left[node] < 0:
            for k in range(node_start[node], node_start[node] + node_count[node]):
                tri = bvh_tris[k]
                t = _ray_triangle(o[0], o[1], o[2], d[0], d[1], d[2], v0[tri], v1[tri], v2[tri])
                if tmin < t < tmax:
                    return True
        else:
            stack[sp] = node_right[node]
            sp += 1
            stack[sp] = node_left[node]
            sp += 1
    return False


@njit
def _lex_greater(a, b):
    for i in range(3):
        if a[i] != b[i]:
            return a[i] > b[i]
    return False


@njit
def segment_blocked(a, b, trim, v0, v1, v2, node_lo, node_hi, node_left, node_right,
                    node_start, node_count, bvh_tris):
    # a fixed endpoint order makes edge-grazing decisions direction independent
    if _lex_greater(a, b):
        a, b = b, a
    d = b - a
    length = np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    if length <= 2.0 * trim:
        return False
    eps = trim / length
    return bvh_any_hit(a, d, eps, 1.0 - eps, v0, v1, v2, node_lo, node_hi, node_left,
                       node_right, node_start, node_count, bvh_tris)


@njit
def _bvh_intersect_batch(o, d, tmin, tmax, v0, v1, v2, node_lo, node_hi, node_left, node_right,
                         node_start, node_count, bvh_tris):
    n = o.shape[0]
    ts = np.empty(n)
    ids = np.empty(n, dtype=np.int64)
    for i in range(n):
        t, tri = bvh_nearest(o[i], d[i], tmin, tmax, v0, v1, v2, node_lo, node_hi,
                             node_left, node_right, node_start, node_count, bvh_tris)
        ts[i] = t
        ids[i] = tri
    return ts, ids


@njit
def _bvh_blocked_batch(a, b, trim, v0, v1, v2, node_lo, node_hi, node_left, node_right,
                       node_start, node_count, bvh_tris):
    n = a.shape[0]
    out = np.empty(n, dtype=np.bool_)
    for i in range(n):
        out[i] = segment_blocked(a[i], b[i], trim, v0, v1, v2, node_lo, node_hi, node_left,
                                 node_right, node_start, node_count, bvh_tris)
    return out


# -- numpy twins --------------------------------------------------------------------------

def _mt_numpy(o, d, v0, v1, v2):
    """(R, T) Moller-Trumbore distances (inf on miss), same arithmetic as the kernel."""
    e1 = (v1 - v0)[None]
    e2 = (v2 - v0)[None]
    dd = d[:, None, :]
    p = np.stack([dd[..., 1] * e2[..., 2] - dd[..., 2] * e2[..., 1],
                  dd[..., 2] * e2[..., 0] - dd[..., 0] * e2[..., 2],
                  dd[..., 0] * e2[..., 1] - dd[..., 1] * e2[..., 0]], axis=-1)
    det = e1[..., 0] * p[..., 0] + e1[..., 1] * p[..., 1] + e1[..., 2] * p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        s = o[:, None, :] - v0[None]
        u = (s[..., 0] * p[..., 0] + s[..., 1] * p[..., 1] + s[..., 2] * p[..., 2]) * inv
        q = np.stack([s[..., 1] * e1[..., 2] - s[..., 2] * e1[..., 1],
                      s[..., 2] * e1[..., 0] - s[..., 0] * e1[..., 2],
                      s[..., 0] * e1[..., 1] - s[..., 1] * e1[..., 0]], axis=-1)
        v = (dd[..., 0] * q[..., 0] + dd[..., 1] * q[..., 1] + dd[..., 2] * q[..., 2]) * inv
        t = (e2[..., 0] * q[..., 0] + e2[..., 1] * q[..., 1] + e2[..., 2] * q[..., 2]) * inv
        ok = (det != 0.0) & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0)
    return np.where(ok, t, np.inf)


def _chunks(n_rays, n_tris, budget=2_000_000):
    step = max(1, budget // max(1, n_tris))
    return range(0, n_rays, step), step


def brute_force_intersect(v0, v1, v2, o, d, tmin=0.0, tmax=np.inf):
    n = len(o)
    ts = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=np.int64)
    if len(v0) == 0:
        return ts, ids
    starts, step = _chunks(n, len(v0))
    for s in starts:
        t = _mt_numpy(o[s:s + step], d[s:s + step], v0, v1, v2)
        t = np.where((t > tmin) & (t < tmax), t, np.inf)
        i = np.argmin(t, axis=1)  # first index among ties
        best = t[np.arange(len(i)), i]
        ts[s:s + step] = best
        ids[s:s + step] = np.where(np.isfinite(best), i, -1)
    return ts, ids


def _lex_greater_rows(a, b):
    out = np.zeros(len(a), dtype=bool)
    undecided = np.ones(len(a), dtype=bool)
    for i in range(3):
        out |= undecided & (a[:, i] > b[:, i])
        undecided &= a[:, i] == b[:, i]
    return out


def brute_force_blocked(v0, v1, v2, a, b, trim=SEGMENT_TRIM_M):
    n = len(a)
    out = np.zeros(n, dtype=bool)
    if len(v0) == 0 or n == 0:
        return out
    swap = _lex_greater_rows(a, b)
    a, b = np.where(swap[:, None], b, a), np.where(swap[:, None], a, b)
    d = b - a
    length = np.linalg.norm(d, axis=1)
    eps = trim / np.where(length > 0, length, 1.0)
    starts, step = _chunks(n, len(v0))
    for s in starts:
        t = _mt_numpy(a[s:s + step], d[s:s + step], v0, v1, v2)
        e = eps[s:s + step, None]
        out[s:s + step] = np.any((t > e) & (t < 1.0 - e), axis=1)
    out &= length > 2.0 * trim
    return out
