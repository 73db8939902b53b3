"""Deterministic path finding: LOS, image-method reflections and single-edge UTD diffraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import _jit
from ..emwave import C0
from ..scene import Scene
from .accel import AccelStructure, Edges, build_accel
from .paths import (Interaction, Path, PathBatch, PathSet, TraceConfig, diffraction_amplitudes,
                    material_eps, reflection_amplitudes)
from .search import (KIND_DIFFRACTION, KIND_LOS, KIND_REFLECTION, MAX_TREE_NODES, build_image_tree,
                     edge_tx_terms, max_polygon_size, trace_receivers, trace_receivers_numpy)

__all__ = ["AccelStructure", "Path", "PathSet", "TraceConfig", "TraceEngine", "build_accel",
           "find_paths", "evaluate_path", "Interaction", "EdgeInfo"]

_KIND_NAMES = {KIND_LOS: "los", KIND_REFLECTION: "reflection", KIND_DIFFRACTION: "diffraction"}


@dataclass(frozen=True)
class EdgeInfo:
    """Wedge geometry carried by a diffraction interaction."""

    a: tuple
    t: tuple
    length: float
    n0: tuple
    t0: tuple
    nn: tuple
    tn: tuple
    wedge_n: float

    def as_edges(self) -> Edges:
        arr = lambda v: np.array([v], dtype=np.float64)
        return Edges(arr(self.a), arr(self.t), arr(self.length), arr(self.n0), arr(self.t0),
                     arr(self.nn), arr(self.tn), arr(self.wedge_n), np.zeros(1, dtype=np.int64),
                     np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64))


def _backend(backend):
    if backend is None:
        return "numba" if _jit.use_numba() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


class TraceEngine:
    """Traces one scene from any number of transmitters to batches of receivers.

    The scene and its acceleration structure are read-only; image trees are
    cached per transmitter position.
    """

    def __init__(self, scene: Scene, cfg: TraceConfig | None = None,
                 accel: AccelStructure | None = None, backend: str | None = None):
        self.scene = scene
        self.cfg = cfg or TraceConfig()
        self.accel = accel if accel is not None else build_accel(scene)
        self.backend = _backend(backend)
        f = self.cfg.frequency_hz
        self.k = 2.0 * math.pi * f / C0
        self.wavelength = C0 / f
        fac, edges = self.accel.facets, self.accel.edges
        self.fac_eps = material_eps(scene.materials, fac.object_id, f)
        self.edge_eps = material_eps(scene.materials, edges.object_id, f)
        self._slots = max(1, self.cfg.max_reflection_order)
        self._trees = {}

    def image_tree(self, tx):
        key = tuple(float(v) for v in tx)
        tree = self._trees.get(key)
        if tree is None:
            fac = self.accel.facets
            tree = build_image_tree(np.asarray(key), self.cfg.max_reflection_order, fac.normal,
                                    fac.offset, fac.hull_ptr, fac.hull_pts,
                                    max_polygon_size(self.accel, self.cfg.max_reflection_order),
                                    MAX_TREE_NODES)
            self._trees[key] = tree
        return tree

    def trace(self, tx, rxs, backend: str | None = None) -> PathBatch:
        tx = np.ascontiguousarray(tx, dtype=np.float64).reshape(3)
        rxs = np.ascontiguousarray(np.atleast_2d(rxs), dtype=np.float64)
        tree = self.image_tree(tx)
        terms = edge_tx_terms(self.accel, tx)
        want_refl = self.cfg.max_reflection_order > 0
        want_diff = self.cfg.diffraction_enabled and len(self.accel.edges) > 0
        be = self.backend if backend is None else _backend(backend)
        if be == "numba":
            a = self.accel
            e = a.edges
            rx_i, kind, ref, pts = trace_receivers(
                tx, rxs, self._slots, want_refl, want_diff, tree[0], tree[1], tree[2], tree[3],
                tree[4], tree[6], tree[7], a.facets.normal, a.facets.offset, a.facets.tri_ptr,
                a.facets.tri_idx, e.a, e.t, e.length, e.n0, e.nn, terms[0], terms[1], terms[2],
                *a._bvh_args())
        else:
            rx_i, kind, ref, pts = trace_receivers_numpy(tx, rxs, self._slots, want_refl, want_diff,
                                                         tree, self.accel, terms)
        return self._evaluate(tx, rxs, tree, rx_i, kind, ref, pts)

    def reevaluate(self, batch: PathBatch, tx, rxs) -> PathBatch:
        """Recompute amplitudes of an existing path batch with this engine's materials.

        Valid only when the geometry (and hence the accel structure) is unchanged.
        """
        tx = np.ascontiguousarray(tx, dtype=np.float64).reshape(3)
        rxs = np.ascontiguousarray(np.atleast_2d(rxs), dtype=np.float64)
        return self._evaluate(tx, rxs, self.image_tree(tx), batch.rx_index, batch.kind, batch.ref,
                              batch.points)

    def _evaluate(self, tx, rxs, tree, rx_i, kind, ref, pts) -> PathBatch:
        n = len(rx_i)
        node_facet, node_parent, node_depth = tree[0], tree[1], tree[2]
        order = np.zeros(n, dtype=np.int64)
        facet_seq = np.full((n, self._slots), -1, dtype=np.int64)
        refl = kind == KIND_REFLECTION
        order[refl] = node_depth[ref[refl]]
        cur = np.where(refl, ref, 0)
        for _ in range(int(order.max()) if n else 0):
            lev = order - 1 - _
            act = refl & (lev >= 0)
            facet_seq[act, lev[act]] = node_facet[cur[act]]
            cur[act] = node_parent[cur[act]]
        amp = np.zeros(n, dtype=np.complex128)
        length = np.zeros(n)
        angles = np.zeros((n, self._slots))
        txs = np.repeat(tx[None], n, axis=0)
        rx = rxs[rx_i] if n else np.zeros((0, 3))
        ray = kind != KIND_DIFFRACTION
        if ray.any():
            a, l, ang = reflection_amplitudes(txs[ray], rx[ray], pts[ray], order[ray], facet_seq[ray],
                                              self.accel.facets.normal, self.fac_eps, self.k,
                                              self.wavelength)
            amp[ray], length[ray], angles[ray] = a, l, ang[:, :self._slots]
        dif = kind == KIND_DIFFRACTION
        if dif.any():
            a, l, beta = diffraction_amplitudes(txs[dif], rx[dif], pts[dif, 0], ref[dif],
                                                self.accel.edges, self.edge_eps, self.k,
                                                self.wavelength)
            amp[dif], length[dif] = a, l
            angles[dif, 0] = beta
        return PathBatch(rx_i, kind, ref, order, pts, length, length / C0, amp, facet_seq, angles)

    def path_sets(self, tx, rxs, backend: str | None = None) -> list[PathSet]:
        rxs = np.atleast_2d(np.asarray(rxs, dtype=np.float64))
        tx = np.asarray(tx, dtype=np.float64).reshape(3)
        batch = self.trace(tx, rxs, backend)
        out = [PathSet(tx.copy(), r.copy(), [], self.cfg.max_reflection_order,
                       self.cfg.diffraction_enabled) for r in rxs]
        fac, edges = self.accel.facets, self.accel.edges
        for i in range(len(batch.rx_index)):
            r = int(batch.rx_index[i])
            kind = int(batch.kind[i])
            if kind == KIND_LOS:
                verts = np.vstack([tx, rxs[r]])
                inter = ()
            elif kind == KIND_REFLECTION:
                k = int(batch.order[i])
                verts = np.vstack([tx, batch.points[i, :k], rxs[r]])
                inter = tuple(Interaction("reflection", int(fac.object_id[f]), int(f),
                                          float(batch.angles[i, j]))
                              for j, f in enumerate(batch.facet_seq[i, :k]))
            else:
                e = int(batch.ref[i])
                verts = np.vstack([tx, batch.points[i, :1], rxs[r]])
                info = EdgeInfo(tuple(edges.a[e]), tuple(edges.t[e]), float(edges.length[e]),
                                tuple(edges.n0[e]), tuple(edges.t0[e]), tuple(edges.nn[e]),
                                tuple(edges.tn[e]), float(edges.wedge_n[e]))
                inter = (Interaction("diffraction", int(edges.object_id[e]), e,
                                     float(batch.angles[i, 0]), info),)
            out[r].paths.append(Path(_KIND_NAMES[kind], verts, float(batch.delay_s[i]),
                                     complex(batch.amplitude[i]), inter))
        return out


def find_paths(scene: Scene, accel: AccelStructure | None, tx, rx, cfg: TraceConfig | None = None,
               backend: str | None = None) -> PathSet:
    """All valid paths between one transmitter and one receiver."""
    engine = TraceEngine(scene, cfg, accel, backend)
    tx = np.asarray(tx, dtype=np.float64).reshape(3)
    rx = np.asarray(rx, dtype=np.float64).reshape(3)
    ground = scene.terrain_elevation(np.array([tx[0], rx[0]]), np.array([tx[1], rx[1]]))
    for name, p, z in (("tx", tx, ground[0]), ("rx", rx, ground[1])):
        if np.isfinite(z) and p[2] <= z:
            raise ValueError(f"{name} at {tuple(p)} is not above the terrain (z={z:.3f})")
    return engine.path_sets(tx, rx[None])[0]


def evaluate_path(path: Path, scene: Scene, cfg: TraceConfig | None = None) -> tuple[float, complex]:
    """(delay_s, amplitude) of one geometrically valid path."""
    cfg = cfg or TraceConfig()
    f = cfg.frequency_hz
    k = 2.0 * math.pi * f / C0
    lam = C0 / f
    v = np.asarray(path.vertices, dtype=np.float64)
    tx, rx = v[:1], v[-1:]
    if path.kind == "diffraction":
        inter = path.interactions[0]
        edges = inter.edge.as_edges()
        eps = material_eps(scene.materials, [inter.object_id], f)
        amp, length, _ = diffraction_amplitudes(tx, rx, v[1:2], np.zeros(1, dtype=np.int64), edges,
                                                eps, k, lam)
    else:
        order = len(v) - 2
        seg = np.diff(v, axis=0)
        dirs = seg / np.linalg.norm(seg, axis=1)[:, None]
        normals = np.array([dirs[j + 1] - dirs[j] for j in range(order)]).reshape(-1, 3)
        if order:
            normals /= np.linalg.norm(normals, axis=1)[:, None]
        eps = material_eps(scene.materials, [i.object_id for i in path.interactions], f)
        pts = v[1:-1][None] if order else np.zeros((1, 1, 3))
        amp, length, _ = reflection_amplitudes(tx, rx, pts, np.array([order]),
                                               np.arange(order)[None], normals, eps, k, lam)
    return float(length[0] / C0), complex(amp[0])
