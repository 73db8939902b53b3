"""Path containers and vectorized delay/amplitude evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..emwave import C0, complex_permittivity, face_reflection_coefficients, fresnel_reflection, utd_coefficient

MAX_ORDER_LIMIT = 7


@dataclass(frozen=True)
class TraceConfig:
    max_reflection_order: int = 5
    diffraction_enabled: bool = True
    frequency_hz: float = 3.5e9
    polarization: str = "vertical"

    def __post_init__(self):
        if not 0 <= self.max_reflection_order <= MAX_ORDER_LIMIT:
            raise ValueError(f"max_reflection_order must be in [0, {MAX_ORDER_LIMIT}]")
        if self.frequency_hz <= 0:
            raise ValueError("frequency_hz must be > 0")
        if self.polarization != "vertical":
            raise ValueError("only vertical polarization is supported")

    @property
    def wavelength(self) -> float:
        return C0 / self.frequency_hz


@dataclass(frozen=True)
class Interaction:
    kind: str  # "reflection" | "diffraction"
    object_id: int
    element_id: int  # facet id or edge id
    angle_rad: float  # incidence angle from the normal, or beta0 for an edge
    edge: object = None  # EdgeInfo for diffraction


@dataclass
class Path:
    kind: str  # "los" | "reflection" | "diffraction"
    vertices: np.ndarray  # (m, 3) tx -> interactions -> rx
    delay_s: float
    amplitude: complex
    interactions: tuple = ()

    @property
    def order(self) -> int:
        return len(self.interactions) if self.kind == "reflection" else 0

    @property
    def length_m(self) -> float:
        return float(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1).sum())

    def key(self) -> tuple:
        return (self.kind,) + tuple(i.element_id for i in self.interactions)


@dataclass
class PathSet:
    tx: np.ndarray
    rx: np.ndarray
    paths: list = field(default_factory=list)
    max_reflection_order: int = 5
    diffraction_enabled: bool = True

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    def amplitudes(self) -> np.ndarray:
        return np.array([p.amplitude for p in self.paths], dtype=np.complex128)

    def delays(self) -> np.ndarray:
        return np.array([p.delay_s for p in self.paths], dtype=np.float64)

    def by_kind(self, kind: str) -> list:
        return [p for p in self.paths if p.kind == kind]


# -- vector helpers ---------------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def vertical_polarization(d):
    """Unit field direction of a vertical dipole radiating along unit vector(s) d."""
    d = np.asarray(d, dtype=np.float64)
    z = np.zeros_like(d)
    z[..., 2] = 1.0
    p = z - _dot(z, d)[..., None] * d
    norm = np.linalg.norm(p, axis=-1, keepdims=True)
    x = np.zeros_like(d)
    x[..., 0] = 1.0
    alt = x - _dot(x, d)[..., None] * d
    p = np.where(norm > 1e-12, p, alt)
    return _unit(p)


def _perp_any(k):
    """A unit vector perpendicular to k (used only at normal incidence)."""
    x = np.zeros_like(k)
    x[..., 0] = 1.0
    y = np.zeros_like(k)
    y[..., 1] = 1.0
    use_y = np.abs(k[..., 0]) > 0.9
    a = np.where(use_y[..., None], y, x)
    return _unit(np.cross(k, a))


# -- evaluation -------------------------------------------------------------------------------

@dataclass
class PathBatch:
    """Flat paths from one transmitter (any number of receivers), evaluated."""

    rx_index: np.ndarray
    kind: np.ndarray  # 0 los, 1 reflection, 2 diffraction
    ref: np.ndarray  # tree node (reflection), edge id (diffraction), -1 (los)
    order: np.ndarray
    points: np.ndarray  # (P, slots, 3) interaction points, zero padded
    length_m: np.ndarray
    delay_s: np.ndarray
    amplitude: np.ndarray
    facet_seq: np.ndarray  # (P, slots) facet ids per bounce, -1 padded
    angles: np.ndarray  # (P, slots) incidence angle per bounce, beta0 for diffraction


def reflection_amplitudes(tx, rx, pts, order, facet_seq, fac_normal, fac_eps, k, wavelength):
    """Amplitude, length and incidence angles of reflection (or LOS, order 0) paths.

    The launched field follows a vertical dipole; at each bounce it is split
    into the components perpendicular (TE) and parallel (TM) to the plane of
    incidence and scaled by the Fresnel coefficients, and the received value is
    the projection onto the receiving dipole direction.
    """
    n_paths = len(order)
    amp = np.zeros(n_paths, dtype=np.complex128)
    length = np.zeros(n_paths)
    angles = np.zeros((n_paths, max(1, pts.shape[1])))
    for kk in np.unique(order):
        sel = np.nonzero(order == kk)[0]
        chain = np.concatenate([tx[sel][:, None], pts[sel, :kk], rx[sel][:, None]], axis=1)
        seg = np.diff(chain, axis=1)
        seg_len = np.linalg.norm(seg, axis=2)
        dirs = seg / seg_len[..., None]
        e = vertical_polarization(dirs[:, 0]).astype(np.complex128)
        for b in range(kk):
            f = facet_seq[sel, b]
            n = fac_normal[f]
            k_in, k_out = dirs[:, b], dirs[:, b + 1]
            cos_t = np.clip(-_dot(k_in, n), 0.0, 1.0)
            theta = np.arccos(cos_t)
            angles[sel, b] = theta
            te, tm = fresnel_reflection(fac_eps[f], theta)
            es = np.cross(k_in, n)
            nrm = np.linalg.norm(es, axis=1, keepdims=True)
            es = np.where(nrm > 1e-12, es / np.where(nrm > 0, nrm, 1.0), _perp_any(k_in))
            ep_in = np.cross(es, k_in)
            ep_out = np.cross(k_out, es)
            e = (te * _dot(e, es))[:, None] * es + (tm * _dot(e, ep_in))[:, None] * ep_out
        pol_rx = vertical_polarization(dirs[:, -1])
        d = seg_len.sum(axis=1)
        length[sel] = d
        amp[sel] = _dot(e, pol_rx) * wavelength / (4.0 * math.pi * d) * np.exp(-1j * k * d)
    return amp, length, angles


def diffraction_amplitudes(tx, rx, q, edge_ids, edges, edge_eps, k, wavelength):
    """UTD single-edge amplitudes (soft/hard split by the edge-fixed basis)."""
    e_t = edges.t[edge_ids]
    s_in = q - tx
    s_out = rx - q
    s1 = np.linalg.norm(s_in, axis=1)
    s2 = np.linalg.norm(s_out, axis=1)
    d_in = s_in / s1[:, None]
    d_out = s_out / s2[:, None]
    cb = np.clip(_dot(d_in, e_t), -1.0, 1.0)
    beta0 = np.arccos(cb)
    sin_b = np.sqrt(1.0 - cb * cb)

    def angle(p):
        v = p - q
        v = v - _dot(v, e_t)[:, None] * e_t
        phi = np.arctan2(_dot(v, edges.n0[edge_ids]), _dot(v, edges.t0[edge_ids]))
        return np.mod(phi, 2.0 * math.pi)

    n = edges.wedge_n[edge_ids]
    npi = n * math.pi

    def fold(phi):
        # points on a face can round to just outside [0, n pi]
        return np.where(phi > 0.5 * (npi + 2.0 * math.pi), 0.0, np.minimum(phi, npi))

    phi_i = fold(angle(tx))
    phi_d = fold(angle(rx))
    L = s1 * s2 / (s1 + s2) * sin_b ** 2
    eps = edge_eps[edge_ids]
    (r0s, rns), (r0h, rnh) = face_reflection_coefficients(eps, eps, n, phi_i, phi_d)
    d_soft = utd_coefficient(n, phi_i, phi_d, beta0, L, k, r0s, rns)
    d_hard = utd_coefficient(n, phi_i, phi_d, beta0, L, k, r0h, rnh)

    def basis(s):
        b = e_t - _dot(e_t, s)[:, None] * s
        b = _unit(b)
        p = _unit(np.cross(e_t, s))
        return b, p

    b_in, p_in = basis(d_in)
    b_out, p_out = basis(d_out)
    e_in = vertical_polarization(d_in)
    e_out = (d_soft * _dot(e_in, b_in))[:, None] * b_out + (d_hard * _dot(e_in, p_in))[:, None] * p_out
    proj = _dot(e_out, vertical_polarization(d_out))
    length = s1 + s2
    amp = proj * wavelength / (4.0 * math.pi) * np.exp(-1j * k * length) / np.sqrt(s1 * s2 * length)
    return amp, length, beta0


def material_eps(materials: dict, object_ids, f_hz) -> np.ndarray:
    cache = {}
    out = np.empty(len(object_ids), dtype=np.complex128)
    for i, oid in enumerate(object_ids):
        oid = int(oid)
        if oid not in cache:
            cache[oid] = complex_permittivity(materials[oid], f_hz)
        out[i] = cache[oid]
    return out
