"""Material model, Fresnel reflection and UTD wedge diffraction.

Time convention is e^{+j omega t} throughout: lossy permittivities have a
non-positive imaginary part and propagation phase is e^{-jkd}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.special import fresnel as _fresnel

try:
    import tomllib
except ModuleNotFoundError:  # py < 3.11
    import tomli as tomllib

EPS0 = 8.8541878128e-12
C0 = 299_792_458.0


@dataclass(frozen=True)
class Material:
    name: str
    eps_r: float
    sigma_s_per_m: float
    itu_params: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.eps_r < 1.0:
            raise ValueError(f"{self.name}: eps_r must be >= 1, got {self.eps_r}")
        if self.sigma_s_per_m < 0.0:
            raise ValueError(f"{self.name}: conductivity must be >= 0, got {self.sigma_s_per_m}")

    def at(self, f_hz: float) -> tuple[float, float]:
        """(eps_r, sigma) at frequency ``f_hz``, applying the ITU law when present."""
        if self.itu_params is None:
            return self.eps_r, self.sigma_s_per_m
        a, b, c, d = self.itu_params
        f_ghz = f_hz / 1e9
        return a * f_ghz ** b, c * f_ghz ** d

    def frozen_at(self, f_hz: float) -> "Material":
        """Static copy evaluated at ``f_hz`` (frequency law dropped)."""
        eps, sig = self.at(f_hz)
        return Material(self.name, max(1.0, eps), max(0.0, sig), None)


# Complex relative permittivity is carried as a plain Python/numpy complex.
ComplexPermittivity = complex


def complex_permittivity(m: Material, f_hz: float) -> complex:
    if f_hz <= 0:
        raise ValueError("frequency must be positive")
    eps_r, sigma = m.at(f_hz)
    return complex(eps_r, -sigma / (2.0 * math.pi * f_hz * EPS0))


@lru_cache(maxsize=None)
def load_material_table(path: str | None = None) -> dict[str, Material]:
    """Read the material table (name -> Material with ITU law)."""
    if path is None:
        raw = resources.files("gert").joinpath("data/itu_materials.toml").read_bytes()
    else:
        with open(path, "rb") as fh:
            raw = fh.read()
    doc = tomllib.loads(raw.decode("utf-8"))
    table = {}
    for name, row in doc.get("materials", {}).items():
        params = tuple(float(row[k]) for k in "abcd")
        table[name] = Material(name, float(row["eps_r"]), float(row["sigma"]), params)
    return table


def get_material(name: str) -> Material:
    table = load_material_table()
    try:
        return table[name]
    except KeyError:
        raise KeyError(f"unknown material {name!r}; known: {sorted(table)}") from None


# -- Fresnel ----------------------------------------------------------------------

def fresnel_reflection(eps, theta_i):
    """Fresnel coefficients (TE, TM) for a vacuum/half-space boundary.

    ``theta_i`` is measured from the surface normal.  TM uses the convention in
    which both coefficients coincide at normal incidence, so a perfect
    conductor gives (-1, -1) and the grazing limit of a dielectric (+1 for TM).
    """
    eps = np.asarray(eps, dtype=np.complex128)
    cos_t = np.cos(np.asarray(theta_i, dtype=np.float64))
    sin2 = 1.0 - cos_t * cos_t
    root = np.sqrt(eps - sin2)
    te = (cos_t - root) / (cos_t + root)
    tm = (root - eps * cos_t) / (root + eps * cos_t)
    return te, tm


# -- UTD ------------------------------------------------------------------------

def transition_function(x):
    """Kouyoumjian-Pathak transition function F(X) for X >= 0."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape, dtype=np.complex128)
    big = x > 1e3
    xs = np.where(big, 1.0, x)
    sx = np.sqrt(xs)
    s, c = _fresnel(sx * math.sqrt(2.0 / math.pi))
    tail = math.sqrt(math.pi / 2.0) * ((0.5 - c) - 1j * (0.5 - s))
    out[...] = 2j * sx * np.exp(1j * xs) * tail
    if np.any(big):
        xb = x[big]
        out[big] = 1 + 0.5j / xb - 0.75 / xb ** 2 - 1.875j / xb ** 3 + 6.5625 / xb ** 4
    return out


def _cot_f_term(eps, n, kl, zero_side=1.0):
    """cot(eps / 2n) * F(2 kL sin^2(eps/2)), with the boundary limit where eps ~ 0.

    eps > 0 is the lit side of the boundary; exactly on it the one-sided limit
    of ``zero_side`` is used.
    """
    eps = np.asarray(eps, dtype=np.float64)
    x = 2.0 * kl * np.sin(0.5 * eps) ** 2
    tiny = np.abs(eps) < 1e-12
    safe = np.where(tiny, 1.0, eps)
    term = transition_function(np.where(tiny, 0.0, x)) / np.tan(safe / (2.0 * n))
    if np.any(tiny):
        e4 = np.exp(0.25j * math.pi)
        side = np.where(eps == 0.0, zero_side, np.sign(eps))
        lim = n * (np.sqrt(2.0 * math.pi * kl) * side - 2.0 * kl * eps * e4) * e4
        term = np.where(tiny, lim, term)
    return term


def utd_terms(n, phi_i, phi_d, kl):
    """The four cotangent/transition terms of the wedge coefficient.

    Returns (t1, t2, t3, t4): t1/t2 belong to the incident shadow boundary,
    t3 to the face-0 reflection boundary and t4 to the face-n one.
    """
    n = np.asarray(n, dtype=np.float64)
    bm = np.asarray(phi_d, dtype=np.float64) - np.asarray(phi_i, dtype=np.float64)
    bp = np.asarray(phi_d, dtype=np.float64) + np.asarray(phi_i, dtype=np.float64)
    two_pi_n = 2.0 * math.pi * n

    def plus(beta, side):
        npl = np.round((math.pi + beta) / two_pi_n)
        return _cot_f_term(math.pi + beta - two_pi_n * npl, n, kl, side)

    def minus(beta, side):
        nmi = np.round((beta - math.pi) / two_pi_n)
        return _cot_f_term(math.pi - beta + two_pi_n * nmi, n, kl, side)

    # exactly on a boundary the tracer drops a grazing direct ray but keeps a
    # reflection hitting a facet edge, so take the matching one-sided limits
    return plus(bm, -1.0), minus(bm, -1.0), minus(bp, 1.0), plus(bp, 1.0)


def utd_coefficient(n, phi_i, phi_d, beta0, length_param, k, r0, rn):
    """Heuristic lossy-wedge UTD coefficient.

    ``r0``/``rn`` multiply the face-0 and face-n reflection-boundary terms;
    (-1, -1) gives the perfectly conducting soft coefficient and (+1, +1) the
    hard one.  ``length_param`` is the distance parameter L.
    """
    n = np.asarray(n, dtype=np.float64)
    kl = k * np.asarray(length_param, dtype=np.float64)
    t1, t2, t3, t4 = utd_terms(n, phi_i, phi_d, kl)
    pref = -np.exp(-0.25j * math.pi) / (2.0 * n * math.sqrt(2.0 * math.pi * k) * np.sin(beta0))
    return pref * (t1 + t2 + r0 * t3 + rn * t4)


def face_reflection_coefficients(eps0, epsn, n, phi_i, phi_d):
    """Soft/hard reflection multipliers for the two wedge faces.

    Each face coefficient is a Fresnel coefficient whose incidence cosine is the
    smaller of the two leg grazing sines relative to that face.  On the
    reflection boundary this is the usual specular value, and the choice is
    symmetric under swapping source and observer.  ``None`` means a perfect
    conductor.  Returns ((r0_soft, rn_soft), (r0_hard, rn_hard)).
    """
    phi_i = np.asarray(phi_i, dtype=np.float64)
    phi_d = np.asarray(phi_d, dtype=np.float64)
    npi = np.asarray(n, dtype=np.float64) * math.pi
    out = []
    for eps, a, b in ((eps0, np.sin(phi_i), np.sin(phi_d)),
                      (epsn, np.sin(npi - phi_i), np.sin(npi - phi_d))):
        if eps is None:
            out.append((-np.ones_like(a), np.ones_like(a)))
            continue
        cos_t = np.clip(np.minimum(a, b), 0.0, 1.0)
        te, tm = fresnel_reflection(eps, np.arccos(cos_t))
        out.append((te, -tm))
    (s0, h0), (sn, hn) = out
    return (s0, sn), (h0, hn)


class KellerConeError(ValueError):
    """Incidence and diffraction legs do not lie on a common Keller cone."""


@dataclass(frozen=True)
class Wedge:
    interior_angle: float  # radians; 0 is a half-plane
    material_0: Material | None = None  # None: perfect conductor
    material_n: Material | None = None

    @property
    def n(self) -> float:
        return (2.0 * math.pi - self.interior_angle) / math.pi


@dataclass(frozen=True)
class DiffractionGeometry:
    phi_i: float  # source angle from face 0, radians
    phi_d: float  # observer angle from face 0
    beta0_i: float  # incident ray angle to the edge
    beta0_d: float  # diffracted ray angle to the edge
    s_i: float  # source distance to the edge, math.inf for a plane wave
    s_d: float  # observer distance


KELLER_TOL = 1e-6


def distance_parameter(s_i, s_d, beta0):
    s_i = np.asarray(s_i, dtype=np.float64)
    s_d = np.asarray(s_d, dtype=np.float64)
    sin2 = np.sin(beta0) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        sph = s_i * s_d / (s_i + s_d) * sin2
    return np.where(np.isinf(s_i), s_d * sin2, sph)


def utd_diffraction_coefficient(wedge: Wedge, geometry: DiffractionGeometry, f_hz: float,
                                polarization: str = "soft") -> complex:
    """Diffraction coefficient (units sqrt(m)) of one wedge for one geometry."""
    if abs(geometry.beta0_i - geometry.beta0_d) > KELLER_TOL:
        raise KellerConeError(
            f"legs off the Keller cone: beta0 {geometry.beta0_i:.9f} vs {geometry.beta0_d:.9f}")
    n = wedge.n
    npi = n * math.pi
    for name, ang in (("phi_i", geometry.phi_i), ("phi_d", geometry.phi_d)):
        if not -1e-9 <= ang <= npi + 1e-9:
            raise ValueError(f"{name}={ang} outside the wedge exterior [0, {npi}]")
    k = 2.0 * math.pi * f_hz / C0
    eps0 = None if wedge.material_0 is None else complex_permittivity(wedge.material_0, f_hz)
    epsn = None if wedge.material_n is None else complex_permittivity(wedge.material_n, f_hz)
    if polarization not in ("soft", "hard"):
        raise ValueError("polarization must be 'soft' or 'hard'")
    soft, hard = face_reflection_coefficients(eps0, epsn, n, geometry.phi_i, geometry.phi_d)
    r0, rn = soft if polarization == "soft" else hard
    L = distance_parameter(geometry.s_i, geometry.s_d, geometry.beta0_i)
    return complex(utd_coefficient(n, geometry.phi_i, geometry.phi_d, geometry.beta0_i, L, k, r0, rn))
