"""Seeded Gaussian perturbations of building geometry and materials.

Every random draw comes from a stream keyed by (master seed, transmitter,
perturbation index, building, channel), so a perturbed scene depends only on
that tuple and never on scheduling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .emwave import Material
from .geodata import BuildingFootprint
from .scene import BuildingInfo, Scene

MIN_HEIGHT_M = 0.5


class Channel(enum.IntEnum):
    HEIGHT = 0
    POS_X = 1
    POS_Y = 2
    EPS = 3
    SIGMA = 4


class PerturbationKind(str, enum.Enum):
    MATERIAL = "material"
    POSITION = "position"
    HEIGHT = "height"
    HEIGHT_POSITION = "height_position"
    ALL = "all"

    @property
    def perturbs_height(self) -> bool:
        return self in (PerturbationKind.HEIGHT, PerturbationKind.HEIGHT_POSITION, PerturbationKind.ALL)

    @property
    def perturbs_position(self) -> bool:
        return self in (PerturbationKind.POSITION, PerturbationKind.HEIGHT_POSITION, PerturbationKind.ALL)

    @property
    def perturbs_material(self) -> bool:
        return self in (PerturbationKind.MATERIAL, PerturbationKind.ALL)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind
    sigma_height_m: float = 1.0
    sigma_pos_m: float = 0.4
    material_rel_sigma: float = 0.10
    count: int = 50
    master_seed: int = 0
    per_vertex_position: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        if min(self.sigma_height_m, self.sigma_pos_m, self.material_rel_sigma) < 0:
            raise ValueError("perturbation sigmas must be >= 0")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")


def derive_rng(master_seed: int, tx_id: int, perturbation_index: int, building_id: int,
               channel) -> np.random.Generator:
    """Independent counter-based stream for one (seed, tx, index, building, channel) tuple."""
    ch = int(Channel[channel.upper()] if isinstance(channel, str) else Channel(channel))
    ss = np.random.SeedSequence([int(master_seed), int(tx_id), int(perturbation_index),
                                 int(building_id), ch])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class PerturbationRecord:
    """Draws applied to each building (None where the kind does not touch a channel)."""

    height: dict = field(default_factory=dict)
    position: dict = field(default_factory=dict)
    eps: dict = field(default_factory=dict)
    sigma: dict = field(default_factory=dict)
    clamped_heights: int = 0


def apply_perturbation_with_record(scene: Scene, spec: PerturbationSpec, index: int,
                                   tx_id: int = 0) -> tuple[Scene, PerturbationRecord]:
    if not 0 <= index < spec.count:
        raise ValueError(f"perturbation index {index} outside [0, {spec.count})")
    out = scene.copy()
    rec = PerturbationRecord()
    kind = spec.kind
    seed = spec.master_seed
    for mesh in out.meshes:
        if mesh.object_kind != "building":
            continue
        b = mesh.object_id
        info = out.buildings.get(b)
        v = mesh.vertices
        if kind.perturbs_height:
            dh = spec.sigma_height_m * derive_rng(seed, tx_id, index, b, Channel.HEIGHT).standard_normal()
            top = v[:, 2].max()
            base = v[:, 2].min()
            height = top - base
            new_h = height + dh
            if new_h < MIN_HEIGHT_M:
                new_h = MIN_HEIGHT_M
                rec.clamped_heights += 1
            roof = v[:, 2] == top
            v[roof, 2] = base + new_h
            rec.height[b] = dh
            if info is not None:
                info.height_m = float(new_h)
        if kind.perturbs_position:
            if spec.per_vertex_position and info is not None:
                # one draw per footprint corner, shared by its base and roof vertex
                n = len(info.footprint.outer_ring)
                dx = spec.sigma_pos_m * derive_rng(seed, tx_id, index, b, Channel.POS_X).standard_normal(n)
                dy = spec.sigma_pos_m * derive_rng(seed, tx_id, index, b, Channel.POS_Y).standard_normal(n)
                corner = np.arange(len(v)) % n
                v[:, 0] += dx[corner]
                v[:, 1] += dy[corner]
                ring = info.footprint.outer_ring + np.column_stack([dx, dy])
                rec.position[b] = (dx, dy)
            else:
                dx = spec.sigma_pos_m * derive_rng(seed, tx_id, index, b, Channel.POS_X).standard_normal()
                dy = spec.sigma_pos_m * derive_rng(seed, tx_id, index, b, Channel.POS_Y).standard_normal()
                v[:, 0] += dx
                v[:, 1] += dy
                ring = None if info is None else info.footprint.outer_ring + np.array([dx, dy])
                rec.position[b] = (dx, dy)
            if info is not None:
                fp = info.footprint
                info.footprint = BuildingFootprint(fp.id, ring, fp.height_m, fp.height_source)
        if kind.perturbs_material:
            mat = out.materials[b]
            eps_r, sig = mat.at(out.frequency_hz)
            rs = spec.material_rel_sigma
            de = rs * eps_r * derive_rng(seed, tx_id, index, b, Channel.EPS).standard_normal()
            ds = rs * sig * derive_rng(seed, tx_id, index, b, Channel.SIGMA).standard_normal()
            out.materials[b] = Material(mat.name, max(1.0, eps_r + de), max(0.0, sig + ds), None)
            rec.eps[b] = de
            rec.sigma[b] = ds
    out.validate()
    return out, rec


def apply_perturbation(scene: Scene, spec: PerturbationSpec, index: int, tx_id: int = 0) -> Scene:
    """Deep copy of ``scene`` with perturbation ``index`` of family ``spec`` applied."""
    return apply_perturbation_with_record(scene, spec, index, tx_id)[0]
