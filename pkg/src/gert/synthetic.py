"""Procedural test scenes: a Manhattan grid and a closed box."""

from __future__ import annotations

import numpy as np

from .emwave import Material
from .geodata import BuildingFootprint, HeightSource, TerrainGrid
from .scene import MaterialPolicy, Scene, TriangleMesh, assemble_scene


def manhattan_footprints(blocks: int = 8, block_m: float = 20.0, street_m: float = 30.0,
                         height_m: float = 20.0, x0: float = 0.0, y0: float = 0.0):
    """Square footprints on a regular lattice; block (0, 0) starts at (x0, y0)."""
    period = block_m + street_m
    fps = []
    for i in range(blocks):
        for j in range(blocks):
            bx = x0 + j * period
            by = y0 + i * period
            ring = np.array([[bx, by], [bx + block_m, by], [bx + block_m, by + block_m],
                             [bx, by + block_m]], dtype=np.float64)
            fps.append(BuildingFootprint(len(fps), ring, height_m, HeightSource.EXPLICIT))
    return fps


def manhattan_scene(blocks: int = 8, block_m: float = 20.0, street_m: float = 30.0,
                    height_m: float = 20.0, frequency_hz: float = 3.5e9,
                    policy: MaterialPolicy | None = None) -> Scene:
    """Blocks centred in their lattice cells, surrounded by a half street of flat ground."""
    half = street_m / 2.0
    period = block_m + street_m
    fps = manhattan_footprints(blocks, block_m, street_m, height_m, half, half)
    size = blocks * period
    terrain = TerrainGrid.flat(0.0, 0.0, size, size, z=0.0)
    return assemble_scene(fps, terrain, policy, frequency_hz)


def box_scene(size=(20.0, 16.0, 12.0), wall: Material | None = None,
              frequency_hz: float = 3.5e9) -> Scene:
    """A closed room: the floor is terrain and the walls/ceiling face inward.

    The enclosure is stored as one building object whose triangles point
    into the room, so every interior surface is a reflector.
    """
    lx, ly, lz = size
    wall = wall or Material("box_wall", 5.0, 0.05)
    floor = TriangleMesh(np.array([[0, 0, 0], [lx, 0, 0], [lx, ly, 0], [0, ly, 0]], dtype=np.float64),
                         np.array([[0, 1, 2], [0, 2, 3]]), 0, "terrain")
    v = np.array([[0, 0, 0], [lx, 0, 0], [lx, ly, 0], [0, ly, 0],
                  [0, 0, lz], [lx, 0, lz], [lx, ly, lz], [0, ly, lz]], dtype=np.float64)
    # inward-facing quads: (a, b, c, d) counter-clockwise seen from inside
    quads = [(0, 4, 5, 1),  # y = 0 wall, normal +y
             (1, 5, 6, 2),  # x = lx wall, normal -x
             (2, 6, 7, 3),  # y = ly wall, normal -y
             (3, 7, 4, 0),  # x = 0 wall, normal +x
             (4, 7, 6, 5)]  # ceiling, normal -z
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    shell = TriangleMesh(v, np.array(tris), 1, "building")
    mats = {0: wall, 1: wall}
    return Scene([floor, shell], mats, {}, (0.0, 0.0), frequency_hz, {0: wall.name, 1: wall.name})
