"""Procedural 2D terrain profiles for the five obstacle families.

A terrain is a piecewise-linear ground profile over x (vertical faces are
encoded as duplicated breakpoints) plus an optional ceiling profile for
Crawl. Difficulty scales linearly with level 0..9; ranges are sized for a
0.4 m body, 0.3 m standing height runner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import ConfigurationError

BODY_LENGTH = 0.4
STAND_HEIGHT = 0.3

MAX_LEVEL = 9
TERRAIN_END = 30.0
OBSTACLE_ZONE = (3.5, 4.5)  # obstacle start jitter range

MAX_SLOPE_DEG = 36.0
STAIR_RISE = (0.05, 0.21)
MAX_GAP_WIDTH = 2.1 * BODY_LENGTH
MAX_CLIMB_HEIGHT = 1.8 * STAND_HEIGHT
CRAWL_CLEARANCE = (1.2 * STAND_HEIGHT, 0.7 * STAND_HEIGHT)


class TerrainFamily(str, Enum):
    SLOPE = "slope"
    STAIR = "stair"
    GAP = "gap"
    CLIMB = "climb"
    CRAWL = "crawl"


FAMILIES = list(TerrainFamily)


@dataclass
class TerrainSpec:
    family: TerrainFamily
    level: int
    ground_x: np.ndarray          # breakpoints, non-decreasing
    ground_z: np.ndarray
    ceiling_x: np.ndarray | None  # Crawl only
    ceiling_z: np.ndarray | None
    border_x: float
    params: dict = field(default_factory=dict)

    def height_at(self, x):
        return np.interp(x, self.ground_x, self.ground_z)

    def ceiling_at(self, x):
        if self.ceiling_x is None:
            return np.full_like(np.asarray(x, dtype=np.float64), np.inf) \
                if np.ndim(x) else np.inf
        return np.interp(x, self.ceiling_x, self.ceiling_z,
                         left=np.inf, right=np.inf)


def _frac(level: int) -> float:
    return level / MAX_LEVEL


def generate_terrain(family, level: int, seed: int) -> TerrainSpec:
    """Deterministic terrain for (family, level, seed)."""
    if isinstance(family, str) and not isinstance(family, TerrainFamily):
        try:
            family = TerrainFamily(family.lower())
        except ValueError:
            raise ConfigurationError(f"unknown terrain family: {family}") from None
    if not isinstance(family, TerrainFamily):
        raise ConfigurationError(f"unknown terrain family: {family}")
    if not 0 <= level <= MAX_LEVEL:
        raise ConfigurationError(f"level must be in [0, {MAX_LEVEL}], got {level}")
    rng = np.random.default_rng([int(seed), level, FAMILIES.index(family)])
    start = float(rng.uniform(*OBSTACLE_ZONE))
    f = _frac(level)

    if family is TerrainFamily.SLOPE:
        angle = np.deg2rad(MAX_SLOPE_DEG * f)
        run = 3.0
        rise = run * np.tan(angle)
        gx = np.array([0.0, start, start + run, start + 2 * run, TERRAIN_END])
        gz = np.array([0.0, 0.0, rise, 0.0, 0.0])
        border = start + 2 * run + 1.0
        params = {"angle_deg": MAX_SLOPE_DEG * f}
        cx = cz = None

    elif family is TerrainFamily.STAIR:
        rise = STAIR_RISE[0] + (STAIR_RISE[1] - STAIR_RISE[0]) * f
        run, n_steps = 0.35, 6
        xs, zs = [0.0, start], [0.0, 0.0]
        z = 0.0
        x = start
        for _ in range(n_steps):
            z += rise
            xs += [x, x + run]
            zs += [z, z]
            x += run
        # descend as a ramp back to flat
        xs += [x + 1.0 + z * 2, TERRAIN_END]
        zs += [0.0, 0.0]
        gx, gz = np.array(xs), np.array(zs)
        border = x + 1.0 + z * 2 + 1.0
        params = {"rise": rise}
        cx = cz = None

    elif family is TerrainFamily.GAP:
        width = MAX_GAP_WIDTH * f
        depth = 1.0
        if width > 0:
            gx = np.array([0.0, start, start, start + width, start + width, TERRAIN_END])
            gz = np.array([0.0, 0.0, -depth, -depth, 0.0, 0.0])
        else:
            gx = np.array([0.0, TERRAIN_END])
            gz = np.array([0.0, 0.0])
        border = start + width + 2.0
        params = {"gap_width": width, "gap_start": start}
        cx = cz = None

    elif family is TerrainFamily.CLIMB:
        height = MAX_CLIMB_HEIGHT * f
        plat = 2.0
        gx = np.array([0.0, start, start, start + plat, start + plat, TERRAIN_END])
        gz = np.array([0.0, 0.0, height, height, 0.0, 0.0])
        border = start + plat + 2.0
        params = {"climb_height": height}
        cx = cz = None

    elif family is TerrainFamily.CRAWL:
        clearance = CRAWL_CLEARANCE[0] + (CRAWL_CLEARANCE[1] - CRAWL_CLEARANCE[0]) * f
        length = 1.5
        gx = np.array([0.0, TERRAIN_END])
        gz = np.array([0.0, 0.0])
        cx = np.array([start, start + length])
        cz = np.array([clearance, clearance])
        border = start + length + 2.0
        params = {"clearance": clearance}

    return TerrainSpec(
        family=family,
        level=int(level),
        ground_x=gx.astype(np.float64),
        ground_z=gz.astype(np.float64),
        ceiling_x=None if cx is None else cx.astype(np.float64),
        ceiling_z=None if cz is None else cz.astype(np.float64),
        border_x=float(border),
        params=params,
    )
