"""Procedural stand-ins for WM-38k wafer maps.

Each base defect has a geometry generator returning a boolean die mask on
the fixed 52x52 wafer disc.  Mixed patterns OR the masks of their base
defects together.  All geometry constants below are relative to the wafer
radius and were chosen so that every base defect stays recognisable after
zooming by up to 10% and after downsampling to 32x32.
"""

import math
from typing import Sequence, Union

import numpy as np

from .patterns import BASE_DEFECTS, BIT, get_class

GRID = 52
CENTER = GRID / 2.0
RADIUS = GRID / 2.0 - 0.5

BACKGROUND, NORMAL_DIE, DEFECT_DIE = 0, 1, 2

_yy, _xx = np.mgrid[0:GRID, 0:GRID]
# cell centres in wafer-radius units, origin at the wafer centre
YS = (_yy + 0.5 - CENTER) / RADIUS
XS = (_xx + 0.5 - CENTER) / RADIUS
RHO = np.hypot(XS, YS)
THETA = np.arctan2(YS, XS)
DISC = RHO <= 1.0
DISC_DIES = int(DISC.sum())

DIE_DENSITY = 0.92          # fraction of dies hit inside a solid defect region
CENTER_RADIUS = (0.12, 0.28)
DONUT_INNER = (0.28, 0.42)
DONUT_WIDTH = (0.14, 0.22)
EDGE_LOC_DEPTH = (0.16, 0.30)
EDGE_LOC_HALF_ANGLE = (0.30, 0.60)   # radians
EDGE_RING_DEPTH = (0.12, 0.18)
LOC_DISTANCE = (0.35, 0.65)
LOC_AXES = (0.11, 0.21)
NEAR_FULL_THRESHOLD = 0.8
NEAR_FULL_FRACTION = (0.85, 0.97)
RANDOM_RATE = (0.08, 0.20)
SCRATCH_SEGMENTS = (2, 4)
SCRATCH_SEGMENT_LENGTH = (0.40, 0.70)
SCRATCH_HALF_WIDTHS = (0.55 / RADIUS, 1.05 / RADIUS)   # 1 or 2 dies wide
SCRATCH_WIDE_PROB = 0.75

GENERATOR_VERSION = "synthetic-geometry/1"


def _dense(rng, region):
    return region & (rng.random(region.shape) < DIE_DENSITY) & DISC


def center(rng):
    cx, cy = rng.normal(0.0, 0.03, size=2)
    r = rng.uniform(*CENTER_RADIUS)
    return _dense(rng, np.hypot(XS - cx, YS - cy) < r)


def donut(rng):
    cx, cy = rng.normal(0.0, 0.02, size=2)
    r_in = rng.uniform(*DONUT_INNER)
    r_out = r_in + rng.uniform(*DONUT_WIDTH)
    d = np.hypot(XS - cx, YS - cy)
    return _dense(rng, (d >= r_in) & (d < r_out))


def edge_loc(rng):
    theta0 = rng.uniform(-math.pi, math.pi)
    half = rng.uniform(*EDGE_LOC_HALF_ANGLE)
    depth = rng.uniform(*EDGE_LOC_DEPTH)
    dtheta = np.abs(np.angle(np.exp(1j * (THETA - theta0))))
    return _dense(rng, (RHO >= 1.0 - depth) & (dtheta < half))


def edge_ring(rng):
    depth = rng.uniform(*EDGE_RING_DEPTH)
    return _dense(rng, RHO >= 1.0 - depth)


def loc(rng):
    dist = rng.uniform(*LOC_DISTANCE)
    ang = rng.uniform(-math.pi, math.pi)
    cx, cy = dist * math.cos(ang), dist * math.sin(ang)
    a, b = rng.uniform(*LOC_AXES, size=2)
    phi = rng.uniform(0.0, math.pi)
    u = (XS - cx) * math.cos(phi) + (YS - cy) * math.sin(phi)
    v = -(XS - cx) * math.sin(phi) + (YS - cy) * math.cos(phi)
    return _dense(rng, (u / a) ** 2 + (v / b) ** 2 < 1.0)


def near_full(rng):
    frac = rng.uniform(*NEAR_FULL_FRACTION)
    k = max(math.ceil(NEAR_FULL_THRESHOLD * DISC_DIES), math.ceil(frac * DISC_DIES))
    idx = np.flatnonzero(DISC)
    chosen = rng.choice(idx, size=k, replace=False)
    out = np.zeros(GRID * GRID, dtype=bool)
    out[chosen] = True
    return out.reshape(GRID, GRID)


def random_noise(rng):
    p = rng.uniform(*RANDOM_RATE)
    return (rng.random((GRID, GRID)) < p) & DISC


def scratch(rng):
    r0 = 0.45 * math.sqrt(rng.uniform())
    a0 = rng.uniform(-math.pi, math.pi)
    mid = (r0 * math.cos(a0), r0 * math.sin(a0))
    heading = rng.uniform(-math.pi, math.pi)
    n_seg = int(rng.integers(SCRATCH_SEGMENTS[0], SCRATCH_SEGMENTS[1] + 1))
    segments = []
    # grow from the midpoint in both directions so the line stays on the wafer
    for direction in (0.0, math.pi):
        h = heading + direction
        x, y = mid
        for _ in range((n_seg + 1) // 2):
            h += rng.uniform(-0.4, 0.4)
            length = rng.uniform(*SCRATCH_SEGMENT_LENGTH) / 2
            nx, ny = x + length * math.cos(h), y + length * math.sin(h)
            segments.append((x, y, nx, ny))
            x, y = nx, ny
    half_width = SCRATCH_HALF_WIDTHS[int(rng.random() < SCRATCH_WIDE_PROB)]
    hit = np.zeros((GRID, GRID), dtype=bool)
    for seg in segments:
        hit |= _segment_distance(*seg) < half_width
    return hit & DISC


def _segment_distance(x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = ((XS - x0) * dx + (YS - y0) * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(XS - (x0 + t * dx), YS - (y0 + t * dy))


GEOMETRY = {
    "C": center,
    "D": donut,
    "EL": edge_loc,
    "ER": edge_ring,
    "L": loc,
    "NF": near_full,
    "R": random_noise,
    "S": scratch,
}


def compose(mask: int, rng: np.random.Generator) -> np.ndarray:
    """Grid for a label mask: background 0, normal die 1, defect die 2."""
    defect = np.zeros((GRID, GRID), dtype=bool)
    for abbr in BASE_DEFECTS:
        if mask & BIT[abbr]:
            defect |= GEOMETRY[abbr](rng)
    grid = DISC.astype(np.uint8)
    grid[defect & DISC] = DEFECT_DIE
    return grid


def generate_grid(class_id: int, seed: Union[int, Sequence[int]]) -> np.ndarray:
    pc = get_class(class_id)
    return compose(pc.mask, np.random.default_rng(seed))
