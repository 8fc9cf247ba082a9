"""Planar-patch worlds and the built-in scenarios."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np


class UnknownScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Patch:
    """Finite rectangle: center, two orthonormal in-plane axes and half extents."""

    center: Tuple[float, float, float]
    axis_u: Tuple[float, float, float]
    axis_v: Tuple[float, float, float]
    half_u: float
    half_v: float

    def __post_init__(self):
        if self.half_u <= 0 or self.half_v <= 0:
            raise ValueError("patch must have positive area")

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    @property
    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v


@dataclass
class World:
    patches: List[Patch]
    seed: int
    scenario: str = "custom"
    # named axis-aligned xy regions, (xmin, ymin, xmax, ymax)
    regions: Dict[str, Tuple[float, float, float, float]] = field(default_factory=dict)
    # named paths as corner lists, consumed by the trajectory builders
    routes: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)

    def __post_init__(self):
        self._arrays = None

    def arrays(self):
        if self._arrays is None:
            if self.patches:
                C = np.array([p.center for p in self.patches], dtype=float)
                U = np.array([p.axis_u for p in self.patches], dtype=float)
                V = np.array([p.axis_v for p in self.patches], dtype=float)
                hu = np.array([p.half_u for p in self.patches])
                hv = np.array([p.half_v for p in self.patches])
            else:
                C = U = V = np.zeros((0, 3))
                hu = hv = np.zeros(0)
            N = np.cross(U, V)
            radius = np.hypot(hu, hv)
            self._arrays = (C, U, V, N, hu, hv, radius)
        return self._arrays

    def fingerprint(self) -> str:
        import hashlib

        C, U, V, N, hu, hv, _ = self.arrays()
        h = hashlib.sha256()
        for a in (C, U, V, hu, hv):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def wall(x0, y0, x1, y1, z0=0.0, z1=3.0) -> Patch:
    """Vertical rectangle standing on the segment (x0, y0)-(x1, y1)."""
    d = np.array([x1 - x0, y1 - y0, 0.0])
    length = float(np.linalg.norm(d))
    u = d / length
    return Patch(
        ((x0 + x1) / 2, (y0 + y1) / 2, (z0 + z1) / 2),
        tuple(u),
        (0.0, 0.0, 1.0),
        length / 2,
        (z1 - z0) / 2,
    )


def floor(xmin, ymin, xmax, ymax, z=0.0) -> Patch:
    return Patch(
        ((xmin + xmax) / 2, (ymin + ymax) / 2, z),
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
        (xmax - xmin) / 2,
        (ymax - ymin) / 2,
    )


def box(cx, cy, sx, sy, height, yaw=0.0, z0=0.0) -> List[Patch]:
    """Four walls and a roof of an upright box centred at (cx, cy)."""
    c, s = np.cos(yaw), np.sin(yaw)
    hx, hy = sx / 2, sy / 2
    corners = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
    pts = [(cx + c * a - s * b, cy + s * a + c * b) for a, b in corners]
    out = [wall(*pts[i], *pts[(i + 1) % 4], z0, z0 + height) for i in range(4)]
    out.append(
        Patch((cx, cy, z0 + height), (c, s, 0.0), (-s, c, 0.0), hx, hy)
    )
    return out


def _poles_along(rng, x0, y0, x1, y1, offset, spacing, height=(2.5, 5.0)) -> List[Patch]:
    """Irregularly spaced thin boxes (trees, posts) beside a road segment."""
    d = np.array([x1 - x0, y1 - y0], dtype=float)
    length = float(np.linalg.norm(d))
    u = d / length
    n = np.array([-u[1], u[0]])
    out: List[Patch] = []
    s = rng.uniform(0.0, spacing)
    while s < length:
        side = 1.0 if rng.random() < 0.5 else -1.0
        p = np.array([x0, y0]) + u * s + n * side * (offset + rng.uniform(0.0, 1.5))
        size = rng.uniform(0.3, 0.8)
        out += box(p[0], p[1], size, size, rng.uniform(*height), yaw=rng.uniform(0, np.pi / 2))
        s += spacing * rng.uniform(0.6, 1.4)
    return out


def _buildings_along(rng, x0, y0, x1, y1, offset, depth=(6.0, 12.0), gap=(2.0, 6.0)) -> List[Patch]:
    """A row of boxes of random width set back ``offset`` to the left of a segment."""
    d = np.array([x1 - x0, y1 - y0], dtype=float)
    length = float(np.linalg.norm(d))
    u = d / length
    n = np.array([-u[1], u[0]])
    yaw = float(np.arctan2(u[1], u[0]))
    out: List[Patch] = []
    s = rng.uniform(0.0, 3.0)
    while s < length - 3.0:
        width = min(rng.uniform(6.0, 16.0), length - s)
        dep = rng.uniform(*depth)
        setback = offset + rng.uniform(0.0, 2.5)
        c = np.array([x0, y0]) + u * (s + width / 2) + n * (setback + dep / 2)
        out += box(c[0], c[1], width, dep, rng.uniform(4.0, 12.0), yaw=yaw)
        s += width + rng.uniform(*gap)
    return out


def _corridor(seed: int, length: float = 200.0, width: float = 4.0, height: float = 3.0) -> World:
    rng = np.random.default_rng(seed)
    hw = width / 2
    patches = [
        floor(-5.0, -hw, length + 5.0, hw),
        wall(-5.0, -hw, length + 5.0, -hw, 0.0, height),
        wall(-5.0, hw, length + 5.0, hw, 0.0, height),
        wall(-5.0, -hw, -5.0, hw, 0.0, height),
        wall(length + 5.0, -hw, length + 5.0, hw, 0.0, height),
    ]
    # pillars and cabinets against the walls break the along-track symmetry
    x = rng.uniform(1.0, 4.0)
    while x < length + 3.0:
        side = -1.0 if rng.random() < 0.5 else 1.0
        depth = rng.uniform(0.2, 0.6)
        wlen = rng.uniform(0.4, 1.5)
        patches += box(x, side * (hw - depth / 2), wlen, depth, rng.uniform(1.0, height))
        x += rng.uniform(2.0, 6.0)
    return World(
        patches,
        seed,
        "corridor",
        regions={"corridor": (-5.0, -hw, length + 5.0, hw)},
        routes={"main": [(0.0, 0.0), (length, 0.0)]},
    )


def _road_grid_world(seed, rects, scenario, routes, regions) -> World:
    """Ground plane, building rows outside the roads and blocks inside each loop."""
    rng = np.random.default_rng(seed)
    xs = [r[0] for r in rects] + [r[2] for r in rects]
    ys = [r[1] for r in rects] + [r[3] for r in rects]
    patches = [floor(min(xs) - 80.0, min(ys) - 80.0, max(xs) + 80.0, max(ys) + 80.0)]
    road = 6.0
    for (x0, y0, x1, y1) in rects:
        # block inside the loop
        patches += box((x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) - 2 * road, (y1 - y0) - 2 * road,
                       rng.uniform(6.0, 12.0))
        # poles on the inner kerb
        for a, b in (((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))):
            patches += _poles_along(rng, a[0], a[1], b[0], b[1], offset=3.0, spacing=7.0)
    # outer building rows, counter-clockwise around the union bounding box
    X0, Y0, X1, Y1 = min(xs), min(ys), max(xs), max(ys)
    for a, b in (((X1, Y0), (X0, Y0)), ((X1, Y1), (X1, Y0)), ((X0, Y1), (X1, Y1)), ((X0, Y0), (X0, Y1))):
        patches += _buildings_along(rng, a[0], a[1], b[0], b[1], offset=road)
    return World(patches, seed, scenario, regions=regions, routes=routes)


def _campus_loop(seed: int, width: float = 70.0, height: float = 30.0, extension: float = 50.0) -> World:
    rect = (0.0, 0.0, width, height)
    routes = {
        "loop": [(0.0, 0.0), (width, 0.0), (width, height), (0.0, height), (0.0, 0.0)],
        "loop_extension": [
            (0.0, 0.0), (width, 0.0), (width, height), (0.0, height), (0.0, 0.0),
            (width / 2, 0.0), (width / 2, -extension),
        ],
    }
    world = _road_grid_world(seed, [rect], "campus-loop", routes,
                             {"loop": (-10.0, -10.0, width + 10.0, height + 10.0)})
    # the extension leaves through a cut in the southern building row
    cx = width / 2
    world.patches = [p for p in world.patches if not _blocks_cut(p, cx, -3.0, 14.0, 30.0)]
    rng = np.random.default_rng(seed + 1)
    world.patches += _buildings_along(rng, cx + 7.0, -6.0, cx + 7.0, -extension - 10.0, offset=0.0)
    world.patches += _buildings_along(rng, cx - 7.0, -extension - 10.0, cx - 7.0, -6.0, offset=0.0)
    world.patches += _poles_along(rng, cx, -6.0, cx, -extension, offset=3.0, spacing=6.0)
    world.patches += box(cx, -extension - 14.0, 20.0, 6.0, 8.0)
    world.regions["extension"] = (cx - 8.0, -extension - 10.0, cx + 8.0, -6.0)
    world._arrays = None
    return world


def _blocks_cut(p: Patch, cx: float, ytop: float, half_width: float, depth: float) -> bool:
    x, y, _ = p.center
    return abs(x - cx) < half_width and ytop - depth < y < ytop


def _two_session_overlap(seed: int) -> World:
    west = (0.0, 0.0, 40.0, 30.0)
    east = (40.0, 0.0, 110.0, 30.0)
    routes = {
        # session A circles the west block
        "session_a": [(40.0, 15.0), (40.0, 30.0), (0.0, 30.0), (0.0, 0.0), (40.0, 0.0), (40.0, 15.0)],
        # session B starts on the shared street, circles the east block and comes back
        "session_b": [(40.0, 25.0), (40.0, 30.0), (110.0, 30.0), (110.0, 0.0), (40.0, 0.0), (40.0, 30.0)],
    }
    regions = {
        "a_only": (-10.0, -10.0, 37.0, 40.0),
        "shared": (37.0, -10.0, 43.0, 40.0),
        "b_only": (43.0, -10.0, 120.0, 40.0),
    }
    return _road_grid_world(seed, [west, east], "two-session-overlap", routes, regions)


SCENARIOS = {
    "corridor": _corridor,
    "campus-loop": _campus_loop,
    "two-session-overlap": _two_session_overlap,
}


def generate_world(seed: int, scenario: str, **dims) -> World:
    """Deterministic world for a named scenario; ``dims`` overrides its dimensions."""
    try:
        builder = SCENARIOS[scenario]
    except KeyError:
        raise UnknownScenarioError(
            f"unknown scenario {scenario!r}; expected one of {sorted(SCENARIOS)}"
        ) from None
    return builder(seed, **dims)


def region_area(region: Sequence[float]) -> float:
    xmin, ymin, xmax, ymax = region
    return max(0.0, xmax - xmin) * max(0.0, ymax - ymin)
