"""Planar tabletop world: palettes, shape footprints, scenes and rendering."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from matplotlib.path import Path

from ..camera import CameraView, camera_rays, look_at, pinhole

# CLIPort tableau colours, 0-255
COLORS = {
    "red": (255, 87, 89),
    "green": (89, 169, 79),
    "blue": (78, 121, 167),
    "yellow": (237, 201, 72),
    "brown": (156, 117, 95),
    "gray": (186, 176, 172),
    "cyan": (118, 183, 178),
    "orange": (242, 142, 43),
    "purple": (176, 122, 161),
    "pink": (255, 157, 167),
    "white": (255, 255, 255),
    # shades used by the pyramid base
    "lightest brown": (214, 177, 140),
    "middle brown": (181, 120, 70),
    "darkest brown": (110, 70, 45),
}
SEEN_COLORS = ("red", "green", "blue", "yellow", "brown", "gray", "cyan")
UNSEEN_COLORS = ("red", "green", "blue", "orange", "purple", "pink", "white")
TRAIN_ONLY_COLORS = tuple(c for c in SEEN_COLORS if c not in UNSEEN_COLORS)

TABLE_RGB = np.zeros(3)


# ---------------------------------------------------------------------------
# shape footprints on normalised local coordinates q in [-1, 1]^2 (y up)


def _rects(*boxes):
    def f(qx, qy):
        m = np.zeros(qx.shape, dtype=bool)
        for x0, x1, y0, y1 in boxes:
            m |= (qx >= x0) & (qx <= x1) & (qy >= y0) & (qy <= y1)
        return m
    return f


def _polygon(verts):
    path = Path(np.asarray(verts, dtype=float))

    def f(qx, qy):
        pts = np.stack([qx.reshape(-1), qy.reshape(-1)], axis=1)
        return path.contains_points(pts, radius=1e-9).reshape(qx.shape)
    return f


def _regular(n, r=1.0, phase=math.pi / 2):
    a = phase + 2 * math.pi * np.arange(n) / n
    return _polygon(np.stack([r * np.cos(a), r * np.sin(a)], axis=1))


def _star(points=5, outer=1.0, inner=0.45):
    a = math.pi / 2 + math.pi * np.arange(2 * points) / points
    r = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
    return _polygon(np.stack([r * np.cos(a), r * np.sin(a)], axis=1))


def _heart(qx, qy):
    x, y = 1.15 * qx, 1.15 * qy + 0.15
    return (x * x + y * y - 1) ** 3 - x * x * y ** 3 <= 0


@dataclass(frozen=True)
class Shape:
    name: str
    half: float  # half extent in metres
    height: float  # top height above the base
    symmetry: int  # rotational symmetry order, 0 = continuous
    occupancy: Callable
    concept: str
    floor: float | None = None  # containers: floor height inside the rim
    inner: float | None = None  # containers: inner extent as a fraction of half
    movable: bool = True
    round: bool = False  # containers: circular (bowl) vs square (box)

    def top(self, qx, qy):
        """Top surface height above the base at local points (NaN outside the footprint)."""
        inside = self.occupancy(qx, qy)
        h = np.full(qx.shape, self.height)
        if self.floor is not None:
            d = np.hypot(qx, qy) if self.round else np.maximum(np.abs(qx), np.abs(qy))
            h = np.where(d <= self.inner, self.floor, self.height)
        return np.where(inside, h, np.nan)


def _disk(qx, qy):
    return qx * qx + qy * qy <= 1.0


_PACK = {
    "letter R": (_rects((-0.8, -0.4, -1, 1), (-0.8, 0.6, 0.6, 1), (0.2, 0.6, 0.0, 1), (-0.8, 0.6, 0.0, 0.35),
                        (-0.05, 0.35, -1, 0.0)), 1),
    "letter A": (_rects((-0.8, -0.4, -1, 1), (0.4, 0.8, -1, 1), (-0.8, 0.8, 0.6, 1), (-0.8, 0.8, -0.1, 0.25)), 1),
    "triangle": (_regular(3), 3),
    "square": (_rects((-0.85, 0.85, -0.85, 0.85)), 4),
    "plus": (_rects((-0.3, 0.3, -1, 1), (-1, 1, -0.3, 0.3)), 4),
    "letter T": (_rects((-1, 1, 0.5, 1), (-0.25, 0.25, -1, 0.5)), 1),
    "diamond": (lambda qx, qy: np.abs(qx) / 0.6 + np.abs(qy) <= 1, 2),
    "pentagon": (_regular(5), 5),
    "rectangle": (_rects((-1, 1, -0.5, 0.5)), 2),
    "flower": (lambda qx, qy: np.hypot(qx, qy) <= 0.65 + 0.35 * np.cos(5 * np.arctan2(qy, qx)), 5),
    "star": (_star(), 5),
    "circle": (_disk, 0),
    "letter G": (_rects((-0.8, -0.4, -1, 1), (-0.8, 0.8, 0.6, 1), (-0.8, 0.8, -1, -0.6), (0.4, 0.8, -1, 0.0),
                        (0.0, 0.8, -0.2, 0.2)), 1),
    "letter V": (_polygon([(-1, 1), (-0.55, 1), (0, -0.3), (0.55, 1), (1, 1), (0.2, -1), (-0.2, -1)]), 1),
    "letter E": (_rects((-0.8, -0.3, -1, 1), (-0.8, 0.8, 0.6, 1), (-0.8, 0.6, -0.2, 0.2), (-0.8, 0.8, -1, -0.6)), 1),
    "letter L": (_rects((-0.8, -0.3, -1, 1), (-0.8, 0.8, -1, -0.5)), 1),
    "ring": (lambda qx, qy: (np.hypot(qx, qy) <= 1) & (np.hypot(qx, qy) >= 0.5), 0),
    "hexagon": (_regular(6, phase=0.0), 6),
    "heart": (_heart, 1),
    "letter M": (_polygon([(-1, -1), (-1, 1), (-0.6, 1), (0, 0.2), (0.6, 1), (1, 1), (1, -1), (0.6, -1), (0.6, 0.3),
                           (0, -0.4), (-0.6, 0.3), (-0.6, -1)]), 1),
}
PACK_SHAPES = tuple(_PACK)
SEEN_PACK_SHAPES = PACK_SHAPES[:14]
UNSEEN_PACK_SHAPES = PACK_SHAPES[14:]

SHAPES: dict[str, Shape] = {
    "block": Shape("block", 0.02, 0.04, 4, _rects((-1, 1, -1, 1)), "block"),
    "bowl": Shape("bowl", 0.045, 0.03, 0, _disk, "bowl", floor=0.005, inner=0.038 / 0.045, movable=False,
                  round=True),
    "pad": Shape("pad", 0.022, 0.005, 4, _rects((-1, 1, -1, 1)), "block", movable=False),
    "box": Shape("box", 0.07, 0.03, 4, _rects((-1, 1, -1, 1)), "box", floor=0.005, inner=0.062 / 0.07,
                 movable=False),
}
for _name, (_occ, _sym) in _PACK.items():
    SHAPES[_name] = Shape(_name, 0.025, 0.01, _sym, _occ, _name)

SHAPE_CONCEPTS = tuple(dict.fromkeys(s.concept for s in SHAPES.values()))

# Per-concept tint mixed into rendered colours so that RGB carries shape identity.
# Chosen offline by repulsion so every (colour, shape) render is >= 0.05 apart in RGB.
SHAPE_TINTS = {k: np.array(v) for k, v in {
    "block": (1.00, 0.59, 1.00),
    "bowl": (0.65, 0.59, 0.56),
    "box": (0.53, 1.00, 0.55),
    "letter R": (1.00, 0.36, 0.66),
    "letter A": (0.61, 0.00, 0.39),
    "triangle": (1.00, 1.00, 1.00),
    "square": (0.00, 0.28, 0.86),
    "plus": (0.36, 0.54, 0.00),
    "letter T": (0.12, 0.36, 0.41),
    "diamond": (0.24, 0.00, 0.61),
    "pentagon": (0.42, 0.00, 1.00),
    "rectangle": (0.00, 0.34, 0.00),
    "flower": (0.00, 0.00, 0.25),
    "star": (0.45, 1.00, 0.00),
    "circle": (1.00, 0.59, 0.31),
    "letter G": (0.09, 0.66, 0.74),
    "letter V": (0.35, 0.08, 0.01),
    "letter E": (0.64, 0.84, 0.91),
    "letter L": (1.00, 0.83, 0.64),
    "ring": (0.29, 0.73, 0.36),
    "hexagon": (0.78, 0.22, 1.00),
    "heart": (0.84, 1.00, 0.28),
    "letter M": (1.00, 0.35, 0.00),
}.items()}
TINT_WEIGHT = 0.15


def render_color(color: str, concept: str) -> np.ndarray:
    return (1 - TINT_WEIGHT) * np.asarray(COLORS[color], dtype=float) / 255.0 + TINT_WEIGHT * SHAPE_TINTS[concept]


# ---------------------------------------------------------------------------
# scene model


@dataclass(frozen=True)
class Workspace:
    x0: float = 0.0
    y0: float = 0.0
    size: float = 0.5
    res: int = 128

    @property
    def cell(self) -> float:
        return self.size / self.res

    @property
    def x1(self) -> float:
        return self.x0 + self.size

    @property
    def y1(self) -> float:
        return self.y0 + self.size

    @property
    def center(self) -> tuple[float, float]:
        return self.x0 + self.size / 2, self.y0 + self.size / 2

    def to_pixel(self, x, y):
        """Continuous (row, col); pixel centres sit on integers."""
        return (self.y1 - np.asarray(y)) / self.cell - 0.5, (np.asarray(x) - self.x0) / self.cell - 0.5

    def to_cell(self, x, y):
        u, v = self.to_pixel(x, y)
        return np.floor(u + 0.5).astype(int), np.floor(v + 0.5).astype(int)

    def to_world(self, u, v):
        return self.x0 + (np.asarray(v) + 0.5) * self.cell, self.y1 - (np.asarray(u) + 0.5) * self.cell

    def contains(self, x, y, margin=0.0):
        return (self.x0 + margin <= x <= self.x1 - margin) and (self.y0 + margin <= y <= self.y1 - margin)

    def pixel_centers(self):
        u, v = np.meshgrid(np.arange(self.res), np.arange(self.res), indexing="ij")
        return self.to_world(u, v)


@dataclass
class SceneObject:
    name: str
    shape: str
    color: str
    x: float
    y: float
    yaw: float = 0.0
    z: float = 0.0

    @property
    def spec(self) -> Shape:
        return SHAPES[self.shape]

    @property
    def rgb(self) -> np.ndarray:
        return render_color(self.color, self.spec.concept)

    @property
    def radius(self) -> float:
        """Bounding radius of the footprint."""
        return self.spec.half * math.sqrt(2)

    def local(self, x, y):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = np.asarray(x) - self.x, np.asarray(y) - self.y
        h = self.spec.half
        return (c * dx + s * dy) / h, (-s * dx + c * dy) / h

    def top(self, x, y):
        qx, qy = self.local(x, y)
        return self.z + self.spec.top(qx, qy)

    def contains(self, x, y):
        qx, qy = self.local(x, y)
        return self.spec.occupancy(qx, qy)

    def describe(self) -> str:
        if self.shape == "pad":
            return f"{self.color} block"
        return f"{self.color} {self.shape}"


@dataclass
class Scene:
    objects: list[SceneObject]
    workspaces: list[Workspace] = field(default_factory=lambda: [Workspace()])
    task: str = ""
    variant: str = "seen"
    seed: int = 0
    goal: dict = field(default_factory=dict)
    steps_taken: int = 0

    def copy(self) -> "Scene":
        return copy.deepcopy(self)

    def get(self, name: str) -> SceneObject:
        for o in self.objects:
            if o.name == name:
                return o
        raise KeyError(name)

    def workspace_of(self, x, y) -> int | None:
        for i, ws in enumerate(self.workspaces):
            if ws.contains(x, y):
                return i
        return None

    def to_json(self) -> str:
        d = {"objects": [asdict(o) for o in self.objects],
             "workspaces": [asdict(w) for w in self.workspaces],
             "task": self.task, "variant": self.variant, "seed": self.seed,
             "goal": self.goal, "steps_taken": self.steps_taken}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        d = json.loads(text)
        return cls(objects=[SceneObject(**o) for o in d["objects"]],
                   workspaces=[Workspace(**w) for w in d["workspaces"]],
                   task=d["task"], variant=d["variant"], seed=d["seed"], goal=d["goal"],
                   steps_taken=d["steps_taken"])


def surface(objects, x, y, exclude=()):
    """Topmost surface height and object index (-1 = table) at world points."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    height = np.zeros(x.shape)
    owner = np.full(x.shape, -1)
    for i, o in enumerate(objects):
        if o.name in exclude:
            continue
        # cheap bounding-circle cull before the exact footprint test
        near = (x - o.x) ** 2 + (y - o.y) ** 2 <= o.radius ** 2 + 1e-12
        if not near.any():
            continue
        top = np.full(x.shape, np.nan)
        top[near] = o.top(x[near], y[near])
        hit = np.isfinite(top) & (top >= height)
        height = np.where(hit, top, height)
        owner = np.where(hit, i, owner)
    return height, owner


def colorize(objects, owner):
    palette = np.stack([TABLE_RGB] + [o.rgb for o in objects]) if objects else TABLE_RGB[None]
    return np.moveaxis(palette[owner + 1], -1, 0)


def render_topdown(scene: Scene, workspace: int = 0) -> np.ndarray:
    """(4, H, W) RGB plus height field; the table is black at height 0."""
    ws = scene.workspaces[workspace]
    x, y = ws.pixel_centers()
    height, owner = surface(scene.objects, x, y)
    return np.concatenate([colorize(scene.objects, owner), height[None]], axis=0)


# ---------------------------------------------------------------------------
# oblique cameras


VIEW_SHAPE = (192, 256)
_SLAB_TOP = 0.14
_MARCH_STEPS = 160


def camera_poses(ws: Workspace, n: int = 3):
    """Top, left and right cameras around the workspace."""
    cx, cy = ws.center
    s = ws.size
    H, W = VIEW_SHAPE
    rigs = [
        (look_at((cx, cy, 1.8 * s), (cx, cy, 0.0), (0, -1, 0)), pinhole(H / 2 / (0.6 / 1.8), H, W)),
        (look_at((cx - 1.1 * s, cy, 1.2 * s), (cx, cy, 0.0), (0, 0, -1)), pinhole(1.25 * H, H, W)),
        (look_at((cx + 1.1 * s, cy, 1.2 * s), (cx, cy, 0.0), (0, 0, -1)), pinhole(1.25 * H, H, W)),
    ]
    if not 1 <= n <= len(rigs):
        raise ValueError(f"between 1 and {len(rigs)} views are available")
    return rigs[:n]


def _heightfield(scene: Scene, ws: Workspace, res: float = 0.002):
    n = int(round(ws.size / res))
    xs = ws.x0 + (np.arange(n) + 0.5) * res
    ys = ws.y0 + (np.arange(n) + 0.5) * res
    X, Y = np.meshgrid(xs, ys, indexing="xy")  # row j is y = ys[j]
    h, owner = surface(scene.objects, X, Y)
    return h, owner, res


def raymarch(scene: Scene, workspace: int, K, T, H, W, projection="perspective"):
    """Depth and colour per pixel by marching rays through a 2 mm height field."""
    ws = scene.workspaces[workspace]
    hf, owner, res = _heightfield(scene, ws)
    n = hf.shape[0]
    origins, dirs = camera_rays(K, T, H, W, projection)

    def lookup(p, grid=hf, step=res):
        i = np.floor((p[:, 1] - ws.y0) / step).astype(int)
        j = np.floor((p[:, 0] - ws.x0) / step).astype(int)
        m = grid.shape[0]
        ok = (i >= 0) & (i < m) & (j >= 0) & (j < m)
        return np.where(ok, grid[np.clip(i, 0, m - 1), np.clip(j, 0, m - 1)], 0.0), ok

    dz = dirs[:, 2]
    t_floor = (0.0 - origins[:, 2]) / dz
    t_top = np.clip((_SLAB_TOP - origins[:, 2]) / dz, 0.0, None)

    # coarse pass on a dilated max-pooled grid culls rays that only ever see the table
    pool = 5
    m = n // pool
    coarse = hf[: m * pool, : m * pool].reshape(m, pool, m, pool).max(axis=(1, 3))
    padded = np.pad(coarse, 1)
    coarse = np.max([padded[a:a + m, b:b + m] for a in range(3) for b in range(3)], axis=0)
    maybe = np.zeros(len(dz), dtype=bool)
    for k in range(0, 33):
        p = origins + dirs * (t_top + (t_floor - t_top) * k / 32)[:, None]
        h, _ = lookup(p, coarse, res * pool)
        maybe |= (h > 0) & (p[:, 2] <= h)
    idx_all = np.nonzero(maybe)[0]

    hit_t = t_floor.copy()
    o, d = origins[idx_all], dirs[idx_all]
    t0, t1 = t_top[idx_all], t_floor[idx_all]
    found = np.zeros(len(idx_all), dtype=bool)
    prev = t0.copy()
    for k in range(1, _MARCH_STEPS + 1):
        idx = np.nonzero(~found)[0]
        if idx.size == 0:
            break
        t = t0[idx] + (t1[idx] - t0[idx]) * k / _MARCH_STEPS
        p = o[idx] + d[idx] * t[:, None]
        h, _ = lookup(p)
        hit = p[:, 2] <= h + 1e-12
        hi = idx[hit]
        lo_t, hi_t = prev[hi], t[hit]
        for _ in range(8):  # bisection between the last miss and the first hit
            mid = 0.5 * (lo_t + hi_t)
            pm = o[hi] + d[hi] * mid[:, None]
            hm, _ = lookup(pm)
            inside = pm[:, 2] <= hm + 1e-12
            hi_t = np.where(inside, mid, hi_t)
            lo_t = np.where(inside, lo_t, mid)
        hit_t[idx_all[hi]] = hi_t
        found[hi] = True
        prev[idx] = t
    pts = origins + dirs * hit_t[:, None]
    who, ok = lookup(pts, owner.astype(float))
    who = np.where(ok, who, -1).astype(int)
    rgb = colorize(scene.objects, who).reshape(3, H, W)
    return rgb, hit_t.reshape(H, W)


def render_views(scene: Scene, n: int = 3, workspace: int = 0) -> list[CameraView]:
    H, W = VIEW_SHAPE
    views = []
    for T, K in camera_poses(scene.workspaces[workspace], n):
        rgb, depth = raymarch(scene, workspace, K, T, H, W)
        views.append(CameraView(rgb, depth, K, T))
    return views


def topdown_view(scene: Scene, workspace: int = 0, height: float = 1.0) -> CameraView:
    """Orthographic camera whose pixels coincide with the top-down grid."""
    ws = scene.workspaces[workspace]
    cx, cy = ws.center
    obs = render_topdown(scene, workspace)
    K = np.array([[1 / ws.cell, 0, (ws.res - 1) / 2], [0, 1 / ws.cell, (ws.res - 1) / 2], [0, 0, 1.0]])
    T = look_at((cx, cy, height), (cx, cy, 0.0), (0, -1, 0))
    return CameraView(obs[:3], height - obs[3], K, T, projection="orthographic")
