"""Desk-scale tabletop tasks with oracle experts and partial-credit scoring."""

from __future__ import annotations

import math
from itertools import permutations
from typing import NamedTuple

import numpy as np

from ..instructions import parse
from .world import (
    COLORS,
    SEEN_COLORS,
    SEEN_PACK_SHAPES,
    SHAPES,
    UNSEEN_COLORS,
    UNSEEN_PACK_SHAPES,
    Scene,
    SceneObject,
    Workspace,
    surface,
)

TWO_PI = 2 * math.pi
QUARTER = math.pi / 2


class Action(NamedTuple):
    u: int
    v: int
    theta: float
    workspace: int = 0


class OracleAction(NamedTuple):
    pick: Action
    place: Action


def wrap(theta: float) -> float:
    return float(theta % TWO_PI)


def canonical_grasp(obj: SceneObject) -> float:
    sym = obj.spec.symmetry
    return 0.0 if sym == 0 else wrap(obj.yaw % (TWO_PI / sym))


def _pixel_action(scene: Scene, x: float, y: float, theta: float) -> Action:
    ws_i = scene.workspace_of(x, y)
    if ws_i is None:
        raise ValueError(f"point ({x:.3f}, {y:.3f}) lies outside every workspace")
    u, v = scene.workspaces[ws_i].to_cell(x, y)
    return Action(int(u), int(v), wrap(theta), ws_i)


def _origin_distance(scene: Scene, obj: SceneObject) -> float:
    ws = scene.workspaces[scene.workspace_of(obj.x, obj.y) or 0]
    u, v = ws.to_pixel(obj.x, obj.y)
    return float(u * u + v * v)


def nearest_to_origin(scene: Scene, objs):
    """Deterministic tie-break: smallest pixel distance to the (0, 0) corner, then list order."""
    if not objs:
        return None
    return min(objs, key=lambda o: (_origin_distance(scene, o), scene.objects.index(o)))


# ---------------------------------------------------------------------------
# referring expressions


def resolve_phrase(phrase: str):
    """Split a noun phrase into (colours, shape) using the world vocabulary."""
    text = " " + " ".join(phrase.lower().replace(" and ", " ").split()) + " "
    colors = []
    for name in sorted(COLORS, key=len, reverse=True):
        key = f" {name} "
        while key in text:
            colors.append((text.index(key), name))
            text = text.replace(key, " " * (len(key) - 1) + " ", 1)
    colors = [c for _, c in sorted(colors)]
    shape = None
    for name in sorted(SHAPES, key=len, reverse=True):
        n = name.lower()
        for form in (n, n + "s", n + "es"):
            if f" {form} " in text:
                shape = name
                break
        if shape:
            break
    return colors, shape


def matches(obj: SceneObject, colors, shape) -> bool:
    if colors and obj.color not in colors:
        return False
    if shape is None:
        return True
    return obj.shape == shape or obj.spec.concept == shape


# ---------------------------------------------------------------------------
# spawning


def _spawn(rng, scene: Scene, specs, ws_index: int, margin: float = 0.01, tries: int = 2000, keepout=()):
    """Rejection-sample non-overlapping poses for (name, shape, color, radius) tuples."""
    ws = scene.workspaces[ws_index]
    placed = []
    for name, shape, color, radius in specs:
        for _ in range(tries):
            x = rng.uniform(ws.x0 + radius + margin, ws.x1 - radius - margin)
            y = rng.uniform(ws.y0 + radius + margin, ws.y1 - radius - margin)
            obstacles = [(o.x, o.y, o.radius) for o in scene.objects] + list(keepout)
            if all(math.hypot(x - ox, y - oy) > radius + r + margin for ox, oy, r in obstacles):
                break
        else:
            raise RuntimeError(f"spawn rejection exhausted for task {scene.task!r} seed {scene.seed}")
        yaw = float(rng.uniform(0, TWO_PI)) if SHAPES[shape].symmetry != 0 else 0.0
        obj = SceneObject(name, shape, color, float(x), float(y), yaw)
        scene.objects.append(obj)
        placed.append(obj)
    return placed


def make_workspaces(n: int, size: float = 0.5, res: int = 128, gap: float = 0.1) -> list[Workspace]:
    return [Workspace(x0=k * (size + gap), y0=0.0, size=size, res=res) for k in range(n)]


# ---------------------------------------------------------------------------
# tasks


class Task:
    name = ""
    template = ""
    variants = ("seen", "unseen")

    def sample(self, seed: int, variant: str = "seen", n_workspaces: int = 1, layout: str = "single") -> Scene:
        if variant not in self.variants:
            raise ValueError(f"{self.name} has variants {self.variants}, not {variant!r}")
        if layout not in ("single", "cross"):
            raise ValueError("layout must be 'single' or 'cross'")
        if layout == "cross" and n_workspaces < 2:
            raise ValueError("a cross-workspace layout needs at least two workspaces")
        rng = np.random.default_rng([seed, sum(map(ord, self.name + variant))])
        scene = Scene([], make_workspaces(n_workspaces), self.name, variant, seed)
        self._populate(rng, scene, movable_ws=0, static_ws=n_workspaces - 1 if layout == "cross" else 0)
        return scene

    def _populate(self, rng, scene, movable_ws, static_ws):
        raise NotImplementedError

    def instruction(self, scene: Scene) -> str:
        raise NotImplementedError

    def instruction_space(self, variant: str) -> list[str]:
        raise NotImplementedError

    def progress(self, scene: Scene) -> float:
        raise NotImplementedError

    def max_steps(self, scene: Scene) -> int:
        raise NotImplementedError

    def oracle(self, scene: Scene, instruction: str | None = None) -> OracleAction | None:
        raise NotImplementedError

    def done(self, scene: Scene) -> bool:
        return self.progress(scene) >= 1.0 - 1e-9


def _in_bowl(obj: SceneObject, bowl: SceneObject) -> bool:
    return math.hypot(obj.x - bowl.x, obj.y - bowl.y) < SHAPES["bowl"].half * SHAPES["bowl"].inner


class PutBlocksInBowls(Task):
    name = "put_blocks_in_bowls"
    template = "put the {pick} blocks in a {place} bowl"

    def _pool(self, variant):
        return SEEN_COLORS if variant == "seen" else UNSEEN_COLORS

    def _populate(self, rng, scene, movable_ws, static_ws):
        pool = list(self._pool(scene.variant))
        pick_c, place_c = rng.choice(pool, size=2, replace=False)
        n_bowls = int(rng.integers(1, 3))
        n_blocks = int(rng.integers(1, n_bowls + 1))
        others_block = [c for c in pool if c != pick_c]
        others_bowl = [c for c in pool if c != place_c]
        n_dblocks = int(rng.integers(1, 3))
        n_dbowls = int(rng.integers(0, 2))
        bowl_r, block_r = SHAPES["bowl"].half, SHAPES["block"].half * math.sqrt(2)
        bowls = [(f"bowl{i}", "bowl", str(place_c), bowl_r) for i in range(n_bowls)]
        bowls += [(f"bowl{n_bowls + i}", "bowl", str(c), bowl_r)
                  for i, c in enumerate(rng.choice(others_bowl, size=n_dbowls, replace=False))]
        blocks = [(f"block{i}", "block", str(pick_c), block_r) for i in range(n_blocks)]
        blocks += [(f"block{n_blocks + i}", "block", str(c), block_r)
                   for i, c in enumerate(rng.choice(others_block, size=n_dblocks, replace=True))]
        _spawn(rng, scene, bowls, static_ws)
        _spawn(rng, scene, blocks, movable_ws)
        scene.goal = {"pick_color": str(pick_c), "place_color": str(place_c), "n_blocks": n_blocks}

    def instruction(self, scene):
        return self.template.format(pick=scene.goal["pick_color"], place=scene.goal["place_color"])

    def instruction_space(self, variant):
        pool = self._pool(variant)
        return [self.template.format(pick=a, place=b) for a, b in permutations(pool, 2)]

    def _targets(self, scene, colors=None, shape="block"):
        colors = colors or [scene.goal["pick_color"]]
        return [o for o in scene.objects if matches(o, colors, shape)]

    def _bowls(self, scene, colors=None):
        colors = colors or [scene.goal["place_color"]]
        return [o for o in scene.objects if matches(o, colors, "bowl")]

    def progress(self, scene):
        bowls = self._bowls(scene)
        done = sum(any(_in_bowl(b, w) for w in bowls) for b in self._targets(scene))
        return min(1.0, done / scene.goal["n_blocks"])

    def max_steps(self, scene):
        return scene.goal["n_blocks"] + 2

    def oracle(self, scene, instruction=None):
        ins = parse(instruction or self.instruction(scene))
        pick_colors, pick_shape = resolve_phrase(ins.pick)
        place_colors, place_shape = resolve_phrase(ins.place)
        bowls = [o for o in scene.objects if matches(o, place_colors, place_shape)]
        blocks = [o for o in scene.objects if matches(o, pick_colors, pick_shape) and o.spec.movable]
        if not bowls or not blocks:
            raise ValueError(f"instruction {ins.raw!r} is unsatisfiable in this scene")
        todo = [b for b in blocks if not any(_in_bowl(b, w) for w in bowls)]
        if not todo:
            return None
        block = nearest_to_origin(scene, todo)
        free = [w for w in bowls if not any(_in_bowl(b, w) for b in scene.objects if b.spec.movable)]
        bowl = nearest_to_origin(scene, free or bowls)
        return OracleAction(_pixel_action(scene, block.x, block.y, canonical_grasp(block)),
                            _pixel_action(scene, bowl.x, bowl.y, 0.0))


# pyramid geometry, relative to the base centre along the base axis
_PAD_PITCH = 0.045
_SLOTS = [(-_PAD_PITCH, 0.005), (0.0, 0.005), (_PAD_PITCH, 0.005),
          (-_PAD_PITCH / 2, 0.045), (_PAD_PITCH / 2, 0.045), (0.0, 0.085)]
_SUPPORTS = {3: (0, 1), 4: (1, 2), 5: (3, 4)}
_SHADES = ("lightest brown", "middle brown", "darkest brown")
_SLOT_TOL = 0.012


def _wrap_quarter(d: float) -> float:
    """Representative of d modulo 90 degrees in [-45, 45)."""
    return (d + QUARTER / 2) % QUARTER - QUARTER / 2


class StackBlockPyramidSeq(Task):
    name = "stack_block_pyramid_seq"
    template = "put the {pick} block on {place}"

    def _pool(self, variant):
        return [c for c in (SEEN_COLORS if variant == "seen" else UNSEEN_COLORS) if c != "brown"]

    def _populate(self, rng, scene, movable_ws, static_ws):
        colors = [str(c) for c in rng.choice(self._pool(scene.variant), size=6, replace=False)]
        ws = scene.workspaces[static_ws]
        base_r = 0.085
        for _ in range(2000):
            bx = rng.uniform(ws.x0 + base_r + 0.01, ws.x1 - base_r - 0.01)
            by = rng.uniform(ws.y0 + base_r + 0.01, ws.y1 - base_r - 0.01)
            if all(math.hypot(bx - o.x, by - o.y) > base_r + o.radius + 0.01 for o in scene.objects):
                break
        else:
            raise RuntimeError(f"spawn rejection exhausted for task {scene.task!r} seed {scene.seed}")
        yaw = float(rng.uniform(0, TWO_PI))
        c, s = math.cos(yaw), math.sin(yaw)
        for i, shade in enumerate(_SHADES):
            off = _SLOTS[i][0]
            scene.objects.append(SceneObject(f"pad{i}", "pad", shade, bx + c * off, by + s * off, yaw))
        # keep the blocks away from the whole base footprint
        _spawn(rng, scene, [(f"block{i}", "block", col, SHAPES["block"].half * math.sqrt(2))
                            for i, col in enumerate(colors)], movable_ws, keepout=[(bx, by, base_r)])
        scene.goal = {"colors": colors, "base": [float(bx), float(by), yaw]}

    def slot_pose(self, scene, k):
        bx, by, yaw = scene.goal["base"]
        off, z = _SLOTS[k]
        return bx + math.cos(yaw) * off, by + math.sin(yaw) * off, z

    def filled(self, scene) -> list[bool]:
        out = []
        for k, col in enumerate(scene.goal["colors"]):
            x, y, z = self.slot_pose(scene, k)
            block = next(o for o in scene.objects if o.color == col and o.shape == "block")
            ok = math.hypot(block.x - x, block.y - y) < _SLOT_TOL and abs(block.z - z) < 0.005
            ok = ok and all(out[j] for j in _SUPPORTS.get(k, ()))
            out.append(ok)
        return out

    def _place_phrase(self, scene, k):
        cols = scene.goal["colors"]
        if k < 3:
            return f"the {_SHADES[k]} block"
        a, b = _SUPPORTS[k]
        return f"the {cols[a]} and {cols[b]} blocks"

    def instruction(self, scene):
        filled = self.filled(scene)
        k = next((i for i, f in enumerate(filled) if not f), 5)
        return self.template.format(pick=scene.goal["colors"][k], place=self._place_phrase(scene, k))

    def instruction_space(self, variant):
        pool = self._pool(variant)
        places = [f"the {s} block" for s in _SHADES] + [f"the {a} and {b} blocks" for a, b in permutations(pool, 2)]
        return [self.template.format(pick=c, place=p) for c in pool for p in places]

    def progress(self, scene):
        return sum(self.filled(scene)) / 6.0

    def max_steps(self, scene):
        return 8

    def oracle(self, scene, instruction=None):
        if self.done(scene):
            return None
        ins = parse(instruction or self.instruction(scene))
        pick_colors, _ = resolve_phrase(ins.pick)
        place_colors, place_shape = resolve_phrase(ins.place)
        block = next((o for o in scene.objects if o.shape == "block" and o.color in pick_colors), None)
        refs = [o for o in scene.objects if matches(o, place_colors, place_shape)]
        if block is None or not refs:
            raise ValueError(f"instruction {ins.raw!r} is unsatisfiable in this scene")
        tx, ty = float(np.mean([o.x for o in refs])), float(np.mean([o.y for o in refs]))
        delta = _wrap_quarter(scene.goal["base"][2] - block.yaw)
        return OracleAction(_pixel_action(scene, block.x, block.y, canonical_grasp(block)),
                            _pixel_action(scene, tx, ty, delta))


class PackShapes(Task):
    name = "pack_shapes"
    template = "pack the {pick} in the {place}"

    def _shapes(self, variant):
        return SEEN_PACK_SHAPES if variant == "seen" else UNSEEN_PACK_SHAPES

    def _populate(self, rng, scene, movable_ws, static_ws):
        shapes = [str(s) for s in rng.choice(self._shapes(scene.variant), size=4, replace=False)]
        colors = [c for c in SEEN_COLORS if c != "brown"]
        _spawn(rng, scene, [("box", "box", "brown", SHAPES["box"].half * math.sqrt(2))], static_ws)
        r = SHAPES[shapes[0]].half * math.sqrt(2)
        _spawn(rng, scene, [(f"shape{i}", s, str(rng.choice(colors)), r) for i, s in enumerate(shapes)],
               movable_ws)
        scene.goal = {"target": "shape0", "shape": shapes[0]}

    def instruction(self, scene):
        return self.template.format(pick=scene.goal["shape"], place="brown box")

    def instruction_space(self, variant):
        return [self.template.format(pick=s, place="brown box") for s in self._shapes(variant)]

    @staticmethod
    def packed(box: SceneObject, obj: SceneObject) -> bool:
        qx, qy = box.local(obj.x, obj.y)
        lim = (box.spec.inner * box.spec.half - obj.spec.half) / box.spec.half
        return bool(abs(qx) <= lim and abs(qy) <= lim)

    def progress(self, scene):
        """Fraction of goal objects inside the box; sampled scenes have a single goal object."""
        box = scene.get("box")
        targets = scene.goal.get("targets", [scene.goal["target"]])
        return sum(self.packed(box, scene.get(t)) for t in targets) / len(targets)

    def max_steps(self, scene):
        return 1

    def oracle(self, scene, instruction=None):
        ins = parse(instruction or self.instruction(scene))
        _, pick_shape = resolve_phrase(ins.pick)
        place_colors, place_shape = resolve_phrase(ins.place)
        objs = [o for o in scene.objects if o.shape == pick_shape]
        boxes = [o for o in scene.objects if matches(o, place_colors, place_shape)]
        if not objs or not boxes:
            raise ValueError(f"instruction {ins.raw!r} is unsatisfiable in this scene")
        if self.done(scene):
            return None
        obj, box = nearest_to_origin(scene, objs), boxes[0]
        return OracleAction(_pixel_action(scene, obj.x, obj.y, canonical_grasp(obj)),
                            _pixel_action(scene, box.x, box.y, 0.0))


TASKS: dict[str, Task] = {t.name: t for t in (PutBlocksInBowls(), StackBlockPyramidSeq(), PackShapes())}
ALIASES = {"put_blocks": "put_blocks_in_bowls", "pyramid": "stack_block_pyramid_seq", "pack": "pack_shapes"}


def get_task(name: str) -> Task:
    key = ALIASES.get(name, name)
    if key not in TASKS:
        raise KeyError(f"unknown task {name!r}; available: {', '.join(sorted(TASKS))}")
    return TASKS[key]


def sample_scene(task: str, seed: int, variant: str = "seen", n_workspaces: int = 1,
                 layout: str = "single") -> Scene:
    return get_task(task).sample(seed, variant, n_workspaces, layout)


# ---------------------------------------------------------------------------
# dynamics


def _support_height(objects, obj: SceneObject) -> float:
    q = np.linspace(-0.7, 0.7, 9)  # inset so pixel-level misalignment does not snag neighbours
    qx, qy = np.meshgrid(q, q)
    inside = obj.spec.occupancy(qx, qy)
    if not inside.any():
        inside[4, 4] = True
    h = obj.spec.half
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    lx, ly = qx[inside] * h, qy[inside] * h
    heights, _ = surface(objects, obj.x + c * lx - s * ly, obj.y + s * lx + c * ly, exclude={obj.name})
    return float(heights.max())


def grasp(scene: Scene, pick: Action) -> SceneObject | None:
    ws = scene.workspaces[pick.workspace]
    px, py = ws.to_world(pick.u, pick.v)
    cands = [o for o in scene.objects
             if o.spec.movable and math.hypot(o.x - px, o.y - py) <= o.spec.half]
    if not cands:
        return None
    return max(cands, key=lambda o: (o.z, -math.hypot(o.x - px, o.y - py)))


def step(scene: Scene, pick: Action, place: Action) -> tuple[Scene, float]:
    """Teleport the grasped object rigidly from the pick pose to the place pose."""
    task = get_task(scene.task)
    before = task.progress(scene)
    out = scene.copy()
    out.steps_taken += 1
    obj = grasp(out, pick)
    if obj is None:
        return out, 0.0
    pws, qws = out.workspaces[pick.workspace], out.workspaces[place.workspace]
    px, py = pws.to_world(pick.u, pick.v)
    qx, qy = qws.to_world(place.u, place.v)
    c, s = math.cos(place.theta), math.sin(place.theta)
    dx, dy = obj.x - px, obj.y - py
    obj.x, obj.y = float(qx + c * dx - s * dy), float(qy + s * dx + c * dy)
    obj.yaw = wrap(obj.yaw + place.theta)
    obj.z = _support_height(out.objects, obj)
    return out, task.progress(out) - before


def run_oracle_episode(scene: Scene):
    """Roll the oracle to completion; yields (scene_before, instruction, action, reward)."""
    task = get_task(scene.task)
    for _ in range(task.max_steps(scene)):
        instruction = task.instruction(scene)
        act = task.oracle(scene, instruction)
        if act is None:
            break
        nxt, r = step(scene, act.pick, act.place)
        yield scene, instruction, act, r
        scene = nxt
