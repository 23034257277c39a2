"""Equivariance audits at the kernel, volume and argmax level, plus semantic frame averaging.

Each check returns rows of (name, measured value, bound, passed) so the command line and the
test suite report the same numbers.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch

from .groups import GroupElement, apply_group_to_action, rotate_spatial, shift_spatial
from .policy import Policy, decode, extract_crop
from .semantic import semantic_equivariance_error
from .sim.world import COLORS, Scene, SceneObject, render_topdown
from .steerable import check_steerability


@dataclass
class AuditRow:
    name: str
    value: float
    bound: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<40s} {self.value:12.4g}  (bound {self.bound:g}) {self.detail}"


AUDIT_SHAPES = ("block", "letter R", "letter T", "triangle", "heart", "letter L", "star", "rectangle")
AUDIT_COLORS = ("red", "green", "blue", "yellow", "purple", "orange")


def single_object_scene(rng, margin: float = 0.12) -> tuple[Scene, str]:
    """One object with random pose, kept clear of the border so rotations keep it in view."""
    shape = str(rng.choice(AUDIT_SHAPES))
    color = str(rng.choice([c for c in AUDIT_COLORS if c in COLORS]))
    scene = Scene([])
    ws = scene.workspaces[0]
    cx, cy = ws.center
    # stay within the disc that survives every rotation about the image centre
    r = (ws.size / 2 - margin) * math.sqrt(rng.uniform())
    a = rng.uniform(0, 2 * math.pi)
    obj = SceneObject("target", shape, color, cx + r * math.cos(a), cy + r * math.sin(a), float(rng.uniform(0, 2 * math.pi)))
    scene.objects.append(obj)
    return scene, obj.describe()


def as_float64(policy: Policy) -> Policy:
    return copy.deepcopy(policy).double().eval()


def _close(a, b, n_theta) -> tuple[bool, bool]:
    """(within one pixel and one bin, exact)."""
    dpix = max(abs(a.u - b[0]), abs(a.v - b[1]))
    dbin = (a.bin - b[2]) % n_theta
    dbin = min(dbin, n_theta - dbin)
    return dpix <= 1 and dbin <= 1, dpix == 0 and dbin == 0


def _expected(act, g, shape, n_theta):
    t = apply_group_to_action((act.u, act.v, act.theta), g, ((shape[0] - 1) / 2, (shape[1] - 1) / 2), shape)
    return round(t.u), round(t.v), round(t.theta * n_theta / (2 * math.pi)) % n_theta, t.in_bounds


# ---------------------------------------------------------------------------
# kernels


def kernel_rows(policy: Policy, group: str, trials: int, seed: int = 0) -> list[AuditRow]:
    rng = np.random.default_rng(seed)
    cfg = policy.cfg
    worst = {"pick": 0.0, "place": 0.0}
    for _ in range(trials):
        lang = rng.standard_normal(cfg.embed_dim)
        lang /= np.linalg.norm(lang)
        scene, _ = single_object_scene(rng)
        obs = render_topdown(scene)
        u, v = scene.workspaces[0].to_cell(scene.objects[0].x, scene.objects[0].y)
        crop = extract_crop(obs, u, v, cfg.crop_size)
        for which, cond in (("pick", lang), ("place", crop)):
            k = policy.lifted_kernel(which, cond)
            if group == "C4":
                res = max(check_steerability(k, GroupElement(4, i)).residual for i in range(1, 4))
            else:
                res = max(check_steerability(k, GroupElement(36, i), interpolation="bilinear").residual
                          for i in range(1, 36))
            worst[which] = max(worst[which], res)
    bound = 0.0 if group == "C4" else 1e-3
    return [AuditRow(f"{which} kernel steerability {group}", w, bound, w <= bound, f"{trials} kernels")
            for which, w in worst.items()]


# ---------------------------------------------------------------------------
# argmax level


def _trial_inputs(policy, pipeline, rng):
    scene, phrase = single_object_scene(rng)
    enc = pipeline.encode(scene)
    sem = pipeline.blended([enc], phrase)[0]
    return scene, enc.topdown, sem, pipeline.language(phrase)


def pick_rows(policy: Policy, pipeline, group: str, trials: int, seed: int = 0) -> list[AuditRow]:
    """Decoded pick under scene translations and rotations (observation and semantic map move together).

    group is "C4", "C36" or "both"; with "both" each trial checks a quarter turn and a finer turn
    against the same reference decode.
    """
    pol = as_float64(policy)
    fast = copy.deepcopy(policy).float().eval()
    rng = np.random.default_rng(seed)
    n = pol.cfg.n_theta
    groups = ("C4", "C36") if group == "both" else (group,)
    counts = {k: 0 for k in ("translation",) + groups}
    for _ in range(trials):
        _, obs, sem, lang = _trial_inputs(pol, pipeline, rng)
        a = decode(pol.pick_volume(obs, lang, sem))
        # translation by a few pixels, kept inside the image
        du, dv = (int(x) for x in rng.integers(-6, 7, size=2))
        b = decode(pol.pick_volume(shift_spatial(obs, du, dv), lang, shift_spatial(sem[None], du, dv)[0]))
        counts["translation"] += _close(b, (a.u + du, a.v + dv, a.bin), n)[1]
        for grp in groups:
            if grp == "C4":
                g, net = GroupElement(4, int(rng.integers(1, 4))), pol
            else:
                # the quarter turns are covered above, so draw from the rest
                g, net = GroupElement(36, int(rng.choice([i for i in range(1, 36) if i % 9]))), fast
            b = decode(net.pick_volume(rotate_spatial(obs, g), lang, rotate_spatial(sem[None], g)[0]))
            eu, ev, eb, _ = _expected(a, g, obs.shape[1:], n)
            within, exact = _close(b, (eu, ev, eb), n)
            counts[grp] += exact if grp == "C4" else within
    ok = counts["translation"]
    rows = [AuditRow("pick argmax translation (exact)", ok / trials, 1.0, ok == trials, f"{ok}/{trials}")]
    if "C4" in groups:
        ok = counts["C4"]
        rows.append(AuditRow("pick argmax rotation C4 (exact)", ok / trials, 1.0, ok == trials, f"{ok}/{trials}"))
    if "C36" in groups:
        ok = counts["C36"]
        rows.append(AuditRow("pick argmax rotation C36 (1 px, 1 bin)", ok / trials, 0.95, ok / trials >= 0.95,
                             f"{ok}/{trials}"))
    return rows


def place_rows(policy: Policy, pipeline, trials: int, seed: int = 0) -> list[AuditRow]:
    """Quarter turns of the placement (g1) and of the picked object's crop (g2)."""
    pol = as_float64(policy)
    rng = np.random.default_rng(seed)
    n = pol.cfg.n_theta
    q = n // 4
    g1_ok = g2_ok = 0
    for _ in range(trials):
        scene, obs, sem, lang = _trial_inputs(pol, pipeline, rng)
        held, _ = single_object_scene(rng)
        ho = render_topdown(held)
        u, v = held.workspaces[0].to_cell(held.objects[0].x, held.objects[0].y)
        crop = extract_crop(ho, u, v, pol.cfg.crop_size)
        a = decode(pol.place_volume(obs, lang, sem, crop))
        g1 = GroupElement(4, int(rng.integers(1, 4)))
        b = decode(pol.place_volume(rotate_spatial(obs, g1), lang, rotate_spatial(sem[None], g1)[0], crop))
        eu, ev, eb, _ = _expected(a, g1, obs.shape[1:], n)
        g1_ok += _close(b, (eu, ev, eb), n)[0]
        k2 = int(rng.integers(1, 4))
        c = decode(pol.place_volume(obs, lang, sem, np.rot90(crop, k2, (1, 2))))
        g2_ok += _close(c, (a.u, a.v, (a.bin - k2 * q) % n), n)[0]
    return [
        AuditRow("place argmax g1 (placement, 1 px, 1 bin)", g1_ok / trials, 0.95, g1_ok / trials >= 0.95,
                 f"{g1_ok}/{trials}"),
        AuditRow("place argmax g2 (picked object, 1 px, 1 bin)", g2_ok / trials, 0.95, g2_ok / trials >= 0.95,
                 f"{g2_ok}/{trials}"),
    ]


# ---------------------------------------------------------------------------
# semantic maps


def semantic_rows(backend, trials: int, seed: int = 0, patch_sizes=(8, 16, 32)) -> list[AuditRow]:
    """Frame-averaging error of the patch-level text map, per patch size, over single-object scenes."""
    rng = np.random.default_rng(seed)
    scenes = [single_object_scene(rng) for _ in range(trials)]
    errs = []
    for p in patch_sizes:
        e = [semantic_equivariance_error(render_topdown(s), phrase, backend, 4, p, p // 2) for s, phrase in scenes]
        errs.append(float(np.mean(e)))
    rows = [AuditRow(f"semantic frame averaging p={patch_sizes[0]}", errs[0], 0.05, errs[0] <= 0.05)]
    mono = all(b >= a for a, b in zip(errs, errs[1:]))
    rows.append(AuditRow("semantic error non-decreasing in patch size", float(mono), 1.0, mono,
                         " ".join(f"p{p}={e:.4f}" for p, e in zip(patch_sizes, errs))))
    return rows


def run_audit(policy: Policy, pipeline, group: str = "C4", trials: int = 20, seed: int = 0) -> list[AuditRow]:
    if group not in ("C4", "C36"):
        raise ValueError("group must be C4 or C36")
    with torch.no_grad():
        rows = kernel_rows(policy, group, max(1, min(trials, 50)), seed)
        rows += pick_rows(policy, pipeline, group, trials, seed)
        if group == "C4":
            rows += place_rows(policy, pipeline, trials, seed)
        rows += semantic_rows(pipeline.backend, min(trials, 20), seed)
    return rows
