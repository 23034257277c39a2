"""Demonstrations, augmentation, cross-entropy imitation training and rollout evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import gemt
from .agent import GreedyAgent, SemanticPipeline
from .camera import CameraView
from .groups import GroupElement, apply_group_to_action, rotate_field
from .policy import Observation, Policy, extract_crop, theta_bin
from .semantic import build_crop_db
from .instructions import parse
from .sim.tasks import Action, get_task, grasp, run_oracle_episode, sample_scene, step
from .sim.world import Scene, render_topdown, render_views

log = logging.getLogger(__name__)
TWO_PI = 2 * math.pi


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# demonstrations


@dataclass
class Demonstration:
    observation: Observation
    instruction: str
    pick_text: str
    place_text: str
    pick_label: tuple  # (u, v, theta) absolute grasp angle
    place_label: tuple  # (u, v, theta) pick-to-place rotation
    episode_id: str
    step: int
    pick_symmetry: int = 0
    scene_json: str = ""

    @property
    def topdown(self) -> np.ndarray:
        return self.observation.topdown


def snap(theta: float, n_theta: int) -> float:
    return TWO_PI * theta_bin(theta, n_theta) / n_theta


def collect_demos(task: str, n: int, seed: int, variant: str = "seen", n_theta: int = 72,
                  n_views: int = 3) -> list[Demonstration]:
    """Oracle rollouts of ``n`` episodes seeded ``seed, seed+1, ...``; unsatisfiable seeds are skipped."""
    demos = []
    for i in range(n):
        ep_seed = seed + i
        try:
            scene = sample_scene(task, ep_seed, variant)
        except RuntimeError as exc:
            log.warning("skipping seed %d: %s", ep_seed, exc)
            continue
        for k, (before, instruction, act, _) in enumerate(run_oracle_episode(scene)):
            ins = parse(instruction)
            obs = Observation(render_topdown(before), render_views(before, n_views) if n_views else None)
            obj = grasp(before, act.pick)
            sym = obj.spec.symmetry if obj is not None else 0
            demos.append(Demonstration(
                obs, instruction, ins.pick, ins.place,
                (act.pick.u, act.pick.v, snap(act.pick.theta, n_theta)),
                (act.place.u, act.place.v, snap(act.place.theta, n_theta)),
                f"{task}-{variant}-{ep_seed:06d}", k, sym, before.to_json()))
    return demos


def save_demo(demo: Demonstration, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    gemt.save(d / "topdown.gemt", demo.topdown)
    cams = []
    for i, v in enumerate(demo.observation.views or []):
        gemt.save(d / f"view{i}_rgb.gemt", v.rgb)
        gemt.save(d / f"view{i}_depth.gemt", v.depth)
        cams.append({"intrinsics": np.asarray(v.intrinsics).tolist(), "extrinsics": np.asarray(v.extrinsics).tolist(),
                     "projection": v.projection})
    manifest = {
        "instruction": demo.instruction, "parsed": {"pick": demo.pick_text, "place": demo.place_text},
        "pick_label": list(demo.pick_label), "place_label": list(demo.place_label),
        "episode_id": demo.episode_id, "step": demo.step, "pick_symmetry": demo.pick_symmetry,
        "cameras": cams, "scene": json.loads(demo.scene_json) if demo.scene_json else None,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_demo(directory) -> Demonstration:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    views = [CameraView(gemt.load(d / f"view{i}_rgb.gemt").astype(float), gemt.load(d / f"view{i}_depth.gemt").astype(float),
                        np.array(c["intrinsics"]), np.array(c["extrinsics"]), c["projection"])
             for i, c in enumerate(m["cameras"])]
    obs = Observation(gemt.load(d / "topdown.gemt").astype(float), views or None)
    return Demonstration(obs, m["instruction"], m["parsed"]["pick"], m["parsed"]["place"],
                         tuple(m["pick_label"]), tuple(m["place_label"]), m["episode_id"], m["step"],
                         m["pick_symmetry"], json.dumps(m["scene"], sort_keys=True) if m["scene"] else "")


def save_dataset(demos, root) -> list[Path]:
    out = []
    for demo in demos:
        p = Path(root) / demo.episode_id / f"step{demo.step:02d}"
        save_demo(demo, p)
        out.append(p)
    return out


def load_dataset(root) -> list[Demonstration]:
    return [load_demo(p.parent) for p in sorted(Path(root).glob("*/step*/manifest.json"))]


# ---------------------------------------------------------------------------
# prepared training samples


@dataclass
class Sample:
    """A demonstration with its semantic inputs and language vectors attached."""

    obs: np.ndarray
    pick_lang: np.ndarray
    place_lang: np.ndarray
    pick_map: np.ndarray
    place_map: np.ndarray
    pick: tuple
    place: tuple
    pick_symmetry: int = 0
    augmented: bool = False


def prepare(demos, pipeline: SemanticPipeline, rebuild_db: bool = True) -> list[Sample]:
    """Build the crop database from the demos, then compute each demo's semantic maps."""
    st = pipeline.settings
    if rebuild_db:
        build_crop_db(demos, pipeline.backend, st.topdown_patch, pipeline.crop_db)
    samples = []
    for d in demos:
        if not d.observation.views:
            raise ValueError(f"demo {d.episode_id}/{d.step} has no camera views")
        ws = Scene.from_json(d.scene_json).workspaces[0] if d.scene_json else None
        enc = pipeline.encode(_stub_scene(ws), 0, d.topdown, d.observation.views)
        samples.append(Sample(
            d.topdown.astype(np.float32), pipeline.language(d.pick_text), pipeline.language(d.place_text),
            pipeline.blended([enc], d.pick_text)[0], pipeline.blended([enc], d.place_text)[0],
            tuple(d.pick_label), tuple(d.place_label), d.pick_symmetry))
    return samples


def _stub_scene(ws):
    from .sim.world import Workspace

    return Scene([], [ws or Workspace()])


# ---------------------------------------------------------------------------
# targets and augmentation


def one_hot_targets(label, shape) -> np.ndarray:
    n, H, W = shape
    u, v, theta = label
    if not (0 <= u < H and 0 <= v < W):
        raise ValueError(f"label ({u}, {v}) outside a {H}x{W} image")
    if not np.isfinite(theta):
        raise ValueError("label angle must be finite")
    out = np.zeros(shape)
    out[theta_bin(theta, n), int(u), int(v)] = 1.0
    return out


def _canonical(theta: float, symmetry: int) -> float:
    return 0.0 if symmetry == 0 else theta % (TWO_PI / symmetry)


def augment(sample: Sample, g: GroupElement) -> tuple[Sample, bool]:
    """Transform image, semantic maps and labels by the same rigid motion.

    The place angle is the relative pick-to-place rotation, which a global motion leaves
    unchanged.  Returns ``(sample, ok)``; ``ok`` is False when a label would leave the
    image, in which case the input is returned untouched.
    """
    if g.is_identity():
        return sample, True
    H, W = sample.obs.shape[-2:]
    c = ((H - 1) / 2, (W - 1) / 2)
    pu, pv, pt, p_ok = apply_group_to_action(sample.pick, g, c, (H, W))
    qu, qv, _, q_ok = apply_group_to_action(sample.place, g, c, (H, W))
    if not (p_ok and q_ok):
        return sample, False
    rot = lambda a: rotate_field(np.asarray(a), g, "nearest")  # noqa: E731
    return replace(
        sample,
        obs=rot(sample.obs),
        pick_map=rot(sample.pick_map[None])[0],
        place_map=rot(sample.place_map[None])[0],
        pick=(int(round(pu)), int(round(pv)), _canonical(pt, sample.pick_symmetry)),
        place=(int(round(qu)), int(round(qv)), sample.place[2]),
        augmented=True,
    ), True


def random_transform(rng, shape, rotations: int = 36, max_shift: float = 0.2) -> GroupElement:
    H, W = shape
    k = int(rng.integers(rotations)) if rotations > 1 else 0
    du = int(rng.integers(-int(max_shift * H), int(max_shift * H) + 1))
    dv = int(rng.integers(-int(max_shift * W), int(max_shift * W) + 1))
    return GroupElement(rotations, k, translation=(du, dv))


def augment_random(sample: Sample, rng, rotations: int = 36, max_shift: float = 0.2, tries: int = 10):
    for _ in range(tries):
        out, ok = augment(sample, random_transform(rng, sample.obs.shape[-2:], rotations, max_shift))
        if ok:
            return out
    log.info("augmentation retries exhausted; using the sample unaugmented")
    return sample


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1600
    batch_size: int = 1
    lr: float = 0.01
    clip_norm: float = 10.0
    augment: bool = True
    rotations: int = 36
    max_shift: float = 0.2
    seed: int = 0
    eval_interval: int = 0
    early_stop_window: int = 200
    early_stop_loss: float = 0.0  # 0 disables; stop once both windowed losses fall below

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps, batch size and learning rate must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    pick_loss: list = field(default_factory=list)
    place_loss: list = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False


def cross_entropy(volume, labels, n_theta: int):
    """Softmax over the flattened (angle, row, col) volume against one-hot targets."""
    B, n, H, W = volume.shape
    idx = torch.tensor([theta_bin(t, n_theta) * H * W + int(u) * W + int(v) for u, v, t in labels])
    return F.cross_entropy(volume.reshape(B, -1), idx)


def _stack(xs, dtype):
    return torch.as_tensor(np.stack(xs), dtype=dtype)


def pick_loss(policy: Policy, batch, dtype=torch.float32):
    obs = _stack([s.obs for s in batch], dtype)
    sem = policy.semantic("pick", _stack([s.pick_map for s in batch], dtype), obs[:, 3])
    vol = policy.pick(obs, _stack([s.pick_lang for s in batch], dtype), sem)
    return cross_entropy(vol, [s.pick for s in batch], policy.cfg.n_theta)


def place_loss(policy: Policy, batch, dtype=torch.float32):
    obs = _stack([s.obs for s in batch], dtype)
    # teacher forcing: the crop is taken at the expert pick
    crops = _stack([extract_crop(s.obs, s.pick[0], s.pick[1], policy.cfg.crop_size) for s in batch], dtype)
    sem = policy.semantic("place", _stack([s.place_map for s in batch], dtype), obs[:, 3])
    vol = policy.place(obs, _stack([s.place_lang for s in batch], dtype), sem, crops)
    return cross_entropy(vol, [s.place for s in batch], policy.cfg.n_theta)


def train(policy: Policy, samples: list[Sample], cfg: TrainConfig, callback=None) -> TrainResult:
    """Plain SGD on the pick and place objectives, each with its own optimiser."""
    if not samples:
        raise ValueError("empty dataset")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    pick_params = list(policy.pick.parameters()) + list(policy.fusion_pick.parameters())
    place_params = list(policy.place.parameters()) + list(policy.fusion_place.parameters())
    opt_pick = torch.optim.SGD(pick_params, lr=cfg.lr)
    opt_place = torch.optim.SGD(place_params, lr=cfg.lr)
    res = TrainResult()
    policy.train()
    for it in range(cfg.steps):
        batch = [samples[int(i)] for i in rng.integers(len(samples), size=cfg.batch_size)]
        if cfg.augment:
            batch = [augment_random(s, rng, cfg.rotations, cfg.max_shift) for s in batch]
        for params, opt, fn, curve, name in ((pick_params, opt_pick, pick_loss, res.pick_loss, "pick"),
                                             (place_params, opt_place, place_loss, res.place_loss, "place")):
            opt.zero_grad()
            loss = fn(policy, batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"{name} loss is {loss.item()} at step {it}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            opt.step()
            curve.append(float(loss.detach()))
        res.steps = it + 1
        if callback is not None:
            callback(it, res)
        w = cfg.early_stop_window
        if cfg.early_stop_loss > 0 and len(res.pick_loss) >= w:
            if max(np.mean(res.pick_loss[-w:]), np.mean(res.place_loss[-w:])) < cfg.early_stop_loss:
                res.stopped_early = True
                break
    policy.eval()
    return res


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    task: str
    variant: str
    success: float
    rewards: list
    steps: list
    seeds: list
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        rows = ["episode,seed,reward,steps"]
        rows += [f"{i},{s},{r:.6f},{n}" for i, (s, r, n) in enumerate(zip(self.seeds, self.rewards, self.steps))]
        return "\n".join(rows) + "\n"


def run_episode(scene: Scene, actor, max_steps: int | None = None) -> tuple[float, int, list]:
    """Roll a policy; ``actor(scene, instruction)`` returns (pick Action, place Action)."""
    task = get_task(scene.task)
    limit = task.max_steps(scene) if max_steps is None else max_steps
    trace = []
    n = 0
    for n in range(1, limit + 1):
        if task.done(scene):
            n -= 1
            break
        instruction = task.instruction(scene)
        pick, place = actor(scene, instruction)
        scene, r = step(scene, pick, place)
        trace.append((instruction, pick, place, r))
    return float(task.progress(scene)), n, trace


def oracle_actor(scene, instruction):
    act = get_task(scene.task).oracle(scene, instruction)
    if act is None:
        return Action(0, 0, 0.0), Action(0, 0, 0.0)
    return act.pick, act.place


def random_actor(rng):
    def act(scene, instruction):
        ws = scene.workspaces[0]
        u, v, q, w = rng.integers(ws.res, size=4)
        return Action(int(u), int(v), 0.0), Action(int(q), int(w), float(rng.uniform(0, TWO_PI)))

    return act


def agent_actor(agent: GreedyAgent, trace: list | None = None):
    def act(scene, instruction):
        d = agent.act(scene, instruction)
        if trace is not None:
            trace.append(d)
        return (Action(d.pick.u, d.pick.v, d.pick.theta, d.pick_workspace),
                Action(d.place.u, d.place.v, d.place.theta, d.place_workspace))

    return act


def evaluate(actor, task: str, n_episodes: int, seed: int, variant: str = "seen", n_workspaces: int = 1,
             layout: str = "single", config_hash: str = "") -> EvalReport:
    rewards, steps, seeds = [], [], []
    for i in range(n_episodes):
        scene = sample_scene(task, seed + i, variant, n_workspaces, layout)
        r, n, _ = run_episode(scene, actor)
        rewards.append(r)
        steps.append(n)
        seeds.append(seed + i)
    return EvalReport(get_task(task).name, variant, 100.0 * float(np.mean(rewards)), rewards, steps, seeds,
                      config_hash, {"n_workspaces": n_workspaces, "layout": layout})
