"""Command line: demo generation, training, evaluation, inference, audits and the mock server.

Every artifact written here carries the hash of the run config that produced it, and commands
that combine artifacts refuse to mix hashes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .agent import GreedyAgent, SemanticPipeline
from .config import ConfigError, RunConfig
from .learning import (
    agent_actor, collect_demos, evaluate, load_dataset, oracle_actor, prepare, save_dataset, train,
)
from .policy import Policy, load_checkpoint, save_checkpoint
from .semantic import CropDatabase

log = logging.getLogger("langsteer")


class HashMismatch(RuntimeError):
    pass


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# reusable pieces (the test suite calls these directly)


def generate_demos(cfg: RunConfig, out=None, variant: str | None = None):
    """Oracle demonstrations for the configured task; written to ``out`` when given."""
    variant = variant or cfg["variant"]
    demos = collect_demos(cfg["task"], cfg["n_demos"], cfg["seeds"]["demos"], variant,
                          cfg["policy"]["n_theta"], cfg["semantic"]["n_views"])
    if out is not None:
        save_dataset(demos, out)
        _write_json(Path(out) / "dataset.json", {
            "config_hash": cfg.config_hash(), "task": cfg["task"], "variant": variant,
            "n_episodes": cfg["n_demos"], "seed": cfg["seeds"]["demos"], "n_steps": len(demos),
            "episodes": sorted({d.episode_id for d in demos}),
        })
    return demos


def run_training(cfg: RunConfig, data=None, out=None, progress=None):
    """Demos (generated or loaded), crop database, SGD on both heads, checkpoint.

    Returns ``(policy, pipeline, result)``; with ``out`` set, writes the checkpoint directory
    (tensors, manifest, crop database) and the loss curves there.
    """
    if data is not None:
        meta = json.loads((Path(data) / "dataset.json").read_text())
        if meta["config_hash"] != cfg.config_hash():
            raise HashMismatch(f"dataset {data} was generated under config {meta['config_hash']}, "
                               f"not {cfg.config_hash()}")
        demos = load_dataset(data)
    else:
        demos = generate_demos(cfg)
    if not demos:
        raise RuntimeError("no demonstrations to train on")
    pipeline = SemanticPipeline(cfg.make_backend(), cfg.semantic_settings())
    samples = prepare(demos, pipeline)
    torch.manual_seed(cfg["seeds"]["train"])
    # weights are drawn under the train seed so reruns are identical
    policy = Policy(cfg.policy_config())
    t0 = time.time()
    result = train(policy, samples, cfg.train_config(), progress)
    if out is not None:
        save_agent(policy, pipeline, cfg, out, {"steps": result.steps, "stopped_early": result.stopped_early,
                                                "train_seconds": round(time.time() - t0, 1)})
        rows = ["step,pick_loss,place_loss"] + [f"{i + 1},{a:.6f},{b:.6f}"
                                                for i, (a, b) in enumerate(zip(result.pick_loss, result.place_loss))]
        (Path(out) / "loss.csv").write_text("\n".join(rows) + "\n")
    return policy, pipeline, result


def save_agent(policy: Policy, pipeline: SemanticPipeline, cfg: RunConfig, out, extra: dict | None = None) -> dict:
    out = Path(out)
    manifest = save_checkpoint(policy, out, {"config_hash": cfg.config_hash(), "config": cfg.to_dict(),
                                             **(extra or {})})
    pipeline.crop_db.save(out / "crop_db")
    return manifest


def load_agent(checkpoint, cfg: RunConfig | None = None, use_semantic: bool = True):
    """Policy, pipeline and config from a checkpoint directory.

    A config passed alongside must hash to the checkpoint's hash.  The embedding backend is
    rebuilt from the config (``GEM_BACKEND_URL`` selects the remote client) and a remote
    server whose width disagrees with the checkpoint is rejected before any inference.
    """
    policy, manifest = load_checkpoint(checkpoint)
    saved = RunConfig(manifest["config"])
    if saved.config_hash() != manifest.get("config_hash"):
        raise HashMismatch(f"{checkpoint}: manifest config does not hash to its recorded hash")
    if cfg is not None and cfg.config_hash() != manifest["config_hash"]:
        raise HashMismatch(f"config hash {cfg.config_hash()} does not match checkpoint {manifest['config_hash']}")
    cfg = cfg or saved
    backend = cfg.make_backend()
    if hasattr(backend, "check_manifest"):
        backend.check_manifest(manifest)
    db_dir = Path(checkpoint) / "crop_db"
    db = CropDatabase.load(db_dir) if db_dir.exists() else CropDatabase()
    pipeline = SemanticPipeline(backend, cfg.semantic_settings(), db)
    policy.eval()
    return GreedyAgent(policy, pipeline, use_semantic), cfg, manifest


def run_eval(agent: GreedyAgent | None, cfg: RunConfig, task: str, episodes: int, seed: int, variant: str,
             n_workspaces: int = 1, layout: str = "single", oracle: bool = False):
    actor = oracle_actor if oracle else agent_actor(agent)
    with torch.no_grad():
        return evaluate(actor, task, episodes, seed, variant, n_workspaces, layout, cfg.config_hash())


def write_report(report, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())


def save_heatmaps(decision, out) -> list[Path]:
    """Static PNGs of the semantic maps and the angle-maximised action volumes."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    panels = [("pick_map", decision.pick_maps, decision.pick, decision.pick_workspace),
              ("place_map", decision.place_maps, decision.place, decision.place_workspace),
              ("pick_volume", decision.pick_volumes, decision.pick, decision.pick_workspace),
              ("place_volume", decision.place_volumes, decision.place, decision.place_workspace)]
    paths = []
    for name, arrays, act, ws in panels:
        for k, a in enumerate(arrays or []):
            a = np.asarray(a)
            img = a.max(0) if a.ndim == 3 else a
            fig, ax = plt.subplots(figsize=(4, 4))
            ax.imshow(img, cmap="viridis")
            if k == ws:
                ax.plot(act.v, act.u, "r+", markersize=12)
            ax.set_title(f"{name} (workspace {k})")
            ax.axis("off")
            p = out / f"{name}_ws{k}.png"
            fig.savefig(p, dpi=80, bbox_inches="tight")
            plt.close(fig)
            paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# commands


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def cmd_gen_demos(args) -> int:
    doc = _config(args).to_dict()
    doc.update(task=args.task, n_demos=args.n)
    doc["seeds"]["demos"] = args.seed
    if args.variant:
        doc["variant"] = args.variant
    cfg = RunConfig(doc)
    demos = generate_demos(cfg, args.out)
    print(f"wrote {len(demos)} steps from {args.n} episodes to {args.out} (config {cfg.config_hash()})")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out or cfg["output_dir"])
    every = max(1, cfg["train"]["steps"] // 20)

    def progress(it, res):
        if (it + 1) % every == 0:
            print(f"step {it + 1}: pick {np.mean(res.pick_loss[-every:]):.3f} "
                  f"place {np.mean(res.place_loss[-every:]):.3f}", flush=True)

    _, _, result = run_training(cfg, args.data, out, progress)
    cfg.save(out / "config.json")
    print(f"checkpoint {out} after {result.steps} steps (config {cfg.config_hash()})")
    return 0


def cmd_eval(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else None
    if args.oracle:
        cfg = cfg or RunConfig()
        agent = None
    else:
        agent, cfg, _ = load_agent(args.checkpoint, cfg, not args.no_semantic)
    task = args.task or cfg["task"]
    seed = cfg["seeds"]["eval"] if args.seed is None else args.seed
    rep = run_eval(agent, cfg, task, args.episodes, seed, args.variant or cfg["variant"], oracle=args.oracle)
    rep.extra["semantic"] = not args.no_semantic
    if args.out:
        write_report(rep, args.out)
    print(f"{rep.task} {rep.variant}: success {rep.success:.1f} over {len(rep.rewards)} episodes")
    return 0


def cmd_eval_stitched(args) -> int:
    if args.workspaces < 1:
        raise SystemExit("--workspaces must be at least 1")
    agent, cfg, _ = load_agent(args.checkpoint, RunConfig.load(args.config) if args.config else None)
    seed = cfg["seeds"]["eval"] if args.seed is None else args.seed
    rep = run_eval(agent, cfg, args.task or cfg["task"], args.episodes, seed, args.variant or cfg["variant"],
                   args.workspaces, args.layout)
    if args.out:
        write_report(rep, args.out)
    print(f"{rep.task} {rep.variant} K={args.workspaces} {args.layout}: success {rep.success:.1f}")
    return 0


def cmd_infer(args) -> int:
    from .sim.world import Scene

    agent, _, _ = load_agent(args.checkpoint, RunConfig.load(args.config) if args.config else None)
    agent.keep_volumes = bool(args.heatmaps)
    scene = Scene.from_json(Path(args.scene).read_text())
    with torch.no_grad():
        d = agent.act(scene, args.instruction)
    out = {"instruction": args.instruction, "pick_phrase": d.instruction.pick, "place_phrase": d.instruction.place,
           "pick": {"workspace": d.pick_workspace, "u": d.pick.u, "v": d.pick.v, "theta": d.pick.theta},
           "place": {"workspace": d.place_workspace, "u": d.place.u, "v": d.place.v, "theta": d.place.theta}}
    if args.heatmaps:
        out["heatmaps"] = [str(p) for p in save_heatmaps(d, args.heatmaps)]
    print(json.dumps(out, indent=1))
    return 0


def cmd_audit(args) -> int:
    from .audit import run_audit

    if args.random_weights:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        torch.manual_seed(args.seed)
        policy = Policy(cfg.policy_config())
        pipeline = SemanticPipeline(cfg.make_backend(), cfg.semantic_settings())
    else:
        agent, cfg, _ = load_agent(args.checkpoint)
        policy, pipeline = agent.policy, agent.pipeline
    rows = run_audit(policy, pipeline, args.group, args.trials, args.seed)
    for r in rows:
        print(r.line())
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} rows passed")
    return 1 if failed else 0


def cmd_parse(args) -> int:
    from .instructions import ParseError, parse

    try:
        ins = parse(args.instruction)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"pick": ins.pick, "place": ins.place, "template": ins.template_id}))
    return 0


def cmd_mock_server(args) -> int:
    from .remote import MockEmbeddingServer
    from .sim.mock_embedding import MockEmbedding

    server = MockEmbeddingServer(MockEmbedding(dim=args.dim, seed=args.seed), args.host, args.port)
    print(f"serving mock embeddings on {server.url}", flush=True)
    try:
        server.httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="langsteer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-demos", help="write oracle demonstrations")
    s.add_argument("--task", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--variant", choices=["seen", "unseen"])
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_gen_demos)

    s = sub.add_parser("train", help="train pick and place heads")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset from gen-demos (generated on the fly otherwise)")
    s.add_argument("--out", help="checkpoint directory (default: output_dir of the config)")
    s.set_defaults(func=cmd_train)

    for name, func in (("eval", cmd_eval), ("eval-stitched", cmd_eval_stitched)):
        s = sub.add_parser(name, help="roll out a checkpoint" + (" over stitched workspaces" if func is
                                                                  cmd_eval_stitched else ""))
        s.add_argument("--checkpoint", required=name == "eval-stitched")
        s.add_argument("--config", help="refuse to run unless it matches the checkpoint")
        s.add_argument("--task")
        s.add_argument("--variant", choices=["seen", "unseen"])
        s.add_argument("--episodes", type=int, default=50)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        if func is cmd_eval:
            s.add_argument("--no-semantic", action="store_true", help="ablated control with the map switched off")
            s.add_argument("--oracle", action="store_true", help="score the oracle expert instead of a checkpoint")
        else:
            s.add_argument("--workspaces", type=int, default=2)
            s.add_argument("--layout", choices=["single", "cross"], default="single")
        s.set_defaults(func=func)

    s = sub.add_parser("infer", help="one decision on a scene file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True, help="scene JSON")
    s.add_argument("--instruction", required=True)
    s.add_argument("--heatmaps", help="directory for PNG heatmaps")
    s.add_argument("--config")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("audit-equivariance", help="equivariance residual table")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--random-weights", action="store_true")
    s.add_argument("--group", choices=["C4", "C36"], default="C4")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.set_defaults(func=cmd_audit)

    s = sub.add_parser("parse", help="split an instruction into pick and place phrases")
    s.add_argument("instruction")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("mock-server", help="serve MockEmbedding over HTTP")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_mock_server)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "eval" and not args.oracle and not args.checkpoint:
        print("error: eval needs --checkpoint or --oracle", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, HashMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
