"""A small end-to-end run: oracle demos, a few hundred SGD steps, then seen and unseen episodes.

The network is shrunk so this finishes in a few minutes on a laptop CPU; the reference
configuration used by the acceptance suite is the default RunConfig.
"""

import sys
import tempfile

from langsteer.cli import load_agent, run_eval, run_training
from langsteer.config import RunConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = RunConfig({
    "n_demos": 5,
    "train": {"steps": steps},
    "policy": {"n_rot": 36, "n_theta": 36, "max_freq": 8, "kernel_size": 25, "crop_size": 33, "width": 8,
               "n_blocks": 4, "smooth_sigma": 4.0},
    "semantic": {"n_views": 1},
})
with tempfile.TemporaryDirectory() as out:
    def progress(it, res):
        if (it + 1) % 50 == 0:
            print(f"step {it + 1}: pick loss {res.pick_loss[-1]:.2f}, place loss {res.place_loss[-1]:.2f}", flush=True)

    run_training(cfg, None, out, progress)
    agent, cfg, _ = load_agent(out)
    for variant in ("seen", "unseen"):
        rep = run_eval(agent, cfg, "put_blocks", 10, cfg["seeds"]["eval"], variant)
        print(f"{variant}: success {rep.success:.1f} over {len(rep.rewards)} episodes")
