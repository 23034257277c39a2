"""Rotate and shift a one-object scene and watch the decoded pick follow it.

Random weights are enough: equivariance is a property of the architecture, not of training.
Quarter turns and integer shifts move the argmax exactly; a 10-degree turn only approximately.
"""

import numpy as np
import torch

from langsteer.agent import SemanticPipeline, SemanticSettings
from langsteer.audit import _expected, as_float64, single_object_scene
from langsteer.groups import GroupElement, rotate_spatial, shift_spatial
from langsteer.policy import Policy, PolicyConfig, decode
from langsteer.sim.mock_embedding import MockEmbedding

torch.manual_seed(0)
torch.set_grad_enabled(False)
policy = as_float64(Policy(PolicyConfig()))
pipeline = SemanticPipeline(MockEmbedding(), SemanticSettings(n_views=1))

scene, phrase = single_object_scene(np.random.default_rng(1))
enc = pipeline.encode(scene)
obs, sem, lang = enc.topdown, pipeline.blended([enc], phrase)[0], pipeline.language(phrase)
a = decode(policy.pick_volume(obs, lang, sem))
print(f"instruction phrase: {phrase!r}")
print(f"reference pick: row {a.u}, col {a.v}, angle bin {a.bin}")

b = decode(policy.pick_volume(shift_spatial(obs, 4, -3), lang, shift_spatial(sem[None], 4, -3)[0]))
print(f"shift (4, -3):     row {b.u}, col {b.v}, bin {b.bin}   expected row {a.u + 4}, col {a.v - 3}, bin {a.bin}")

for g in (GroupElement(4, 1), GroupElement(4, 2), GroupElement(36, 1)):
    b = decode(policy.pick_volume(rotate_spatial(obs, g), lang, rotate_spatial(sem[None], g)[0]))
    eu, ev, eb, _ = _expected(a, g, obs.shape[1:], policy.cfg.n_theta)
    print(f"rotate {np.degrees(g.angle):5.1f} deg: row {b.u}, col {b.v}, bin {b.bin}   expected row {eu}, col {ev}, bin {eb}")
