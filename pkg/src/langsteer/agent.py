"""Semantic-map pipeline and the greedy pick-then-place agent."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import semantic as sm
from .instructions import Instruction, parse
from .policy import Policy, PixelAction, extract_crop, stitch_and_split
from .sim.world import Scene, render_topdown, render_views


@dataclass(frozen=True)
class SemanticSettings:
    n_views: int = 3
    view_patch: int = 16
    view_stride: int = 8
    topdown_patch: int = 8
    topdown_stride: int = 4
    w1: float = 0.8
    w2: float = 0.2
    threshold: float = 0.965


@dataclass
class EncodedWorkspace:
    """Per-workspace observation with cached patch embeddings, shared by every query."""

    topdown: np.ndarray
    views: list
    view_embeddings: list
    topdown_embedding: tuple
    workspace: object


@dataclass
class SemanticPipeline:
    backend: object
    settings: SemanticSettings = field(default_factory=SemanticSettings)
    crop_db: sm.CropDatabase = field(default_factory=sm.CropDatabase)

    def encode(self, scene: Scene, workspace: int = 0, topdown=None, views=None) -> EncodedWorkspace:
        st = self.settings
        topdown = render_topdown(scene, workspace) if topdown is None else topdown
        views = render_views(scene, st.n_views, workspace) if views is None else views
        emb = [sm.patch_embeddings(v.rgb, self.backend, st.view_patch, st.view_stride, f"view {i}")
               for i, v in enumerate(views)]
        td = sm.patch_embeddings(topdown[:3], self.backend, st.topdown_patch, st.topdown_stride, "top-down")
        return EncodedWorkspace(topdown, views, emb, td, scene.workspaces[workspace])

    def text_map(self, enc: EncodedWorkspace, phrase: str, q=None) -> np.ndarray:
        q = sm.embed_text(self.backend, phrase) if q is None else q
        maps = [sm.score_patches(e, g, q, *v.shape) for (e, g), v in zip(enc.view_embeddings, enc.views)]
        return sm.fuse_views(enc.views, maps, enc.workspace).scores

    def image_map(self, enc: EncodedWorkspace, crop) -> np.ndarray:
        q = sm._embed_images(self.backend, np.asarray(crop, dtype=float)[None, :3], "crop")[0]
        e, g = enc.topdown_embedding
        return sm.score_patches(e, g, q, *enc.topdown.shape[1:], "image").scores

    def blended(self, encs: list[EncodedWorkspace], phrase: str) -> list[np.ndarray]:
        """Min-max blended text/image maps, normalised jointly over the given workspaces."""
        q = sm.embed_text(self.backend, phrase)
        texts = [self.text_map(e, phrase, q) for e in encs]
        crop = sm.query_crop(self.crop_db, phrase, self.backend, self.settings.threshold, q)
        images = None if crop is None else [self.image_map(e, crop) for e in encs]
        return sm.weighted_average(texts, images, self.settings.w1, self.settings.w2)

    def language(self, phrase: str) -> np.ndarray:
        return sm.embed_text(self.backend, phrase)


@dataclass
class StepDecision:
    instruction: Instruction
    pick_workspace: int
    pick: PixelAction
    place_workspace: int
    place: PixelAction
    pick_maps: list | None = None
    place_maps: list | None = None
    pick_volumes: list | None = None
    place_volumes: list | None = None


class GreedyAgent:
    """Decode the pick, crop around it, then decode the place conditioned on that crop.

    The joint action is argmax-then-condition rather than a joint maximum over the product.
    """

    def __init__(self, policy: Policy, pipeline: SemanticPipeline, use_semantic: bool = True,
                 keep_volumes: bool = False):
        self.policy = policy
        self.pipeline = pipeline
        self.use_semantic = use_semantic
        self.keep_volumes = keep_volumes

    def _maps(self, encs, phrase):
        if self.use_semantic:
            return self.pipeline.blended(encs, phrase)
        # ablated control: the semantic map is switched off (constant 1)
        return [np.ones(e.topdown.shape[1:]) for e in encs]

    def act(self, scene: Scene, instruction: str, workspaces=None) -> StepDecision:
        ins = parse(instruction)
        ids = list(range(len(scene.workspaces))) if workspaces is None else list(workspaces)
        encs = [self.pipeline.encode(scene, k) for k in ids]
        return self.act_encoded(encs, ids, ins)

    def act_encoded(self, encs, ids, ins: Instruction) -> StepDecision:
        pol = self.policy
        lp = self.pipeline.language(ins.pick)
        pick_maps = self._maps(encs, ins.pick)
        pick_vols = [pol.pick_volume(e.topdown, lp, m, self.use_semantic) for e, m in zip(encs, pick_maps)]
        pw, pick = stitch_and_split(list(zip(range(len(ids)), pick_vols)))
        qw, place, place_maps, place_vols = self.place_given_pick(encs, ins, pw, pick)
        keep = self.keep_volumes
        return StepDecision(ins, ids[pw], pick, ids[qw], place,
                            pick_maps if keep else None, place_maps if keep else None,
                            pick_vols if keep else None, place_vols if keep else None)

    def place_given_pick(self, encs, ins: Instruction, pick_index: int, pick: PixelAction):
        """Place stage: sees only the place phrase and the crop around the executed pick."""
        pol = self.policy
        crop = extract_crop(encs[pick_index].topdown, pick.u, pick.v, pol.cfg.crop_size)
        lq = self.pipeline.language(ins.place)
        maps = self._maps(encs, ins.place)
        vols = [pol.place_volume(e.topdown, lq, m, crop, self.use_semantic) for e, m in zip(encs, maps)]
        qw, place = stitch_and_split(list(zip(range(len(encs)), vols)))
        return qw, place, maps, vols
