"""Patch-level semantic maps from text and image queries, fused over camera views."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from . import gemt
from .camera import CameraView
from .nn import IsoConv2d

log = logging.getLogger(__name__)


class EmbeddingBackend(Protocol):
    backend_id: str

    def dim(self) -> int: ...

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...

    def embed_images(self, patches: np.ndarray) -> np.ndarray: ...


class BackendError(RuntimeError):
    pass


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


# ---------------------------------------------------------------------------
# patch grids


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    stride: int
    counts: tuple[int, int]

    @property
    def origins(self) -> list[tuple[int, int]]:
        m, n = self.counts
        return [(i * self.stride, j * self.stride) for i in range(m) for j in range(n)]


def make_grid(H: int, W: int, p: int, s: int) -> PatchGrid:
    if p > min(H, W):
        raise ValueError(f"patch size {p} exceeds image side {min(H, W)}")
    if s < 1 or p < 1:
        raise ValueError("patch size and stride must be positive")
    return PatchGrid(p, s, ((H - p) // s + 1, (W - p) // s + 1))


def patchify(image, p: int, s: int):
    """(C, H, W) -> ((m*n, C, p, p) patches, grid), row-major over anchors."""
    x = np.asarray(image)
    C, H, W = x.shape
    grid = make_grid(H, W, p, s)
    win = np.lib.stride_tricks.sliding_window_view(x, (p, p), axis=(1, 2))[:, ::s, ::s]
    m, n = grid.counts
    return np.ascontiguousarray(win[:, :m, :n].transpose(1, 2, 0, 3, 4).reshape(m * n, C, p, p)), grid


def unpatchify(scores, grid: PatchGrid, H: int, W: int) -> np.ndarray:
    """Spread each patch score over its footprint; overlapping footprints are averaged."""
    m, n = grid.counts
    sc = np.asarray(scores, dtype=float).reshape(m, n)
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    p, s = grid.patch, grid.stride
    for di in range(p):
        for dj in range(p):
            # every patch contributes to pixel (i*s + di, j*s + dj)
            total[di:di + (m - 1) * s + 1:s, dj:dj + (n - 1) * s + 1:s] += sc
            count[di:di + (m - 1) * s + 1:s, dj:dj + (n - 1) * s + 1:s] += 1
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


# ---------------------------------------------------------------------------
# maps


@dataclass(frozen=True)
class SemanticMap:
    scores: np.ndarray
    normalization: str = "raw_cosine"
    provenance: str = "text"

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("semantic map has non-finite scores")


def _embed_images(backend, patches, context: str):
    try:
        emb = np.asarray(backend.embed_images(patches), dtype=float)
    except Exception as exc:  # keep the failing view/patch batch in the message
        raise BackendError(f"image embedding failed for {context}: {exc}") from exc
    if emb.shape != (len(patches), backend.dim()):
        raise BackendError(f"backend returned {emb.shape} for {len(patches)} patches in {context}")
    return _unit(emb)


def embed_text(backend, text: str) -> np.ndarray:
    try:
        return _unit(np.asarray(backend.embed_texts([text]), dtype=float)[0])
    except Exception as exc:
        raise BackendError(f"text embedding failed for {text!r}: {exc}") from exc


def patch_embeddings(rgb, backend, p: int, s: int, context: str = "image"):
    """Unit patch embeddings (m*n, d) and their grid; reusable across queries."""
    rgb = np.asarray(rgb, dtype=float)
    patches, grid = patchify(rgb[:3], p, s)
    return _embed_images(backend, patches, context), grid


def score_patches(emb, grid: PatchGrid, query, H: int, W: int, provenance: str = "text") -> SemanticMap:
    q = _unit(query)
    if q.shape != (emb.shape[1],):
        raise ValueError(f"query has dim {q.shape}, backend dim is {emb.shape[1]}")
    cos = np.clip(emb @ q, -1.0, 1.0)
    return SemanticMap(unpatchify(cos, grid, H, W), "raw_cosine", provenance)


def _score_map(rgb, query, backend, p, s, context, provenance) -> SemanticMap:
    rgb = np.asarray(rgb, dtype=float)
    emb, grid = patch_embeddings(rgb, backend, p, s, context)
    return score_patches(emb, grid, query, *rgb.shape[1:], provenance)


def text_map(view, text: str, backend, p: int, s: int, text_embedding=None) -> SemanticMap:
    """Cosine between every patch embedding and the text embedding, spread back to pixels."""
    rgb = view.rgb if isinstance(view, CameraView) else view
    q = embed_text(backend, text) if text_embedding is None else text_embedding
    return _score_map(rgb, q, backend, p, s, f"text map {text!r}", "text")


def image_map(topdown_rgb, crop, backend, p: int, s: int) -> SemanticMap:
    q = _embed_images(backend, np.asarray(crop, dtype=float)[None, :3], "crop")[0]
    return _score_map(topdown_rgb, q, backend, p, s, "image map", "image")


def fuse_views(views: Sequence[CameraView], maps: Sequence[SemanticMap | np.ndarray], workspace) -> SemanticMap:
    """Unproject every depth pixel with its score and average per top-down cell; empty cells are 0."""
    if not views:
        raise ValueError("need at least one view")
    if len(views) != len(maps):
        raise ValueError("one map per view")
    res = workspace.res
    total = np.zeros(res * res)
    count = np.zeros(res * res)
    for view, m in zip(views, maps):
        sc = m.scores if isinstance(m, SemanticMap) else np.asarray(m)
        pts = view.world_points()
        u = np.floor((workspace.y1 - pts[:, 1]) / workspace.cell).astype(int)
        v = np.floor((pts[:, 0] - workspace.x0) / workspace.cell).astype(int)
        ok = (u >= 0) & (u < res) & (v >= 0) & (v < res)
        idx = u[ok] * res + v[ok]
        total += np.bincount(idx, weights=sc.reshape(-1)[ok], minlength=res * res)
        count += np.bincount(idx, minlength=res * res)
    if not count.any():
        warnings.warn("no view point falls inside the workspace; returning a zero map", RuntimeWarning)
    out = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return SemanticMap(out.reshape(res, res), "raw_cosine", "text")


# ---------------------------------------------------------------------------
# crop database


@dataclass
class CropEntry:
    query_text: str
    event: str
    text_embedding: np.ndarray
    crop: np.ndarray
    crop_embedding: np.ndarray
    episode: str = ""
    padded: bool = False


@dataclass
class CropDatabase:
    entries: dict = field(default_factory=dict)  # (query_text, event) -> CropEntry

    def __len__(self):
        return len(self.entries)

    def add(self, entry: CropEntry) -> None:
        # latest demonstration wins on duplicates
        self.entries[(entry.query_text, entry.event)] = entry

    def values(self) -> list[CropEntry]:
        return list(self.entries.values())

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        index = []
        for i, e in enumerate(self.values()):
            stem = f"entry{i:04d}"
            gemt.save(d / f"{stem}_crop.gemt", e.crop)
            gemt.save(d / f"{stem}_text.gemt", e.text_embedding)
            gemt.save(d / f"{stem}_image.gemt", e.crop_embedding)
            index.append({"query_text": e.query_text, "event": e.event, "episode": e.episode,
                          "padded": e.padded, "stem": stem})
        (d / "index.json").write_text(json.dumps({"entries": index}, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "CropDatabase":
        d = Path(directory)
        db = cls()
        for rec in json.loads((d / "index.json").read_text())["entries"]:
            s = rec["stem"]
            db.add(CropEntry(rec["query_text"], rec["event"],
                             gemt.load(d / f"{s}_text.gemt").astype(float),
                             gemt.load(d / f"{s}_crop.gemt").astype(float),
                             gemt.load(d / f"{s}_image.gemt").astype(float),
                             rec["episode"], rec["padded"]))
        return db


def crop_at(image, u: int, v: int, size: int):
    """size x size window whose centre pixel is (u, v); zero-filled off the image."""
    C, H, W = image.shape
    r = size // 2
    out = np.zeros((C, size, size), dtype=image.dtype)
    u0, v0 = u - r, v - r
    a0, b0 = max(u0, 0), max(v0, 0)
    a1, b1 = min(u0 + size, H), min(v0 + size, W)
    if a0 < a1 and b0 < b1:
        out[:, a0 - u0:a1 - u0, b0 - v0:b1 - v0] = image[:, a0:a1, b0:b1]
    padded = not (u0 >= 0 and v0 >= 0 and u0 + size <= H and v0 + size <= W)
    return out, padded


def build_crop_db(demonstrations, backend, p: int, db: CropDatabase | None = None) -> CropDatabase:
    """One entry per (query text, event); crops are p x p RGB around the labelled pixel."""
    db = db if db is not None else CropDatabase()
    for demo in demonstrations:
        rgb = np.asarray(demo.topdown[:3], dtype=float)
        for event, text, label in (("pick", demo.pick_text, demo.pick_label),
                                   ("place", demo.place_text, demo.place_label)):
            crop, padded = crop_at(rgb, int(label[0]), int(label[1]), p)
            if padded:
                log.info("crop for %r in %s touches the border; zero-padded", text, demo.episode_id)
            db.add(CropEntry(text, event, embed_text(backend, text), crop,
                             _embed_images(backend, crop[None], "crop")[0], str(demo.episode_id), padded))
    return db


def query_crop(db: CropDatabase, text: str, backend, threshold: float = 0.965, text_embedding=None):
    """Crop of the entry whose stored text is closest to ``text``, if it clears the threshold."""
    if len(db) == 0:
        return None
    q = embed_text(backend, text) if text_embedding is None else _unit(text_embedding)
    entries = db.values()
    sims = np.stack([e.text_embedding for e in entries]) @ q
    best = int(np.argmax(sims))
    return entries[best].crop if sims[best] >= threshold else None


# ---------------------------------------------------------------------------
# fusion


def minmax(maps: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Joint min-max to [0, 1]; a constant input is only clipped."""
    lo = min(float(np.min(m)) for m in maps)
    hi = max(float(np.max(m)) for m in maps)
    if hi - lo <= 1e-12:
        return [np.clip(np.asarray(m, dtype=float), 0.0, 1.0) for m in maps]
    return [(np.asarray(m, dtype=float) - lo) / (hi - lo) for m in maps]


def weighted_average(text, image, w1: float = 0.8, w2: float = 0.2):
    """Normalised text/image blend; a missing image map means w2 = 0.  Accepts lists for joint scaling."""
    single = not isinstance(text, (list, tuple))
    texts = [text] if single else list(text)
    texts = [t.scores if isinstance(t, SemanticMap) else np.asarray(t, dtype=float) for t in texts]
    images = None
    if image is not None:
        images = [image] if single else list(image)
        images = [m.scores if isinstance(m, SemanticMap) else np.asarray(m, dtype=float) for m in images]
        if any(m.shape != t.shape for m, t in zip(images, texts)):
            raise ValueError("text and image maps differ in shape")
    if images is None:
        w2 = 0.0
    if w1 + w2 <= 0:
        raise ValueError("w1 + w2 must be positive")
    nt = minmax(texts)
    ni = minmax(images) if images is not None else [np.zeros_like(t) for t in nt]
    out = [(w1 * a + w2 * b) / (w1 + w2) for a, b in zip(nt, ni)]
    return out[0] if single else out


class FusionHead(nn.Module):
    """Depth-driven gain on the blended map; starts as an exact pass-through.

    The gain lies in (0, 2), so zero relevance stays zero and an empty table never gains activation.
    """

    def __init__(self, depth_channels: int = 4, depth_scale: float = 20.0):
        super().__init__()
        self.depth_scale = depth_scale
        self.encoder = nn.Sequential(IsoConv2d(1, depth_channels), nn.ReLU(), IsoConv2d(depth_channels, depth_channels))
        self.projector = IsoConv2d(depth_channels, 1, kernel_size=1)
        with torch.no_grad():
            self.projector.coef.zero_()
            self.projector.bias.zero_()

    def forward(self, blended: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W) map and (B, 1, H, W) height field -> (B, 1, H, W)."""
        feat = self.encoder(depth * self.depth_scale)
        return blended * 2 * torch.sigmoid(self.projector(feat))


def fuse_semantic(text, image, w1: float, w2: float, depth, head: FusionHead | None = None) -> SemanticMap:
    avg = weighted_average(text, image, w1, w2)
    if head is None:
        return SemanticMap(avg, "minmax", "fused")
    depth = np.asarray(depth, dtype=float)
    if depth.shape != avg.shape:
        raise ValueError("depth and map differ in shape")
    dt = next(head.parameters()).dtype
    with torch.no_grad():
        out = head(torch.as_tensor(avg, dtype=dt)[None, None], torch.as_tensor(depth, dtype=dt)[None, None])
    return SemanticMap(out[0, 0].double().numpy(), "minmax", "fused")


# ---------------------------------------------------------------------------
# frame averaging


def semantic_equivariance_error(image, text: str, backend, n_frames: int = 4, p: int = 8, s: int = 4) -> float:
    """Mean |frame-averaged map - raw map| over quarter-turn frames of a square top-down image."""
    from .groups import GroupElement, rotate_spatial

    rgb = np.asarray(image, dtype=float)[:3]
    if rgb.shape[1] != rgb.shape[2]:
        raise ValueError("frame averaging needs a square image")
    q = embed_text(backend, text)
    raw = text_map(rgb, text, backend, p, s, q).scores
    acc = np.zeros_like(raw)
    interp = "nearest" if 4 % n_frames == 0 else "bilinear"
    for k in range(n_frames):
        g = GroupElement(n_frames, k)
        m = text_map(rotate_spatial(rgb, g, interp), text, backend, p, s, q).scores
        acc += rotate_spatial(m[None], g.inverse(), interp)[0]
    return float(np.mean(np.abs(acc / n_frames - raw)))
