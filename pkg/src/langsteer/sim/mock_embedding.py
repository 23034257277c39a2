"""Deterministic stand-in for a joint text/image embedding model.

Every colour, shape and a few extra words own one direction of a fixed orthonormal
basis.  Images are decoded pixel-wise against the renderer's (colour, shape) codebook
and summed with a mild top-to-bottom weight ramp, which gives patch embeddings the
kind of orientation sensitivity real vision encoders have.  Text is a bag of concept
directions plus a small per-word hash component, so synonyms land close but not on
top of each other.
"""

from __future__ import annotations

import hashlib
import re

import numpy as np

from .world import COLORS, SHAPE_CONCEPTS, TABLE_RGB, render_color

STOP_WORDS = frozenset("the a an in into on onto of and to with at it its this that".split())
SHADES = ("lightest", "middle", "darkest")
BASIC_COLORS = tuple(c for c in COLORS if " " not in c)
SYNONYMS = {"body": "middle", "grey": "gray", "cube": "block", "bin": "box", "container": "box"}
EXTRA_WORDS = ("table", "big", "bottle")


def _hash_seed(*parts) -> int:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little")


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


class MockEmbedding:
    backend_id = "mock-v1"

    def __init__(self, dim: int = 64, noise: float = 0.0, seed: int = 0, tau: float = 0.01,
                 ramp: float = 0.5, word_jitter: float = 0.15):
        concepts = list(BASIC_COLORS) + list(SHADES) + list(EXTRA_WORDS) + [c.lower() for c in SHAPE_CONCEPTS]
        if dim < len(concepts):
            raise ValueError(f"dim must be at least {len(concepts)} to keep concepts orthogonal")
        self._dim = dim
        self.noise = noise
        self.seed = seed
        self.tau = tau
        self.ramp = ramp
        self.word_jitter = word_jitter
        q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, len(concepts))))
        self.concepts = {c: q[:, i] for i, c in enumerate(concepts)}

        rgbs, vecs = [TABLE_RGB], [self.concepts["table"]]
        for color in COLORS:
            for shape in SHAPE_CONCEPTS:
                rgbs.append(render_color(color, shape))
                vecs.append(self._color_vec(color) + self.concepts[shape.lower()])
        self.codebook_rgb = np.stack(rgbs)
        self.codebook_vec = np.stack(vecs)

    def dim(self) -> int:
        return self._dim

    def _color_vec(self, color: str) -> np.ndarray:
        if " " in color:
            shade, base = color.split(" ", 1)
            return _unit(self.concepts[shade] + self.concepts[base])
        return self.concepts[color]

    def _hash_vec(self, *parts) -> np.ndarray:
        return _unit(np.random.default_rng(_hash_seed(self.seed, *parts)).normal(size=self._dim))

    # -- text ------------------------------------------------------------

    @staticmethod
    def words(text: str) -> list[str]:
        """Lower-cased content words; "letter x" stays a single word."""
        words = re.findall(r"[a-z]+", text.lower())
        out, i = [], 0
        # join before dropping stop words, or "letter a" would lose its letter
        while i < len(words):
            if words[i] == "letter" and i + 1 < len(words) and len(words[i + 1]) == 1:
                out.append(f"letter {words[i + 1]}")
                i += 2
            else:
                if words[i] not in STOP_WORDS:
                    out.append(words[i])
                i += 1
        return out

    def lemma(self, w: str) -> str:
        w = SYNONYMS.get(w, w)
        if w in self.concepts:
            return w
        for cut in ("es", "s"):
            stem = SYNONYMS.get(w[: -len(cut)], w[: -len(cut)])
            if w.endswith(cut) and stem in self.concepts:
                return stem
        return w

    def tokens(self, text: str) -> list[str]:
        return [self.lemma(w) for w in self.words(text)]

    def embed_text(self, text: str) -> np.ndarray:
        v = np.zeros(self._dim)
        for raw in self.words(text):
            tok = self.lemma(raw)
            if tok in self.concepts:
                v += self.concepts[tok] + self.word_jitter * self._hash_vec("word", raw)
            else:
                v += self._hash_vec("word", tok)
        if not np.any(v):
            v = self._hash_vec("text", text)
        if self.noise:
            v = _unit(v) + self.noise * np.random.default_rng(_hash_seed(self.seed, "tn", text)).normal(
                size=self._dim) / np.sqrt(self._dim)
        return _unit(v)

    def embed_texts(self, texts) -> np.ndarray:
        return np.stack([self.embed_text(t) for t in texts]) if len(texts) else np.zeros((0, self._dim))

    # -- images ----------------------------------------------------------

    def pixel_vectors(self, rgb: np.ndarray) -> np.ndarray:
        """Soft codebook decoding of (N, 3) colours into (N, dim) concept mixtures."""
        d2 = ((rgb[:, None, :] - self.codebook_rgb[None]) ** 2).sum(-1)
        logits = -d2 / (2 * self.tau ** 2)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        return w @ self.codebook_vec

    def embed_images(self, patches) -> np.ndarray:
        """(N, 3, p, q) RGB patches in [0, 1] to (N, dim) unit vectors."""
        x = np.asarray(patches, dtype=float)
        if x.ndim == 3:
            x = x[None]
        N, C, p, q = x.shape
        if C != 3:
            raise ValueError("patches must be RGB")
        pix = np.ascontiguousarray(np.moveaxis(x, 1, -1).reshape(-1, 3))
        # unique over raw bytes is much faster than a row-wise unique
        keys = pix.view(np.dtype((np.void, pix.dtype.itemsize * 3))).ravel()
        _, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        colors = pix[first]
        inv = inv.reshape(-1)
        rows = np.arange(p)
        weight = 1.0 + self.ramp * (rows - (p - 1) / 2) / p
        w = np.broadcast_to(weight[None, :, None], (N, p, q)).reshape(-1)
        patch_idx = np.repeat(np.arange(N), p * q)
        hist = np.bincount(patch_idx * len(colors) + inv, weights=w,
                           minlength=N * len(colors)).reshape(N, len(colors))
        out = hist @ self.pixel_vectors(colors)
        if self.noise:
            for i in range(N):
                rng = np.random.default_rng(_hash_seed(self.seed, "in", x[i].tobytes()))
                out[i] = _unit(out[i]) + self.noise * rng.normal(size=self._dim) / np.sqrt(self._dim)
        return _unit(out)

    def embed_image(self, patch) -> np.ndarray:
        return self.embed_images(np.asarray(patch)[None])[0]
