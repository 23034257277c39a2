"""Planar symmetry groups, their representations and actions on feature fields.

Screen convention used throughout the package: rows grow downwards, columns
grow to the right, and a positive angle is a counter-clockwise rotation as
seen on screen (equivalently about +z pointing out of the table).  Rotations
act about the geometric image centre ``((H - 1) / 2, (W - 1) / 2)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import sparse

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GroupElement:
    """Element of C_n (or SO(2) when ``order`` is None) with an optional pixel shift.

    ``translation`` is an integer (du, dv) offset applied after the rotation.
    """

    order: int | None = 1
    index: int = 0
    angle_: float = 0.0
    translation: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.order is not None:
            if self.order < 1:
                raise ValueError(f"group order must be positive, got {self.order}")
            object.__setattr__(self, "index", int(self.index) % self.order)
        else:
            object.__setattr__(self, "angle_", float(self.angle_) % TWO_PI)
        du, dv = self.translation
        object.__setattr__(self, "translation", (int(du), int(dv)))

    @classmethod
    def rotation(cls, angle: float) -> "GroupElement":
        return cls(order=None, angle_=angle)

    @classmethod
    def shift(cls, du: int, dv: int) -> "GroupElement":
        return cls(order=1, index=0, translation=(du, dv))

    @property
    def angle(self) -> float:
        if self.order is None:
            return self.angle_
        return TWO_PI * self.index / self.order

    @property
    def quarter_turns(self) -> int | None:
        """Number of quarter turns if the rotation is an exact multiple of 90 degrees."""
        if self.order is None:
            return None
        if (4 * self.index) % self.order:
            return None
        return (4 * self.index) // self.order

    def is_identity(self) -> bool:
        return self.angle == 0.0 and self.translation == (0, 0)

    def inverse(self) -> "GroupElement":
        du, dv = self.translation
        if du or dv:
            q = self.quarter_turns
            if q is None:
                raise ValueError("inverse of a non-quarter-turn rotation with a shift is off-grid")
            iu, iv = _quarter_rotate_offset(-du, -dv, -q)
            return GroupElement(self.order, -self.index, translation=(iu, iv))
        if self.order is None:
            return GroupElement.rotation(-self.angle_)
        return GroupElement(self.order, (self.order - self.index) % self.order)

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        # (self * other)(x) = self(other(x))
        if self.order is None or other.order is None:
            if self.translation != (0, 0) or other.translation != (0, 0):
                raise ValueError("continuous rotations compose only without shifts")
            return GroupElement.rotation(self.angle + other.angle)
        n = math.lcm(self.order, other.order)
        k = self.index * (n // self.order) + other.index * (n // other.order)
        du, dv = other.translation
        if du or dv:
            q = self.quarter_turns
            if q is None:
                raise ValueError("cannot carry an integer shift through a non-quarter-turn rotation")
            du, dv = _quarter_rotate_offset(du, dv, q)
        su, sv = self.translation
        return GroupElement(n, k, translation=(du + su, dv + sv))


def _quarter_rotate_offset(du: int, dv: int, q: int) -> tuple[int, int]:
    for _ in range(q % 4):
        du, dv = -dv, du
    return du, dv


def rotate_offset(du, dv, angle: float):
    """Rotate a (row, col) offset counter-clockwise on screen."""
    c, s = math.cos(angle), math.sin(angle)
    return du * c - dv * s, dv * c + du * s


# ---------------------------------------------------------------------------
# representations


@dataclass(frozen=True)
class Representation:
    """A representation of C_n: ``trivial``, ``standard``, ``regular`` or ``irrep``."""

    kind: str
    order: int | None = None
    freq: int = 1

    def __post_init__(self):
        if self.kind not in ("trivial", "standard", "regular", "irrep"):
            raise ValueError(f"unknown representation kind {self.kind!r}")
        if self.kind == "regular" and not self.order:
            raise ValueError("regular representation needs a group order")

    @property
    def dim(self) -> int:
        if self.kind == "trivial":
            return 1
        if self.kind == "regular":
            return self.order
        if self.kind == "irrep" and (self.freq == 0 or (self.order and 2 * self.freq == self.order)):
            return 1
        return 2

    def __call__(self, g: GroupElement) -> np.ndarray:
        if self.kind == "trivial":
            return np.ones((1, 1))
        if self.kind == "regular":
            if g.order != self.order:
                raise ValueError(f"regular rep of C_{self.order} cannot act with an element of C_{g.order}")
            return np.roll(np.eye(self.order), g.index, axis=0)
        f = 1 if self.kind == "standard" else self.freq
        if self.dim == 1:
            return np.array([[math.cos(f * g.angle)]])
        a = f * g.angle
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s], [s, c]])


TRIVIAL = Representation("trivial")
STANDARD = Representation("standard")


def regular(n: int) -> Representation:
    return Representation("regular", order=n)


def irrep(n: int, freq: int) -> Representation:
    return Representation("irrep", order=n, freq=freq)


@dataclass(frozen=True)
class FeatureField:
    values: np.ndarray
    rep: Representation = field(default=TRIVIAL)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"feature field must be (C, H, W), got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature field has non-finite values")
        if v.shape[0] % self.rep.dim:
            raise ValueError(f"{v.shape[0]} channels is not a multiple of rep dimension {self.rep.dim}")
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# spatial rotation


def rotation_sampler(shape: tuple[int, int], angle: float, interpolation: str = "bilinear"):
    """Precompute the inverse-mapping gather for rotating an (H, W) grid.

    Returns ``(index, weight)`` of shape (H*W, k); out-of-support taps carry
    index 0 and weight 0.  Output pixel ``p`` reads the source at ``R(-angle) p``.
    """
    H, W = shape
    cu, cv = (H - 1) / 2.0, (W - 1) / 2.0
    u, v = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    du, dv = u - cu, v - cv
    c, s = math.cos(angle), math.sin(angle)
    su = du * c + dv * s + cu
    sv = dv * c - du * s + cv
    su, sv = su.ravel(), sv.ravel()
    if interpolation == "nearest":
        iu = np.floor(su + 0.5).astype(np.int64)
        iv = np.floor(sv + 0.5).astype(np.int64)
        ok = (iu >= 0) & (iu < H) & (iv >= 0) & (iv < W)
        index = np.where(ok, iu * W + iv, 0)[:, None]
        weight = ok.astype(float)[:, None]
        return index, weight
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    u0 = np.floor(su).astype(np.int64)
    v0 = np.floor(sv).astype(np.int64)
    fu, fv = su - u0, sv - v0
    idx, wts = [], []
    for a, b, w in ((0, 0, (1 - fu) * (1 - fv)), (1, 0, fu * (1 - fv)), (0, 1, (1 - fu) * fv), (1, 1, fu * fv)):
        uu, vv = u0 + a, v0 + b
        ok = (uu >= 0) & (uu < H) & (vv >= 0) & (vv < W)
        idx.append(np.where(ok, uu * W + vv, 0))
        wts.append(np.where(ok, w, 0.0))
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


@functools.lru_cache(maxsize=256)
def _rotation_matrix(H: int, W: int, angle: float, interpolation: str):
    index, weight = rotation_sampler((H, W), angle, interpolation)
    rows = np.repeat(np.arange(H * W), index.shape[1])
    return sparse.csr_matrix((weight.ravel(), (rows, index.ravel())), shape=(H * W, H * W))


def _rotate_spatial(values: np.ndarray, angle: float, interpolation: str) -> np.ndarray:
    H, W = values.shape[-2:]
    flat = values.reshape(-1, H * W)
    out = (_rotation_matrix(H, W, float(angle), interpolation) @ flat.T).T
    return out.reshape(values.shape).astype(values.dtype, copy=False)


def rotate_spatial(values: np.ndarray, g: GroupElement | float, interpolation: str = "nearest") -> np.ndarray:
    """Rotate the last two axes of ``values`` about the centre; zeros fill off-support pixels.

    Elements of C_n with 4 | n are split into exact quarter turns plus a residual
    angle, so quarter-turn multiples are exact pixel permutations on square grids.
    """
    values = np.asarray(values)
    if not isinstance(g, GroupElement):
        g = GroupElement.rotation(g)
    H, W = values.shape[-2:]
    if g.order is not None and g.order % 4 == 0 and H == W:
        step = g.order // 4
        q, r = divmod(g.index, step)
        out = values if r == 0 else _rotate_spatial(values, TWO_PI * r / g.order, interpolation)
        return np.rot90(out, q, axes=(-2, -1)).copy() if q else out.copy()
    q = g.quarter_turns
    if q is not None and H == W:
        return np.rot90(values, q, axes=(-2, -1)).copy()
    if g.angle == 0.0:
        return values.copy()
    return _rotate_spatial(values, g.angle, interpolation)


def shift_spatial(values: np.ndarray, du: int, dv: int) -> np.ndarray:
    """Translate the last two axes by integer (du, dv) with zero fill."""
    values = np.asarray(values)
    out = np.zeros_like(values)
    H, W = values.shape[-2:]
    if abs(du) >= H or abs(dv) >= W:
        return out
    src_u = slice(max(0, -du), H - max(0, du))
    dst_u = slice(max(0, du), H - max(0, -du))
    src_v = slice(max(0, -dv), W - max(0, dv))
    dst_v = slice(max(0, dv), W - max(0, -dv))
    out[..., dst_u, dst_v] = values[..., src_u, src_v]
    return out


def rotate_field(field_: FeatureField | np.ndarray, g: GroupElement, interpolation: str = "nearest",
                 rep: Representation | None = None):
    """Apply ``rho(g) f(R(g)^-1 x)`` followed by g's integer shift.

    Accepts a :class:`FeatureField` (its own rep is used) or a raw (C, H, W)
    array with an explicit ``rep`` (trivial by default).
    """
    wrapped = isinstance(field_, FeatureField)
    values = field_.values if wrapped else np.asarray(field_)
    rep = field_.rep if wrapped else (rep or TRIVIAL)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot rotate a field with non-finite values")
    if g.is_identity():
        out = values.copy()
    else:
        out = rotate_spatial(values, g, interpolation)
        if rep.kind == "regular":
            if g.order != rep.order:
                raise ValueError(
                    f"regular-rep field of order {rep.order} cannot be acted on by an element of C_{g.order}")
            C = out.shape[0]
            out = np.roll(out.reshape(C // rep.order, rep.order, *out.shape[1:]), g.index, axis=1).reshape(out.shape)
        elif rep.kind in ("standard", "irrep") and rep.dim == 2:
            m = rep(g)
            C = out.shape[0]
            pairs = out.reshape(C // 2, 2, *out.shape[1:])
            out = np.einsum("ij,cjhw->cihw", m, pairs).reshape(out.shape)
        elif rep.kind == "irrep" and rep.dim == 1:
            out = out * rep(g)[0, 0]
        du, dv = g.translation
        if du or dv:
            out = shift_spatial(out, du, dv)
    return FeatureField(out, rep) if wrapped else out


class TransformedAction(NamedTuple):
    u: float
    v: float
    theta: float
    in_bounds: bool


def apply_group_to_action(action, g: GroupElement, image_center, shape=None) -> TransformedAction:
    """Expected image of a (u, v, theta) action under ``g`` (rotation about ``image_center``, then shift)."""
    u, v, theta = action
    cu, cv = image_center
    q = g.quarter_turns
    if q is not None:
        du, dv = u - cu, v - cv
        for _ in range(q % 4):
            du, dv = -dv, du
    else:
        du, dv = rotate_offset(u - cu, v - cv, g.angle)
    tu, tv = g.translation
    nu, nv = cu + du + tu, cv + dv + tv
    nt = (theta + g.angle) % TWO_PI
    ok = True
    if shape is not None:
        H, W = shape
        ok = bool(-0.5 <= nu < H - 0.5 and -0.5 <= nv < W - 0.5)
    return TransformedAction(nu, nv, nt, ok)
