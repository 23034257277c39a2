"""Language-conditioned pick and crop-conditioned place inference.

Both heads follow the same recipe: a fully convolutional attention network turns the
top-down RGB-D image (plus a language vector at the bottleneck) into a 3-channel
feature map, a semantic map gates it, and the result is cross-correlated with a
dynamically generated kernel that has been rotated through a 180-element orbit.
The orbit axis is Fourier transformed per pixel, only low frequencies are kept, and
the correlation output is resampled at 72 angles.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .groups import rotation_sampler
from .nn import IsoConv2d, ResidualBlock
from .steerable import SteerableKernel, real_fourier_matrices


@dataclass(frozen=True)
class PolicyConfig:
    n_rot: int = 180
    n_theta: int = 72
    max_freq: int = 31  # frequencies 0..max_freq are kept
    kernel_size: int = 57
    crop_size: int = 65
    width: int = 16
    n_blocks: int = 8
    embed_dim: int = 64
    smooth_sigma: float = 10.0
    in_channels: int = 4
    depth_scale: float = 20.0

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.crop_size % 2 == 0:
            raise ValueError("kernel and crop sides must be odd")
        if 2 * self.max_freq >= self.n_rot:
            raise ValueError(f"frequency {self.max_freq} is not below the Nyquist limit of a {self.n_rot}-orbit")

    @property
    def frequencies(self) -> tuple[int, ...]:
        return tuple(range(self.max_freq + 1))

    def to_dict(self) -> dict:
        return asdict(self)


class PixelAction(NamedTuple):
    u: int
    v: int
    theta: float
    bin: int


@dataclass
class Observation:
    topdown: np.ndarray  # (4, H, W) RGB + height
    views: list | None = None
    workspace: int = 0


# ---------------------------------------------------------------------------
# kernel shaping


def gaussian_matrix(h: int, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Banded matrix applying a zero-padded 1-d Gaussian filter along one axis."""
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    w /= w.sum()
    d = np.arange(h)[None, :] - np.arange(h)[:, None]
    return np.where(np.abs(d) <= r, w[np.clip(d + r, 0, 2 * r)], 0.0)


def disk_window(h: int) -> np.ndarray:
    yy, xx = np.mgrid[:h, :h] - h // 2
    rr = np.hypot(yy, xx) / (h // 2)
    return np.where(rr < 1, np.cos(rr * math.pi / 2) ** 2, 0.0)


class KernelShaper(nn.Module):
    """Blur, taper to a disk and scale to unit norm.

    The blur keeps bilinear rotation error small; every step commutes with quarter turns.
    """

    def __init__(self, h: int, sigma: float):
        super().__init__()
        self.register_buffer("blur", torch.tensor(gaussian_matrix(h, sigma)), persistent=False)
        self.register_buffer("window", torch.tensor(disk_window(h)), persistent=False)

    def forward(self, raw):
        # buffers stay in float64 so a double-precision copy of the model is exact
        blur = self.blur.to(raw.dtype)
        k = blur @ raw @ blur.T
        k = k * self.window.to(raw.dtype)
        return k / k.flatten(1).norm(dim=1).clamp_min(1e-12)[:, None, None, None]


# ---------------------------------------------------------------------------
# orbit lift and Fourier-domain correlation


class OrbitLift(nn.Module):
    """Torch version of ``lift_orbit``: quarter turns are exact, residual angles bilinear."""

    def __init__(self, h: int, n: int):
        super().__init__()
        self.h, self.n = h, n
        self.step = n // 4 if n % 4 == 0 else n
        idx, wts = [], []
        for r in range(self.step):
            i, w = rotation_sampler((h, h), 2 * math.pi * r / n, "bilinear")
            idx.append(i)
            wts.append(w)
        self.register_buffer("index", torch.tensor(np.stack(idx)), persistent=False)  # (step, h*h, 4)
        self.register_buffer("weight", torch.tensor(np.stack(wts)), persistent=False)

    def forward(self, base):
        """(B, C, h, h) -> (B, n, C, h, h)."""
        B, C, h, _ = base.shape
        flat = base.reshape(B, C, h * h)
        taps = flat[:, :, self.index]  # (B, C, step, h*h, 4)
        res = (taps * self.weight.to(base.dtype)).sum(-1).reshape(B, C, self.step, h, h).transpose(1, 2)
        if self.step == self.n:
            return res
        return torch.cat([torch.rot90(res, q, dims=(-2, -1)) for q in range(4)], dim=1)


def fft_correlate(field, kernels):
    """Zero-padded stride-1 correlation of (B, C, H, W) with (B, D, C, h, h) -> (B, D, H, W)."""
    B, C, H, W = field.shape
    h = kernels.shape[-1]
    r = h // 2
    s = (H + h - 1, W + h - 1)
    Ff = torch.fft.rfft2(field, s=s)
    Fk = torch.fft.rfft2(kernels.flip(-1, -2), s=s)
    out = torch.fft.irfft2(torch.einsum("bcxy,bdcxy->bdxy", Ff, Fk), s=s)
    return out[..., r:r + H, r:r + W]


class SteerableHead(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.lift = OrbitLift(cfg.kernel_size, cfg.n_rot)
        fwd, inv = real_fourier_matrices(cfg.n_rot, cfg.frequencies, cfg.n_theta)
        self.register_buffer("fwd", torch.tensor(fwd), persistent=False)
        self.register_buffer("inv", torch.tensor(inv), persistent=False)

    def fourier_kernels(self, base):
        """(B, C, h, h) -> real Fourier coordinates of the lifted orbit, (B, D, C, h, h)."""
        return torch.einsum("dn,bnchw->bdchw", self.fwd.to(base.dtype), self.lift(base))

    def forward(self, field, base):
        corr = fft_correlate(field, self.fourier_kernels(base))
        return torch.einsum("td,bdhw->bthw", self.inv.to(corr.dtype), corr)


# ---------------------------------------------------------------------------
# networks


def _prep(obs, depth_scale: float):
    return torch.cat([obs[:, :3], obs[:, 3:4] * depth_scale, obs[:, 4:]], dim=1)


class AttentionNet(nn.Module):
    """Full-resolution encoder/decoder of dilated residual blocks with additive skips.

    Dilations grow through the encoder and shrink through the decoder, so the receptive
    field covers the workspace without any striding.  The language vector is appended to
    every pixel at the bottleneck.
    """

    def __init__(self, in_ch: int = 4, width: int = 16, n_blocks: int = 8, lang_dim: int = 64, out_ch: int = 3):
        super().__init__()
        n_down = (n_blocks + 1) // 2
        n_up = n_blocks - n_down
        self.stem = IsoConv2d(in_ch, width)
        self.down = nn.ModuleList(ResidualBlock(width, 2 ** i) for i in range(n_down))
        self.fuse = IsoConv2d(width + lang_dim, width, kernel_size=1)
        self.up = nn.ModuleList(ResidualBlock(width, 2 ** i) for i in reversed(range(n_up)))
        self.head = IsoConv2d(width, out_ch, kernel_size=1)
        with torch.no_grad():
            # start in the linear range of the tanh with a near-uniform softmax
            self.head.coef.mul_(0.05)

    def forward(self, x, lang):
        h = F.relu(self.stem(x))
        skips = []
        for block in self.down:
            h = block(h)
            skips.append(h)
        B, _, H, W = h.shape
        h = F.relu(self.fuse(torch.cat([h, lang[:, :, None, None].expand(B, -1, H, W)], dim=1)))
        for block in self.up:
            h = block(h + skips.pop())
        # bounded features keep the logit scale set by the unit-norm kernel
        return torch.tanh(self.head(h))


class PickKernelGenerator(nn.Module):
    def __init__(self, cfg: PolicyConfig, hidden: int = 256):
        super().__init__()
        self.h = cfg.kernel_size
        self.mlp = nn.Sequential(nn.Linear(cfg.embed_dim, hidden), nn.ReLU(), nn.Linear(hidden, 3 * self.h ** 2))
        self.shape = KernelShaper(cfg.kernel_size, cfg.smooth_sigma)

    def forward(self, lang):
        return self.shape(self.mlp(lang).reshape(-1, 3, self.h, self.h))


class PlaceKernelGenerator(nn.Module):
    """Crop -> kernel, made exactly equivariant to quarter turns by averaging over the C4 orbit."""

    def __init__(self, cfg: PolicyConfig, hidden: int = 16):
        super().__init__()
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Conv2d(cfg.in_channels, hidden, 3, padding=1), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=2, dilation=2), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, padding=4, dilation=4), nn.ReLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        self.shape = KernelShaper(cfg.kernel_size, cfg.smooth_sigma)

    def forward(self, crop):
        B = crop.shape[0]
        x = _prep(crop, self.cfg.depth_scale)
        stack = torch.cat([torch.rot90(x, q, dims=(-2, -1)) for q in range(4)])
        out = self.net(stack)
        c, r = out.shape[-1] // 2, self.cfg.kernel_size // 2
        out = out[..., c - r:c + r + 1, c - r:c + r + 1].reshape(4, B, 3, 2 * r + 1, 2 * r + 1)
        raw = sum(torch.rot90(out[q], -q, dims=(-2, -1)) for q in range(4)) / 4
        return self.shape(raw)


class PickModel(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.attention = AttentionNet(cfg.in_channels, cfg.width, cfg.n_blocks, cfg.embed_dim, 3)
        self.kernel = PickKernelGenerator(cfg)
        self.head = SteerableHead(cfg)
        self.log_gain = nn.Parameter(torch.zeros(()))

    def features(self, obs, lang, sem):
        """Gated dense features (B, 3, H, W); ``sem`` is (B, H, W) and broadcast over channels."""
        return self.attention(_prep(obs, self.cfg.depth_scale), lang) * sem[:, None]

    def forward(self, obs, lang, sem):
        return self.head(self.features(obs, lang, sem), self.kernel(lang)) * self.log_gain.exp()


class PlaceModel(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.attention = AttentionNet(cfg.in_channels, cfg.width, cfg.n_blocks, cfg.embed_dim, 3)
        self.kernel = PlaceKernelGenerator(cfg)
        self.head = SteerableHead(cfg)
        self.log_gain = nn.Parameter(torch.zeros(()))

    def features(self, obs, lang, sem):
        return self.attention(_prep(obs, self.cfg.depth_scale), lang) * sem[:, None]

    def forward(self, obs, lang, sem, crop):
        return self.head(self.features(obs, lang, sem), self.kernel(crop)) * self.log_gain.exp()


class Policy(nn.Module):
    """Pick and place heads plus their semantic fusion heads."""

    def __init__(self, cfg: PolicyConfig | None = None):
        super().__init__()
        from .semantic import FusionHead

        self.cfg = cfg or PolicyConfig()
        self.pick = PickModel(self.cfg)
        self.place = PlaceModel(self.cfg)
        self.fusion_pick = FusionHead(depth_scale=self.cfg.depth_scale)
        self.fusion_place = FusionHead(depth_scale=self.cfg.depth_scale)

    @property
    def dtype(self):
        return self.pick.log_gain.dtype

    def _t(self, a):
        return torch.as_tensor(np.ascontiguousarray(a), dtype=self.dtype)

    def semantic(self, which: str, blended, depth):
        head = self.fusion_pick if which == "pick" else self.fusion_place
        return head(blended[:, None], depth[:, None])[:, 0]

    @torch.no_grad()
    def pick_volume(self, obs: np.ndarray, lang: np.ndarray, blended: np.ndarray, fuse: bool = True) -> np.ndarray:
        o, l, m = self._t(obs)[None], self._t(lang)[None], self._t(blended)[None]
        if fuse:
            m = self.semantic("pick", m, o[:, 3])
        return self.pick(o, l, m)[0].numpy()

    @torch.no_grad()
    def place_volume(self, obs, lang, blended, crop, fuse: bool = True) -> np.ndarray:
        o, l, m, c = self._t(obs)[None], self._t(lang)[None], self._t(blended)[None], self._t(crop)[None]
        if fuse:
            m = self.semantic("place", m, o[:, 3])
        return self.place(o, l, m, c)[0].numpy()

    @torch.no_grad()
    def lifted_kernel(self, which: str, conditioning) -> SteerableKernel:
        """Spatial orbit stack of the pick (language) or place (crop) kernel, for audits."""
        x = self._t(conditioning)[None]
        model = self.pick if which == "pick" else self.place
        base = model.kernel(x)
        return SteerableKernel(model.head.lift(base)[0].double().numpy())


# ---------------------------------------------------------------------------
# decoding


def decode(volume) -> PixelAction:
    """Global argmax over (angle, row, col); the lowest linear index wins ties."""
    vol = np.asarray(volume)
    if vol.ndim != 3:
        raise ValueError("action volume must be (n_theta, H, W)")
    if not np.all(np.isfinite(vol)):
        raise ValueError("action volume has non-finite entries")
    n, H, W = vol.shape
    k, u, v = np.unravel_index(int(np.argmax(vol)), vol.shape)
    return PixelAction(int(u), int(v), 2 * math.pi * int(k) / n, int(k))


decode_pick = decode
decode_place = decode


def extract_crop(obs, u: int, v: int, size: int) -> np.ndarray:
    """(C, size, size) window centred on (u, v), zero-padded, not rotated."""
    from .semantic import crop_at

    return crop_at(np.asarray(obs), int(u), int(v), size)[0]


def stitch_and_split(volumes: Sequence[tuple[int, np.ndarray]]) -> tuple[int, PixelAction]:
    """Concatenate per-workspace volumes along the width, decode once, map back."""
    if not volumes:
        raise ValueError("no volumes to stitch")
    shapes = {(np.shape(v)[0], np.shape(v)[1]) for _, v in volumes}
    if len(shapes) != 1:
        raise ValueError("volumes must share angle count and height")
    widths = [np.shape(v)[2] for _, v in volumes]
    a = decode(np.concatenate([v for _, v in volumes], axis=2))
    offsets = np.cumsum([0] + widths)
    i = int(np.searchsorted(offsets, a.v, side="right") - 1)
    return volumes[i][0], PixelAction(a.u, a.v - int(offsets[i]), a.theta, a.bin)


def theta_bin(theta: float, n_theta: int) -> int:
    """Nearest angular bin."""
    return int(np.floor((theta % (2 * math.pi)) * n_theta / (2 * math.pi) + 0.5)) % n_theta


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(policy: Policy, directory, extra: dict | None = None) -> dict:
    """One GEMT file per tensor plus a JSON manifest."""
    import json
    from pathlib import Path

    from . import gemt

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    state = policy.state_dict()
    for name, t in state.items():
        gemt.save(d / f"{name}.gemt", t.detach().cpu().numpy())
    cfg = policy.cfg
    manifest = {
        "module": "langsteer.policy.Policy",
        "policy_config": cfg.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "n_rot": cfg.n_rot, "n_theta": cfg.n_theta, "h": cfg.kernel_size, "h_c": cfg.crop_size,
        **(extra or {}),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_checkpoint(directory) -> tuple[Policy, dict]:
    import json
    from pathlib import Path

    from . import gemt

    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    policy = Policy(PolicyConfig(**manifest["policy_config"]))
    state = {}
    for name, shape in manifest["shapes"].items():
        arr = gemt.load(d / f"{name}.gemt")
        if list(arr.shape) != shape:
            raise ValueError(f"tensor {name} has shape {arr.shape}, manifest says {shape}")
        state[name] = torch.from_numpy(arr)
    policy.load_state_dict(state)
    policy.eval()
    return policy, manifest
