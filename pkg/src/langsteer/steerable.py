"""Orbit-lifted steerable kernels, orbit Fourier transforms and cross-correlation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .groups import GroupElement, rotate_spatial

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# Fourier transforms along the orbit axis


@dataclass(frozen=True)
class FourierForm:
    coeffs: np.ndarray  # complex, frequency axis first
    frequencies: tuple[int, ...]
    order: int


def check_frequencies(frequencies: Sequence[int] | None, n: int) -> tuple[int, ...]:
    if frequencies is None:
        return tuple(range(n // 2 + 1))
    freqs = tuple(int(k) for k in frequencies)
    if not freqs:
        raise ValueError("at least one frequency must be retained")
    for k in freqs:
        if k < 0 or 2 * k >= n:
            raise ValueError(f"frequency {k} violates Nyquist for an orbit of length {n} (need 0 <= k < n/2)")
    if len(set(freqs)) != len(freqs):
        raise ValueError("duplicate frequencies")
    return freqs


def orbit_fourier(samples, frequencies: Sequence[int] | None = None, axis: int = 0) -> FourierForm:
    """Real-input DFT along ``axis`` keeping ``frequencies`` (all of them when None).

    ``c_k = sum_j x_j exp(-2 pi i j k / n)``; the retained frequencies land on axis 0.
    """
    x = np.moveaxis(np.asarray(samples, dtype=float), axis, 0)
    n = x.shape[0]
    if n < 1:
        raise ValueError("empty orbit")
    freqs = check_frequencies(frequencies, n)
    spec = np.fft.rfft(x, axis=0)
    return FourierForm(spec[list(freqs)], freqs, n)


def _series_weights(freqs: Sequence[int], n: int) -> np.ndarray:
    return np.array([1.0 if (k == 0 or 2 * k == n) else 2.0 for k in freqs]) / n


def orbit_inverse_fourier(form: FourierForm, m: int) -> np.ndarray:
    """Evaluate the truncated Fourier series at ``m`` uniform angles ``2 pi j / m``."""
    if m < 1:
        raise ValueError("need at least one output sample")
    phi = TWO_PI * np.arange(m) / m
    freqs = np.array(form.frequencies)
    basis = np.exp(1j * np.outer(phi, freqs)) * _series_weights(form.frequencies, form.order)
    flat = form.coeffs.reshape(len(freqs), -1)
    out = np.real(basis @ flat)
    return out.reshape((m,) + form.coeffs.shape[1:])


def real_fourier_matrices(n: int, frequencies: Sequence[int], m: int) -> tuple[np.ndarray, np.ndarray]:
    """Real forms of the forward and inverse maps above.

    Returns ``(forward, inverse)`` with ``forward`` of shape (D, n) producing the
    stacked [Re c_0, Re c_k, Im c_k ...] coordinates and ``inverse`` of shape (m, D)
    such that ``inverse @ forward`` equals ``orbit_inverse_fourier(orbit_fourier(.))``.
    """
    freqs = check_frequencies(frequencies, n)
    j = np.arange(n)
    phi = TWO_PI * np.arange(m) / m
    weights = _series_weights(freqs, n)
    fwd_rows, inv_cols = [], []
    for k, w in zip(freqs, weights):
        fwd_rows.append(np.cos(TWO_PI * j * k / n))
        inv_cols.append(w * np.cos(k * phi))
        if 0 < k and 2 * k != n:
            fwd_rows.append(-np.sin(TWO_PI * j * k / n))
            inv_cols.append(-w * np.sin(k * phi))
    return np.stack(fwd_rows), np.stack(inv_cols, axis=1)


def direct_dft(x: np.ndarray, k: int) -> complex:
    """O(n) evaluation of one DFT coefficient; the O(n^2) reference when looped over k."""
    n = len(x)
    return complex(sum(x[j] * complex(math.cos(-TWO_PI * j * k / n), math.sin(-TWO_PI * j * k / n))
                       for j in range(n)))


# ---------------------------------------------------------------------------
# steerable kernels


class SteerableKernel:
    """Orbit-lifted kernel stack of shape (n_rot, C_in, h, h)."""

    def __init__(self, spatial_form: np.ndarray):
        sf = np.asarray(spatial_form, dtype=float)
        if sf.ndim != 4 or sf.shape[-1] != sf.shape[-2]:
            raise ValueError(f"kernel stack must be (n_rot, C_in, h, h), got {sf.shape}")
        self.spatial_form = sf
        self._fourier: dict[tuple[int, ...], FourierForm] = {}

    @property
    def n_rot(self) -> int:
        return self.spatial_form.shape[0]

    @property
    def c_in(self) -> int:
        return self.spatial_form.shape[1]

    @property
    def size(self) -> int:
        return self.spatial_form.shape[-1]

    def fourier_form(self, frequencies: Sequence[int] | None = None) -> FourierForm:
        key = check_frequencies(frequencies, self.n_rot)
        if key not in self._fourier:
            self._fourier[key] = orbit_fourier(self.spatial_form, key)
        return self._fourier[key]

    def resample(self, m: int, frequencies: Sequence[int] | None = None) -> "SteerableKernel":
        """Kernels at ``m`` uniform angles reconstructed from the retained frequencies."""
        return SteerableKernel(orbit_inverse_fourier(self.fourier_form(frequencies), m))


def lift_orbit(base, n: int, interpolation: str = "bilinear") -> SteerableKernel:
    """Stack ``rotate(base, 2 pi i / n)`` for i in range(n); output rep is regular of order n."""
    base = np.asarray(base, dtype=float)
    if base.ndim == 2:
        base = base[None]
    if base.ndim != 3 or base.shape[-1] != base.shape[-2]:
        raise ValueError(f"base kernel must be square (C_in, h, h), got {base.shape}")
    if base.shape[-1] % 2 == 0:
        raise ValueError("kernel side must be odd so the rotation centre is a pixel")
    if n < 1:
        raise ValueError("orbit size must be positive")
    if not np.all(np.isfinite(base)):
        raise ValueError("base kernel has non-finite values")
    slices = [rotate_spatial(base, GroupElement(n, i), interpolation) for i in range(n)]
    return SteerableKernel(np.stack(slices))


class SteerabilityReport(NamedTuple):
    residual: float
    shift: int
    passed: bool


def check_steerability(kernel: SteerableKernel, g: GroupElement, tol: float = 0.0,
                       interpolation: str = "nearest") -> SteerabilityReport:
    """Compare the spatially rotated stack with its regular-representation permutation.

    Rotating every slice by ``g`` must equal ``rho_reg(g^-1) K``: slice i becomes slice i + k.
    """
    sf = kernel.spatial_form
    if not np.all(np.isfinite(sf)):
        raise ValueError("kernel has non-finite values")
    n = kernel.n_rot
    shift = g.angle * n / TWO_PI
    k = int(round(shift))
    if abs(shift - k) > 1e-9:
        raise ValueError(f"rotation by {g.angle} rad is not an element of the kernel's C_{n} orbit")
    rotated = rotate_spatial(sf, g, interpolation)
    residual = float(np.max(np.abs(rotated - np.roll(sf, -k, axis=0)))) if sf.size else 0.0
    return SteerabilityReport(residual, k % n, residual <= tol)


# ---------------------------------------------------------------------------
# cross-correlation


def cross_correlate(field, kernel: SteerableKernel | np.ndarray, method: str = "auto") -> np.ndarray:
    """``out[i] = sum_c sum_w field[c, x + w] K[i, c, w]`` with zero padding, stride 1."""
    f = np.asarray(field, dtype=float)
    K = kernel.spatial_form if isinstance(kernel, SteerableKernel) else np.asarray(kernel, dtype=float)
    if f.ndim != 3 or K.ndim != 4:
        raise ValueError("expected field (C, H, W) and kernel (n, C, h, h)")
    C, H, W = f.shape
    n, Ck, h, h2 = K.shape
    if Ck != C:
        raise ValueError(f"kernel has {Ck} input channels, field has {C}")
    if h != h2 or h % 2 == 0:
        raise ValueError("kernel must be square with odd side")
    if h > H or h > W:
        raise ValueError(f"kernel of side {h} is larger than the {H}x{W} field")
    if method == "auto":
        method = "direct" if H * W * h * h * n <= 50_000_000 else "fft"
    r = h // 2
    if method == "direct":
        padded = np.pad(f, ((0, 0), (r, r), (r, r)))
        windows = np.lib.stride_tricks.sliding_window_view(padded, (h, h), axis=(1, 2))
        return np.einsum("chwab,ncab->nhw", windows, K, optimize=True)
    if method != "fft":
        raise ValueError(f"unknown method {method!r}")
    P, Q = H + h - 1, W + h - 1
    Ff = np.fft.rfft2(f, s=(P, Q))
    # correlation == convolution with the flipped kernel
    Fk = np.fft.rfft2(K[..., ::-1, ::-1], s=(P, Q))
    full = np.fft.irfft2(np.einsum("cpq,ncpq->npq", Ff, Fk), s=(P, Q))
    return full[:, r:r + H, r:r + W]
