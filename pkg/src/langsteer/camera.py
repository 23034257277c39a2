"""Pinhole and orthographic camera views with OpenCV axes (x right, y down, z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraView:
    rgb: np.ndarray  # (3, H, W) in [0, 1]
    depth: np.ndarray  # (H, W) metres along the optical axis
    intrinsics: np.ndarray  # 3x3; for orthographic views fx, fy are pixels per metre
    extrinsics: np.ndarray  # 4x4 camera-to-world
    projection: str = "perspective"

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be (3, H, W), got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[1:]:
            raise ValueError("depth and rgb disagree on image size")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and non-negative")
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise ValueError("intrinsics are singular")
        R = self.extrinsics[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("extrinsics rotation is not a proper rotation")
        if self.projection not in ("perspective", "orthographic"):
            raise ValueError(f"unknown projection {self.projection!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def camera_points(self) -> np.ndarray:
        """(H*W, 3) points in the camera frame, row-major pixel order."""
        H, W = self.shape
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        cx, cy = self.intrinsics[0, 2], self.intrinsics[1, 2]
        u, v = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        d = self.depth.reshape(-1)
        xn, yn = (v.reshape(-1) - cx) / fx, (u.reshape(-1) - cy) / fy
        if self.projection == "perspective":
            return np.stack([xn * d, yn * d, d], axis=1)
        return np.stack([xn, yn, d], axis=1)

    def world_points(self) -> np.ndarray:
        pts = self.camera_points()
        return pts @ self.extrinsics[:3, :3].T + self.extrinsics[:3, 3]

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-frame origins and directions (unit depth along the optical axis) per pixel."""
        H, W = self.shape
        return camera_rays(self.intrinsics, self.extrinsics, H, W, self.projection)


def camera_rays(K, T, H, W, projection="perspective"):
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    u, v = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    xn, yn = (v.reshape(-1) - cx) / fx, (u.reshape(-1) - cy) / fy
    R, t = T[:3, :3], T[:3, 3]
    if projection == "perspective":
        dirs = np.stack([xn, yn, np.ones_like(xn)], axis=1) @ R.T
        origins = np.broadcast_to(t, dirs.shape).copy()
    else:
        origins = np.stack([xn, yn, np.zeros_like(xn)], axis=1) @ R.T + t
        dirs = np.broadcast_to(R[:, 2], origins.shape).copy()
    return origins, dirs


def look_at(eye, target, down_hint) -> np.ndarray:
    """Camera-to-world transform whose z axis points at ``target`` and y axis leans toward ``down_hint``."""
    eye, target, down_hint = (np.asarray(a, dtype=float) for a in (eye, target, down_hint))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(down_hint, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    T = np.eye(4)
    T[:3, :3] = np.stack([x, y, z], axis=1)
    T[:3, 3] = eye
    return T


def pinhole(f: float, H: int, W: int) -> np.ndarray:
    return np.array([[f, 0.0, (W - 1) / 2], [0.0, f, (H - 1) / 2], [0.0, 0.0, 1.0]])
