"""Pinhole camera model.

World units are millimeters. Camera space follows the OpenCV convention:
+z forward, +x right, +y down in the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # (3, 3) world-to-camera rotation
    t: np.ndarray  # (3,) world-to-camera translation

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (screen xy in pixels, camera-space depth) for world points."""
        pc = self.to_camera(np.asarray(points, dtype=np.float64))
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.fx * pc[..., 0] / z + self.cx
            y = self.fy * pc[..., 1] / z + self.cy
        return np.stack([x, y], axis=-1), z

    def project_vjp(self, points, g_xy, g_z=None):
        """Pull gradients on (screen xy, depth) back to world positions."""
        pc = self.to_camera(np.asarray(points, dtype=np.float64))
        x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
        gx, gy = g_xy[..., 0], g_xy[..., 1]
        gc = np.empty_like(pc)
        gc[..., 0] = gx * self.fx / z
        gc[..., 1] = gy * self.fy / z
        gc[..., 2] = -(gx * self.fx * x + gy * self.fy * y) / (z * z)
        if g_z is not None:
            gc[..., 2] += g_z
        return gc @ self.R

    def direction_jacobian(self, points: np.ndarray) -> np.ndarray:
        """(..., 2, 3) Jacobian of the screen projection w.r.t. world position."""
        pc = self.to_camera(np.asarray(points, dtype=np.float64))
        x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
        J = np.zeros(pc.shape[:-1] + (2, 3))
        J[..., 0, 0] = self.fx / z
        J[..., 0, 2] = -self.fx * x / (z * z)
        J[..., 1, 1] = self.fy / z
        J[..., 1, 2] = -self.fy * y / (z * z)
        return J @ self.R

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": np.vstack([np.hstack([self.R, self.t[:, None]]),
                                          [0.0, 0.0, 0.0, 1.0]]).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        M = np.asarray(d["world_to_camera"], dtype=np.float64)
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), M[:3, :3], M[:3, 3])


def look_at(eye, target, up, fx, fy, width, height) -> Camera:
    """Build a camera at `eye` looking at `target`; `up` maps to image -y."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        # looking straight along `up`
        alt = np.array([0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        r = np.cross(f, alt)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)  # image down
    R = np.stack([r, d, f])
    return Camera(fx, fy, width / 2.0, height / 2.0, width, height, R, -R @ eye)


def hemisphere_rig(n_views: int, radius: float, target=(0.0, 0.0, 0.0), *,
                   fov_radius: float, resolution: int = 256,
                   min_elevation_deg: float = 5.0) -> list[Camera]:
    """Cameras on the upper (+z) hemisphere, all looking at `target`.

    `fov_radius` is the half-extent (mm) at the target distance that must fit
    inside the frame.
    """
    target = np.asarray(target, dtype=np.float64)
    fx = (resolution / 2.0) * radius / fov_radius
    zmin = np.sin(np.radians(min_elevation_deg))
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n_views):
        z = zmin + (1.0 - zmin) * (i + 0.5) / n_views
        rho = np.sqrt(max(0.0, 1.0 - z * z))
        phi = golden * i
        eye = target + radius * np.array([rho * np.cos(phi), rho * np.sin(phi), z])
        cams.append(look_at(eye, target, (0.0, 0.0, 1.0), fx, fx, resolution, resolution))
    return cams
