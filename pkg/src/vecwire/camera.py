"""Pinhole camera model shared by silhouette detection and SVG rendering.

Camera frame convention: x right, y down, z forward (depth). Image-plane
coordinates are ``(f * x / z, f * y / z)`` in pixels, measured from the
principal point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Meshes coming out of image-to-3D models are y-up.
WORLD_UP = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class Camera:
    position: tuple
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = WORLD_UP
    focal_length: float = 443.40500673763256  # 60 deg horizontal fov on 512 px
    image_size: tuple = (512, 512)
    principal_point: tuple | None = None
    _rotation: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        target = np.asarray(self.look_at, dtype=float)
        up = np.asarray(self.up, dtype=float)
        if pos.shape != (3,) or target.shape != (3,) or up.shape != (3,):
            raise ValueError("camera position, look_at and up must be 3D vectors")
        if not self.focal_length > 0:
            raise ValueError("focal length must be positive")
        forward = target - pos
        dist = np.linalg.norm(forward)
        if dist == 0:
            raise ValueError("camera position coincides with look_at")
        forward = forward / dist
        right = np.cross(forward, up)
        rn = np.linalg.norm(right)
        if rn < 1e-9 * max(np.linalg.norm(up), 1.0):
            raise ValueError("camera up vector is parallel to the view direction")
        right = right / rn
        down = np.cross(forward, right)
        object.__setattr__(self, "_rotation", np.stack([right, down, forward]))

    @property
    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the camera x, y, z axes."""
        return self._rotation

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)

    @property
    def principal(self) -> tuple[float, float]:
        if self.principal_point is not None:
            return float(self.principal_point[0]), float(self.principal_point[1])
        return self.image_size[0] / 2.0, self.image_size[1] / 2.0

    def rolled(self, angle_deg: float) -> "Camera":
        """Same camera rotated about its view axis by ``angle_deg``."""
        a = math.radians(angle_deg)
        right, down, _ = self._rotation
        # new "up" is -down rotated within the image plane
        new_up = -(math.cos(a) * down + math.sin(a) * right)
        return Camera(
            position=self.position,
            look_at=self.look_at,
            up=tuple(new_up),
            focal_length=self.focal_length,
            image_size=self.image_size,
            principal_point=self.principal_point,
        )


def world_to_camera(camera: Camera, p) -> np.ndarray:
    """Rigid transform of point(s) ``p`` (shape (3,) or (n, 3)) into the camera frame."""
    p = np.asarray(p, dtype=float)
    return (p - camera.center) @ camera.rotation.T


def camera_to_world(camera: Camera, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q @ camera.rotation + camera.center


def orbit_position(azimuth_deg: float, elevation_deg: float, radius: float) -> tuple:
    """Point on a sphere around the origin; azimuth measured about the y (up) axis."""
    az = math.radians(azimuth_deg)
    el = math.radians(elevation_deg)
    return (
        radius * math.cos(el) * math.sin(az),
        radius * math.sin(el),
        radius * math.cos(el) * math.cos(az),
    )


def orbit_cameras(n_views: int, elevation_deg: float = 0.0, radius: float = 2.5, **kwargs) -> list[Camera]:
    """``n_views`` cameras at uniform azimuths ``k * 360 / n_views``, all looking at the origin."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    return [
        Camera(position=orbit_position(360.0 * k / n_views, elevation_deg, radius), **kwargs)
        for k in range(n_views)
    ]
