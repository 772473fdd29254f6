"""Camera math: rotations, rigid transforms, pinhole projection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .colmap_io import CameraIntrinsics, CameraModel, ViewPose
from .errors import BehindCamera, ShapeMismatch

NEAR_PLANE = 0.01


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion stored as (w, x, y, z).

    Accepts a single quaternion ``(4,)`` or a batch ``(N, 4)``.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat`; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    # Largest-eigenvector formulation: robust for every rotation angle.
    K = np.array([
        [R[0, 0] - R[1, 1] - R[2, 2], R[1, 0] + R[0, 1], R[2, 0] + R[0, 2], R[2, 1] - R[1, 2]],
        [R[1, 0] + R[0, 1], R[1, 1] - R[0, 0] - R[2, 2], R[2, 1] + R[1, 2], R[0, 2] - R[2, 0]],
        [R[2, 0] + R[0, 2], R[2, 1] + R[1, 2], R[2, 2] - R[0, 0] - R[1, 1], R[1, 0] - R[0, 1]],
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    x, y, z, w = vecs[:, np.argmax(vals)]
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_pose(cls, pose: ViewPose) -> "RigidTransform":
        return cls(quat_to_rotmat(pose.rotation), pose.translation)

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    __hash__ = None


def world_to_camera(t: RigidTransform, p) -> np.ndarray:
    return t.apply(p)


@dataclass(frozen=True)
class PinholeCamera:
    intrinsics: CameraIntrinsics
    pose: RigidTransform

    @classmethod
    def from_params(cls, fx, fy, cx, cy, width, height, pose=None, camera_id=1) -> "PinholeCamera":
        intr = CameraIntrinsics(camera_id, CameraModel.PINHOLE, int(width), int(height), (fx, fy, cx, cy))
        return cls(intr, pose if pose is not None else RigidTransform.identity())

    @classmethod
    def from_reconstruction(cls, intrinsics: CameraIntrinsics, pose: ViewPose) -> "PinholeCamera":
        return cls(intrinsics, RigidTransform.from_pose(pose))

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def shape(self):
        """Image shape as (rows N, columns M)."""
        return (self.intrinsics.height, self.intrinsics.width)

    @property
    def fx(self):
        return self.intrinsics.fx

    @property
    def fy(self):
        return self.intrinsics.fy

    @property
    def cx(self):
        return self.intrinsics.cx

    @property
    def cy(self):
        return self.intrinsics.cy

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.pose.rotation.T @ self.pose.translation

    def check_image(self, image) -> None:
        if tuple(np.shape(image)[:2]) != self.shape:
            raise ShapeMismatch(f"image is {np.shape(image)[:2]}, camera expects {self.shape}")


def project(cam: PinholeCamera, p_cam, near: float = NEAR_PLANE):
    """Pixel coordinates and depth of a camera-frame point.

    Pixel centres sit at half-integers, so ``cx = width / 2`` is the image centre.
    """
    x, y, z = (float(c) for c in p_cam)
    if not z > near:
        raise BehindCamera(f"depth {z} is not beyond the near plane {near}")
    return np.array([cam.cx + cam.fx * x / z, cam.cy + cam.fy * y / z]), z


def projection_jacobian(cam: PinholeCamera, p_cam) -> np.ndarray:
    x, y, z = (float(c) for c in p_cam)
    return np.array([
        [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
        [0.0, cam.fy / z, -cam.fy * y / (z * z)],
    ])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``.

    Camera axes follow the SfM convention: +z forward, +x right, +y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return RigidTransform(R, -R @ eye)
