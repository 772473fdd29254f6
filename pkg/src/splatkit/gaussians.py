"""Gaussian scene representation.

A :class:`GaussianCloud` stores every parameter in an unconstrained domain
(log scales, opacity logits, raw quaternions) so plain gradient steps can
never leave the valid set.  Colors are real spherical-harmonic coefficients
evaluated along the camera-to-Gaussian direction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyPointCloud, FormatError
from .geometry import NEAR_PLANE, PinholeCamera, quat_to_rotmat
from .ply import PlyElement, read_ply, write_ply

COV2D_FLOOR = 0.3
MAX_SH_DEGREE = 3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh: np.ndarray  # (K, 3)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(len(self.sh)))) - 1


class GaussianCloud:
    """Struct-of-arrays container for N Gaussians of a common SH degree."""

    PARAMS = ("means", "log_scales", "rotations", "opacity_logits", "sh")

    def __init__(self, means, log_scales, rotations, opacity_logits, sh):
        self.means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.array(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.array(rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.array(opacity_logits, dtype=np.float64).reshape(n)
        sh = np.array(sh, dtype=np.float64)
        self.sh = sh if sh.ndim == 3 and len(sh) == n else sh.reshape(n, -1, 3)
        k = self.sh.shape[1]
        degree = int(round(np.sqrt(k))) - 1
        if num_sh_coeffs(degree) != k or degree > MAX_SH_DEGREE:
            raise ValueError(f"{k} SH coefficients per channel is not (L+1)^2 for L <= {MAX_SH_DEGREE}")

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianCloud":
        k = num_sh_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, k, 3)))

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: Optional[int] = None) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(sh_degree or 0)
        return cls(
            [g.mean for g in gaussians], [g.log_scale for g in gaussians],
            [g.rotation for g in gaussians], [g.opacity_logit for g in gaussians],
            [np.asarray(g.sh).reshape(-1, 3) for g in gaussians],
        )

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.log_scales[i].copy(), self.rotations[i].copy(),
                        float(self.opacity_logits[i]), self.sh[i].copy())

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAMS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, p).copy() for p in self.PARAMS))

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, p)[index] for p in self.PARAMS))

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if other.sh_degree != self.sh_degree:
            raise ValueError("cannot concatenate clouds of different SH degree")
        return GaussianCloud(*(np.concatenate([getattr(self, p), getattr(other, p)]) for p in self.PARAMS))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, p))) for p in self.PARAMS)

    def equals(self, other: "GaussianCloud") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, p), getattr(other, p)) for p in self.PARAMS)

    def dc_colors(self) -> np.ndarray:
        """View-independent part of the color, clamped to [0, 1]."""
        return np.clip(0.5 + SH_C0 * self.sh[:, 0, :], 0.0, 1.0)

    def __repr__(self):
        return f"GaussianCloud(n={len(self)}, sh_degree={self.sh_degree})"


# ---------------------------------------------------------------------------
# covariance

def covariances(log_scales, rotations) -> np.ndarray:
    """Batched R diag(exp(2 log_scale)) R^T with the quaternion normalized first."""
    q = np.asarray(rotations, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    R = quat_to_rotmat(q)
    M = R * np.exp(np.asarray(log_scales, dtype=np.float64))[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance3d(g: Gaussian) -> np.ndarray:
    return covariances(g.log_scale, g.rotation)


# ---------------------------------------------------------------------------
# spherical harmonics

def sh_basis(dirs, degree: int) -> np.ndarray:
    """Real SH basis values, shape (..., (degree+1)^2), for unit directions."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_basis_grad(dirs, degree: int) -> np.ndarray:
    """Partial derivatives of :func:`sh_basis` w.r.t. (x, y, z); shape (..., K, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (-2 * SH_C3[2] * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), 8 * SH_C3[2] * y * z),
            (-6 * SH_C3[3] * x * z, -6 * SH_C3[3] * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), -2 * SH_C3[4] * x * y, 8 * SH_C3[4] * x * z),
            (2 * SH_C3[5] * x * z, -2 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), -6 * SH_C3[6] * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_to_rgb(sh, view_dir, degree: Optional[int] = None) -> np.ndarray:
    """Color seen along ``view_dir``: clamp(0.5 + sum_lm c_lm Y_lm(dir), 0, 1)."""
    sh = np.asarray(sh, dtype=np.float64)
    if degree is None:
        degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    k = num_sh_coeffs(degree)
    basis = sh_basis(view_dir, degree)
    raw = 0.5 + np.einsum("...k,...kc->...c", basis, sh[..., :k, :])
    return np.clip(raw, 0.0, 1.0)


def rgb_to_sh_dc(rgb) -> np.ndarray:
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# screen-space projection

@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    alpha: float


@dataclass
class CloudProjection:
    """Per-Gaussian projection of a cloud into one camera.

    Holds the forward intermediates the backward pass re-uses.  Rows where
    ``valid`` is False are culled and carry placeholder values.
    """

    valid: np.ndarray      # (N,) bool
    p_cam: np.ndarray      # (N, 3)
    depth: np.ndarray      # (N,)
    mean2d: np.ndarray     # (N, 2)
    cov3d: np.ndarray      # (N, 3, 3)
    cov2d: np.ndarray      # (N, 2, 2), floor included
    conic: np.ndarray      # (N, 3) inverse cov2d as (a, b, c)
    jac: np.ndarray        # (N, 2, 3)
    rotmat: np.ndarray     # (N, 3, 3) of the normalized quaternion
    quat: np.ndarray       # (N, 4) normalized
    scales: np.ndarray     # (N, 3)
    opacity: np.ndarray    # (N,)
    view_dirs: np.ndarray  # (N, 3) unit camera-to-Gaussian directions
    view_dist: np.ndarray  # (N,)
    rgb_raw: np.ndarray    # (N, 3) before clamping
    rgb: np.ndarray        # (N, 3)
    half_extent: np.ndarray  # (N, 2) 3-sigma half widths of the screen ellipse AABB


def project_cloud(cloud: GaussianCloud, cam: PinholeCamera, near: float = NEAR_PLANE) -> CloudProjection:
    W = cam.pose.rotation
    p_cam = cloud.means @ W.T + cam.pose.translation
    z = p_cam[:, 2]
    in_front = z > near
    zs = np.where(in_front, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]
    n = len(cloud)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / (zs * zs)

    quat = cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    R = quat_to_rotmat(quat)
    scales = np.exp(cloud.log_scales)
    M3 = R * scales[:, None, :]
    cov3d = M3 @ np.swapaxes(M3, 1, 2)
    T = jac @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 1, 0] = cov2d[:, 0, 1]  # exact symmetry; rounding can differ by an ulp
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det_safe = np.where(det > 0, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)
    mean2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    half = 3.0 * np.sqrt(np.stack([np.maximum(a, 0), np.maximum(c, 0)], axis=1))

    lo = mean2d - half
    hi = mean2d + half
    on_screen = (hi[:, 0] >= 0) & (lo[:, 0] < cam.width) & (hi[:, 1] >= 0) & (lo[:, 1] < cam.height)
    valid = in_front & (det > 0) & on_screen & np.all(np.isfinite(mean2d), axis=1)

    offset = cloud.means - cam.center
    dist = np.linalg.norm(offset, axis=1)
    dirs = offset / np.where(dist > 0, dist, 1.0)[:, None]
    basis = sh_basis(dirs, cloud.sh_degree)
    rgb_raw = 0.5 + np.einsum("nk,nkc->nc", basis, cloud.sh)

    return CloudProjection(
        valid=valid, p_cam=p_cam, depth=z, mean2d=mean2d, cov3d=cov3d, cov2d=cov2d,
        conic=conic, jac=jac, rotmat=R, quat=quat, scales=scales,
        opacity=sigmoid(cloud.opacity_logits), view_dirs=dirs, view_dist=dist,
        rgb_raw=rgb_raw, rgb=np.clip(rgb_raw, 0.0, 1.0), half_extent=half,
    )


def project_gaussian(g: Gaussian, cam: PinholeCamera, near: float = NEAR_PLANE) -> Optional[ProjectedGaussian]:
    """Screen-space footprint of one Gaussian, or None when it is culled."""
    proj = project_cloud(GaussianCloud.from_gaussians([g]), cam, near)
    if not proj.valid[0]:
        return None
    return ProjectedGaussian(proj.mean2d[0], proj.cov2d[0], float(proj.depth[0]),
                             proj.rgb[0], float(proj.opacity[0]))


# ---------------------------------------------------------------------------
# initialization

@dataclass
class InitConfig:
    sh_degree: int = 3
    initial_opacity: float = 0.1
    min_scale: float = 1e-4
    lone_point_scale: float = 1e-2
    n_neighbors: int = 3


def knn_mean_distance(positions, k: int = 3) -> np.ndarray:
    """Mean distance from each point to its k nearest other points."""
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    k_eff = min(k, n - 1)
    if k_eff <= 0:
        return np.zeros(n)
    dist, _ = cKDTree(positions).query(positions, k=k_eff + 1)
    return dist[:, 1:].mean(axis=1)


def scene_extent_of(positions) -> float:
    """Diagonal of the axis-aligned bounding box."""
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) == 0:
        return 0.0
    return float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))


def init_from_points(points, config: Optional[InitConfig] = None) -> GaussianCloud:
    """One isotropic Gaussian per sparse point.

    ``points`` may be a mapping or sequence of :class:`SparsePoint`, or a pair
    ``(positions (N,3), colors (N,3) uint8)``.
    """
    config = config or InitConfig()
    if isinstance(points, tuple) and len(points) == 2 and np.ndim(points[0]) == 2:
        positions = np.asarray(points[0], dtype=np.float64)
        colors = np.asarray(points[1], dtype=np.float64)
    else:
        if hasattr(points, "values"):
            points = [points[k] for k in sorted(points)]
        points = list(points)
        positions = np.array([p.position for p in points], dtype=np.float64).reshape(-1, 3)
        colors = np.array([p.color for p in points], dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    if n == 0:
        raise EmptyPointCloud("cannot initialize Gaussians from an empty point cloud")

    if n == 1:
        scale = np.array([config.lone_point_scale])
    else:
        upper = max(scene_extent_of(positions), config.min_scale)
        scale = np.clip(knn_mean_distance(positions, config.n_neighbors), config.min_scale, upper)

    k = num_sh_coeffs(config.sh_degree)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rgb_to_sh_dc(colors / 255.0)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        means=positions,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        rotations=rotations,
        opacity_logits=np.full(n, logit(config.initial_opacity)),
        sh=sh,
    )


# ---------------------------------------------------------------------------
# splat PLY interchange

def _rest_count(degree: int) -> int:
    return 3 * (num_sh_coeffs(degree) - 1)


def cloud_to_ply_bytes(cloud: GaussianCloud, comments=()) -> bytes:
    n = len(cloud)
    k = cloud.sh.shape[1]
    props, data = [], {}

    def add(name, values):
        props.append((name, "f4"))
        data[name] = np.asarray(values, dtype=np.float32)

    for i, axis in enumerate("xyz"):
        add(axis, cloud.means[:, i])
    for axis in ("nx", "ny", "nz"):
        add(axis, np.zeros(n))
    for c in range(3):
        add(f"f_dc_{c}", cloud.sh[:, 0, c])
    rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * (k - 1))
    for j in range(rest.shape[1]):
        add(f"f_rest_{j}", rest[:, j])
    add("opacity", cloud.opacity_logits)
    for i in range(3):
        add(f"scale_{i}", cloud.log_scales[:, i])
    for i in range(4):
        add(f"rot_{i}", cloud.rotations[:, i])
    return write_ply(None, [PlyElement("vertex", n, props, data=data)], binary=True, comments=comments)


def save_cloud(cloud: GaussianCloud, sink) -> Optional[bytes]:
    data = cloud_to_ply_bytes(cloud)
    if sink is None:
        return data
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        from .utils.io import atomic_write_bytes
        atomic_write_bytes(sink, data)
    return None


def load_cloud(source) -> GaussianCloud:
    elements = read_ply(source)
    if "vertex" not in elements:
        raise FormatError("splat PLY has no vertex element")
    v = elements["vertex"].data
    required = ["x", "y", "z", "opacity", "f_dc_0", "f_dc_1", "f_dc_2"]
    required += [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    missing = [p for p in required if p not in v]
    if missing:
        raise FormatError(f"splat PLY is missing properties: {', '.join(missing)}")
    n_rest = sum(1 for name in v if name.startswith("f_rest_"))
    degree = next((d for d in range(MAX_SH_DEGREE + 1) if _rest_count(d) == n_rest), None)
    if degree is None:
        raise FormatError(f"{n_rest} f_rest properties do not match any SH degree <= {MAX_SH_DEGREE}")
    try:
        rest = np.stack([v[f"f_rest_{j}"] for j in range(n_rest)], axis=1) if n_rest else None
    except KeyError as exc:
        raise FormatError(f"splat PLY is missing {exc.args[0]}") from None
    n = len(v["x"])
    k = num_sh_coeffs(degree)
    sh = np.zeros((n, k, 3))
    for c in range(3):
        sh[:, 0, c] = v[f"f_dc_{c}"]
    if rest is not None:
        sh[:, 1:, :] = np.transpose(rest.reshape(n, 3, k - 1), (0, 2, 1))
    return GaussianCloud(
        means=np.stack([v["x"], v["y"], v["z"]], axis=1),
        log_scales=np.stack([v[f"scale_{i}"] for i in range(3)], axis=1),
        rotations=np.stack([v[f"rot_{i}"] for i in range(4)], axis=1),
        opacity_logits=v["opacity"],
        sh=sh,
    )
