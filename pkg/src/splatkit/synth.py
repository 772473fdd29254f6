"""Synthetic ground-truth scenes with known answers.

A scene is a small Gaussian cloud seen by cameras on a sphere.  Views are
rendered over black, masks come from the rendered opacity, and a sparse
point cloud with consistent tracks is sampled from the Gaussians, so the
output looks like an SfM workspace with background-masked photos.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .colmap_io import (CameraIntrinsics, CameraModel, Reconstruction, SparsePoint, ViewPose,
                        write_model)
from .gaussians import GaussianCloud, rgb_to_sh_dc, save_cloud
from .geometry import PinholeCamera, look_at, rotmat_to_quat
from .rasterizer import render
from .trainer import TrainView
from .utils.io import atomic_write_text, to_uint8, write_png

MASK_ALPHA = 0.02


@dataclass
class SynthConfig:
    seed: int = 0
    n_gaussians: int = 20
    n_views: int = 24
    image_size: int = 128
    focal: float = 150.0
    camera_radius: float = 3.0
    object_radius: float = 0.55
    points_per_gaussian: int = 10


@dataclass
class SynthScene:
    cloud: GaussianCloud
    views: List[TrainView]
    points: dict
    reconstruction: Reconstruction
    config: SynthConfig


def random_cloud(rng: np.random.Generator, n: int, radius: float) -> GaussianCloud:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    means = d * radius * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1 / 3)
    log_scales = np.log(rng.uniform(0.06, 0.2, size=(n, 3)))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacity = rng.uniform(0.7, 0.95, size=n)
    colors = rng.uniform(0.2, 0.95, size=(n, 3))
    return GaussianCloud(means, log_scales, rotations, np.log(opacity / (1 - opacity)),
                         rgb_to_sh_dc(colors)[:, None, :])


def sphere_cameras(n: int, radius: float, focal: float, size: int) -> List[PinholeCamera]:
    """Cameras on a Fibonacci sphere (polar caps trimmed) aimed at the origin."""
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n):
        z = 0.8 - 1.6 * (i + 0.5) / n
        r = np.sqrt(1 - z * z)
        eye = radius * np.array([r * np.cos(golden * i), r * np.sin(golden * i), z])
        cams.append(PinholeCamera.from_params(focal, focal, size / 2, size / 2, size, size,
                                              look_at(eye, np.zeros(3)), camera_id=1))
    return cams


def make_scene(config: SynthConfig = SynthConfig()) -> SynthScene:
    rng = np.random.default_rng(config.seed)
    cloud = random_cloud(rng, config.n_gaussians, config.object_radius)
    cams = sphere_cameras(config.n_views, config.camera_radius, config.focal, config.image_size)

    views = []
    for i, cam in enumerate(cams):
        out = render(cloud, cam)
        image = to_uint8(out.color).astype(np.float64) / 255.0
        mask = (out.alpha > MASK_ALPHA).astype(np.float64)
        views.append(TrainView(image, mask, cam, name=f"view_{i:03d}.png"))

    # sparse points drawn inside each Gaussian's 1.5-sigma core
    positions, colors = [], []
    dc = cloud.dc_colors()
    from .gaussians import covariances
    covs = covariances(cloud.log_scales, cloud.rotations)
    for g in range(len(cloud)):
        L = np.linalg.cholesky(covs[g])
        z = rng.normal(size=(config.points_per_gaussian, 3))
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        z = np.where(norms > 1.5, z * 1.5 / norms, z)
        positions.append(cloud.means[g] + z @ L.T)
        colors.append(np.repeat(dc[g][None], config.points_per_gaussian, axis=0))
    positions = np.concatenate(positions)
    colors = np.round(255 * np.concatenate(colors)).astype(int)

    recon = _reconstruction(cams, views, positions, colors)
    return SynthScene(cloud, views, recon.points, recon, config)


def _reconstruction(cams, views, positions, colors) -> Reconstruction:
    cam0 = cams[0]
    intr = CameraIntrinsics(1, CameraModel.PINHOLE, cam0.width, cam0.height,
                            (cam0.fx, cam0.fy, cam0.cx, cam0.cy))
    observations = {pid: [] for pid in range(len(positions))}
    images = {}
    for i, (cam, view) in enumerate(zip(cams, views)):
        image_id = i + 1
        p_cam = cam.pose.apply(positions)
        uv = np.stack([cam.fx * p_cam[:, 0] / p_cam[:, 2] + cam.cx,
                       cam.fy * p_cam[:, 1] / p_cam[:, 2] + cam.cy], axis=1)
        seen = np.flatnonzero((p_cam[:, 2] > 0.01) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
                              & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height))
        for k, pid in enumerate(seen):
            observations[int(pid)].append((image_id, k))
        q = rotmat_to_quat(cam.pose.rotation)
        images[image_id] = ViewPose(image_id, tuple(q), tuple(cam.pose.translation), 1, view.name,
                                    uv[seen], seen + 1)
    points = {}
    for pid, obs in observations.items():
        if not obs:
            continue
        points[pid + 1] = SparsePoint(pid + 1, tuple(positions[pid]), tuple(colors[pid]), 0.0,
                                      [o[0] for o in obs], [o[1] for o in obs])
    # drop observations of points that were never tracked (cannot happen with seen-based tracks)
    return Reconstruction({1: intr}, images, points)


def write_scene(scene: SynthScene, out_dir) -> Path:
    """Lay the scene out as an SfM workspace:

    ``sparse/0/{cameras,images,points3D}.bin``, ``images/*.png``,
    ``masks/*.png``, ``ground_truth.ply`` and ``scene.json``.
    """
    out_dir = Path(out_dir)
    write_model(scene.reconstruction, out_dir / "sparse" / "0", "binary")
    for view in scene.views:
        write_png(out_dir / "images" / view.name, view.image)
        write_png(out_dir / "masks" / view.name, to_uint8(view.mask))
    save_cloud(scene.cloud, out_dir / "ground_truth.ply")
    meta = {"seed": scene.config.seed, "n_gaussians": scene.config.n_gaussians,
            "n_views": scene.config.n_views, "image_size": scene.config.image_size,
            "n_points": len(scene.points)}
    atomic_write_text(out_dir / "scene.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out_dir
