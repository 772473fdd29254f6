"""scikit-learn style wrappers around the training and meshing pipeline.

``SplatReconstructor`` fits a Gaussian cloud to posed views and predicts
renders for new cameras.  ``MeshExtractor`` turns a fitted cloud into a
cleaned triangle mesh.  Both follow the estimator conventions: constructor
arguments are stored verbatim, learned state gets a trailing underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import EmptyPointCloud
from .gaussians import GaussianCloud, InitConfig, init_from_points
from .geometry import PinholeCamera
from .mesh import TriangleMesh, bake_vertex_colors, clean_mesh, density_grid, marching_cubes
from .metrics import evaluate_model
from .rasterizer import render
from .trainer import TrainConfig, check_views, train


def check_cloud(cloud) -> GaussianCloud:
    """Accept a GaussianCloud or a checkpoint carrying one; reject empty or non-finite clouds."""
    cloud = getattr(cloud, "cloud", cloud)
    if not isinstance(cloud, GaussianCloud):
        raise TypeError(f"expected a GaussianCloud, got {type(cloud).__name__}")
    if len(cloud) == 0:
        raise EmptyPointCloud("cloud has no Gaussians")
    if not cloud.is_finite():
        raise ValueError("cloud has non-finite parameters")
    return cloud


def check_cameras(cameras):
    cameras = [getattr(c, "camera", c) for c in cameras]
    for c in cameras:
        if not isinstance(c, PinholeCamera):
            raise TypeError(f"expected PinholeCamera or a view, got {type(c).__name__}")
    return cameras


class SplatReconstructor(BaseEstimator):
    """Fit a Gaussian splat model to masked, posed views.

    ``fit(views, points=...)`` initializes from a sparse point cloud (a list
    of SparsePoint or a ``(positions, colors)`` pair) and trains.  Any
    TrainConfig field can be overridden through ``train_params``.
    """

    def __init__(self, iterations=7000, sh_degree=3, lambda_dssim=0.2, seed=0,
                 background=(0.0, 0.0, 0.0), train_params=None):
        self.iterations = iterations
        self.sh_degree = sh_degree
        self.lambda_dssim = lambda_dssim
        self.seed = seed
        self.background = background
        self.train_params = train_params

    def _config(self) -> TrainConfig:
        extra = dict(self.train_params or {})
        return TrainConfig(iterations=self.iterations, sh_degree=self.sh_degree,
                           lambda_dssim=self.lambda_dssim, seed=self.seed,
                           background=tuple(self.background), **extra)

    def fit(self, X, y=None, *, points=None, init_cloud=None, eval_views=None):
        views = check_views(X, min_views=2)
        config = self._config()
        if init_cloud is None:
            if points is None:
                raise ValueError("fit needs either points or init_cloud")
            init_cloud = init_from_points(points, InitConfig(sh_degree=self.sh_degree))
        result = train(views, check_cloud(init_cloud), config, eval_views=eval_views)
        self.cloud_ = result.best.cloud
        self.best_iteration_ = result.best.iteration
        self.trace_ = result.trace
        self.n_gaussians_ = len(self.cloud_)
        return self

    def predict(self, X):
        """Rendered RGB images, one per camera (or view) in ``X``."""
        check_is_fitted(self, "cloud_")
        bg = np.asarray(self.background, dtype=np.float64)
        return [render(self.cloud_, cam, bg).color for cam in check_cameras(X)]

    def score(self, X, y=None):
        """Mean PSNR (dB, images in [0, 1]) over the views in ``X``."""
        check_is_fitted(self, "cloud_")
        return evaluate_model(self.cloud_, list(X), self.background).mean_psnr


class MeshExtractor(TransformerMixin, BaseEstimator):
    """Gaussian cloud -> colored, cleaned triangle mesh."""

    def __init__(self, resolution=128, iso=0.3, tau=0.1, clean=True):
        self.resolution = resolution
        self.iso = iso
        self.tau = tau
        self.clean = clean

    def fit(self, X=None, y=None):
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        if not self.iso > 0:
            raise ValueError("iso must be positive")
        return self

    def transform(self, X) -> TriangleMesh:
        cloud = check_cloud(X)
        mesh = marching_cubes(density_grid(cloud, self.resolution), self.iso)
        mesh = bake_vertex_colors(mesh, cloud)
        return clean_mesh(mesh, self.tau) if self.clean else mesh
