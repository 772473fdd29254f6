"""Gaussian splat reconstruction of small objects from posed photos, with
mesh extraction and cleanup."""
from .colmap_io import Reconstruction, read_model, write_model
from .errors import DataError, NumericError, SplatkitError
from .estimators import MeshExtractor, SplatReconstructor
from .gaussians import GaussianCloud, init_from_points, load_cloud, save_cloud
from .geometry import PinholeCamera
from .mesh import TriangleMesh, read_mesh, write_mesh
from .metrics import iou, mse, psnr
from .rasterizer import render
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DataError", "GaussianCloud", "MeshExtractor", "NumericError", "PinholeCamera", "Reconstruction",
    "SplatReconstructor", "SplatkitError", "TrainConfig", "TriangleMesh", "init_from_points", "iou",
    "load_cloud", "mse", "psnr", "read_mesh", "read_model", "render", "save_cloud", "train",
    "write_mesh", "write_model",
]
