"""Mesh extraction from a Gaussian cloud and mesh cleanup.

Pipeline: sample the opacity-weighted Gaussian density on a grid, extract
an isosurface with marching cubes, bake vertex colors from nearby
Gaussians, then drop dark vertices and keep the largest face-connected
component.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numba
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import FormatError, MissingFile
from .gaussians import GaussianCloud, covariances
from .ply import PlyElement, read_ply, write_ply
from .utils.io import atomic_write_bytes

DENSITY_CUTOFF = 64.0  # squared Mahalanobis radius (8 sigma) of grid splatting


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    colors: Optional[np.ndarray]  # (V, 3) in [0, 1]; None means white
    faces: np.ndarray             # (F, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.ones((len(self.vertices), 3))
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.colors) != len(self.vertices):
            raise FormatError(f"{len(self.colors)} colors for {len(self.vertices)} vertices")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise FormatError("face refers to a vertex index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise FormatError("face repeats a vertex index")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def equals(self, other: "TriangleMesh") -> bool:
        return (np.array_equal(self.vertices, other.vertices) and np.array_equal(self.colors, other.colors)
                and np.array_equal(self.faces, other.faces))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces)
        return len(used) - len(self.edges()) + self.n_faces

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def submesh(self, face_mask) -> "TriangleMesh":
        """Faces selected by ``face_mask``; unreferenced vertices are dropped
        and the survivors re-indexed in their original order."""
        faces = self.faces[face_mask]
        used = np.zeros(self.n_vertices, dtype=bool)
        used[faces.ravel()] = True
        remap = np.cumsum(used) - 1
        return TriangleMesh(self.vertices[used], self.colors[used], remap[faces])


# ---------------------------------------------------------------------------
# density field

def density_at(cloud: GaussianCloud, p) -> np.ndarray:
    """Sum of alpha_g * exp(-0.5 * Mahalanobis^2) over all Gaussians.

    ``p`` is a point (3,) or points (M, 3).
    """
    p = np.asarray(p, dtype=np.float64)
    pts = p.reshape(-1, 3)
    inv = np.linalg.inv(covariances(cloud.log_scales, cloud.rotations))
    alpha = cloud.opacities
    out = np.zeros(len(pts))
    for g in range(len(cloud)):
        d = pts - cloud.means[g]
        m = np.einsum("ni,ij,nj->n", d, inv[g], d)
        out += alpha[g] * np.exp(-0.5 * m)
    return out.reshape(p.shape[:-1]) if p.ndim > 1 else out[0]


@dataclass
class DensityGrid:
    origin: np.ndarray
    spacing: float
    dims: tuple
    values: np.ndarray  # indexed [ix, iy, iz]

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if self.spacing <= 0:
            raise ValueError("grid spacing must be positive")
        if min(self.dims) < 2:
            raise ValueError("grid needs at least 2 samples per axis")
        if self.values.shape != self.dims:
            raise ValueError(f"values shape {self.values.shape} does not match dims {self.dims}")

    def points(self) -> np.ndarray:
        axes = [self.origin[i] + self.spacing * np.arange(self.dims[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@numba.njit(cache=True)
def _splat_density(means, inv_covs, half, alpha, origin, spacing, values):
    nx, ny, nz = values.shape
    for g in range(len(means)):
        lo = np.empty(3, dtype=np.int64)
        hi = np.empty(3, dtype=np.int64)
        for a in range(3):
            lo[a] = max(0, int(np.ceil((means[g, a] - half[g, a] - origin[a]) / spacing)))
            hi[a] = min(values.shape[a] - 1, int(np.floor((means[g, a] + half[g, a] - origin[a]) / spacing)))
        q = inv_covs[g]
        for i in range(lo[0], hi[0] + 1):
            dx = origin[0] + i * spacing - means[g, 0]
            for j in range(lo[1], hi[1] + 1):
                dy = origin[1] + j * spacing - means[g, 1]
                for k in range(lo[2], hi[2] + 1):
                    dz = origin[2] + k * spacing - means[g, 2]
                    m = (q[0, 0] * dx * dx + q[1, 1] * dy * dy + q[2, 2] * dz * dz
                         + 2.0 * (q[0, 1] * dx * dy + q[0, 2] * dx * dz + q[1, 2] * dy * dz))
                    if m <= DENSITY_CUTOFF:
                        values[i, j, k] += alpha[g] * np.exp(-0.5 * m)


def density_grid(cloud: GaussianCloud, resolution: int = 128, bounds=None) -> DensityGrid:
    """Sample the density on a cubic-voxel grid.

    By default the grid spans the union of the Gaussians' 3-sigma boxes, with
    ``resolution`` samples along the longest axis.
    """
    cov = covariances(cloud.log_scales, cloud.rotations)
    sd = np.sqrt(np.einsum("nii->ni", cov))
    if bounds is None:
        lo = (cloud.means - 3 * sd).min(axis=0)
        hi = (cloud.means + 3 * sd).max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    spacing = float((hi - lo).max() / (resolution - 1))
    dims = tuple(int(max(2, np.ceil((hi[a] - lo[a]) / spacing - 1e-9) + 1)) for a in range(3))
    values = np.zeros(dims)
    _splat_density(np.ascontiguousarray(cloud.means), np.ascontiguousarray(np.linalg.inv(cov)),
                   np.ascontiguousarray(np.sqrt(DENSITY_CUTOFF) * sd), cloud.opacities,
                   lo, spacing, values)
    return DensityGrid(lo, spacing, dims, values)


def marching_cubes(grid: DensityGrid, iso: float) -> TriangleMesh:
    """Isosurface of ``grid`` at ``iso`` with coincident vertices welded."""
    from skimage.measure import marching_cubes as _mc

    v = grid.values
    if not (v.min() < iso < v.max()):
        return TriangleMesh.empty()
    verts, faces, _, _ = _mc(v, level=iso, spacing=(grid.spacing,) * 3, method="lewiner",
                             allow_degenerate=False)
    verts = verts.astype(np.float64) + grid.origin
    return weld(TriangleMesh(verts, np.ones_like(verts), faces))


def weld(mesh: TriangleMesh, area_eps: float = 1e-12) -> TriangleMesh:
    """Merge vertices at identical positions and drop degenerate faces."""
    if mesh.n_vertices == 0:
        return mesh
    uniq, first, inverse = np.unique(mesh.vertices, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # keep first-occurrence order so output is stable
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    verts = mesh.vertices[first[order]]
    colors = mesh.colors[first[order]]
    faces = rank[inverse[mesh.faces]]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    tri = verts[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    welded = TriangleMesh(verts, colors, faces)
    return welded.submesh(area > area_eps)


def bake_vertex_colors(mesh: TriangleMesh, cloud: GaussianCloud, k: int = 8) -> TriangleMesh:
    """Opacity-weighted mean DC color of the k nearest Gaussians per vertex."""
    if mesh.n_vertices == 0 or len(cloud) == 0:
        return TriangleMesh(mesh.vertices, mesh.colors, mesh.faces)
    k = min(k, len(cloud))
    _, idx = cKDTree(cloud.means).query(mesh.vertices, k=k)
    idx = idx.reshape(len(mesh.vertices), k)
    w = cloud.opacities[idx]
    rgb = cloud.dc_colors()[idx]
    colors = np.sum(w[..., None] * rgb, axis=1) / np.sum(w, axis=1)[:, None]
    return TriangleMesh(mesh.vertices, colors, mesh.faces)


def extract_mesh(cloud: GaussianCloud, resolution: int = 128, iso: float = 0.3) -> TriangleMesh:
    return bake_vertex_colors(marching_cubes(density_grid(cloud, resolution), iso), cloud)


# ---------------------------------------------------------------------------
# cleanup

def remove_black_vertices(mesh: TriangleMesh, tau: float = 0.1) -> TriangleMesh:
    """Drop vertices whose brightest channel is below ``tau`` and every face touching them."""
    dark = mesh.colors.max(axis=1) < tau
    keep_face = ~dark[mesh.faces].any(axis=1) if mesh.n_faces else np.zeros(0, dtype=bool)
    return mesh.submesh(keep_face)


def face_components(mesh: TriangleMesh):
    """Label faces by connected component; faces connect through shared edges."""
    f = mesh.n_faces
    if f == 0:
        return 0, np.zeros(0, dtype=np.int64)
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    owner = np.tile(np.arange(f), 3)
    order = np.lexsort((owner, e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    a, b = owner[:-1][same], owner[1:][same]
    graph = coo_matrix((np.ones(len(a)), (a, b)), shape=(f, f))
    return connected_components(graph, directed=False)


def largest_connected_component(mesh: TriangleMesh) -> TriangleMesh:
    """Keep the component with the most faces.

    Ties go to the component holding the smallest vertex index.
    """
    n, labels = face_components(mesh)
    if n <= 1:
        return mesh.submesh(np.ones(mesh.n_faces, dtype=bool))
    sizes = np.bincount(labels, minlength=n)
    min_vertex = np.full(n, np.iinfo(np.int64).max)
    np.minimum.at(min_vertex, labels, mesh.faces.min(axis=1))
    best = min(range(n), key=lambda c: (-sizes[c], min_vertex[c]))
    return mesh.submesh(labels == best)


def clean_mesh(mesh: TriangleMesh, tau: float = 0.1) -> TriangleMesh:
    return largest_connected_component(remove_black_vertices(mesh, tau))


@dataclass
class CleanupReport:
    dark_vertices: int
    components: int
    dangling_faces: int
    unreferenced_vertices: int

    @property
    def ok(self) -> bool:
        return (self.dark_vertices == 0 and self.components <= 1 and self.dangling_faces == 0
                and self.unreferenced_vertices == 0)


def cleanup_report(mesh: TriangleMesh, tau: float = 0.1) -> CleanupReport:
    """Post-cleanup checks: no dark vertex, one edge-connected component,
    no face pointing outside the vertex list, no unreferenced vertex."""
    faces = mesh.faces
    dangling = int(np.sum(np.any((faces < 0) | (faces >= mesh.n_vertices), axis=1)))
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[faces[(faces >= 0) & (faces < mesh.n_vertices)]] = True
    return CleanupReport(
        dark_vertices=int(np.sum(mesh.colors.max(axis=1) < tau)) if mesh.n_vertices else 0,
        components=int(face_components(mesh)[0]),
        dangling_faces=dangling,
        unreferenced_vertices=int(np.sum(~used)),
    )


# ---------------------------------------------------------------------------
# file I/O

class MeshFormat(enum.Enum):
    PLY_ASCII = "ply_ascii"
    PLY_BINARY = "ply_binary"
    OBJ = "obj"

    @classmethod
    def infer(cls, path) -> "MeshFormat":
        suffix = Path(path).suffix.lower()
        if suffix == ".obj":
            return cls.OBJ
        if suffix == ".ply":
            return cls.PLY_BINARY
        raise FormatError(f"cannot infer mesh format from {path}")


def mesh_to_bytes(mesh: TriangleMesh, format: MeshFormat = MeshFormat.PLY_BINARY,
                  color_type: str = "float") -> bytes:
    format = MeshFormat(format)
    if format is MeshFormat.OBJ:
        if mesh.n_vertices and not np.all(mesh.colors == 1.0):
            warnings.warn("OBJ output drops vertex colors", stacklevel=2)
        lines = [f"v {float(np.float32(x))!r} {float(np.float32(y))!r} {float(np.float32(z))!r}"
                 for x, y, z in mesh.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
        return ("\n".join(lines) + "\n").encode("ascii") if lines else b""
    ct = {"float": "f4", "uchar": "u1"}[color_type]
    colors = mesh.colors if ct == "f4" else np.round(255 * np.clip(mesh.colors, 0, 1))
    vert = PlyElement("vertex", mesh.n_vertices,
                      [("x", "f4"), ("y", "f4"), ("z", "f4"), ("red", ct), ("green", ct), ("blue", ct)],
                      data={"x": mesh.vertices[:, 0], "y": mesh.vertices[:, 1], "z": mesh.vertices[:, 2],
                            "red": colors[:, 0], "green": colors[:, 1], "blue": colors[:, 2]})
    face = PlyElement("face", mesh.n_faces, [], ("vertex_indices", "u1", "i4"),
                      data={"vertex_indices": mesh.faces})
    return write_ply(None, [vert, face], binary=format is MeshFormat.PLY_BINARY)


def write_mesh(path, mesh: TriangleMesh, format: Optional[MeshFormat] = None, color_type: str = "float") -> None:
    atomic_write_bytes(path, mesh_to_bytes(mesh, format or MeshFormat.infer(path), color_type))


def read_mesh(path, format: Optional[MeshFormat] = None) -> TriangleMesh:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{path} does not exist")
    format = MeshFormat(format) if format is not None else MeshFormat.infer(path)
    if format is MeshFormat.OBJ:
        return parse_obj(path.read_text())
    return mesh_from_ply(read_ply(path))


def mesh_from_ply(elements) -> TriangleMesh:
    if "vertex" not in elements:
        raise FormatError("PLY has no vertex element")
    v = elements["vertex"].data
    if not all(k in v for k in "xyz"):
        raise FormatError("PLY vertices lack x/y/z")
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    if all(k in v for k in ("red", "green", "blue")):
        cols = np.stack([v["red"], v["green"], v["blue"]], axis=1)
        colors = cols.astype(np.float64) / 255.0 if cols.dtype.kind in "ui" else cols.astype(np.float64)
    else:
        colors = np.ones_like(verts)
    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in elements:
        el = elements["face"]
        if el.list_property is None:
            raise FormatError("PLY face element has no index list")
        faces = el.data[el.list_property[0]]
        if isinstance(faces, list) or (len(faces) and faces.shape[1] != 3):
            raise FormatError("only triangle faces are supported")
    return TriangleMesh(verts, colors, faces)


def parse_obj(text: str) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        try:
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                if len(idx) != 3:
                    raise FormatError(f"line {lineno}: only triangles are supported")
                n = len(verts)
                idx = [i - 1 if i > 0 else n + i for i in idx]
                if any(i < 0 or i >= n for i in idx) or 0 in [int(t.split("/")[0]) for t in tok[1:]]:
                    raise FormatError(f"line {lineno}: face index out of range")
                faces.append(idx)
        except ValueError:
            raise FormatError(f"line {lineno}: malformed {tok[0]!r} record") from None
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.ones((len(verts), 3)),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
