"""Random fixtures shared by the test modules."""
import numpy as np

from splatkit.colmap_io import CameraIntrinsics, CameraModel, SparsePoint, ViewPose
from splatkit.gaussians import GaussianCloud, logit
from splatkit.geometry import PinholeCamera, RigidTransform, look_at
from splatkit.mesh import TriangleMesh


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_intrinsics(rng, camera_id=1):
    model = CameraModel(int(rng.integers(0, 3)))
    w, h = int(rng.integers(1, 5000)), int(rng.integers(1, 5000))
    f = float(rng.uniform(1, 3000))
    if model is CameraModel.SIMPLE_PINHOLE:
        params = (f, w / 2, h / 2)
    elif model is CameraModel.PINHOLE:
        params = (f, float(rng.uniform(1, 3000)), w / 2, h / 2)
    else:
        params = (f, w / 2, h / 2, float(rng.normal() * 0.1))
    return CameraIntrinsics(camera_id, model, w, h, params)


def random_pose(rng, image_id=1, camera_id=1, n_obs=None, name=None):
    n = int(rng.integers(0, 20)) if n_obs is None else n_obs
    return ViewPose(image_id, tuple(random_quat(rng)), tuple(rng.normal(size=3)), camera_id,
                    name or f"img_{image_id:04d}.jpg", rng.uniform(0, 1000, size=(n, 2)),
                    rng.integers(-1, 1000, size=n))


def random_point(rng, point_id=1):
    n = int(rng.integers(1, 8))
    return SparsePoint(point_id, tuple(rng.normal(size=3)), tuple(int(c) for c in rng.integers(0, 256, 3)),
                       float(rng.uniform(0, 3)), rng.integers(1, 100, size=n), rng.integers(0, 500, size=n))


def make_camera(size=64, focal=60.0, eye=(0.0, -2.5, 0.0), target=(0.0, 0.0, 0.0)):
    return PinholeCamera.from_params(focal, focal, size / 2, size / 2, size, size,
                                     look_at(np.asarray(eye, float), np.asarray(target, float)))


def make_cloud(means, scales, quats=None, opacities=None, colors=None, sh_degree=0, rng=None):
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = len(means)
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
    quats = np.tile([1.0, 0, 0, 0], (n, 1)) if quats is None else np.asarray(quats, dtype=np.float64)
    opac = np.full(n, 0.8) if opacities is None else np.asarray(opacities, dtype=np.float64)
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, k, 3))
    if colors is not None:
        sh[:, 0, :] = (np.asarray(colors, dtype=np.float64) - 0.5) / 0.28209479177387814
    if rng is not None and k > 1:
        sh[:, 1:, :] = rng.normal(scale=0.1, size=(n, k - 1, 3))
    return GaussianCloud(means, np.log(scales), quats, logit(opac), sh)


def random_scene(rng, n, sh_degree=1, spread=0.6, scale=(0.05, 0.25)):
    """Random cloud in front of a default camera."""
    means = rng.uniform(-spread, spread, size=(n, 3))
    scales = rng.uniform(*scale, size=(n, 3))
    quats = np.array([random_quat(rng) for _ in range(n)]).reshape(n, 4)
    opac = rng.uniform(0.1, 0.95, size=n)
    colors = rng.uniform(0.1, 0.9, size=(n, 3))
    return make_cloud(means, scales, quats, opac, colors, sh_degree, rng)


def cube_mesh(colors=None):
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriangleMesh(v, np.ones((8, 3)) if colors is None else colors, f)


def tetra_mesh(offset=0.0, first_index=0):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float) + offset
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]) + first_index
    return v, f


def random_dirty_mesh(rng):
    """Several disjoint random blobs with some dark vertices."""
    verts, faces = [], []
    base = 0
    for c in range(int(rng.integers(1, 5))):
        nv = int(rng.integers(3, 12))
        pts = rng.normal(size=(nv, 3)) + 10 * c
        nf = int(rng.integers(1, 15))
        tri = np.array([rng.choice(nv, 3, replace=False) for _ in range(nf)]) + base
        verts.append(pts)
        faces.append(tri)
        base += nv
    verts = np.concatenate(verts)
    faces = np.concatenate(faces)
    colors = rng.uniform(0, 1, size=(len(verts), 3))
    dark = rng.random(len(verts)) < 0.15
    colors[dark] *= 0.09
    # shuffle vertex order so components interleave in index space
    perm = rng.permutation(len(verts))
    inv = np.argsort(perm)
    return TriangleMesh(verts[perm], colors[perm], inv[faces])


def union_find_components(faces):
    """Reference edge-adjacency labelling, written independently of the library."""
    parent = list(range(len(faces)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner = {}
    for fi, (a, b, c) in enumerate(faces):
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            if key in owner:
                parent[find(fi)] = find(owner[key])
            else:
                owner[key] = fi
    groups = {}
    for fi in range(len(faces)):
        groups.setdefault(find(fi), []).append(fi)
    return list(groups.values())


def reference_lcc_faces(mesh):
    """Face set of the largest component under the documented tie-break, as vertex-position triples."""
    groups = union_find_components(mesh.faces.tolist())
    if not groups:
        return []
    best = min(groups, key=lambda g: (-len(g), min(mesh.faces[g].min(axis=1))))
    return sorted(tuple(map(tuple, mesh.vertices[mesh.faces[f]])) for f in best)


FD_STEP = 1e-3


def fd_scene(seed, n=None, size=64):
    """Random scene on which the rendered loss is smooth for steps up to ~10 * FD_STEP.

    Central differences are only meaningful away from the renderer's
    discontinuities, so scenes are rejected when two visible splats are
    close in depth (sort-order swaps), a color sits near the [0, 1] clamp,
    a splat's 3-sigma box nears the culling edge, or transmittance could
    approach the early-out threshold.  Footprints narrower than 3 px are
    also rejected: there a step of FD_STEP moves the splat far enough that
    the O(h^2) truncation term alone approaches the 1e-3 tolerance.
    """
    from splatkit.gaussians import GaussianCloud, project_cloud
    from splatkit.geometry import PinholeCamera, look_at

    rng = np.random.default_rng(seed)
    while True:
        k = int(rng.integers(1, 6)) if n is None else n
        deg = int(rng.integers(0, 4))
        cloud = GaussianCloud(
            rng.normal(0, 0.2, (k, 3)), np.log(rng.uniform(0.08, 0.3, (k, 3))), rng.normal(size=(k, 4)),
            rng.normal(-0.5, 0.8, k), np.concatenate(
                [rng.normal(0, 0.6, (k, 1, 3)), rng.normal(0, 0.1, (k, (deg + 1) ** 2 - 1, 3))], axis=1))
        eye = rng.normal(size=3)
        eye = 2.5 * eye / np.linalg.norm(eye)
        up = (0.0, 0.0, 1.0) if abs(eye[2]) < 2.3 else (0.0, 1.0, 0.0)
        cam = PinholeCamera.from_params(60, 60, size / 2, size / 2, size, size, look_at(eye, [0, 0, 0], up))
        p = project_cloud(cloud, cam)
        if not p.valid.all():
            continue
        if np.any(p.rgb_raw < 0.05) or np.any(p.rgb_raw > 0.95):
            continue
        if np.any(p.opacity > 0.85) or np.prod(1 - p.opacity) < 1e-2:
            continue
        if k > 1 and np.min(np.diff(np.sort(p.depth))) < 0.02:
            continue
        if np.any(p.mean2d < 0) or np.any(p.mean2d > size):
            continue
        if np.min(np.linalg.eigvalsh(p.cov2d)) < 9.0:
            continue
        target = rng.uniform(0, 1, (size, size, 3))
        return cloud, cam, target


def fd_gradients(cloud, cam, loss, names=("means", "log_scales", "rotations", "opacity_logits", "sh"),
                 h=FD_STEP):
    out = {}
    for name in names:
        arr = getattr(cloud, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = loss(cloud)
            arr[idx] = old - h
            lm = loss(cloud)
            arr[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out[name] = g
    return out


def rel_error(analytic, numeric, floor=1e-6):
    a, f = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), floor))
