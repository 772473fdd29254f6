import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import sph_harm_y

from splatkit.colmap_io import SparsePoint
from splatkit.errors import EmptyPointCloud, FormatError
from splatkit.gaussians import (COV2D_FLOOR, Gaussian, GaussianCloud, InitConfig, cloud_to_ply_bytes,
                                covariance3d, init_from_points, load_cloud, project_cloud,
                                project_gaussian, save_cloud, sh_basis, sh_basis_grad, sh_to_rgb)
from splatkit.geometry import PinholeCamera, quat_to_rotmat
from splatkit.ply import PlyElement, read_ply, write_ply

from helpers import make_camera, random_quat, random_scene


def gaussian(mean=(0, 0, 0), scale=(1, 1, 1), q=(1, 0, 0, 0), alpha=0.5, degree=0):
    sh = np.zeros(((degree + 1) ** 2, 3))
    return Gaussian(np.asarray(mean, float), np.log(np.asarray(scale, float)), np.asarray(q, float),
                    math.log(alpha / (1 - alpha)), sh)


def test_covariance_example():
    g = gaussian(scale=(2, 2, 2))
    assert np.allclose(covariance3d(g), np.diag([4.0, 4.0, 4.0]), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_covariance_properties(seed):
    rng = np.random.default_rng(seed)
    scale = np.exp(rng.uniform(-4, 2, 3))
    g1 = gaussian(scale=scale, q=random_quat(rng))
    g2 = gaussian(scale=scale, q=random_quat(rng))
    s1, s2 = covariance3d(g1), covariance3d(g2)
    assert np.allclose(s1, s1.T, atol=0, rtol=1e-12)
    w1, v1 = np.linalg.eigh(s1)
    assert w1.min() >= -1e-12 * w1.max()
    assert np.allclose(w1, np.linalg.eigvalsh(s2), rtol=1e-9)
    assert np.allclose(np.sort(w1), np.sort(scale**2), rtol=1e-9)
    assert np.allclose(v1 @ np.diag(w1) @ v1.T, s1, atol=1e-9 * w1.max())


def test_unnormalized_quaternion_is_normalized_before_use():
    g1 = gaussian(scale=(1, 2, 3), q=(0.5, 0.5, 0.5, 0.5))
    g2 = gaussian(scale=(1, 2, 3), q=(2.0, 2.0, 2.0, 2.0))
    assert np.allclose(covariance3d(g1), covariance3d(g2), atol=1e-12)


def test_isotropic_on_axis_projects_isotropic():
    cam = PinholeCamera.from_params(1, 1, 0.5, 0.5, 1, 1)
    cam_pose_z1 = gaussian(mean=(0, 0, 1), scale=(0.3, 0.3, 0.3))
    pg = project_gaussian(cam_pose_z1, cam)
    assert pg is not None
    assert abs(pg.cov2d[0, 0] - pg.cov2d[1, 1]) < 1e-9 and abs(pg.cov2d[0, 1]) < 1e-9


def test_behind_camera_culled():
    cam = PinholeCamera.from_params(100, 100, 32, 32, 64, 64)
    assert project_gaussian(gaussian(mean=(0, 0, -1), scale=(0.1,) * 3), cam) is None
    assert project_gaussian(gaussian(mean=(0, 0, 0.005), scale=(0.001,) * 3), cam) is None


def test_far_off_screen_culled():
    cam = PinholeCamera.from_params(100, 100, 32, 32, 64, 64)
    assert project_gaussian(gaussian(mean=(5, 0, 2), scale=(0.01,) * 3), cam) is None
    # the 3-sigma box still touches the image: kept
    assert project_gaussian(gaussian(mean=(0.7, 0, 2), scale=(0.1,) * 3), cam) is not None


@pytest.mark.parametrize("seed", range(3))
def test_cov2d_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    cam = make_camera(size=128, focal=120.0)
    g = gaussian(mean=rng.uniform(-0.3, 0.3, 3), scale=rng.uniform(0.005, 0.03, 3), q=random_quat(rng))
    pg = project_gaussian(g, cam)
    samples = rng.multivariate_normal(g.mean, covariance3d(g), size=100_000)
    pc = samples @ cam.pose.rotation.T + cam.pose.translation
    uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2], cam.fy * pc[:, 1] / pc[:, 2]], axis=1)
    mc = np.cov(uv.T)
    an = pg.cov2d - COV2D_FLOOR * np.eye(2)
    scale = np.sqrt(np.outer(np.diag(an), np.diag(an)))
    assert np.all(np.abs(mc - an) < 0.05 * np.maximum(np.abs(an), scale))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_cov2d_floor_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    cloud = random_scene(rng, 5, scale=(1e-4, 0.3))
    proj = project_cloud(cloud, make_camera())
    for c in proj.cov2d[proj.valid]:
        assert c[0, 1] == c[1, 0]
        assert np.linalg.eigvalsh(c).min() >= COV2D_FLOOR - 1e-9


def test_sh_degree0():
    assert np.allclose(sh_to_rgb(np.zeros((1, 3)), [0, 0, 1]), 0.5)
    sh = np.array([[0.7, -0.3, 0.1]])
    rgb = sh_to_rgb(sh, [0, 0, 1])
    assert np.allclose(rgb, 0.5 + 0.28209479177387814 * sh[0])
    assert np.array_equal(rgb, sh_to_rgb(sh, [0.6, 0.8, 0]))


def test_sh_degree1_linear_term_is_odd():
    rng = np.random.default_rng(0)
    sh = np.zeros((4, 3))
    sh[1:] = rng.normal(scale=0.2, size=(3, 3))
    d = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    lin = sh_to_rgb(sh, d) - 0.5
    assert np.allclose(sh_to_rgb(sh, -d) - 0.5, -lin, atol=1e-12)
    assert np.allclose(lin, sh_basis(d, 1)[1:] @ sh[1:], atol=1e-12)


def _real_sh_reference(l, m, dirs):
    theta = np.arccos(np.clip(dirs[:, 2], -1, 1))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    y = sph_harm_y(l, abs(m), theta, phi)
    if m == 0:
        return y.real
    if m > 0:
        return math.sqrt(2) * (-1) ** m * y.real
    return math.sqrt(2) * (-1) ** m * y.imag


def test_sh_basis_matches_scipy_up_to_sign_convention():
    rng = np.random.default_rng(1)
    dirs = rng.normal(size=(200, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ours = sh_basis(dirs, 3)
    for l in range(4):
        for m in range(-l, l + 1):
            ref = _real_sh_reference(l, m, dirs)
            col = ours[:, l * l + l + m]
            sign = np.sign(col @ ref)
            assert sign != 0
            assert np.allclose(col, sign * ref, atol=1e-12), (l, m)


def test_sh_basis_gradient_matches_differences():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(20, 3))
    g = sh_basis_grad(d, 3)
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (sh_basis(d + e, 3) - sh_basis(d - e, 3)) / (2 * h)
        assert np.allclose(g[..., a], fd, atol=1e-7)


def test_init_one_point_color():
    pt = SparsePoint(1, (0.1, 0.2, 0.3), (200, 30, 90), 0.1, [1], [0])
    cloud = init_from_points([pt], InitConfig(sh_degree=2))
    assert len(cloud) == 1 and cloud.sh_degree == 2
    rgb = sh_to_rgb(cloud.sh[0], [0, 0, 1])
    assert np.all(np.abs(rgb - np.array([200, 30, 90]) / 255) <= 1 / 255)
    assert np.allclose(cloud.opacities, 0.1)
    assert np.array_equal(cloud.rotations, [[1, 0, 0, 0]])


def test_init_two_points_share_distance():
    pts = (np.array([[0.0, 0, 0], [0.3, 0.4, 0]]), np.zeros((2, 3), np.uint8))
    cloud = init_from_points(pts)
    assert np.allclose(cloud.scales, 0.5)


def test_init_matches_brute_force_knn():
    rng = np.random.default_rng(3)
    pos = rng.normal(size=(500, 3))
    cloud = init_from_points((pos, rng.integers(0, 256, (500, 3))))
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    ref = np.sort(d, axis=1)[:, :3].mean(axis=1)
    assert np.allclose(cloud.scales[:, 0], ref, atol=1e-9, rtol=0)
    assert np.allclose(cloud.scales, cloud.scales[:, :1])


def test_init_empty():
    with pytest.raises(EmptyPointCloud):
        init_from_points([])


def test_init_scale_clamped():
    pos = np.zeros((3, 3))
    cloud = init_from_points((pos, np.zeros((3, 3))))
    assert np.allclose(cloud.scales, 1e-4)


@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_cloud_ply_round_trip(degree, tmp_path):
    rng = np.random.default_rng(degree)
    cloud = random_scene(rng, 17, sh_degree=degree)
    path = tmp_path / "c.ply"
    save_cloud(cloud, path)
    back = load_cloud(path)
    assert back.sh_degree == degree
    for name in GaussianCloud.PARAMS:
        assert np.array_equal(getattr(back, name), getattr(cloud, name).astype(np.float32))
    again = load_cloud(save_cloud(back, None))
    assert again.equals(back)


def test_cloud_ply_missing_property():
    elements = read_ply(cloud_to_ply_bytes(random_scene(np.random.default_rng(0), 3)))
    v = elements["vertex"]
    props = [p for p in v.properties if p[0] != "rot_2"]
    data = {k: x for k, x in v.data.items() if k != "rot_2"}
    raw = write_ply(None, [PlyElement("vertex", v.count, props, data=data)])
    with pytest.raises(FormatError):
        load_cloud(raw)


def test_cloud_ply_bad_rest_count():
    elements = read_ply(cloud_to_ply_bytes(random_scene(np.random.default_rng(0), 3, sh_degree=1)))
    v = elements["vertex"]
    props = [p for p in v.properties if p[0] != "f_rest_8"]
    raw = write_ply(None, [PlyElement("vertex", v.count, props, data=v.data)])
    with pytest.raises(FormatError):
        load_cloud(raw)


def test_cloud_container_ops():
    rng = np.random.default_rng(5)
    cloud = random_scene(rng, 6, sh_degree=1)
    sub = cloud.subset([0, 2])
    assert len(sub) == 2 and np.array_equal(sub.means, cloud.means[[0, 2]])
    both = sub.concat(cloud.subset([5]))
    assert len(both) == 3
    g = cloud[3]
    rebuilt = GaussianCloud.from_gaussians([cloud[i] for i in range(len(cloud))])
    assert rebuilt.equals(cloud) and g.sh.shape == (4, 3)
