import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from viewmap.geom import (
    CameraIntrinsics,
    ContractedPoint,
    GeometryError,
    Pose,
    Ray,
    contract,
    from_contracted,
    look_at,
    pixel_to_ray,
    pose_distance,
    rays_in_frame,
    to_contracted,
    transform_contracted,
)

finite = st.floats(-50, 50, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)
quat = st.tuples(*[st.floats(-1, 1) for _ in range(4)]).filter(lambda q: sum(x * x for x in q) > 1e-2)


def pose_from(q, t):
    return Pose.from_rotation(Rotation.from_quat(q).as_matrix(), t)


def contract_oracle(p):
    """Scalar reference with the textbook asin elevation."""
    x, y, z = p
    r = math.sqrt(x * x + y * y + z * z)
    if r == 0:
        return 0.5, 0.5, 1.0
    theta = (math.atan2(z, x) + math.pi) / (2 * math.pi) if (x, z) != (0, 0) else 0.5
    phi = (math.asin(max(-1.0, min(1.0, y / r))) + math.pi / 2) / math.pi
    return theta, phi, 1 / (1 + r)


# -- poses ---------------------------------------------------------------


@given(quat, vec3)
def test_pose_quaternion_normalized_and_inverse(q, t):
    p = pose_from(q, t)
    assert abs(np.linalg.norm(p.quat) - 1) < 1e-9
    ident = p.compose(p.inverse())
    assert np.allclose(ident.matrix, np.eye(4), atol=1e-9)


@given(quat, vec3, quat, vec3, quat, vec3)
@settings(max_examples=50)
def test_pose_compose_associative(q1, t1, q2, t2, q3, t3):
    a, b, c = pose_from(q1, t1), pose_from(q2, t2), pose_from(q3, t3)
    left = a.compose(b).compose(c).matrix
    right = a.compose(b.compose(c)).matrix
    assert np.allclose(left, right, atol=1e-9 * (1 + np.abs(left).max()))


def test_pose_list_roundtrip():
    p = pose_from((0.1, -0.4, 0.3, 0.8), (1.0, 2.0, -3.0))
    assert Pose.from_list(p.to_list()) == p


def test_pose_distance_examples():
    a = Pose.identity()
    b = Pose.from_rotation(np.eye(3), (0.3, 0, 0))
    assert pose_distance(a, a) == 0
    assert pose_distance(a, b) == pytest.approx(0.3, abs=1e-15)


@given(quat, vec3, quat, vec3)
def test_pose_distance_symmetric(q1, t1, q2, t2):
    a, b = pose_from(q1, t1), pose_from(q2, t2)
    assert pose_distance(a, b) == pose_distance(b, a)


# -- contraction ---------------------------------------------------------


def test_contract_axis_examples():
    assert to_contracted((1, 0, 0)) == pytest.approx(ContractedPoint(0.5, 0.5, 0.5))
    assert to_contracted((0, 1, 0)) == pytest.approx(ContractedPoint(0.5, 1.0, 0.5))
    assert to_contracted((0, 0, 0)) == pytest.approx(ContractedPoint(0.5, 0.5, 1.0))


def test_from_contracted_examples():
    assert np.allclose(from_contracted((0.5, 0.5, 0.5)), (1, 0, 0), atol=1e-15)
    assert np.allclose(from_contracted((0.5, 0.5, 1.0)), (0, 0, 0))


def test_contract_rejects_nonfinite_and_infinity():
    with pytest.raises(GeometryError):
        to_contracted((np.nan, 0, 0))
    with pytest.raises(GeometryError):
        from_contracted((0.5, 0.5, 0.0))
    with pytest.raises(GeometryError):
        from_contracted((0.5, 1.2, 0.5))


def test_contract_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(500, 3)) * np.exp(rng.uniform(-5, 10, (500, 1)))
    got = contract(pts)
    want = np.array([contract_oracle(p) for p in pts])
    assert np.abs(got - want).max() < 1e-12


def test_contract_roundtrip_wide_radius_range():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(1000, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = 10 ** rng.uniform(-3, 6, 1000)
    p = u * r[:, None]
    back = np.array([from_contracted(to_contracted(x)) for x in p])
    rel = np.linalg.norm(back - p, axis=1) / r
    assert rel.max() < 1e-9


@given(st.floats(0, 1), st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1))
def test_contracted_roundtrip(theta, phi, rho):
    c = np.array([theta, phi, rho])
    back = np.array(to_contracted(from_contracted(c)))
    d = np.abs(back - c)
    d[0] = min(d[0], 1 - d[0])  # theta 0 and 1 are the same azimuth
    if rho == 1.0:
        d[:2] = 0  # origin: angles carry no information
    assert d.max() < 1e-9


@given(vec3.filter(lambda p: np.linalg.norm(p) > 0), st.floats(1.01, 100))
def test_contraction_in_unit_cube_and_monotone_in_radius(p, k):
    c1, c2 = contract(np.array(p)), contract(np.array(p) * k)
    assert np.all((c1 >= 0) & (c1 <= 1)) and c1[2] > 0
    assert c2[2] <= c1[2]
    if np.linalg.norm(p) > 1e-8:
        assert c2[2] < c1[2]


def test_rho_steps_are_inverse_distance_steps():
    rho = np.linspace(0.1, 1.0, 10)
    r = 1 / rho - 1
    assert np.allclose(contract(np.stack([r, 0 * r, 0 * r], 1))[:, 2], rho, atol=1e-15)


def test_contract_torch_matches_numpy():
    import torch

    pts = np.random.default_rng(1).normal(size=(100, 3)) * 5
    pts[0] = 0
    pts[1] = (0, 2, 0)
    assert np.allclose(contract(torch.tensor(pts)).numpy(), contract(pts), atol=1e-14)


@given(quat, vec3)
@settings(max_examples=50)
def test_transform_contracted_matches_cartesian_route(q, t):
    pose = pose_from(q, t)
    rng = np.random.default_rng(7)
    c = np.column_stack([rng.uniform(0, 1, 50), rng.uniform(0.01, 0.99, 50), rng.uniform(0.01, 0.99, 50)])
    got = transform_contracted(c, pose)
    want = contract(pose.apply(np.array([from_contracted(x) for x in c])))
    d = np.abs(got - want)
    d[:, 0] = np.minimum(d[:, 0], 1 - d[:, 0])
    assert d.max() < 1e-9


def test_transform_contracted_identity_is_exact_everywhere():
    g = np.linspace(0, 1, 9)
    c = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    out = transform_contracted(c, Pose.identity())
    assert np.abs(out - c).max() < 1e-12


# -- rays ----------------------------------------------------------------


def test_intrinsics_validation():
    with pytest.raises(GeometryError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(GeometryError):
        CameraIntrinsics(1, 1, 4, 1, 4, 4)
    with pytest.raises(GeometryError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]))


def test_principal_ray_in_own_frame():
    intr = CameraIntrinsics.from_fov(64, 48, 60)
    kf = pose_from((0.2, 0.1, -0.3, 0.9), (1, 2, 3))
    ray = pixel_to_ray(kf, intr, intr.cx, intr.cy, kf)
    assert np.allclose(ray.origin, 0, atol=1e-12)
    assert np.allclose(ray.direction, (0, 0, 1), atol=1e-12)


def test_identity_poses_give_pinhole_ray():
    intr = CameraIntrinsics(50, 40, 32, 24, 64, 48)
    ray = pixel_to_ray(Pose.identity(), intr, 10.5, 3.5, Pose.identity())
    d = np.array([(10.5 - 32) / 50, (3.5 - 24) / 40, 1.0])
    assert np.allclose(ray.direction, d / np.linalg.norm(d), atol=1e-15)
    assert np.allclose(ray.origin, 0)


@given(quat, vec3, quat, vec3, st.floats(0, 64), st.floats(0, 48))
@settings(max_examples=50)
def test_ray_frame_change_consistency(qk, tk, qa, ta, u, v):
    intr = CameraIntrinsics.from_fov(64, 48, 60)
    kf, anchor = pose_from(qk, tk), pose_from(qa, ta)
    local = pixel_to_ray(kf, intr, u, v, anchor)
    world = pixel_to_ray(kf, intr, u, v, Pose.identity())
    assert np.allclose(anchor.apply(local.origin), world.origin, atol=1e-9 * (1 + np.abs(world.origin).max()))
    assert np.allclose(anchor.rotation @ local.direction, world.direction, atol=1e-9)


def test_rays_in_frame_matches_pixel_to_ray():
    intr = CameraIntrinsics.from_fov(8, 6, 60)
    kf = pose_from((0.3, 0.1, 0.2, 0.9), (0.5, 0, 1))
    anchor = pose_from((0, 0.4, 0, 0.9), (1, 1, 0))
    o, d = rays_in_frame(kf, intr.pixel_directions(), anchor)
    for j, i in [(0, 0), (3, 5), (5, 7)]:
        ray = pixel_to_ray(kf, intr, i + 0.5, j + 0.5, anchor)
        assert np.allclose(o[j, i], ray.origin, atol=1e-12)
        assert np.allclose(d[j, i], ray.direction, atol=1e-12)


def test_pixel_outside_image_rejected():
    intr = CameraIntrinsics.from_fov(8, 8, 60)
    with pytest.raises(GeometryError):
        pixel_to_ray(Pose.identity(), intr, -1, 0, Pose.identity())


def test_look_at_axes():
    p = look_at((0, 0, 0), (0, 0, 5))
    assert np.allclose(p.rotation, np.eye(3) @ np.diag([-1, -1, 1]), atol=1e-12)
    # forward axis points at the target, image "down" points to world -y
    assert np.allclose(p.rotation[:, 2], (0, 0, 1))
    assert p.rotation[1, 1] < 0
