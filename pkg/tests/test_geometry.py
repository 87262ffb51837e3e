import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cameras import camera_pair, map_pixel, random_camera
from oracles import project_point, unproject_transform_project
from rectnerf.errors import BehindCameraError, DomainError, InvalidCameraError
from rectnerf.geometry import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    apply_homography,
    bilinear_sample,
    depth_to_ndc,
    from_ndc,
    generate_rays,
    homography_matrix,
    image_pixels,
    project,
    reproject_point,
    sample_ray,
    sweep_planes,
    to_ndc,
    unproject,
    warp_feature_map,
)

K64 = CameraIntrinsics(60.0, 62.0, 31.5, 30.0, 64, 64)


# --------------------------------------------------------------------------
# camera types


def test_intrinsics_validation():
    with pytest.raises(InvalidCameraError):
        CameraIntrinsics(0.0, 10.0, 5, 5, 10, 10)
    with pytest.raises(InvalidCameraError):
        CameraIntrinsics(10.0, 10.0, 10.0, 5, 10, 10)
    with pytest.raises(InvalidCameraError):
        CameraIntrinsics.from_matrix(np.array([[10, 1, 5], [0, 10, 5], [0, 0, 1.0]]), 10, 10)
    np.testing.assert_allclose(K64.K @ K64.K_inv, np.eye(3), atol=1e-12)


def test_pose_validation():
    with pytest.raises(InvalidCameraError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidCameraError):
        CameraPose(np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(InvalidCameraError):
        CameraPose(np.eye(3), np.array([0.0, np.nan, 0.0]))


def test_view_validation():
    pose = CameraPose(np.eye(3), np.zeros(3))
    with pytest.raises(InvalidCameraError):
        CameraView(np.zeros((64, 64, 3)), K64, pose, 2.0, 1.0)
    with pytest.raises(InvalidCameraError):
        CameraView(np.zeros((32, 64, 3)), K64, pose, 1.0, 2.0)


def test_look_at_points_optical_axis_at_target():
    pose = CameraPose.look_at([1.0, 2.0, -3.0], [0.0, 0.0, 0.0])
    xc = pose.R @ np.zeros(3) + pose.t
    assert xc[0] == pytest.approx(0, abs=1e-12) and xc[1] == pytest.approx(0, abs=1e-12)
    assert xc[2] == pytest.approx(math.sqrt(14))


# --------------------------------------------------------------------------
# homography


def test_homography_identity_for_same_camera():
    rng = np.random.default_rng(0)
    k, pose = random_camera(rng)
    np.testing.assert_allclose(homography_matrix(k, pose, k, pose, 2.0), np.eye(3), atol=1e-12)


def test_homography_pure_translation_principal_point():
    pose_ref = CameraPose(np.eye(3), np.zeros(3))
    pose_src = CameraPose(np.eye(3), np.array([-0.1, 0.0, 0.0]))
    H = homography_matrix(K64, pose_src, K64, pose_ref, 2.0)
    got = map_pixel(H, K64.cx, K64.cy)
    # the plane point on the optical axis at depth 2 seen from the shifted camera
    want, _ = project_point(np.array([0.0, 0.0, 2.0]), K64.K, pose_src.R, pose_src.t)
    np.testing.assert_allclose(got, want, atol=1e-5)
    assert got[0] == pytest.approx(K64.cx - K64.fx * 0.1 / 2.0)


def test_homography_random_pairs_match_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(20):
        k_ref, pose_ref, k_src, pose_src = camera_pair(rng)
        for depth in rng.uniform(0.5, 10.0, size=5):
            H = homography_matrix(k_src, pose_src, k_ref, pose_ref, depth)
            for u, v in zip(rng.uniform(0, 63, 50), rng.uniform(0, 47, 50)):
                want = unproject_transform_project(
                    (u, v), depth, k_ref.K, pose_ref.R, pose_ref.t, k_src.K, pose_src.R, pose_src.t
                )
                worst = max(worst, np.abs(map_pixel(H, u, v) - want).max())
    assert worst < 1e-4


def test_homography_rejects_nonpositive_depth():
    pose = CameraPose(np.eye(3), np.zeros(3))
    for z in (0.0, -1.0):
        with pytest.raises(DomainError):
            homography_matrix(K64, pose, K64, pose, z)


def test_apply_homography_degenerate_pixel_goes_far_outside():
    H = torch.tensor([[1.0, 0, 0], [0, 1, 0], [1, 0, 0]], dtype=torch.float64)
    us, vs = apply_homography(H, torch.tensor([[0.0, 2.0]]), torch.tensor([[1.0, 1.0]]))
    assert abs(float(us[0, 0])) >= 1e6 or abs(float(vs[0, 0])) >= 1e6
    assert float(us[0, 1]) == 1.0


# --------------------------------------------------------------------------
# warping and sampling


def test_warp_identity_is_exact():
    feat = torch.rand(5, 7, 9, dtype=torch.float64)
    assert torch.equal(warp_feature_map(feat, np.eye(3)), feat)


def test_warp_integer_translation_replicates_edge():
    feat = torch.rand(2, 6, 10, dtype=torch.float64)
    H = np.array([[1.0, 0, -3], [0, 1, 0], [0, 0, 1]])  # output(u) samples input(u - 3)
    out = warp_feature_map(feat, H)
    expected = torch.empty_like(feat)
    for u in range(10):
        expected[:, :, u] = feat[:, :, max(u - 3, 0)]
    assert torch.equal(out, expected)


def test_warp_constant_map_stays_constant():
    rng = np.random.default_rng(2)
    feat = torch.full((3, 8, 8), 0.37, dtype=torch.float64)
    for _ in range(10):
        H = np.eye(3) + rng.normal(scale=0.1, size=(3, 3))
        H[2] = [rng.normal(scale=0.01), rng.normal(scale=0.01), 1.0]
        out = warp_feature_map(feat, H)
        assert torch.allclose(out, feat, atol=1e-15, rtol=0)


def test_warp_rejects_singular_homography():
    with pytest.raises(DomainError):
        warp_feature_map(torch.rand(1, 4, 4), np.zeros((3, 3)))


def test_bilinear_sample_matches_manual_interpolation():
    rng = np.random.default_rng(3)
    feat = torch.as_tensor(rng.normal(size=(4, 5, 6)))
    for u, v in rng.uniform(0, 4, size=(20, 2)):
        got = bilinear_sample(feat, torch.tensor(u), torch.tensor(v)).numpy()
        u0, v0 = int(u), int(v)
        a, b = u - u0, v - v0
        f = feat.numpy()
        want = (
            (1 - a) * (1 - b) * f[:, v0, u0]
            + a * (1 - b) * f[:, v0, u0 + 1]
            + (1 - a) * b * f[:, v0 + 1, u0]
            + a * b * f[:, v0 + 1, u0 + 1]
        )
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_bilinear_sample_exact_at_integer_and_border():
    feat = torch.rand(3, 4, 5, dtype=torch.float64)
    got = bilinear_sample(feat, torch.tensor([4.0, 0.0, -7.0]), torch.tensor([3.0, 2.0, 100.0]))
    assert torch.equal(got[0], feat[:, 3, 4])
    assert torch.equal(got[1], feat[:, 2, 0])
    assert torch.equal(got[2], feat[:, 3, 0])


# --------------------------------------------------------------------------
# NDC


def test_ndc_endpoints_on_optical_axis():
    rng = np.random.default_rng(4)
    k, pose = random_camera(rng)
    near, far = 1.5, 6.0
    for depth, z_ndc in ((near, 0.0), (far, 1.0)):
        x = unproject(k.cx, k.cy, depth, k, pose)
        ndc = to_ndc(x, k, pose, near, far)
        np.testing.assert_allclose(ndc.numpy(), [k.cx / (k.width - 1), k.cy / (k.height - 1), z_ndc], atol=1e-12)


def test_ndc_round_trip():
    rng = np.random.default_rng(5)
    k, pose = random_camera(rng)
    near, far = 1.0, 8.0
    u = rng.uniform(0, k.width - 1, 100)
    v = rng.uniform(0, k.height - 1, 100)
    d = rng.uniform(near, far, 100)
    x = unproject(u, v, d, k, pose)
    back = from_ndc(to_ndc(x, k, pose, near, far), k, pose, near, far)
    assert float((back - x).abs().max()) < 1e-5


def test_ndc_rejects_points_behind_camera():
    pose = CameraPose(np.eye(3), np.zeros(3))
    with pytest.raises(BehindCameraError):
        to_ndc(torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64), K64, pose, 1.0, 2.0)


@settings(max_examples=50, deadline=None)
@given(near=st.floats(0.1, 5.0), span=st.floats(0.1, 50.0), a=st.floats(0, 1), b=st.floats(0, 1))
def test_ndc_depth_is_monotone(near, span, a, b):
    far = near + span
    da, db = near + a * span, near + b * span
    za, zb = depth_to_ndc(da, near, far), depth_to_ndc(db, near, far)
    if da < db:
        assert za <= zb + 1e-12


# --------------------------------------------------------------------------
# reprojection


def test_reproject_inverts_unproject():
    rng = np.random.default_rng(6)
    k, pose = random_camera(rng)
    view = CameraView(None, k, pose, 0.5, 10.0)
    u = rng.uniform(0, k.width - 1, 50)
    v = rng.uniform(0, k.height - 1, 50)
    x = unproject(u, v, rng.uniform(0.1, 20, 50), k, pose)
    uv, inside = reproject_point(x, view)
    assert inside.all()
    assert np.abs(uv.numpy() - np.stack([u, v], -1)).max() < 1e-5


def test_reproject_behind_camera_is_out_of_bounds():
    pose = CameraPose(np.eye(3), np.zeros(3))
    view = CameraView(None, K64, pose, 1.0, 2.0)
    _, inside = reproject_point(torch.tensor([[0.0, 0.0, -2.0]], dtype=torch.float64), view)
    assert not inside.any()


def test_reproject_checkerboard_corners_on_two_camera_rig():
    corners = np.array([[x, y, 3.0] for x in np.linspace(-0.5, 0.5, 5) for y in np.linspace(-0.5, 0.5, 5)])
    cams = [
        (K64, CameraPose(np.eye(3), np.zeros(3))),
        (K64, CameraPose.look_at([0.4, 0.0, 0.0], [0.0, 0.0, 3.0])),
    ]
    for k, pose in cams:
        view = CameraView(None, k, pose, 1.0, 5.0)
        uv, inside = reproject_point(torch.as_tensor(corners), view)
        for X, got in zip(corners, uv.numpy()):
            want, _ = project_point(X, k.K, pose.R, pose.t)
            np.testing.assert_allclose(got, want, atol=1e-5)
        assert inside.all()


def test_project_returns_camera_depth():
    rng = np.random.default_rng(7)
    k, pose = random_camera(rng)
    x = unproject(10.0, 20.0, 3.25, k, pose)
    u, v, depth = project(x, k, pose)
    assert float(depth) == pytest.approx(3.25)


# --------------------------------------------------------------------------
# rays


def test_principal_point_ray_is_optical_axis():
    rng = np.random.default_rng(8)
    k, pose = random_camera(rng)
    rays = generate_rays(k, pose, [[k.cx, k.cy]], 1.0, 2.0, dtype=torch.float64)
    np.testing.assert_allclose(rays.directions[0].numpy(), pose.R[2], atol=1e-12)
    np.testing.assert_allclose(rays.origins[0].numpy(), pose.center, atol=1e-12)
    assert float(rays.near[0]) == 1.0 and float(rays.far[0]) == 2.0


def test_adjacent_pixels_differ_only_in_camera_x():
    rng = np.random.default_rng(9)
    k, pose = random_camera(rng)
    rays = generate_rays(k, pose, [[10.0, 7.0], [11.0, 7.0]], 1.0, 2.0, dtype=torch.float64)
    cam = rays.directions.numpy() @ pose.R.T
    cam = cam / cam[:, 2:3]
    assert cam[0, 1] == pytest.approx(cam[1, 1], abs=1e-12)
    assert cam[1, 0] - cam[0, 0] == pytest.approx(1.0 / k.fx, abs=1e-12)


def test_corner_rays_match_unprojection_oracle():
    rng = np.random.default_rng(10)
    k, pose = random_camera(rng)
    corners = [[0.0, 0.0], [k.width - 1.0, 0.0], [0.0, k.height - 1.0], [k.width - 1.0, k.height - 1.0]]
    rays = generate_rays(k, pose, corners, 1.0, 2.0, dtype=torch.float64)
    for (u, v), d in zip(corners, rays.directions.numpy()):
        X = pose.R.T @ (np.linalg.solve(k.K, [u, v, 1.0]) - pose.t)
        want = (X - pose.center) / np.linalg.norm(X - pose.center)
        np.testing.assert_allclose(d, want, atol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(rays.directions.numpy(), axis=1), 1.0, atol=1e-12)


def test_image_pixels_row_major():
    px = image_pixels(2, 3)
    np.testing.assert_array_equal(px, [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]])


# --------------------------------------------------------------------------
# sampling


def _rays(n=4, near=1.0, far=5.0):
    rng = np.random.default_rng(11)
    k, pose = random_camera(rng)
    return generate_rays(k, pose, rng.uniform(0, 40, size=(n, 2)), near, far, dtype=torch.float64)


def test_two_samples_are_near_and_far():
    z, _ = sample_ray(_rays(near=1.25, far=4.5), 2)
    assert (z[:, 0] == 1.25).all() and (z[:, 1] == 4.5).all()


def test_uniform_inverse_depth_spacing():
    z, x = sample_ray(_rays(), 128)
    gaps = np.diff(depth_to_ndc(z.numpy(), 1.0, 5.0), axis=1)
    assert np.abs(gaps - gaps[0, 0]).max() < 1e-9
    rays = _rays()
    np.testing.assert_allclose(
        x.numpy(), rays.origins.numpy()[:, None] + z.numpy()[..., None] * rays.directions.numpy()[:, None], atol=1e-12
    )


def test_jittered_samples_stay_in_their_strata():
    rays = _rays(n=1000)
    g = torch.Generator().manual_seed(0)
    z, _ = sample_ray(rays, 8, generator=g, jitter=True)
    s = depth_to_ndc(z.numpy(), 1.0, 5.0)
    nodes = np.linspace(0, 1, 8)
    mids = 0.5 * (nodes[1:] + nodes[:-1])
    lower = np.concatenate([[0.0], mids])
    upper = np.concatenate([mids, [1.0]])
    assert (s >= lower - 1e-9).all() and (s <= upper + 1e-9).all()
    assert (np.diff(z.numpy(), axis=1) > 0).all()


def test_sample_count_must_be_at_least_two():
    with pytest.raises(DomainError):
        sample_ray(_rays(), 1)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 64), near=st.floats(0.05, 3.0), span=st.floats(0.01, 40.0), jitter=st.booleans(),
       seed=st.integers(0, 1000))
def test_samples_strictly_increasing(n, near, span, jitter, seed):
    rays = _rays(n=3, near=near, far=near + span)
    z, _ = sample_ray(rays, n, generator=torch.Generator().manual_seed(seed), jitter=jitter)
    assert (torch.diff(z, dim=1) > 0).all()
    assert (z >= near * (1 - 1e-12)).all() and (z <= (near + span) * (1 + 1e-12)).all()


def test_sweep_planes_endpoints_and_order():
    planes = sweep_planes(1.0, 4.0, 128)
    assert planes.depths[0] == 1.0 and planes.depths[-1] == 4.0
    assert (np.diff(planes.depths) > 0).all()
    with pytest.raises(DomainError):
        sweep_planes(1.0, 4.0, 1)
