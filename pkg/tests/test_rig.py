import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gausshead.autodiff import Tensor
from gausshead.camera import Camera
from gausshead.errors import ValidationError
from gausshead.rig import (GaussianCloud, anchor_landmarks, apply_mouth_residual, binding_points, global_to_local,
                           rig_to_global, sample_bindings, select_region_triangles, triangle_frames)
from gausshead.rotation import quat_to_matrix
from gausshead.synthetic import build_head, head_topology


@pytest.fixture(scope="module")
def head():
    return build_head(np.random.default_rng(0), 10)


def random_cloud(head, rng, n=900):
    cloud = sample_bindings(head.template, head.faces, n, seed=3)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(mu=rng.normal(size=(n, 3)) * 0.2, rot=q, scale=np.exp(rng.normal(size=(n, 3)) * 0.3 - 2),
                         alpha=rng.uniform(size=n), sh=rng.normal(size=(n, 1, 3)), parent_tri=cloud.parent_tri,
                         bary=cloud.bary, mouth_mask=cloud.mouth_mask)


def test_sampling_equal_counts_and_valid(head):
    cloud = sample_bindings(head.template, head.faces, 2000, seed=0).validate(len(head.faces))
    counts = np.bincount(cloud.parent_tri, minlength=len(head.faces))
    assert counts.max() - counts.min() <= 1
    # zero local offset puts each Gaussian at its binding point
    glob = rig_to_global(cloud, head.template, head.faces)
    assert np.allclose(glob.mu.data, binding_points(head.template, cloud, head.faces), atol=1e-14)


def test_sampling_needs_one_per_triangle(head):
    with pytest.raises(ValidationError):
        sample_bindings(head.template, head.faces, 10, seed=0)


def test_triangle_frames_orthonormal(head):
    R, C, k = triangle_frames(head.template, head.faces)
    assert np.allclose(R @ R.transpose(0, 2, 1), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-12)
    assert np.all(k > 0)


def test_rig_equivariance_1000_transforms(head):
    rng = np.random.default_rng(7)
    cloud = random_cloud(head, rng)
    base = rig_to_global(cloud, head.template, head.faces)
    worst = 0.0
    for _ in range(1000):
        R = Rotation.random(random_state=rng).as_matrix()
        t = rng.normal(size=3) * 2
        moved = rig_to_global(cloud, head.template @ R.T + t, head.faces)
        worst = max(worst, np.abs(moved.mu.data - (base.mu.data @ R.T + t)).max(),
                    np.abs(moved.rotmat.data - R @ base.rotmat.data).max(),
                    np.abs(moved.scale.data - base.scale.data).max(),
                    np.abs(moved.alpha.data - base.alpha.data).max())
    assert worst < 1e-9


def test_local_global_round_trip(head, rng):
    cloud = random_cloud(head, rng)
    verts = head.template + rng.normal(size=head.template.shape) * 0.02
    glob = rig_to_global(cloud, verts, head.faces)
    back = global_to_local(glob, verts, head.faces, cloud.parent_tri, cloud.bary)
    assert np.abs(back["mu"] - cloud.mu).max() < 1e-9
    assert np.abs(quat_to_matrix(back["rot"]) - quat_to_matrix(cloud.rot)).max() < 1e-9
    assert np.abs(back["scale"] - cloud.scale).max() < 1e-9


def test_uniform_scaling_scales_gaussians(head, rng):
    cloud = random_cloud(head, rng)
    a = rig_to_global(cloud, head.template, head.faces)
    b = rig_to_global(cloud, 2.5 * head.template, head.faces)
    assert np.allclose(b.scale.data, 2.5 * a.scale.data, atol=1e-12)
    assert np.allclose(b.mu.data, 2.5 * a.mu.data, atol=1e-12)


def test_mouth_residual_only_touches_region(head, rng):
    cloud = random_cloud(head, rng)
    glob = rig_to_global(cloud, head.template, head.faces)
    mask = np.zeros(len(cloud), bool)
    mask[[3, 10, 11]] = True
    res = np.zeros((3, 9))
    res[:, 0] = 0.1
    out, clamped = apply_mouth_residual(glob, mask, res)
    assert clamped == 0
    assert np.array_equal(out.mu.data[~mask], glob.mu.data[~mask])
    assert np.allclose(out.mu.data[mask], glob.mu.data[mask] + [0.1, 0, 0], atol=1e-15)
    res[:, 6:] = -10.0
    _, clamped = apply_mouth_residual(glob, mask, res)
    assert clamped == 9
    with pytest.raises(ValidationError):
        apply_mouth_residual(glob, mask, np.zeros((2, 9)))


# -- mouth region on constructed strips --------------------------------------------

def strip(n):
    """Row of n unit squares (2n triangles) along x at z = 0."""
    xs = np.arange(n + 1, dtype=float)
    verts = np.concatenate([np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], 1),
                            np.stack([xs, np.ones_like(xs), np.zeros_like(xs)], 1)])
    faces = []
    for i in range(n):
        a, b, c, d = i, i + 1, n + 1 + i, n + 2 + i
        faces += [[a, b, d], [a, d, c]]
    return verts, np.array(faces)


def seed_at(tri):
    return (tri, np.array([1 / 3, 1 / 3, 1 / 3]))


def test_region_zero_radius_is_seeds_only():
    verts, faces = strip(6)
    assert list(select_region_triangles(verts, faces, [seed_at(4), seed_at(9)], 0.0)) == [4, 9]


def test_region_grows_within_radius():
    verts, faces = strip(6)
    # triangle 5 shares edges with 4 (same square) and 2 (previous square)
    got = select_region_triangles(verts, faces, [seed_at(5)], 1.2)
    assert {2, 4, 5} <= set(got)
    assert 0 not in got and 11 not in got


def test_region_excludes_disconnected_lobe():
    # two strips side by side; the second lies within the radius but shares no edge
    v1, f1 = strip(3)
    v2 = v1 + [0.0, 1.3, 0.0]
    verts = np.concatenate([v1, v2])
    faces = np.concatenate([f1, f1 + len(v1)])
    got = select_region_triangles(verts, faces, [seed_at(2)], 3.0)
    assert set(got) == set(range(6))


def test_region_independent_of_seed_order(rng):
    verts, faces = strip(8)
    seeds = [seed_at(t) for t in (1, 7, 12)]
    ref = select_region_triangles(verts, faces, seeds, 1.0)
    for _ in range(5):
        perm = [seeds[i] for i in rng.permutation(3)]
        assert np.array_equal(select_region_triangles(verts, faces, perm, 1.0), ref)


def test_landmark_lifting_hits_expected_triangle():
    verts, faces = strip(2)
    verts = verts + [0.0, 0.0, 5.0]
    faces = faces[:, ::-1]  # wind toward the camera
    cam = Camera(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
    hits = anchor_landmarks(cam.project(np.array([[0.75, 0.2, 5.0], [30.0, 30.0, 5.0]])), cam, verts, faces)
    assert hits[0][0] == 0 and hits[1] is None
    # barycentric weights reproduce the point
    p = hits[0][1] @ verts[faces[hits[0][0]]]
    assert np.allclose(p, [0.75, 0.2, 5.0], atol=1e-9)


def test_synthetic_topology_has_cavity():
    faces, canon, cavity = head_topology()
    assert cavity.any() and (~cavity).any()
    assert faces.max() < len(canon)
