import numpy as np
from scipy.spatial.transform import Rotation

from gausshead import autodiff as ad
from gausshead.rotation import (canonical_quat, matrix_to_quat, quat_mul, quat_to_matrix, rodrigues,
                                rodrigues_t)


def test_rodrigues_matches_scipy(rng):
    r = rng.normal(size=(50, 3))
    r[:5] *= 1e-7  # series branch
    ours = np.stack([rodrigues(v) for v in r])
    assert np.allclose(ours, Rotation.from_rotvec(r).as_matrix(), atol=1e-13)


def test_rodrigues_zero_is_identity():
    assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))


def test_rodrigues_gradient_through_zero():
    W = np.arange(9.0).reshape(3, 3)
    err = ad.finite_diff_check(lambda t: ad.sum_(rodrigues_t(t) * W), np.zeros(3), 1e-6)
    assert err < 1e-6


def test_quaternion_conversions_match_scipy(rng):
    q = rng.normal(size=(40, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    # scipy stores (x, y, z, w)
    ref = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
    assert np.allclose(quat_to_matrix(q), ref, atol=1e-13)
    back = matrix_to_quat(ref)
    assert np.allclose(back, canonical_quat(q), atol=1e-12)


def test_quat_mul_composes_rotations(rng):
    a, b = rng.normal(size=4), rng.normal(size=4)
    a /= np.linalg.norm(a)
    b /= np.linalg.norm(b)
    assert np.allclose(quat_to_matrix(quat_mul(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-13)
