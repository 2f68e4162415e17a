import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gausshead import autodiff as ad
from gausshead.errors import ValidationError
from gausshead.head import HeadModelAssets, deform_mesh, deform_mesh_t, load_head_model, save_head_model


@pytest.fixture
def model(rng):
    n, k = 6, 3
    template = rng.normal(size=(n, 3))
    w_jaw = np.array([0.0, 0.0, 0.3, 0.7, 1.0, 1.0])
    return HeadModelAssets(template=template, expr_basis=rng.normal(size=(n, 3, k)) * 0.1,
                           skin_weights=np.stack([1 - w_jaw, w_jaw], 1), jaw_pivot=np.array([0.0, 0.2, -0.1]),
                           faces=np.array([[0, 1, 2], [2, 3, 4], [3, 4, 5]])).validate()


def test_zero_parameters_give_template(model):
    assert np.allclose(deform_mesh(model, np.zeros(3), np.zeros(3)), model.template, rtol=0, atol=1e-15)


def test_blendshape_then_jaw_skinning(model, rng):
    psi, jaw = rng.normal(size=3), np.array([0.3, -0.1, 0.05])
    shaped = model.template + model.expr_basis @ psi
    R = Rotation.from_rotvec(jaw).as_matrix()
    rotated = (shaped - model.jaw_pivot) @ R.T + model.jaw_pivot
    w = model.skin_weights[:, 1:]
    expect = (1 - w) * shaped + w * rotated
    assert np.allclose(deform_mesh(model, psi, jaw), expect, atol=1e-14)
    assert np.allclose(deform_mesh_t(model, psi, jaw).data, expect, atol=1e-14)
    # head-only vertices ignore the jaw entirely
    assert np.allclose(deform_mesh(model, psi, jaw)[:2], shaped[:2], atol=1e-15)


def test_validation_errors(model):
    bad = HeadModelAssets(model.template, model.expr_basis, model.skin_weights * 1.1, model.jaw_pivot, model.faces)
    with pytest.raises(ValidationError, match="sum to"):
        bad.validate()
    bad = HeadModelAssets(model.template, model.expr_basis, model.skin_weights, model.jaw_pivot,
                          np.array([[0, 1, 9]]))
    with pytest.raises(ValidationError, match="missing vertex"):
        bad.validate()
    with pytest.raises(ValidationError):
        deform_mesh(model, np.zeros(2), np.zeros(3))


def test_asset_round_trip(model, tmp_path):
    save_head_model(tmp_path / "h.etga", model)
    back = load_head_model(tmp_path / "h.etga")
    for f in ("template", "expr_basis", "skin_weights", "jaw_pivot", "faces"):
        assert np.array_equal(getattr(back, f), getattr(model, f))


def test_gradient(model, rng):
    W = rng.normal(size=(6, 3))
    err = ad.finite_diff_check(lambda t: ad.sum_(deform_mesh_t(model, t, [0.1, 0.0, 0.0]) * W),
                               rng.normal(size=3), 1e-5)
    assert err < 1e-8
