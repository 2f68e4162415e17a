import numpy as np
import pytest

from gausshead.errors import NonFiniteError, ValidationError
from gausshead.optim import AdamWState, adamw_step


def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    """Textbook AdamW, one parameter, written out step by step."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_matches_reference(rng):
    p0 = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(20)]
    st = AdamWState(lr=5e-3, weight_decay=1e-2)
    params = {"w": p0.copy()}
    for g in grads:
        adamw_step(st, params, {"w": g})
    assert np.allclose(params["w"], reference_adamw(p0, grads, 5e-3, 0.9, 0.999, 1e-8, 1e-2), rtol=0, atol=1e-14)


def test_late_joining_parameter_gets_fresh_bias_correction(rng):
    st = AdamWState(lr=1e-2, weight_decay=0.0)
    params = {"a": np.zeros(2), "b": np.zeros(2)}
    for _ in range(10):
        adamw_step(st, params, {"a": np.ones(2)})
    adamw_step(st, params, {"a": np.ones(2), "b": np.ones(2)})
    # first step of b moves it by exactly lr (sign of gradient)
    assert np.allclose(params["b"], -1e-2 * (1 / (1 + 1e-8)), atol=1e-15)
    assert st.param_steps == {"a": 11, "b": 1}


def test_untouched_and_no_decay(rng):
    st = AdamWState(lr=0.1, weight_decay=0.5, no_decay={"n"})
    params = {"d": np.ones(3), "n": np.ones(3), "frozen": np.ones(3)}
    adamw_step(st, params, {"d": np.zeros(3), "n": np.zeros(3)})
    assert np.allclose(params["d"], 0.95) and np.array_equal(params["n"], np.ones(3))
    assert np.array_equal(params["frozen"], np.ones(3))


def test_lr_scale():
    st = AdamWState(lr=0.1, weight_decay=0.0, lr_scale={"x": 10.0})
    params = {"x": np.zeros(1), "y": np.zeros(1)}
    adamw_step(st, params, {"x": np.ones(1), "y": np.ones(1)})
    assert params["x"][0] == pytest.approx(10 * params["y"][0])


def test_non_finite_gradient_aborts_before_update():
    st = AdamWState(lr=0.1)
    params = {"a": np.ones(2), "b": np.ones(2)}
    with pytest.raises(NonFiniteError, match="sample 7"):
        adamw_step(st, params, {"a": np.ones(2), "b": np.array([1.0, np.inf])}, frame_id=7)
    assert np.array_equal(params["a"], np.ones(2)) and st.step == 0


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        adamw_step(AdamWState(lr=0.1), {"a": np.ones(2)}, {"a": np.ones(3)})
