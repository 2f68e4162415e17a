import numpy as np
import pytest

from gausshead import autodiff as ad
from gausshead.errors import ValidationError
from gausshead.grmn import (GRMNConfig, adain, fuse, grmn_forward, init_adain, init_grmn, instance_norm,
                            to_tensors)

CFG = GRMNConfig(d_audio=6, d_au=5, d_identity=8, d_hidden=8, n_layers=2, n_heads=2, n_expr=4, n_mouth=3,
                 adain_hidden=6)


@pytest.fixture
def inputs(rng):
    T = 9
    return rng.normal(size=(T, 6)), np.abs(rng.normal(size=(T, 5))), rng.normal(size=8)


def run(inputs, w=None, a=None, **kw):
    w = to_tensors(init_grmn(CFG, 0), False) if w is None else w
    a = to_tensors(init_adain(CFG, 1), False) if a is None else a
    return grmn_forward(*inputs, w, a, CFG, **kw)


def test_shapes_and_gate_range(inputs):
    out = run(inputs)
    T = inputs[0].shape[0]
    assert out.face.shape == (T, CFG.face_dim) and out.mouth.shape == (T, 3, 9)
    assert out.z_e.shape == (T, 7) and out.g.shape == (T, 1)
    assert np.all((out.g.data > 0) & (out.g.data < 1))
    out.check()


def test_fusion_identities(rng):
    base, res = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert np.abs(fuse(base, res, np.zeros((5, 1))).data - base).max() <= 1e-12
    assert np.abs(fuse(base, res, np.ones((5, 1))).data - (base + res)).max() <= 1e-12
    assert np.abs(fuse(base, res, np.full((5, 1), 0.5)).data - (base + 0.5 * res)).max() <= 1e-12
    mb, mr = rng.normal(size=(5, 3, 9)), rng.normal(size=(5, 3, 9))
    g = rng.uniform(size=(5, 1))
    assert np.abs(fuse(mb, mr, g).data - (mb + g[:, :, None] * mr)).max() <= 1e-12


def test_forward_satisfies_fusion(inputs):
    out = run(inputs, mouth_frames=[0, 4])
    g = out.g.data
    assert np.abs(out.face.data - (out.face_base.data + g * out.face_residual.data)).max() <= 1e-12
    assert out.mouth.shape[0] == 2


def test_zero_heads_and_zero_inputs_give_zero_motion(inputs):
    w = init_grmn(CFG, 0)
    for k in w:
        if k.startswith(("base.face", "base.mouth", "emo_dec.face", "emo_dec.mouth")):
            w[k] = np.zeros_like(w[k])
    out = run(tuple(np.zeros_like(x) for x in inputs), to_tensors(w, False))
    assert not out.face.data.any() and not out.mouth.data.any()


def test_instance_norm_statistics(rng):
    x = rng.normal(size=(50, 6)) * 3 + 2
    y = instance_norm(ad.as_tensor(x)).data
    assert np.allclose(y.mean(0), 0, atol=1e-12)
    v = x.var(0)
    assert np.allclose(y.var(0), v / (v + 1e-5), atol=1e-12)


def test_adain_applies_identity_gain_and_shift(rng):
    cfg = GRMNConfig(d_identity=8, d_hidden=4, adain_hidden=5)
    a = init_adain(cfg, 0)
    d = cfg.d_hidden
    a["adain.fc2.w"][:] = 0.0
    a["adain.fc2.b"] = np.concatenate([np.full(d, 2.0), np.full(d, -1.0), np.full(d, 3.0), np.full(d, 0.5)])
    x = rng.normal(size=(10, d))
    norm = instance_norm(ad.as_tensor(x)).data
    assert np.allclose(adain(x, rng.normal(size=8), to_tensors(a, False), cfg).data, 2 * norm - 1, atol=1e-14)
    assert np.allclose(adain(x, rng.normal(size=8), to_tensors(a, False), cfg, "au").data, 3 * norm + 0.5,
                       atol=1e-14)


def test_identity_changes_output(inputs, rng):
    a = init_adain(CFG, 1)
    a["adain.fc2.w"] = rng.normal(size=a["adain.fc2.w"].shape)
    at = to_tensors(a, False)
    o1 = run(inputs, a=at)
    o2 = run((inputs[0], inputs[1], -inputs[2]), a=at)
    assert not np.allclose(o1.face.data, o2.face.data)


def test_every_parameter_receives_gradient(inputs, rng):
    w, a = to_tensors(init_grmn(CFG, 0)), to_tensors(init_adain(CFG, 1))
    out = run(inputs, w, a, mouth_frames=[2])
    loss = (ad.sum_(out.face * rng.normal(size=out.face.shape)) + ad.sum_(out.mouth * rng.normal(size=(1, 3, 9)))
            + ad.sum_(out.z_e * rng.normal(size=out.z_e.shape)) + ad.sum_(out.g))
    grads = ad.backward(loss, {**w, **a})
    dead = [k for k, g in grads.items() if not np.any(g)]
    assert dead == []


def test_dimension_errors(inputs):
    with pytest.raises(ValidationError):
        run((inputs[0][:, :5], inputs[1], inputs[2]))
    with pytest.raises(ValidationError):
        run((inputs[0], inputs[1][:4], inputs[2]))
    with pytest.raises(ValidationError):
        fuse(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 1)))


def test_causal_independence_not_assumed(inputs):
    # the encoder sees the whole clip: changing a late frame moves early outputs
    a2 = inputs[0].copy()
    a2[-1] += 1.0
    o1, o2 = run(inputs), run((a2, inputs[1], inputs[2]))
    assert not np.array_equal(o1.face.data[0], o2.face.data[0])
