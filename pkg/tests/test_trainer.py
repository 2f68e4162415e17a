import json
import shutil

import numpy as np
import pytest

from gausshead import trainer as tr
from gausshead.autodiff import Tensor
from gausshead.errors import ValidationError
from gausshead.synthetic import default_camera


@pytest.fixture(scope="module")
def clips(tiny_corpus):
    return tr.load_manifest(tiny_corpus)[1]


@pytest.fixture(scope="module")
def pretrained(clips, tiny_cfg):
    return tr.pretrain(clips[:2], tiny_cfg)


@pytest.fixture(scope="module")
def adapted(pretrained, clips, tiny_cfg):
    return tr.adapt(pretrained, clips[2], tiny_cfg.with_overrides(adapt_appearance=True))


# -- manifest -------------------------------------------------------------------

def test_manifest_loads(clips, tiny_cfg):
    assert [c.id for c in clips] == ["id00", "id01", "id02"]
    c = clips[0]
    assert c.frames.shape == (16, 32, 32, 3) and c.audio.shape == (16, tiny_cfg.d_audio)
    assert c.teacher_mask().all()


def test_manifest_missing_file(tiny_corpus, tmp_path):
    root = tmp_path / "c"
    shutil.copytree(tiny_corpus.parent, root)
    (root / "id01" / "frames" / "0003.etgt").unlink()
    with pytest.raises(ValidationError, match="not found"):
        tr.load_manifest(root / "manifest.json")


def test_manifest_length_mismatch(tiny_corpus, tmp_path):
    root = tmp_path / "c"
    shutil.copytree(tiny_corpus.parent, root)
    man = json.loads((root / "manifest.json").read_text())
    man["identities"][0]["frames"] = man["identities"][0]["frames"][:-1]
    (root / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ValidationError, match="frames listed"):
        tr.load_manifest(root / "manifest.json")
    with pytest.raises(ValidationError, match="not in manifest"):
        tr.load_manifest(tiny_corpus, ["id09"])


def test_pretrain_needs_two_identities(clips, tiny_cfg):
    with pytest.raises(ValidationError):
        tr.pretrain(clips[:1], tiny_cfg)


# -- trainability -----------------------------------------------------------------

def test_masks_partition(adapted):
    st = adapted
    for phase in tr.PHASES:
        mask = tr.set_trainable(st, phase, "id02")
        assert set(mask) == set(st.params)  # exhaustive, one entry each
    s1 = tr.set_trainable(st, "pretrain-stage1")
    assert not any(v for k, v in s1.items() if not k.startswith("gauss/"))
    assert not s1["gauss/id02/mu"] and s1["gauss/id00/mu"]
    s2 = tr.set_trainable(st, "pretrain-stage2")
    assert {k for k, v in s2.items() if v} == {k for k in st.params if "id02" not in k}


def test_adapt_mask_is_adain_only(adapted):
    st = adapted
    strict = tr.set_trainable(st.__class__(**{**st.__dict__, "cfg": st.cfg.with_overrides(adapt_appearance=False)}),
                              "adapt", "id02")
    on = {k for k, v in strict.items() if v}
    assert on == {k for k in st.params if k.startswith("adain/id02/")}
    assert sum(st.params[k].size for k in on) == sum(v.size for v in st.subset("adain/id02/").values())
    flagged = {k for k, v in tr.set_trainable(st, "adapt", "id02").items() if v}
    assert flagged == on | {k for k in st.params if k.startswith("gauss/id02/")}


def test_unknown_phase(adapted):
    with pytest.raises(ValidationError):
        tr.set_trainable(adapted, "finetune")


def test_stage1_keeps_network_at_init(clips, tiny_cfg):
    init = tr.init_state(tiny_cfg, clips[:2])
    st = tr.pretrain(clips[:2], tiny_cfg, stop_at=tiny_cfg.stage1_iters)
    for k, v in init.params.items():
        if not k.startswith("gauss/"):
            assert np.array_equal(v, st.params[k]), k
    assert any(not np.array_equal(init.params[k], st.params[k]) for k in init.params if k.startswith("gauss/"))


# -- checkpoints and determinism ---------------------------------------------------

def test_two_runs_bitwise_identical(pretrained, clips, tiny_cfg):
    again = tr.pretrain(clips[:2], tiny_cfg)
    assert tr.checkpoint_bytes(again) == tr.checkpoint_bytes(pretrained)


def test_resume_reproduces_uninterrupted_run(pretrained, clips, tiny_cfg, tmp_path):
    half = tr.pretrain(clips[:2], tiny_cfg, stop_at=7)
    tr.save_checkpoint(tmp_path / "half.etgc", half)
    resumed = tr.pretrain(clips[:2], tiny_cfg, resume=tr.load_checkpoint(tmp_path / "half.etgc"))
    assert tr.checkpoint_bytes(resumed) == tr.checkpoint_bytes(pretrained)


def test_load_save_byte_identical(adapted, tmp_path):
    tr.save_checkpoint(tmp_path / "a.etgc", adapted)
    raw = (tmp_path / "a.etgc").read_bytes()
    assert raw[:4] == b"ETGC"
    assert tr.checkpoint_bytes(tr.load_checkpoint(tmp_path / "a.etgc")) == raw


def test_resume_with_other_config_is_error(pretrained, clips, tiny_cfg):
    with pytest.raises(ValidationError, match="hash"):
        tr.pretrain(clips[:2], tiny_cfg.with_overrides(lr_pretrain=1e-3), resume=pretrained)


def test_corrupt_checkpoint(adapted, tmp_path):
    raw = tr.checkpoint_bytes(adapted)
    (tmp_path / "t.etgc").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ValidationError, match="byte offset"):
        tr.load_checkpoint(tmp_path / "t.etgc")


# -- adaptation -----------------------------------------------------------------

def test_adapt_freezes_everything_else(pretrained, adapted):
    for k, v in pretrained.params.items():
        assert np.array_equal(v, adapted.params[k]), k
    start = {k: np.mean([pretrained.params[f"adain/{i}/{k}"] for i in ("id00", "id01")], axis=0)
             for k in pretrained.subset("adain/id00/")}
    assert any(not np.array_equal(adapted.params[f"adain/id02/{k}"], v) for k, v in start.items())


def test_adapt_requires_pseudo_gt(pretrained, clips, tiny_cfg):
    c = clips[2]
    bare = tr.Clip(**{**c.__dict__, "depth": None, "normals": None})
    with pytest.raises(ValidationError, match="pseudo ground-truth"):
        tr.adapt(pretrained, bare, tiny_cfg)
    st = tr.adapt(pretrained, bare, tiny_cfg.with_overrides(depth_weight=0.0, normal_weight=0.0, adapt_iters=3))
    assert st.iteration == 3


def test_adapt_rejects_known_identity(pretrained, clips):
    with pytest.raises(ValidationError, match="already"):
        tr.adapt(pretrained, clips[0])


# -- inference --------------------------------------------------------------------

def test_zero_drive_with_zero_heads_renders_rest_pose(adapted):
    st = tr.TrainState(**{**adapted.__dict__, "params": dict(adapted.params)})
    for k in st.params:
        if any(k.startswith(f"grmn/{h}") for h in ("base.face", "base.mouth", "emo_dec.face", "emo_dec.mouth")):
            st.params[k] = np.zeros_like(st.params[k])
    cfg = st.cfg
    cam = default_camera(cfg.resolution)
    res = tr.infer(st, "id02", np.zeros((5, cfg.d_audio)), np.zeros((5, cfg.d_au)), np.zeros((1, 6)), cam)
    tensors = {k: Tensor(v) for k, v in st.params.items()}
    rest = tr.render_frame_t(st, tensors, "id02", np.zeros(cfg.n_expr + 3), None, np.zeros(6), cam).color.data
    for f in res.frames:
        assert np.abs(f - rest).max() < 1e-12


def test_infer_deterministic_and_gate_range(adapted, rng):
    cfg = adapted.cfg
    audio = rng.normal(size=(100, cfg.d_audio))
    aus = np.abs(rng.normal(size=(30, cfg.d_au)))
    poses = rng.normal(size=(7, 6)) * 0.02
    cam = default_camera(cfg.resolution)
    a = tr.infer(adapted, "id02", audio, aus, poses, cam)
    b = tr.infer(adapted, "id02", audio, aus, poses, cam)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.g, b.g)
    assert np.all((a.g > 0) & (a.g < 1))
    assert a.frames.shape[0] == 100 and len(a.notes) == 2  # AU and pose looped
    assert np.array_equal(a.emotion, np.argmax(a.z_e, 1))


def test_infer_dimension_errors(adapted):
    cam = default_camera(adapted.cfg.resolution)
    with pytest.raises(ValidationError):
        tr.infer(adapted, "id02", np.zeros((4, 3)), np.zeros((4, adapted.cfg.d_au)), np.zeros(6), cam)
    with pytest.raises(ValidationError):
        tr.infer(adapted, "nobody", np.zeros((4, adapted.cfg.d_audio)), np.zeros((4, adapted.cfg.d_au)),
                 np.zeros(6), cam)


# -- report ------------------------------------------------------------------------

def test_report_records_full_scale_defaults(adapted, tmp_path):
    tr.write_report(tmp_path / "r.txt", adapted)
    recorded = tr.parse_report(tmp_path / "r.txt")
    assert recorded["lr_pretrain"] == (5e-3, adapted.cfg.lr_pretrain)
    assert recorded["lr_adapt"] == (5e-4, 5e-4)
    assert recorded["stage1_iters"][0] == 1000
    assert recorded["pretrain_iters"][0] == 250_000 and recorded["adapt_iters"][0] == 20_000
    text = (tmp_path / "r.txt").read_text()
    assert "[log]" in text and f"config_hash = {adapted.cfg.hash()}" in text
