import hashlib
import json

import numpy as np
import pytest

from gausshead.errors import ValidationError
from gausshead.io import read_tensor
from gausshead.losses import NEUTRAL
from gausshead.synthetic import CorpusSpec, generate_synthetic_corpus, load_cloud, render_reference
from gausshead.camera import Camera
from gausshead.head import load_head_model

SMALL = CorpusSpec(n_identities=2, n_frames=8, resolution=24, n_gaussians=900, rest_frames=2)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    generate_synthetic_corpus(root, SMALL, seed=11)
    return root


def test_byte_identical_under_seed(corpus, tmp_path):
    generate_synthetic_corpus(tmp_path, SMALL, seed=11)
    assert digest(tmp_path) == digest(corpus)


def test_different_seed_differs(corpus, tmp_path):
    generate_synthetic_corpus(tmp_path, SMALL, seed=12)
    assert digest(tmp_path) != digest(corpus)


def test_teacher_score_relation(corpus):
    for d in ("id00", "id01"):
        p = read_tensor(corpus / d / "teacher_p.etgt")
        e = read_tensor(corpus / d / "teacher_e.etgt")[:, 0]
        assert np.abs(e - (1 - p[:, NEUTRAL])).max() < 1e-6
        assert np.allclose(p.sum(1), 1, atol=1e-6)


def test_frame_zero_replays_bitwise(corpus):
    d = corpus / "id01"
    model = load_head_model(d / "head.etga")
    cloud = load_cloud(d / "reference_cloud.etga")
    params = read_tensor(d / "reference_params.etgt")
    poses = read_tensor(d / "poses.etgt")
    cam = Camera.from_array(read_tensor(d / "cameras.etgt")[0])
    for t in (0, 5):
        out, _ = render_reference(model, cloud, params[t, :10], params[t, 10:], poses[t], cam)
        stored = read_tensor(d / "frames" / f"{t:04d}.etgt", as_float64=False)
        assert np.array_equal(out.color.data.astype(np.float32), stored)


def test_manifest_contents(corpus):
    man = json.loads((corpus / "manifest.json").read_text())
    assert [e["id"] for e in man["identities"]] == ["id00", "id01"]
    e = man["identities"][0]
    assert len(e["frames"]) == 8 and e["rest_frames"] == [0, 1]
    # rest frames are neutral and unposed
    params = read_tensor(corpus / "id00" / "reference_params.etgt")
    assert not params[:2].any() and not read_tensor(corpus / "id00" / "poses.etgt")[:2].any()
    assert np.all(read_tensor(corpus / "id00" / "au.etgt") >= 0)


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ValidationError, match="cannot write"):
        generate_synthetic_corpus(blocker / "sub", SMALL)
