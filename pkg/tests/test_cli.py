import subprocess
import sys

import numpy as np
import pytest

from gausshead import cli
from gausshead import trainer as tr
from gausshead.io import read_tensor, write_tensor


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory, tiny_cfg):
    p = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    p.write_text(tiny_cfg.dumps())
    return p


def test_unknown_subcommand_exits_1(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()
    assert cli.main([]) == 1


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "gausshead.cli", "nope"], capture_output=True, text=True)
    assert r.returncode == 1


def test_missing_required_argument():
    assert cli.main(["pretrain", "--out", "x.etgc"]) == 1


def test_eval_identical_directories(tmp_path, capsys, rng):
    d = tmp_path / "frames"
    for i in range(3):
        write_tensor(d / f"{i:04d}.etgt", rng.uniform(size=(16, 16, 3)))
    assert cli.main(["eval", "--pred", str(d), "--gt", str(d), "--out", str(tmp_path / "t.tsv")]) == 0
    rows = [r.split("\t") for r in capsys.readouterr().out.strip().splitlines()]
    assert rows[0] == ["frame", "psnr", "ssim"] and rows[-1][0] == "mean"
    assert float(rows[-1][1]) == 99.0 and float(rows[-1][2]) == 1.0
    assert (tmp_path / "t.tsv").read_text().splitlines()[-1].startswith("mean")


def test_eval_png_against_tensor(tmp_path, capsys, rng):
    img = np.round(rng.uniform(size=(12, 12, 3)) * 255) / 255
    write_tensor(tmp_path / "a" / "0000.etgt", img)
    cli.save_png(tmp_path / "b" / "0000.png", img)
    assert cli.main(["eval", "--pred", str(tmp_path / "a"), "--gt", str(tmp_path / "b")]) == 0
    assert float(capsys.readouterr().out.splitlines()[-1].split("\t")[1]) == 99.0


def test_inspect_truncated_reports_offset(tmp_path, capsys, rng):
    p = tmp_path / "t.etgt"
    write_tensor(p, rng.normal(size=(10, 10)))
    p.write_bytes(p.read_bytes()[:-13])
    assert cli.main(["inspect", str(p)]) == 1
    assert "byte offset" in capsys.readouterr().err


def test_inspect_config(cfg_file, capsys, tiny_cfg):
    assert cli.main(["inspect", str(cfg_file)]) == 0
    assert tiny_cfg.hash() in capsys.readouterr().out


def test_gradcheck_fresh_init(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_pipeline_composes(tiny_corpus, cfg_file, tmp_path, capsys):
    man = str(tiny_corpus)
    pre, ada = tmp_path / "pre.etgc", tmp_path / "ada.etgc"
    assert cli.main(["pretrain", "--manifest", man, "--ids", "id00,id01", "--out", str(pre),
                     "--config", str(cfg_file)]) == 0
    assert pre.with_suffix(".report.txt").is_file()
    assert cli.main(["adapt", "--checkpoint", str(pre), "--manifest", man, "--id", "id02",
                     "--out", str(ada), "--appearance"]) == 0
    assert cli.main(["inspect", str(ada)]) == 0
    clip = tr.load_manifest(tiny_corpus, ["id02"])[1][0]
    frames, root = tmp_path / "frames", tiny_corpus.parent / "id02"
    assert cli.main(["infer", "--checkpoint", str(ada), "--id", "id02", "--audio", str(root / "audio.etgt"),
                     "--au", str(root / "au.etgt"), "--out", str(frames), "--png"]) == 0
    out = capsys.readouterr().out
    assert f"{clip.n_frames} frames written" in out
    log = (frames / "motion_log.tsv").read_text().splitlines()
    assert log[0] == "frame\tg\temotion\tlabel" and len(log) == clip.n_frames + 1
    assert read_tensor(frames / "0000.etgt").shape == clip.frames[0].shape
    assert (frames / "png" / "0000.png").is_file()


def test_resume_via_cli_matches(tiny_corpus, cfg_file, tmp_path):
    man = str(tiny_corpus)
    a, b = tmp_path / "a.etgc", tmp_path / "b.etgc"
    assert cli.main(["pretrain", "--manifest", man, "--ids", "id00,id01", "--out", str(a),
                     "--config", str(cfg_file)]) == 0
    assert cli.main(["pretrain", "--manifest", man, "--ids", "id00,id01", "--out", str(b),
                     "--config", str(cfg_file), "--stop-at", "6"]) == 0
    assert cli.main(["pretrain", "--manifest", man, "--out", str(b), "--resume", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_resume_with_changed_config_exits_1(tiny_corpus, cfg_file, tmp_path, tiny_cfg):
    b = tmp_path / "b.etgc"
    other = tmp_path / "other.cfg"
    other.write_text(tiny_cfg.with_overrides(lr_pretrain=1e-2).dumps())
    assert cli.main(["pretrain", "--manifest", str(tiny_corpus), "--ids", "id00,id01", "--out", str(b),
                     "--config", str(cfg_file), "--stop-at", "3"]) == 0
    assert cli.main(["pretrain", "--manifest", str(tiny_corpus), "--out", str(b), "--resume", str(b),
                     "--config", str(other)]) == 1
