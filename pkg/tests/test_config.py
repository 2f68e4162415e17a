import pytest

from gausshead.config import FULL_SCALE_DEFAULTS, RunConfig, load_config, parse_config
from gausshead.errors import ValidationError


def test_round_trip_and_hash(tmp_path):
    cfg = RunConfig(seed=3, lr_adapt=1e-3, adapt_appearance=True)
    (tmp_path / "c.txt").write_text(cfg.dumps())
    back = load_config(tmp_path / "c.txt")
    assert back == cfg and back.hash() == cfg.hash()
    assert RunConfig().hash() != cfg.hash()


def test_comments_and_types():
    cfg = parse_config("# comment\nseed = 4  # trailing\nlr_pretrain = 1e-3\nadapt_appearance = yes\ncontext = window\n")
    assert cfg.seed == 4 and cfg.lr_pretrain == 1e-3 and cfg.adapt_appearance is True and cfg.context == "window"


@pytest.mark.parametrize("text,msg", [("bogus = 1", "unknown key"), ("seed = x", "bad value"),
                                      ("seed", "key = value"), ("context = frames", "context")])
def test_rejections(text, msg):
    with pytest.raises(ValidationError, match=msg):
        parse_config(text)


def test_unknown_key_reports_line():
    with pytest.raises(ValidationError, match="line 2"):
        parse_config("seed = 1\nwat = 2\n")


def test_defaults_follow_published_values():
    cfg = RunConfig()
    for key in ("lr_pretrain", "lr_adapt", "stage1_iters", "dssim_weight", "depth_weight", "normal_weight"):
        assert getattr(cfg, key) == FULL_SCALE_DEFAULTS[key]
    assert FULL_SCALE_DEFAULTS["lr_pretrain"] == 5e-3 and FULL_SCALE_DEFAULTS["lr_adapt"] == 5e-4
    assert FULL_SCALE_DEFAULTS["pretrain_iters"] == 250_000 and FULL_SCALE_DEFAULTS["adapt_iters"] == 20_000
    assert FULL_SCALE_DEFAULTS["n_gaussians"] == 60_000
    assert cfg.adapt_appearance is False


def test_arch_hash_ignores_schedule():
    a, b = RunConfig(), RunConfig(adapt_iters=5, lr_adapt=1.0)
    assert a.arch_hash() == b.arch_hash() and a.hash() != b.hash()
    assert RunConfig(d_hidden=32).arch_hash() != a.arch_hash()
