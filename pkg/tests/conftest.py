import numpy as np
import pytest

from gausshead.config import RunConfig
from gausshead.synthetic import CorpusSpec, generate_synthetic_corpus

# small enough that a full pretrain/adapt cycle takes seconds
TINY = dict(n_identities=3, n_frames=16, resolution=32, n_gaussians=900, d_hidden=16, n_heads=2,
            adain_hidden=16, pretrain_iters=10, stage1_iters=4, adapt_iters=6, adapt_stage1_iters=2,
            window=6, holdout_frames=4, rest_frames=3, log_every=0)


@pytest.fixture(scope="session")
def tiny_cfg():
    return RunConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(out, CorpusSpec.from_config(tiny_cfg), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdict lines, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
