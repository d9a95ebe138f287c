import numpy as np
import pytest
import torch

from hgd.config import NetConfig, RunConfig
from hgd.data import load_corpus, make_phantom_corpus


def tiny_net(**kw) -> NetConfig:
    base = dict(image_size=32, content_size=8, content_channels=16, attr_channels=8, base_channels=4,
                n_res_content=1, n_res_gen=1, disc_channels=4, disc_layers=2)
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture(scope="session")
def tiny_phantoms(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms32")
    train, test = make_phantom_corpus(seed=3, n_subjects=6, resolution=32, out_dir=out)
    return out, load_corpus(train), load_corpus(test)


@pytest.fixture
def tiny_config(tiny_phantoms) -> RunConfig:
    out, _, _ = tiny_phantoms
    cfg = RunConfig(net=tiny_net())
    cfg.train.steps = 4
    cfg.train_manifest = str(out / "train.json")
    cfg.test_manifest = str(out / "test.json")
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


# acceptance lines are repeated after the run, since passing tests' output is captured
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
