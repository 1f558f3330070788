import numpy as np
import pytest
import torch

from ivfuse.data import synth_pairs
from ivfuse.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(patch=4, embed_dim=16, encoder_depth=2, decoder_depth=1, heads=2, mlp_ratio=2.0)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return synth_pairs(12, 32, 3, root, n_test=4)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# one line per acceptance criterion, echoed after the test session

@pytest.fixture(scope="session")
def report_line(pytestconfig):
    lines = pytestconfig.__dict__.setdefault("_acceptance_lines", {})

    def record(k, ok, detail):
        lines[k] = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[k])
    return record


def pytest_terminal_summary(terminalreporter):
    lines = terminalreporter.config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
