import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from isgan.data import build_sample_corpus, load_pairs, scan_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus32(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus32")
    build_sample_corpus(root, 40, size=32, seed=7)
    return root


@pytest.fixture(scope="session")
def pairs8(corpus32):
    manifest = scan_dataset(corpus32, 32, seed=0, split_fraction=1.0)
    return load_pairs(manifest, limit=8)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
