import numpy as np
import pytest

from grcrec import autodiff as ad
from grcrec.model import GRCModel, ModelConfig


def make_model(vocab=(5, 6, 7), n_items=30, n_attrs=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    item_tokens = np.stack([rng.integers(v, size=n_items) for v in vocab], axis=1)
    item_attrs = rng.integers(3, size=(n_items, n_attrs))
    cfg = ModelConfig(vocab_sizes=list(vocab), n_attrs=n_attrs, attr_buckets=[3] * n_attrs, seed=seed, **kw)
    return GRCModel(cfg, item_tokens, item_attrs)


@pytest.fixture
def tiny_model():
    return make_model()


@pytest.fixture(autouse=True)
def _clean_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the terminal summary repeats them all."""

    def record(number, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        print(line)
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        return passed

    return record


_ACCEPTANCE = pytest.StashKey[list]()


def _criterion_key(line: str):
    label = line.split(":")[0].split()[-1]  # e.g. "8b"
    digits = "".join(c for c in label if c.isdigit())
    return int(digits), label


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=_criterion_key):
            terminalreporter.write_line(line)
