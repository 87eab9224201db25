import numpy as np
import pytest

from normlab.model import ModelConfig, build_model
from normlab.strategies import NormStrategy
from normlab.tasks import TaskSpec, make_batch


def tiny_config(kind="postln", N=1, M=1, d=8, heads=2, vocab=11, max_len=5, seed=0, **strategy_kw):
    return ModelConfig(N=N, M=M, d_model=d, d_ffn=2 * d, heads=heads, vocab_size=vocab, max_len=max_len,
                       strategy=NormStrategy.named(kind, N, M, **strategy_kw), dropout=0.0, seed=seed)


def tiny_batch(vocab=11, n=2, min_len=2, max_len=3, seed=0):
    return make_batch(TaskSpec("copy", vocab, min_len, max_len), np.random.default_rng(seed), n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return build_model(tiny_config())


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(str(k).rstrip("b")), str(k))):
        terminalreporter.write_line(results[key])
