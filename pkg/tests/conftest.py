from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mrtlab.corpus import CorpusSpec, generate_corpus
from mrtlab.model import ModelConfig, new_checkpoint
from mrtlab.numerics import Rng

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def lab():
    """The shipped laboratory: corpus, MLE models, scoring LM and the metric suite."""
    import time

    from mrtlab.pipeline import build_lab
    t = time.perf_counter()
    built = build_lab()
    built.build_seconds = time.perf_counter() - t
    return built


@pytest.fixture(scope="session")
def small_corpus():
    spec = CorpusSpec(n_train=400, n_valid=40, n_test=40)
    return generate_corpus(spec, Rng(3).stream("corpus"))


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(src_vocab=8, tgt_vocab=8, d_model=4, d_ff=6, heads=2, max_len=4, max_positions=8)


@pytest.fixture
def tiny_ckpt(tiny_cfg):
    return new_checkpoint(tiny_cfg, Rng(11))


@pytest.fixture(scope="session")
def small_cfg(small_corpus):
    V = len(small_corpus.meta.tgt_vocab)
    return ModelConfig(src_vocab=V, tgt_vocab=V, d_model=16, d_ff=32, heads=2, max_len=12)


@pytest.fixture
def small_ckpt(small_cfg):
    return new_checkpoint(small_cfg, Rng(5))


def zero_model(ckpt):
    """Zero every parameter so every next-token distribution is uniform."""
    for k in ckpt.params:
        ckpt.params.assign(k, np.zeros_like(ckpt.params[k]))
    return ckpt
