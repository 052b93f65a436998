import functools
import time

import pytest

from emma import pipeline as P
from emma import world as W
from emma.config import RunConfig


class DeskRuns:
    """Lazily pretrains, generates and trains desk-config runs, caching by seed."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.train_seconds = {}

    def config(self, seed, **changes):
        return self.cfg.replace(seed=seed, **changes)

    @functools.lru_cache(maxsize=None)
    def pretrained(self, seed):
        """(frozen stack, pretrain result, held-out retrieval accuracy)."""
        return P.pretrain_encoders(self.config(seed))

    @functools.lru_cache(maxsize=None)
    def splits(self, seed):
        cfg = self.config(seed)
        wc = cfg.world()
        return (
            W.Dataset(wc, W.generate(wc, seed, 0, cfg.n_train)),
            W.Dataset(wc, W.generate(wc, seed, cfg.n_train, cfg.n_test)),
        )

    @functools.lru_cache(maxsize=None)
    def trained(self, seed, adapter="linear", layer_tap="final"):
        train, test = self.splits(seed)
        stack = self.pretrained(seed)[0]
        start = time.perf_counter()
        result = P.train_two_stage(self.config(seed, adapter=adapter, layer_tap=layer_tap), train, test, stack)
        self.train_seconds[(seed, adapter, layer_tap)] = time.perf_counter() - start
        return result


@pytest.fixture(scope="session")
def desk():
    return DeskRuns(RunConfig())


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
