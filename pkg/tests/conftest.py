import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_psd(rng, m, rank=None, samples=None):
    """Gram matrix of a random feature matrix (returns H, X)."""
    rank = rank or m
    samples = samples or 2 * m
    X = rng.standard_normal((samples, rank)) @ rng.standard_normal((rank, m))
    return X.T @ X, X


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            for name, value in rep.user_properties:
                if name == "acceptance":
                    lines.append((value[0], value[1]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
