import numpy as np
import pytest

from stitchlab.anchors import StageSpec, build_anchor, train_anchor
from stitchlab.data import gen_blobs, split
from stitchlab.probenet import train_probeset


@pytest.fixture(scope="session")
def blob_splits():
    ds = gen_blobs(4, 60, 6, 0.4, seed=11)
    return split(ds, (0.7, 0.15, 0.15), seed=3)


@pytest.fixture(scope="session")
def small_pair(blob_splits):
    """Two quickly trained, frozen anchors (depth 2 -> depth 4)."""
    tr, _, _ = blob_splits
    f = build_anchor("f", 6, 4, [StageSpec(8, 2)], seed=1)
    g = build_anchor("g", 6, 4, [StageSpec(16, 4)], seed=2)
    f, _ = train_anchor(f, tr, epochs=15, lr=0.05, seed=5)
    g, _ = train_anchor(g, tr, epochs=15, lr=0.05, seed=6)
    return f.freeze(), g.freeze()


@pytest.fixture(scope="session")
def small_probes(small_pair, blob_splits):
    tr, va, _ = blob_splits
    f, g = small_pair
    return (train_probeset(f, tr, epochs=10, seed=1, val=va),
            train_probeset(g, tr, epochs=10, seed=2, val=va))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_stitchlab_acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
