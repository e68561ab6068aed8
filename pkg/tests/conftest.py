import sys

import numpy as np
import pytest
from hypothesis import settings

from plexuskit.graph_prep import dataset_from_edges, make_rng, prepare, synth_dataset

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")

SMALL_SBM = dict(nodes=256, communities=4, p_in=0.1, p_out=0.01, features=16, classes=4)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset("sbm", SMALL_SBM, seed=3)


@pytest.fixture(scope="session")
def small_graph(small_dataset):
    return prepare(small_dataset, seed=5)


@pytest.fixture(scope="session")
def tiny_graph():
    """8-node graph with a ring, one chord and random labels."""
    edges = np.array([(i, (i + 1) % 8) for i in range(8)] + [(0, 4), (2, 6)])
    rng = make_rng(11)
    ds = dataset_from_edges(8, edges, rng.normal(size=(8, 5)), rng.integers(0, 3, 8),
                            seed=2, train_fraction=0.75)
    return prepare(ds, seed=7)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
