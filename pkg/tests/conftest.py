import pytest
import torch

from qrlab.corpus import Document, build_index
from qrlab.policy import build_vocabulary, new_policy, render_prompt
from qrlab.world import WorldSpec, gen_synthetic_world

TINY_WORDS = "alpha beta gamma delta eps zeta eta theta"
TINY_ARCH = dict(d_model=8, n_layers=1, n_heads=2, context_length=32, mlp_ratio=2)


@pytest.fixture(scope="session")
def tiny_vocab():
    return build_vocabulary([render_prompt(""), TINY_WORDS], max_size=64)


def make_tiny(vocab, seed=0, dtype=torch.float64):
    return new_policy(vocab, seed=seed, dtype=dtype, **TINY_ARCH)


@pytest.fixture
def tiny_model(tiny_vocab):
    return make_tiny(tiny_vocab)


@pytest.fixture(scope="session")
def small_docs():
    return [
        Document("d1", "apple pie", "a recipe with apple and cinnamon"),
        Document("d2", "apple tree", "trees grow apple fruit in the orchard"),
        Document("d3", "porcupine", "a rodent with quills"),
        Document("d4", "orchard", "rows of pear trees"),
    ]


@pytest.fixture(scope="session")
def small_index(small_docs):
    return build_index(small_docs)


@pytest.fixture(scope="session")
def world():
    return gen_synthetic_world(WorldSpec())


@pytest.fixture(scope="session")
def world_index(world):
    return build_index(world.documents)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
