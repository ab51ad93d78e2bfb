import numpy as np
import pytest

from gcnbvae.mesh import Mesh
from gcnbvae.pooling import build_hierarchy
from gcnbvae.synthetic import SyntheticSpec, generate_corpus

VERDICTS = pytest.StashKey[list]()

TETRA_V = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
TETRA_F = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


@pytest.fixture
def tetra():
    return Mesh(TETRA_V, TETRA_F)


@pytest.fixture
def two_triangles():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.2]])
    return Mesh(v, np.array([[0, 1, 2], [1, 3, 2]]))


def small_tube(n_theta=8, n_len=10, seed=0):
    spec = SyntheticSpec(n_theta=n_theta, n_len=n_len, corpus_size=1, seed=seed)
    return generate_corpus(spec)[0]


@pytest.fixture(scope="session")
def desk_corpus():
    return generate_corpus(SyntheticSpec())


@pytest.fixture(scope="session")
def desk_hierarchy(desk_corpus):
    return build_hierarchy(desk_corpus[0], 4, 4.0)


@pytest.fixture(scope="session")
def small_corpus():
    """16 meshes of 258 vertices: the smallest size a 4-level hierarchy accepts."""
    return generate_corpus(SyntheticSpec(n_theta=8, n_len=32, corpus_size=16, seed=3))


@pytest.fixture(scope="session")
def small_hierarchy(small_corpus):
    return build_hierarchy(small_corpus[0], 4, 4.0)


@pytest.fixture
def verdict(request):
    """Record one acceptance line; they are printed together at the end of the run."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        lines.append(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
        print(lines[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
