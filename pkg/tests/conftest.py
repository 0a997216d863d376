import numpy as np
import pytest

from gssl.graph import KernelSpec, build_eps_graph, from_dense
from gssl.sampling import DomainSpec, sample_points


def path_graph(n, w=1.0):
    W = np.zeros((n, n))
    for i in range(n - 1):
        W[i, i + 1] = W[i + 1, i] = w
    return from_dense(W)


def random_connected_dense(rng, n, density=0.4):
    """Random symmetric weights on a spanning path plus extra edges."""
    W = np.zeros((n, n))
    for i in range(n - 1):
        W[i, i + 1] = rng.uniform(0.1, 2.0)
    extra = np.triu(rng.random((n, n)) < density, 1)
    W[extra] = rng.uniform(0.1, 2.0, size=int(extra.sum()))
    W = np.triu(W, 1)
    W = W + W.T
    perm = rng.permutation(n)
    return W[np.ix_(perm, perm)]


@pytest.fixture
def square_cloud():
    return sample_points(DomainSpec("unit-cube", 2), 500, seed=11)


@pytest.fixture
def small_eps_graph(square_cloud):
    return build_eps_graph(square_cloud, KernelSpec("gaussian", 0.12))


ACCEPTANCE = []


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def report_skip(number, detail):
    line = f"criterion {number}: SKIP {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
