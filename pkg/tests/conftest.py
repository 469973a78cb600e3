import numpy as np
import pytest

from rwspace.environment import Deterministic, DirichletCells, FiniteSupport
from rwspace.lattice import StepSet


@pytest.fixture(scope="session")
def steps3():
    return StepSet(3)


@pytest.fixture(scope="session")
def uniform3(steps3):
    """Deterministic uniform cells in d=3 (every exact identity is closed
    form here)."""
    return Deterministic(steps3, 1.0 / 6.0, np.full(6, 1.0 / 6.0))


@pytest.fixture(scope="session")
def twopoint3(steps3):
    """The workhorse 2-atom environment in d=3: biased toward +e1 or -e1
    with probability 1/2 each."""
    return FiniteSupport(steps3, 0.05, [
        ([0.30, 0.10, 0.15, 0.15, 0.15, 0.15], 0.5),
        ([0.10, 0.30, 0.15, 0.15, 0.15, 0.15], 0.5),
    ])


@pytest.fixture(scope="session")
def mild_twopoint3(steps3):
    """2-point environment with small overlap (Vbar well under 0.1)."""
    return FiniteSupport(steps3, 0.05, [
        ([0.22, 0.18, 0.15, 0.15, 0.15, 0.15], 0.5),
        ([0.18, 0.22, 0.15, 0.15, 0.15, 0.15], 0.5),
    ])


@pytest.fixture(scope="session")
def twopoint1():
    """2-atom environment in d=1."""
    return FiniteSupport(StepSet(1), 0.2, [([0.7, 0.3], 0.5), ([0.3, 0.7], 0.5)])


@pytest.fixture(scope="session")
def dirichlet3(steps3):
    return DirichletCells(steps3, 0.02, 2.0 * np.ones(6))
