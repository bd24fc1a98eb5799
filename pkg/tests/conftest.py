import numpy as np
import pytest

from gaugempc.config import load_bundled
from gaugempc.mpc import CondensedMpc, LinearSystem
from gaugempc.phase1 import AffinePhaseOne, synthesize_affine
from gaugempc.polytope import Polytope, sample_uniform


@pytest.fixture(scope="session")
def ex_cfg():
    return load_bundled()


@pytest.fixture(scope="session")
def ex_sys(ex_cfg):
    return ex_cfg.system()


@pytest.fixture(scope="session")
def ex_mpc(ex_cfg, ex_sys):
    return ex_cfg.mpc(ex_sys)


@pytest.fixture(scope="session")
def ex_p1(ex_sys):
    return synthesize_affine(ex_sys)


@pytest.fixture(scope="session")
def reference_p1(ex_cfg):
    ref = ex_cfg.reference_policy
    return AffinePhaseOne(np.array(ref["W"]), np.array(ref["w"]), np.nan)


@pytest.fixture(scope="session")
def ex_samples(ex_sys):
    return sample_uniform(ex_sys.S, 1000, seed=1234)


def toy_system(a=0.5, b=1.0, xlim=1.0, ulim=1.0, dlim=0.0):
    X = Polytope.box([-xlim], [xlim])
    return LinearSystem(np.array([[a]]), np.array([[b]]), X, Polytope.box([-ulim], [ulim]),
                        Polytope.box([-dlim], [dlim]), X)


def random_system(rng, n=3, m=2):
    A = rng.normal(size=(n, n)) * 0.4
    B = rng.normal(size=(n, m))
    X = Polytope.inf_ball(n, 5.0)
    return LinearSystem(A, B, X, Polytope.inf_ball(m, 1.0), Polytope.inf_ball(n, 0.1), X)


@pytest.fixture
def toy_mpc():
    return CondensedMpc(toy_system(), 1)
