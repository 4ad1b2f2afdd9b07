import time

import numpy as np
import pytest

from planloc.neural import autograd as ag
from planloc.neural.gradcheck import finite_diff_check
from planloc.neural.layers import ParameterStore

from helpers import gradient_cases

CASES = gradient_cases(seed=0)


@pytest.mark.parametrize("name", sorted(CASES))
def test_block_gradient(name):
    fwd, store = CASES[name]
    assert finite_diff_check(fwd, store, h=1e-5, n_coords=60) < 1e-4


def test_single_affine_mse():
    rng = np.random.default_rng(0)
    store = ParameterStore()
    store.add("W", rng.normal(size=(3, 2)))
    store.add("b", rng.normal(size=2))
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    fwd = lambda: ag.mean(ag.square(ag.sub(ag.add(ag.matmul(x, store["W"]), store["b"]), y)))
    assert finite_diff_check(fwd, store, n_coords=100) < 1e-7


def test_constant_function_zero_gradients():
    store = ParameterStore()
    store.add("w", np.ones(3))
    fwd = lambda: ag.add(ag.mul(ag.sum(store["w"]), 0.0), 2.0)
    assert finite_diff_check(fwd, store) == 0.0


def test_detects_wrong_gradient():
    store = ParameterStore()
    store.add("w", np.array([1.0, 2.0]))

    def bad():
        # forward squares, backward pretends it is linear
        w = store["w"]
        return ag._make(np.sum(w.data ** 2), (w,), lambda g: (g * np.ones(2),))
    assert finite_diff_check(bad, store) > 0.1


@pytest.mark.parametrize("op", ["gelu", "softmax", "sqrt", "einsum", "gather", "segment_mean", "getitem"])
def test_primitive_gradients(op):
    rng = np.random.default_rng(1)
    store = ParameterStore()
    store.add("a", rng.uniform(0.5, 1.5, (3, 4)))
    store.add("b", rng.normal(size=(4, 4)))
    w = rng.normal(size=(3, 4))
    a, b = store["a"], store["b"]
    f = {
        "gelu": lambda: ag.gelu(ag.sub(a, 1.0)),
        "softmax": lambda: ag.softmax(a, axis=-1),
        "sqrt": lambda: ag.sqrt(a),
        "einsum": lambda: ag.einsum("ij,jk->ik", a, b),
        "gather": lambda: ag.gather_rows(a, [2, 0, 2]),
        "segment_mean": lambda: ag.segment_mean(a, [0, 1, 0], 2),
        "getitem": lambda: ag.getitem(a, (slice(None), slice(1, 3))),
    }[op]
    fwd = lambda: ag.sum(ag.mul(f(), w[: f().shape[0], : f().shape[1]]))
    assert finite_diff_check(fwd, store, n_coords=28) < 1e-6


def test_suite_runtime():
    t = time.time()
    for fwd, store in gradient_cases(seed=1).values():
        finite_diff_check(fwd, store, n_coords=60)
    assert time.time() - t < 120
