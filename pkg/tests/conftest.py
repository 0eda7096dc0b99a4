import numpy as np
import pytest

from litformer import tensor as T
from litformer.gradcheck import check_gradients


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def fd_max_error(fn, tensors, per_tensor=None, seed=0):
    """Max relative error of backward vs central differences, in float64."""
    named = [(f"t{i}", t) for i, t in enumerate(tensors)]
    with T.precision(np.float64):
        return check_gradients(fn, named, per_tensor=per_tensor, seed=seed).max_rel_error
