import numpy as np
import pytest

from sgquant.tensor import Tape, Tensor, finiteDifferenceGradient


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale convergence tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skipSlow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skipSlow)


def tapeGradients(f, *arrays):
    """Gradients of scalar f(*tensors) w.r.t. every argument, in float64."""
    tape = Tape()
    xs = [tape.watch(Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64), requiresGrad=True)
          for a in arrays]
    loss = f(*xs)
    tape.backward(loss)
    return [np.zeros(x.shape) if x.grad is None else x.grad.data for x in xs]


def numericGradients(f, *arrays, h=1e-3):
    grads = []
    for i in range(len(arrays)):
        def fi(t, i=i):
            args = [t if j == i else Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)
                    for j, a in enumerate(arrays)]
            return f(*args)
        grads.append(finiteDifferenceGradient(fi, np.asarray(arrays[i], dtype=np.float64), h).data)
    return grads


def assertGradientsMatch(f, *arrays, rtol=1e-3, atol=1e-6):
    for analytic, numeric in zip(tapeGradients(f, *arrays), numericGradients(f, *arrays)):
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
