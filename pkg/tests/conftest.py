import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from authnet.nncore import Conv2d, Linear, ReLU, SequentialModel, backward, forward

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FD_STEP = 1e-5
FD_TOL = 1e-4

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8)))


def small_relu_net(seed, in_dim=4, hidden=6, k=3):
    from authnet.nncore import Flatten

    layers = [Flatten(), Linear(hidden), ReLU(), Linear(hidden), ReLU(), Linear(k)]
    return SequentialModel(layers, (1, 1, in_dim), k, seed=seed)


def small_conv_net(seed, k=3):
    from authnet.nncore import AvgPool2d, Flatten

    layers = [Conv2d(2, 3, 1, 1), ReLU(), AvgPool2d(2), Conv2d(3, 3), ReLU(), Flatten(), Linear(k)]
    return SequentialModel(layers, (1, 6, 6), k, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(model, x, seed=0):
    """Largest relative error between analytic and central-difference gradients.

    Loss is <w, f(x)> for a fixed random w, which exercises every output.
    """
    w = np.random.default_rng(seed).standard_normal((len(x), model.num_classes))

    def loss(inp):
        return float(np.sum(forward(model, inp) * w))

    model.zero_grad()
    forward(model, x, record=True)
    gx = backward(model, w)
    worst = 0.0
    for p, g in zip(model.params(), model.grads()):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + FD_STEP
            up = loss(x)
            p[idx] = old - FD_STEP
            down = loss(x)
            p[idx] = old
            num[idx] = (up - down) / (2 * FD_STEP)
        worst = max(worst, rel_err(g, num))
    num_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += FD_STEP
        xm[idx] -= FD_STEP
        num_x[idx] = (loss(xp) - loss(xm)) / (2 * FD_STEP)
    return max(worst, rel_err(gx, num_x))
