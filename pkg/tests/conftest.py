import numpy as np
import pytest

from mgflow.flow import DnfModel, FlowModel


def fd_grad(f, arrays, h=1e-6):
    """Central finite-difference gradient of scalar ``f(list_of_arrays)``."""
    arrays = [np.array(a, dtype=float) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = f(arrays)
            a[idx] = orig - h
            down = f(arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def perturb(model, scale=0.3, seed=0):
    """Give every flow weight a random non-zero value so the flow is far from identity."""
    rng = np.random.default_rng(seed)
    flow = model.flow if isinstance(model, DnfModel) else model
    for blk in flow.blocks:
        for k, v in blk.params.items():
            blk.params[k] = v + scale * rng.standard_normal(v.shape)
    return model


def random_flow(dim, n_blocks=3, seed=0, scale=0.3, hidden=None):
    return perturb(FlowModel(dim, n_blocks, hidden=hidden, seed=seed), scale, seed + 100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
