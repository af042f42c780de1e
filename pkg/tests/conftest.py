import numpy as np
import pytest

from avec.autodiff import Tensor


def fd_grad(f, params, h=1e-6):
    """Central finite differences of scalar f() w.r.t. each Tensor in params (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p.data[i]
            p.data[i] = old + h
            up = f().item()
            p.data[i] = old - h
            down = f().item()
            p.data[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(analytic, numeric):
    """Norm-wise relative error max|a - n| / max|n| over a list of arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


def leaf(x, name="x"):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True, name=name)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
