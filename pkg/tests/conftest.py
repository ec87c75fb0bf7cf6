import numpy as np
import pytest

from dunbias import numerics as nx


def finite_difference(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array in ``arrays`` (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = f()
            arr[i] = old - h
            down = f()
            arr[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_grad(build_loss, tensors, h=1e-5):
    """Compare reverse-mode gradients of ``build_loss()`` against central differences."""
    nx.zero_grad(tensors)
    nx.backward(build_loss())
    analytic = [t.grad.copy() for t in tensors]
    numeric = finite_difference(lambda: build_loss().item(), [t.data for t in tensors], h)
    # relative to the whole gradient vector: blocks whose exact gradient is 0
    # (biases feeding batch norm) would otherwise divide round-off by round-off
    return rel_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    """An isolated data directory seeded with a small synthetic dataset."""
    gen = np.random.default_rng(7)
    x = gen.normal(size=(60, 3))
    y = x @ np.array([1.0, -0.5, 0.25]) + 0.1 * gen.normal(size=60)
    np.savetxt(tmp_path / "toy.csv", np.column_stack([x, y]), delimiter=",")
    monkeypatch.setenv("DUNBIAS_DATA_DIR", str(tmp_path))
    return tmp_path


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def emit(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
