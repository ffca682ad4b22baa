"""Shared fixtures: RNGs, a finite-difference gradient checker, and a tiny on-disk dataset."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

from mamapp.synthetic import write_dataset
from mamapp.tensor import Tensor

GRAD_TOL = 1e-4
FD_STEP = 1e-5


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, step: float = FD_STEP,
                 indices: Sequence[tuple] | None = None) -> dict:
    """Central differences of ``fn`` w.r.t. entries of ``arr`` (perturbed in place)."""
    out = {}
    idx_iter = indices if indices is not None else list(np.ndindex(arr.shape))
    for idx in idx_iter:
        orig = arr[idx]
        arr[idx] = orig + step
        hi = fn()
        arr[idx] = orig - step
        lo = fn()
        arr[idx] = orig
        out[idx] = (hi - lo) / (2 * step)
    return out


def grad_errors(analytic: np.ndarray, numeric: dict) -> np.ndarray:
    return np.array([abs(analytic[i] - n) / max(1.0, abs(analytic[i])) for i, n in numeric.items()])


def check_op(op: Callable[..., Tensor], *arrays: np.ndarray, seed: int = 0) -> float:
    """Largest relative error between backward and central differences for ``op``.

    The scalar probed is ``sum(op(*inputs) * w)`` with a fixed random ``w``.
    """
    inputs = [Tensor(a.astype(np.float64), requires_grad=True, dtype=np.float64) for a in arrays]
    probe = np.random.default_rng(seed).standard_normal(op(*inputs).shape)

    def value() -> float:
        return float((op(*inputs).data * probe).sum())

    out = op(*inputs)
    (out * Tensor(probe, dtype=np.float64)).sum().backward()
    worst = 0.0
    for t in inputs:
        num = numeric_grad(value, t.data)
        worst = max(worst, float(grad_errors(t.grad, num).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gradcheck():
    return check_op


@pytest.fixture(scope="session")
def leaf_root(tmp_path_factory):
    """Synthetic 4-class dataset with unequal class sizes, 64x64 PNGs."""
    return write_dataset(tmp_path_factory.mktemp("leaves") / "data", per_class=[12, 10, 20, 14],
                         size=64, seed=7)


# ------------------------------------------------------------ acceptance report
_CRITERIA: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = report.user_properties and dict(report.user_properties).get("criterion")
    if not marker:
        return
    number, title = marker
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.outcome == "passed" else "FAIL"
    _CRITERIA[f"{number:02d}"] = (status, f"criterion {number} [{status}] {title}" +
                                  (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[key][1])
