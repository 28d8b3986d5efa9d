import numpy as np
import pytest

from supervit.model import ModelConfig, init_params


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + eps
        hi = f()
        arr[i] = orig - eps
        lo = f()
        arr[i] = orig
        out[i] = (hi - lo) / (2 * eps)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 1e-12 else 0.0


SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture
def tiny_config():
    return ModelConfig(depth=2, dim=8, heads=2, mlp_dim=16, num_classes=3, image_side=8,
                       channels=2, grids=(2, 4), base_patch=3, keep_rates=(1.0, 0.7, 0.5),
                       drop_blocks=(1,))


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=1, dtype=np.float64, std=0.5)


# -- acceptance reporting ----------------------------------------------------
# Each acceptance test files one line here; the lines are printed at the end
# of the session whether or not output capture is on.
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(number: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
