import numpy as np
import pytest
import torch

# filled by the acceptance module; echoed after the run so the lines survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of a scalar function by central differences, one entry at a time."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(fn(x))
            flat[i] = orig - h
            fm = float(fn(x))
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return grad


def autograd_of(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().double().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).abs().max() / max(float(b.abs().max()), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_warp(rng, size=8, mask_frac=0.75, dtype=torch.float64):
    from facealbedo.render import WarpField

    uv = rng.uniform(0.0, 1.0, size=(size, size, 2))
    n = rng.normal(size=(size, size, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    mask = rng.random((size, size)) < mask_frac
    return WarpField(torch.tensor(uv, dtype=dtype), torch.tensor(n, dtype=dtype), torch.tensor(mask))
