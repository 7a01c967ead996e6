from __future__ import annotations

import numpy as np
import pytest


def haar(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def decaying_matrix(rng: np.random.Generator, m: int, n: int, power: float = 1.0) -> np.ndarray:
    """Weight-like matrix: Haar singular vectors, spectrum i^-power."""
    k = min(m, n)
    spectrum = np.arange(1, k + 1, dtype=np.float64) ** -power
    return (haar(rng, m, k) * spectrum) @ haar(rng, n, k).T


def eckart_young_error(a: np.ndarray, r: int) -> float:
    """Optimal rank-r Frobenius error from LAPACK singular values."""
    s = np.linalg.svd(a, compute_uv=False)
    return float(np.sqrt(np.sum(s[r:] ** 2)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
