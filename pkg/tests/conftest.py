import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240810)


def random_spd(rng, n: int, jitter: float = 0.5) -> np.ndarray:
    """Well-conditioned random SPD matrix for oracle comparisons."""
    a = rng.standard_normal((n, n))
    return a @ a.T + (jitter + n * 0.1) * np.eye(n)
