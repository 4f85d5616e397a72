import numpy as np
import pytest

from regalign.streams import stream_rng


def philox(*key_parts: int) -> np.random.Generator:
    """Deterministic generator from a tuple of small integers."""
    return stream_rng(key_parts[0], *key_parts[1:])


@pytest.fixture
def rng() -> np.random.Generator:
    return philox(0xC0FFEE)


def random_twist(rng: np.random.Generator, max_angle: float, trans_scale: float = 1.0) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    nu = rng.normal(size=3) * trans_scale
    return np.concatenate([angle * axis, nu])
