import numpy as np
import pytest

from aeckit.sources import SpeakerPool, noise_like, speech_like

SR = 16000


@pytest.fixture(scope="session")
def pool():
    return SpeakerPool(size=50, seed=0)


@pytest.fixture(scope="session")
def sources(pool):
    """Far-end, near-end and noise source clips (12 s each)."""
    rng = np.random.default_rng(123)
    far = speech_like(12.0, SR, rng, pool.profile(10))
    near = speech_like(12.0, SR, rng, pool.profile(20))
    noise = noise_like(12.0, SR, rng, "stationary")
    return far, near, noise
