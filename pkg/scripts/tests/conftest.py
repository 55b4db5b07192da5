import numpy as np
import pytest

from src.data_io import WorldSpec, generate_world
from src.features import init_model_state
from src.ot_core import SinkhornConfig


def central_difference(func, x, eps=1e-5):
    """Numerical gradient of the scalar func at x (perturbs x in place, restores it)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = func(x)
        x[idx] = orig - eps
        lo = func(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8)


def unit_rows(rng, k, d):
    x = rng.normal(size=(k, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def tight():
    """Converged solves without the cost clamp, for gradient checks."""
    return SinkhornConfig(lam=0.2, max_iters=5000, tol=1e-9, cost_clamp_multiplier=None)


@pytest.fixture
def small_world():
    return WorldSpec(num_classes=3, samples_per_class=8, margin=0.5, noise_sigma=0.05, tokens_per_class=2,
                     filler_vocab=6, h=2, w=2, d_in=6, caption_len=4, fillers_per_caption=1, seed=3)


@pytest.fixture
def small_dataset(small_world):
    return generate_world(small_world)


@pytest.fixture
def small_model(small_world):
    return init_model_state(5, d_in=small_world.d_in, d=4, d_e=4, vocab_size=small_world.vocab_size)
