import numpy as np
import pytest

from mckd.data import SynthSpec, make_dataset


def numeric_grad(fn, x, h=1e-5):
    """Central differences of a numpy scalar function, independent of the tape."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn(x)
        x[i] = orig - h
        fm = fn(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cls_dataset():
    return make_dataset(SynthSpec(n_train=64, n_val=32, n_test=32, input_dim=6,
                                  n_classes=3, seed=7))


@pytest.fixture(scope="session")
def tiny_seg_dataset():
    return make_dataset(SynthSpec(n_train=48, n_val=24, n_test=24, task="segmentation",
                                  n_classes=2, grid=(6, 6), seed=7))
