import numpy as np
import pytest

from data import SynthConfig, generate_synthetic_benchmark


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def tiny_benchmark(tmp_path_factory):
    """16x16 two-modality benchmark, 6 train / 3 test pairs, 3 classes."""
    out = tmp_path_factory.mktemp("tiny_benchmark")
    cfg = SynthConfig(image_size=16, n_train=6, n_test=3, num_structures=2, seed=3)
    a_train, a_test, b_train, b_test = generate_synthetic_benchmark(cfg, out)
    return {"root": out, "a_train": a_train, "a_test": a_test, "b_train": b_train, "b_test": b_test}
