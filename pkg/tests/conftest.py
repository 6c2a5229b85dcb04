import numpy as np
import pytest

from capqe.dataio import Sample
from capqe.model import ModelConfig, init_params


def make_sample(rng, sample_id="s0", image_id="img0", n_labels=3, target=0.5):
    return Sample(
        sample_id=sample_id,
        image_id=image_id,
        image=rng.normal(size=64),
        labels=rng.normal(size=(n_labels, 256)),
        sentence=rng.normal(size=512),
        target=target,
    )


def make_samples(rng, n, n_images=None, n_labels=3, with_target=True):
    n_images = n_images or n
    return [make_sample(rng, f"s{i}", f"img{i % n_images}", n_labels,
                        float(rng.integers(0, 9)) / 8 if with_target else None)
            for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    return ModelConfig(proj_dim=8, num_labels=3, dropout_rate=0.0)


@pytest.fixture
def perturbed_params(small_config):
    """Random parameters with non-zero biases so every branch is exercised."""
    p = init_params(small_config, seed=3)
    noise = np.random.default_rng(4)
    for v in p.blocks().values():
        v += noise.normal(0.0, 0.3, size=v.shape)
    return p


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, seconds, detail = RESULTS[n]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {n}. {title} ({seconds:.1f}s) {detail}")
