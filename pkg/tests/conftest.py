import numpy as np
import pytest

from dfq_vit import autodiff as ad
from dfq_vit.data import make_synthetic
from dfq_vit.vit import ViTConfig, init_params, pretrain_toy

FD_STEP = 1e-5


def rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


def rel_err(a, b, floor=1e-10):
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(f, x0, seed=0, step=FD_STEP):
    """Relative error between the tape's directional derivative and a central difference.

    ``f`` maps a Tensor to a scalar Tensor.
    """
    direction = rng(seed).standard_normal(x0.shape)
    direction /= np.linalg.norm(direction)
    with ad.GradTape() as tape:
        x = tape.watch(x0)
        loss = f(x)
    g = tape.backward(loss, [x])[x.node].data
    analytic = float((g * direction).sum())
    fp = f(ad.Tensor(x0 + step * direction)).item()
    fm = f(ad.Tensor(x0 - step * direction)).item()
    numeric = (fp - fm) / (2 * step)
    return rel_err(analytic, numeric)


def full_check(f, x0, step=FD_STEP):
    """Norm-wise relative error between the tape gradient and coordinate-wise central differences."""
    with ad.GradTape() as tape:
        x = tape.watch(x0)
        loss = f(x)
    g = tape.backward(loss, [x])[x.node].data
    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        e = np.zeros_like(x0)
        e[idx] = step
        numeric[idx] = (f(ad.Tensor(x0 + e)).item() - f(ad.Tensor(x0 - e)).item()) / (2 * step)
    scale = max(np.linalg.norm(g), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(g - numeric) / scale)


@pytest.fixture(scope="session")
def toy_config():
    return ViTConfig()


@pytest.fixture(scope="session")
def dataset():
    return make_synthetic()


@pytest.fixture(scope="session")
def pretrained(toy_config, dataset):
    return pretrain_toy(toy_config, dataset.train_images, dataset.train_labels, seed=0)


@pytest.fixture
def random_params(toy_config):
    # larger-than-init weights so attention and MLP are far from linear
    params = init_params(toy_config, seed=3)
    r = rng(7)
    return {k: v + 0.3 * r.standard_normal(v.shape) for k, v in params.items()}


# acceptance results, filled by test_acceptance and echoed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
