import logging
import pathlib

import numpy as np
import pytest

from offnadir.data import generate_dataset
from offnadir.model import ModelConfig, build_model
from offnadir.tensor import Rng, Tensor, total

logger = logging.getLogger(__name__)
TEST_PATH = pathlib.Path(__file__).parent

TINY_ANGLES = [-7.8, 0.0, 25.0, 32.0, 44.0, 54.0]
TINY_SIZE = 16
GRADIENT_SEEDS = range(10)


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run desk-scale reproduction tests (long running)",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale run; needs --run-slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_config(**kwargs) -> ModelConfig:
    settings = dict(base_channels=4, encoder_depth=2, input_size=TINY_SIZE,
                    dropout_rate=0.2)
    settings.update(kwargs)
    return ModelConfig(**settings)


def tiny_model(seed=0, dtype=None, **kwargs):
    model = build_model(tiny_config(**kwargs), Rng(seed))
    return model if dtype is None else model.astype(dtype)


def gradient_check(fn, arrays, seed=0, eps=1e-6):
    """
    Compare the tape gradient of ``fn`` with central differences.

    ``fn`` maps float64 tensors to a tensor, which is projected onto fixed
    random weights to make a scalar.

    Returns
    -------
    float
        The worst relative error over all inputs.
    """
    arrays = [np.array(array, dtype=np.float64) for array in arrays]
    tensors = [Tensor(array, requires_grad=True) for array in arrays]
    out = fn(*tensors)
    weights = Rng(seed, (99,)).normal(out.shape)

    def projected(*values):
        return float(np.sum(fn(*[Tensor(v) for v in values]).data * weights))

    total(out * weights).backward()
    worst = 0.0
    for index, array in enumerate(arrays):
        numeric = np.zeros_like(array)
        for position in np.ndindex(array.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[index][position] += eps
            minus[index][position] -= eps
            numeric[position] = (projected(*plus) - projected(*minus)) / (2 * eps)
        analytic = tensors[index].grad
        if analytic is None:
            analytic = np.zeros_like(array)
        scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-6)
        worst = max(worst, float(np.abs(analytic - numeric).max()) / scale)
    return worst


def reference_conv(x, weight, bias, stride, padding):
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, _, height, width = x.shape
    k, _, kh, kw = weight.shape
    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1
    out = np.zeros((n, k, out_h, out_w))
    for b in range(n):
        for o in range(k):
            for i in range(out_h):
                for j in range(out_w):
                    window = x[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(window * weight[o]) + bias[o]
    return out


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Five scenes at six angles, 16x16 pixels."""
    out = tmp_path_factory.mktemp("dataset")
    return generate_dataset(5, TINY_ANGLES, out, master_seed=3, size=TINY_SIZE)


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory, tiny_dataset):
    """A briefly trained uncertainty='both', injection='metaacm' model."""
    from offnadir.training import TrainConfig, train

    out = tmp_path_factory.mktemp("trained")
    config = tiny_config(uncertainty_mode="both", injection_mode="metaacm")
    result = train(config, TrainConfig(iterations=6, batch_size=4, lr0=1e-3, seed=5),
                   tiny_dataset, out)
    return result.checkpoint_path


@pytest.fixture(scope="session")
def no_dropout_checkpoint(tmp_path_factory, tiny_dataset):
    from offnadir.training import TrainConfig, train

    out = tmp_path_factory.mktemp("no_dropout")
    config = tiny_config(uncertainty_mode="none", injection_mode="none")
    result = train(config, TrainConfig(iterations=4, batch_size=4, lr0=1e-3, seed=6),
                   tiny_dataset, out)
    return result.checkpoint_path
