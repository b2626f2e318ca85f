import numpy as np
import pytest

from moganet.model import preset
from moganet.train import synth_dataset, train_loop


@pytest.fixture(scope="session")
def stripes64():
    return synth_dataset("stripes", count=64, classes=4, h=32, w=32, seed=0)


@pytest.fixture(scope="session")
def nano_quick(stripes64):
    """Briefly trained nano model: enough signal for interaction analysis
    and eval plumbing without the full memorization run."""
    model, metrics = train_loop(preset("nano"), stripes64, epochs=12, seed=0,
                                batch_size=16)
    return model, metrics


@pytest.fixture(scope="session")
def nano_trained(stripes64, tmp_path_factory):
    """The full desk-scale run: nano, 64 stripes samples, batch 16,
    200 epochs, seed 0, with checkpoint and metrics on disk."""
    out = tmp_path_factory.mktemp("nano200")
    model, metrics = train_loop(preset("nano"), stripes64, epochs=200, seed=0,
                                batch_size=16, out_dir=str(out))
    return model, metrics, out


def rng64(seed=0):
    return np.random.default_rng(seed)
