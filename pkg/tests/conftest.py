import numpy as np
import pytest
import torch

# keep CPU runs reproducible and bounded on small CI boxes
torch.set_num_threads(min(torch.get_num_threads(), 4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def smooth_volume(rng):
    """A small smooth random volume (gaussian-filtered noise in [0, 1])."""
    from scipy.ndimage import gaussian_filter

    data = gaussian_filter(rng.standard_normal((16, 16, 16)), 2.0)
    data = (data - data.min()) / (data.max() - data.min())
    from deformreg.grid import Volume

    return Volume(data.astype(np.float32))


@pytest.fixture
def tiny_nets():
    """A small extractor/projector pair for fast forward passes."""
    from deformreg.nets import NetConfig, init_networks

    config = NetConfig(extractor_channels=(4, 6), projection_mid_channels=8,
                       projection_out_channels=6)
    return init_networks(config, seed=3)
