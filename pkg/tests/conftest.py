import numpy as np
import pytest

from hypermix import nets
from hypermix import synthdata as sd


def fd_grad(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(a - b)) / denom


@pytest.fixture(scope="session")
def default_dataset():
    return sd.generate_dataset(sd.DatasetSpec(seed=0))


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = sd.DatasetSpec(input_dim=6, n_base=10, n_val=6, n_novel=8,
                          samples_per_class=20, center_scale=3.0, seed=1)
    return sd.generate_dataset(spec)


@pytest.fixture(scope="session")
def pretrained_extractor(default_dataset):
    extractor, losses = nets.pretrain_extractor(default_dataset, epochs=50, seed=0)
    return extractor, losses


@pytest.fixture(scope="session")
def trained_tiny(tiny_dataset):
    """Briefly meta-trained nets over the tiny dataset, for harness tests."""
    from hypermix import metatrain as mt
    extractor = nets.FeatureExtractor(tiny_dataset.input_dim, hidden=(16, 16), d_feat=8,
                                      rng=sd.rng_stream(3, sd.STREAM_PRETRAIN, 0))
    hyper = nets.HyperNetwork(8, hidden=(32, 32), rng=sd.rng_stream(3, sd.STREAM_TRAIN, 0))
    cfg = mt.TrainConfig(method="plain", epochs=3, batches_per_epoch=5,
                         episodes_per_batch=2, n_way=4, k_shot=3, q_ind=6,
                         lr=0.01, seed=3)
    mt.metatrain(extractor, hyper, tiny_dataset, cfg)
    return extractor, hyper
