import numpy as np
import pytest

from mtdistill.dataio import GenerateConfig, generate_synthetic_world


def numeric_grad(f, tensor, step=1e-6):
    """Independent central-difference gradient of scalar f() w.r.t. one
    tensor's values. Used as the oracle for analytic backward results."""
    grad = np.zeros_like(tensor.values)
    for idx in np.ndindex(*tensor.values.shape):
        saved = tensor.values[idx]
        tensor.values[idx] = saved + step
        fp = f()
        tensor.values[idx] = saved - step
        fm = f()
        tensor.values[idx] = saved
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


TINY_GEN = GenerateConfig(
    n_train=16, n_val=12, n_test=12, latent_dim=6, dual_visible_dims=4,
    n_clusters=5, d_image_raw=5, d_text_raw=7, d_dual=6, d_pair_feature=4,
    caption_corrupt_fraction=0.0, seed=7)


@pytest.fixture(scope="session")
def tiny_world():
    return generate_synthetic_world(TINY_GEN)


@pytest.fixture(scope="session")
def micro_world():
    """Very small world for gradient and oracle-equivalence tests; its dual
    dim matches the 6-wide students the tests build so clip_fa is usable."""
    cfg = GenerateConfig(
        n_train=8, n_val=10, n_test=10, latent_dim=5, dual_visible_dims=3,
        n_clusters=3, d_image_raw=4, d_text_raw=6, d_dual=6, d_pair_feature=4,
        caption_corrupt_fraction=0.0, seed=3)
    return generate_synthetic_world(cfg)
