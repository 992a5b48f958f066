import os

# Pin BLAS to one thread before numpy first loads: the timing criteria
# are single-core budgets, and one thread keeps reductions bit-stable.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest

from hospgnn import data, model


@pytest.fixture(scope="session")
def desk_splits():
    """Small separable benchmark shared by unit tests."""
    return data.synth_benchmark(
        n_train=10, n_val=4, n_test=4, per_class=24, dim=8, sep=6.0, seed=101
    )


@pytest.fixture(scope="session")
def tiny_episode(desk_splits):
    train, _, _ = desk_splits
    return data.sample_episode(train, 2, 1, 1, 1.0, data.make_rng(17, 3))


@pytest.fixture()
def tiny_config():
    return model.ModelConfig(
        feature_dim=8, layers=2, hidden_dim=8,
        use_encoder=True, encoder_dim=8, metric_hidden=16,
    )


@pytest.fixture()
def tiny_params(tiny_config):
    return model.init_params(tiny_config, seed=5)


def generic_point(params, seed=11, scale=0.05):
    """Shift parameters off the exact init.

    At the pristine init every pair distance of zero meets a zero bias,
    parking metric-net hidden units exactly on activation kinks; a small
    random offset restores a generic, kink-free neighborhood.
    """
    rng = data.make_rng(seed, 0x6E)
    for name in params.names():
        p = params.t(name)
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return params
