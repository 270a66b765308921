"""Shared fixtures. Thread counts are pinned before numpy loads so the
bitwise-determinism assertions hold regardless of the host's core count."""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture(scope="session")
def phantom_volumes():
    from segheads.data import generate_phantom_dataset

    return generate_phantom_dataset(6, 4, 64, seed=99)


@pytest.fixture(scope="session")
def tiny_encoder_cfg():
    from segheads.encoder import EncoderConfig

    return EncoderConfig(img_size=32, patch=8, dim=16, depth=2, heads=2,
                         window=4, scale_tag="tiny")


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
