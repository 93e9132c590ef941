import os

# Single-threaded BLAS keeps trainer results bit-reproducible.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import random

import pytest

from munas.arch import ArchitectureTemplate, ConvBlock, ConvLayerSpec, InputSpec
from munas.objectives import BoundsConfig
from munas.space import SearchSpaceConfig

# Table-defaults bounds used across tests (MNIST row of the shipped configs).
MNIST_BOUNDS = BoundsConfig(
    error_bound=0.035, peak_memory_bound=2560.0, model_size_bound=4608.0, macs_bound=30e6)


@pytest.fixture
def rng():
    return random.Random(0)


@pytest.fixture
def input_28():
    return InputSpec(height=28, width=28, channels=1, num_classes=10)


@pytest.fixture
def input_8():
    return InputSpec(height=8, width=8, channels=1, num_classes=2)


@pytest.fixture
def space_cfg():
    return SearchSpaceConfig()


@pytest.fixture
def minimal_template():
    return ArchitectureTemplate(
        blocks=(ConvBlock("serial", (ConvLayerSpec("full", 3, 8, 1, False, False, True),)),),
        final_pool="avg",
        pool_size=2,
        dense_layers=(10,),
    )


def small_conv_template():
    """Two serial conv blocks plus one hidden dense layer."""
    return ArchitectureTemplate(
        blocks=(
            ConvBlock("serial", (ConvLayerSpec("full", 3, 8, 2, False, True, True),)),
            ConvBlock("serial", (ConvLayerSpec("full", 3, 12, 2, False, False, True),)),
        ),
        final_pool="avg",
        pool_size=2,
        dense_layers=(16,),
    )
