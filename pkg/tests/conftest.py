import numpy as np
import pytest

from crowdfuse.data import CrowdSample, PointAnnotation
from crowdfuse.synth import SynthSpec, generate_sample, train_specs


@pytest.fixture(scope="session")
def train_samples():
    """Eight 64x64 samples with counts 1..8, shared across tests."""
    return [generate_sample(s) for s in train_specs()]


@pytest.fixture(scope="session")
def small_sample():
    return generate_sample(SynthSpec(width=64, height=64, count=5, seed=3))


@pytest.fixture
def flat_sample():
    """Hand-built sample with known pixels and points."""
    rgb = np.full((48, 64, 3), 90, dtype=np.uint8)
    thermal = np.full((48, 64), 30, dtype=np.uint8)
    points = [PointAnnotation(10.0, 10.0), PointAnnotation(40.0, 20.0)]
    return CrowdSample(rgb=rgb, thermal=thermal, points=points)
