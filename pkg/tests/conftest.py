"""Shared fixtures: tiny deterministic datasets reused across test modules."""
from __future__ import annotations

import numpy as np
import pytest

from histoseg.synth import SynthParams, synth_generate


@pytest.fixture(scope="session")
def small_pairs():
    """Three 96x96 synthetic image/label pairs (default palette, seed 11)."""
    return synth_generate(SynthParams(seed=11), 3, (96, 96))


@pytest.fixture(scope="session")
def clean_pairs():
    """Noise-free, jitter-free pairs: every pixel exactly a palette color."""
    params = SynthParams(color_jitter=0.0, noise=0.0, shading=0.0, seed=5)
    return synth_generate(params, 2, (64, 64))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
