"""Shared fixtures: small deterministic models and key material.

Model fixtures are session-scoped; they are immutable after
construction, so sharing them across tests is safe and avoids paying
the embedding-table setup repeatedly.
"""

import numpy as np
import pytest

from dualmark import MockLM, UniformLM, WatermarkConfig
from dualmark.bench import text_bases, text_keys


@pytest.fixture(scope="session")
def small_model():
    """Compact mock model for fast per-step tests."""
    return MockLM(vocab_size=200, dim=8, model_seed=7)


@pytest.fixture(scope="session")
def std_model():
    """The experiment-default mock model geometry."""
    return MockLM(model_seed=7)


@pytest.fixture(scope="session")
def uniform_model():
    return UniformLM(vocab_size=64, dim=8, model_seed=3)


@pytest.fixture(scope="session")
def keys():
    """A deterministic per-text key pair."""
    return text_keys(int(text_bases(12345, 1)[0]))


@pytest.fixture(scope="session")
def small_config():
    """Cheap watermark parameters for module-level tests."""
    return WatermarkConfig(k=5, L=10, M=49)


@pytest.fixture(scope="session")
def prompt8():
    return np.array([3, 17, 42, 9, 88, 120, 5, 61], dtype=np.int64)
