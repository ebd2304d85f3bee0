import numpy as np
import pytest

from spinepatch.annotations import split_dataset, write_manifest
from spinepatch.synthgen import SynthConfig, generate


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Eight-scan synthetic corpus with a split, written under a temp dir."""
    out = tmp_path_factory.mktemp("corpus")
    m = generate(SynthConfig(seed=3, n_scans=8), out)
    m = split_dataset(m, 0.75, 3)
    write_manifest(m, out / "manifest.json")
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
