import numpy as np
import pytest

from ndfkit.scenes import build_dataset, write_synthetic_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    write_synthetic_corpus(d, 8, seed=11)
    return d


@pytest.fixture(scope="session")
def anechoic_manifest(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("anechoic")
    cfg = {"seed": 4, "role": "test", "environment": "anechoic", "scenes": {"count": 6, "num_sources": 2}}
    return build_dataset(cfg, corpus_dir, out)


@pytest.fixture(scope="session")
def reverberant_manifest(tmp_path_factory, corpus_dir):
    out = tmp_path_factory.mktemp("reverberant")
    cfg = {"seed": 5, "role": "test", "environment": "reverberant", "scenes": {"count": 3, "num_sources": 2}}
    return build_dataset(cfg, corpus_dir, out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
