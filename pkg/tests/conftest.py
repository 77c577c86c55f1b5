import pytest

from avrobust.corruption import PatchBank
from avrobust.data import SynthSpec, generate_corpus, generate_noise_banks
from avrobust.training import CorpusCache


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A small persisted corpus with noise banks, shared across tests."""
    root = tmp_path_factory.mktemp("corpus")
    spec = SynthSpec(seed=7)
    manifest = generate_corpus(spec, n_train=30, n_valid=8, n_test=8, out_dir=str(root))
    banks = generate_noise_banks(spec, manifest, str(root))
    patch_bank = PatchBank(spec.video_size, seed=7)
    return {
        "spec": spec,
        "dir": str(root),
        "manifest": manifest,
        "banks": banks,
        "patch_bank": patch_bank,
    }


@pytest.fixture(scope="session")
def train_cache(small_corpus):
    return CorpusCache(
        small_corpus["manifest"], small_corpus["banks"],
        small_corpus["patch_bank"], "train",
    )


@pytest.fixture(scope="session")
def test_cache(small_corpus):
    return CorpusCache(
        small_corpus["manifest"], small_corpus["banks"],
        small_corpus["patch_bank"], "test",
    )
