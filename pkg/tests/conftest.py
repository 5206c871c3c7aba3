import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> tuple[Path, Path]:
    """(bundles_dir, images_dir) of the shared 20-pair synthetic corpus."""
    from helpers import build_corpus

    root = tmp_path_factory.mktemp("corpus")
    return build_corpus(root, n_pairs=20, seed=7)
