"""Shared fixtures and dataset discovery for the test suite.

The desk-scale reproduction tests need the real Digit-MNIST and
Fashion-MNIST IDX files.  They are looked up under ``$BOUNDARYLEARN_DATA``
(or ``./data`` next to the repository root), one subdirectory per dataset:

    data/digit-mnist/train-images-idx3-ubyte[.gz]   (and the other 3 files)
    data/fashion-mnist/...

Tests that need a dataset skip with an explanatory message when the files
are absent.
"""

import os
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).resolve().parent.parent


def dataset_dir(name):
    base = os.environ.get("BOUNDARYLEARN_DATA", REPO_ROOT / "data")
    return Path(base) / name


def require_dataset(name):
    directory = dataset_dir(name)
    stems = [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    missing = [
        stem
        for stem in stems
        if not (directory / stem).exists() and not (directory / (stem + ".gz")).exists()
    ]
    if missing:
        pytest.skip(
            f"{name} IDX files not found under {directory} "
            f"(missing {missing[0]}[.gz]); see README for download instructions"
        )
    return directory


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
