import numpy as np
import pytest

from voxharm.core import LabelMap, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(20230815)


def make_volume(values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Volume from any array-like; 1D input becomes an (n, 1, 1) grid."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1, 1)
    return Volume(arr, spacing=spacing, origin=origin)


def make_labels(values, vocabulary=None, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(values)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1, 1)
    if vocabulary is None:
        vocabulary = {int(v): f"label_{int(v)}" for v in np.unique(arr) if v != 0}
    return LabelMap(arr, spacing=spacing, vocabulary=vocabulary)
