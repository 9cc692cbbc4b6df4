import numpy as np

from tdml.data import DataConfig, make_blobs


def test_shapes_and_types():
    x, y, xt, yt = make_blobs(DataConfig(), seed=0)
    assert x.shape == (4000, 16) and xt.shape == (1000, 16)
    assert x.dtype == np.float32 and y.dtype == np.int64


def test_balanced_and_deterministic():
    x, y, _, yt = make_blobs(DataConfig(), seed=5)
    assert np.bincount(y).tolist() == [1000] * 4
    assert np.bincount(yt).tolist() == [250] * 4
    assert np.array_equal(make_blobs(DataConfig(), seed=5)[0], x)
    assert not np.array_equal(make_blobs(DataConfig(), seed=6)[0], x)
