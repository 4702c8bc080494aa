import numpy as np
import pytest

from cellformer.errors import DataError
from cellformer.metrics import mae, rmse


def test_perfect_predictions():
    assert rmse([0, 1, 2], [0, 1, 2]) == 0.0
    assert mae([0, 1, 2], [0, 1, 2]) == 0.0


def test_hand_arithmetic():
    assert rmse([0, 2], [1, 1]) == 1.0
    assert mae([0, 2], [1, 1]) == 1.0


def test_worst_case_single():
    assert rmse([0], [4]) == 4.0
    assert mae([0], [4]) == 4.0


def test_length_mismatch():
    with pytest.raises(DataError):
        rmse([0], [0, 1])
    with pytest.raises(DataError):
        mae([0, 1], [0])


def test_empty_rejected():
    with pytest.raises(DataError):
        rmse([], [])
    with pytest.raises(DataError):
        mae([], [])


def test_mae_never_exceeds_rmse():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        pred = rng.integers(0, 5, size=n).tolist()
        truth = rng.integers(0, 5, size=n).tolist()
        assert mae(pred, truth) <= rmse(pred, truth) + 1e-12
