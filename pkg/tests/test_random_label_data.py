import numpy as np
import pytest
from numpy.testing import assert_array_equal

from pkm_errors import ConfigurationError
from random_label_data import generate, count_duplicates, dump_dataset, load_dataset


def test_generation_is_deterministic():
    a = generate(256, d=8, m=10, seed=3)
    b = generate(256, d=8, m=10, seed=3)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert generate(256, seed=4).points.tobytes() != a.points.tobytes()


def test_points_lie_in_the_unit_cube():
    data = generate(1000, d=5, m=3, seed=0)
    assert data.points.shape == (1000, 5)
    assert data.points.min() >= 0.0
    assert data.points.max() < 1.0
    assert data.labels.min() >= 0 and data.labels.max() < 3


def test_label_histogram_is_near_uniform():
    data = generate(10_000, m=10, seed=11)
    histogram = data.label_histogram()
    assert histogram.sum() == 10_000
    # binomial spread of each class count is 30
    assert np.all(np.abs(histogram - 1000) <= 4 * 30)


def test_single_class():
    data = generate(50, m=1, seed=0)
    assert_array_equal(data.labels, 0)


def test_invalid_sizes():
    with pytest.raises(ConfigurationError):
        generate(0)
    with pytest.raises(ConfigurationError):
        generate(10, holdout_fraction=1.0)


def test_holdout_split():
    data = generate(200, seed=2, holdout_fraction=0.25)
    train_points, _ = data.split("train")
    holdout_points, holdout_labels = data.split("holdout")
    assert holdout_points.shape[0] == 50
    assert train_points.shape[0] == 150
    assert np.intersect1d(data.train_indices, data.holdout).size == 0
    assert_array_equal(holdout_labels, data.labels[data.holdout])
    with pytest.raises(ConfigurationError):
        data.split("test")


def test_no_holdout_trains_on_everything():
    data = generate(20, seed=2)
    points, _ = data.split("train")
    assert points.shape[0] == 20
    assert data.split("holdout")[0].shape[0] == 0


def test_count_duplicates():
    points = np.array([[0.1, 0.2], [0.3, 0.4], [0.1, 0.2], [0.1, 0.2]])
    assert count_duplicates(points) == 2
    assert count_duplicates(np.eye(3)) == 0


def test_dump_and_load(tmp_path):
    data = generate(32, d=3, m=7, seed=9)
    path = str(tmp_path / "data.bin")
    dump_dataset(data, path)
    loaded = load_dataset(path)
    assert (loaded.N, loaded.d, loaded.m, loaded.seed) == (32, 3, 7, 9)
    assert_array_equal(loaded.points, data.points.astype(np.float32).astype(np.float64))
    assert_array_equal(loaded.labels, data.labels)
