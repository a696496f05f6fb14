"""Random-label memorization data: points uniform in the unit cube, labels
uniform over the classes, both fully determined by (N, d, m, seed)."""
import logging
from dataclasses import dataclass, field

import numpy as np

from communication.shared.binary_codec import write_dataset, read_dataset
from numerics import Rng, STREAM_DATA, STREAM_HOLDOUT
from pkm_errors import ConfigurationError


@dataclass
class RandomLabelDataset:
    N: int
    d: int
    m: int
    seed: int
    points: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    duplicates: int = 0
    holdout: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.N

    @property
    def train_indices(self):
        if self.holdout is None or self.holdout.size == 0:
            return np.arange(self.N)
        return np.setdiff1d(np.arange(self.N), self.holdout, assume_unique=True)

    def split(self, name):
        """(points, labels) of ``train`` or ``holdout``; ``train`` is the whole
        set unless a holdout was requested."""
        if name == "train":
            idx = self.train_indices
        elif name == "holdout":
            idx = np.array([], dtype=np.int64) if self.holdout is None else self.holdout
        else:
            raise ConfigurationError(f"Unknown split {name!r}, expected train or holdout")
        return self.points[idx], self.labels[idx]

    def label_histogram(self):
        return np.bincount(self.labels, minlength=self.m)


def count_duplicates(points):
    return int(points.shape[0] - np.unique(points, axis=0).shape[0])


def generate(N, d=8, m=10, seed=0, holdout_fraction=0.0):
    if N < 1 or m < 1 or d < 1:
        raise ConfigurationError(f"Dataset needs N, d, m >= 1, got N={N}, d={d}, m={m}")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ConfigurationError(f"holdout_fraction must lie in [0, 1), got {holdout_fraction}")
    rng = Rng(seed, STREAM_DATA)
    points = rng.uniform(0.0, 1.0, size=(N, d))
    labels = rng.integers(0, m, size=N)

    duplicates = count_duplicates(points)
    if duplicates:
        logging.getLogger("RandomLabelDataset").warning("Generated %s duplicate input points.", duplicates)

    holdout = None
    n_holdout = int(round(holdout_fraction * N))
    if n_holdout:
        holdout = np.sort(Rng(seed, STREAM_HOLDOUT).permutation(N)[:n_holdout])
    return RandomLabelDataset(N=N, d=d, m=m, seed=seed, points=points, labels=labels,
                              duplicates=duplicates, holdout=holdout)


def dump_dataset(dataset, path):
    """Binary fixture: header + f32 rows + u16 labels."""
    write_dataset(path, dataset.points, dataset.labels, dataset.m, dataset.seed)
    logging.getLogger("RandomLabelDataset").info("Dumped %s points to %s.", dataset.N, path)


def load_dataset(path):
    points, labels, m, seed = read_dataset(path)
    return RandomLabelDataset(N=points.shape[0], d=points.shape[1], m=m, seed=seed, points=points,
                              labels=labels, duplicates=count_duplicates(points))
