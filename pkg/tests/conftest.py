import numpy as np
import pytest

from mlcseg.core import Correspondence, LabelSchema, coarsen_labels
from mlcseg.losses import LogitsField, softmax_field


@pytest.fixture
def two_level_schema():
    """3 coarse labels; 6 fine labels mapped 2-2-2."""
    return LabelSchema((3, 6), (np.array([0, 0, 1, 1, 2, 2]),))


def random_schema(rng, max_levels=3, max_labels=8):
    k = int(rng.integers(1, max_levels + 1))
    counts = sorted(int(rng.integers(2, max_labels + 1)) for _ in range(k))
    maps = []
    for level in range(2, k + 1):
        coarse, fine = counts[level - 2], counts[level - 1]
        pm = np.concatenate([
            np.arange(coarse), rng.integers(0, coarse, size=fine - coarse)
        ])
        rng.shuffle(pm)
        maps.append(pm)
    return LabelSchema(tuple(counts), tuple(maps))


def random_prob_field(rng, schema, n):
    logits = LogitsField(tuple(
        rng.normal(0, 1.5, size=(n, c)) for c in schema.labels_per_level
    ))
    return softmax_field(logits)


def random_corr(rng, n):
    size = int(rng.integers(1, n + 1))
    idx = np.sort(rng.choice(n, size=size, replace=False))
    return Correspondence(idx, idx, idx)


def random_labels(rng, schema, n, unlabeled_fraction=0.2):
    fine = rng.integers(0, schema.labels_per_level[-1], size=n)
    fine[rng.uniform(size=n) < unlabeled_fraction] = -1
    if np.all(fine == -1):
        fine[0] = 0
    return coarsen_labels(fine, schema)
