"""Procedural phantom generator sanity."""

import numpy as np

from contrastad import locate_brain
from contrastad.phantom import (phantom_brain, phantom_pool, phantom_test_set,
                                test_defect_spec)


def test_phantom_shape_and_range():
    img = phantom_brain(128, 0)
    assert img.shape == (128, 128) and img.dtype == np.uint8
    assert img.max() <= 255 and img.min() == 0


def test_phantom_foreground_fraction():
    for seed in range(5):
        mask = locate_brain(phantom_brain(128, seed))
        assert 0.2 < mask.mean() < 0.7


def test_phantom_deterministic_and_varied():
    a = phantom_brain(96, 4)
    b = phantom_brain(96, 4)
    c = phantom_brain(96, 5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_phantom_pool_and_test_set():
    pool = phantom_pool(4, 64, seed=0)
    assert len(pool) == 4
    tset = phantom_test_set(3, 2, size=64, seed=1)
    assert len(tset.healthy) == 3
    assert len(tset.anomalous) == len(tset.masks) == 2
    for img, mask in zip(tset.anomalous, tset.masks):
        assert mask.any()
        assert img.shape == mask.shape == (64, 64)


def test_test_defect_spec_differs_from_training():
    from contrastad import DefectSpec
    train, test = DefectSpec(), test_defect_spec()
    assert (train.mu_range, train.sigma_range) != (test.mu_range, test.sigma_range)
    assert test.n_control != train.n_control
