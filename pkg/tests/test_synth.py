"""Synthesis pipeline: foreground location, Bezier hulls, defects, augments."""

import numpy as np
import pytest
from shapely.geometry import Point, Polygon
from skimage.measure import label as cc_label

from contrastad import (AugmentConfig, DefectSpec, ForegroundNotFound,
                        PairedDataset, augment_normal, bezier_hull,
                        build_pair_dataset, generate_defect, locate_brain)
from contrastad.phantom import phantom_brain
from contrastad.synth import load_dataset, save_dataset, validate_image


def disk_image(size=128, radius=40, intensity=200):
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size), dtype=np.uint8)
    img[(yy - size // 2) ** 2 + (xx - size // 2) ** 2 <= radius ** 2] = intensity
    return img


# ------------------------------------------------------------- validation

def test_validate_image_rejects_bad_inputs():
    with pytest.raises(ValueError):
        validate_image(np.zeros((8, 8)))            # too small
    with pytest.raises(ValueError):
        validate_image(np.zeros((64, 64, 3)))       # not 2-D
    with pytest.raises(ValueError):
        validate_image(np.full((64, 64), 300.0))    # out of range


# ------------------------------------------------------------ locate_brain

def test_locate_brain_black_image_signals():
    with pytest.raises(ForegroundNotFound):
        locate_brain(np.zeros((64, 64), dtype=np.uint8), threshold=10)


def test_locate_brain_recovers_disk():
    img = disk_image()
    mask = locate_brain(img, threshold=10, morph_radius=5)
    disk = img > 10
    # morphology may shave or pad at most a ring of morph_radius pixels
    from skimage.morphology import binary_dilation, binary_erosion, disk as disk_fp
    assert np.all(binary_erosion(disk, disk_fp(5)) <= mask)
    assert np.all(mask <= binary_dilation(disk, disk_fp(5)))


def test_locate_brain_removes_specks():
    img = disk_image()
    rng = np.random.default_rng(0)
    speck_at = rng.integers(0, 20, size=(6, 2))      # corner specks off the disk
    for r, c in speck_at:
        img[r:r + 2, c:c + 2] = 255
    mask = locate_brain(img, threshold=10, morph_radius=5)
    # oracle: the thresholded image has several components; the result must be
    # the largest one only, so no speck pixel survives
    comps = cc_label(img > 10)
    sizes = np.bincount(comps.ravel()); sizes[0] = 0
    largest = comps == sizes.argmax()
    assert not mask[~largest & (img > 10)].any()
    assert mask.sum() > 0.5 * largest.sum()


def test_locate_brain_otsu_default():
    img = phantom_brain(128, 1)
    mask = locate_brain(img)
    assert 0.1 < mask.mean() < 0.9


# ------------------------------------------------------------- bezier_hull

def test_bezier_needs_three_points():
    with pytest.raises(ValueError):
        bezier_hull([(0, 0), (1, 1)], 0.05)


def shoelace(poly):
    x, y = poly[:, 1], poly[:, 0]
    return 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))


def test_bezier_triangle_edginess_zero():
    pts = np.array([(0.0, 0.0), (0.0, 2.0), (np.sqrt(3), 1.0)])
    poly = bezier_hull(pts, 0.0)
    for p in pts:
        assert np.min(np.hypot(*(poly - p).T)) < 1e-6
    tri_area = shoelace(pts[np.argsort(np.arctan2(*(pts - pts.mean(0)).T))])
    assert shoelace(poly) >= tri_area - 1e-9


def test_bezier_square_contains_centroid():
    pts = [(0, 0), (0, 1), (1, 1), (1, 0)]
    poly = bezier_hull(pts, 0.05)
    shape = Polygon(poly)
    assert shape.is_valid                      # simple (no self-intersection)
    assert shape.contains(Point(0.5, 0.5))


def test_bezier_interpolates_control_points():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pts = rng.uniform(0, 100, size=(rng.integers(3, 9), 2))
        poly = bezier_hull(pts, 0.05)
        for p in pts:
            assert np.min(np.hypot(*(poly - p).T)) < 1e-6


def test_bezier_simple_up_to_quarter_edginess():
    rng = np.random.default_rng(2)
    for trial in range(20):
        # keep points reasonably separated, as the defect sampler does
        pts = rng.uniform(0, 100, size=(5, 2))
        while min(np.hypot(*(pts[i] - pts[j])) for i in range(5)
                  for j in range(i + 1, 5)) < 15:
            pts = rng.uniform(0, 100, size=(5, 2))
        for edg in (0.05, 0.15, 0.25):
            assert Polygon(bezier_hull(pts, edg)).is_valid, (trial, edg)


# --------------------------------------------------------- generate_defect

def test_defect_locality_and_determinism():
    img = phantom_brain(128, 3)
    spec = DefectSpec(rng_seed=42)
    out1, mask1 = generate_defect(img, spec)
    out2, mask2 = generate_defect(img, spec)
    assert np.array_equal(out1, out2) and np.array_equal(mask1, mask2)
    assert np.array_equal(out1[~mask1], img[~mask1])
    assert mask1.sum() >= 1
    assert out1 is not img


def test_defect_containment_and_area_spread():
    img = disk_image(128, 45)
    brain = locate_brain(img, threshold=10)
    areas = []
    for seed in range(200):
        _, mask = generate_defect(img, DefectSpec(rng_seed=seed), brain_mask=brain)
        assert not (mask & ~brain).any()
        areas.append(mask.sum())
    assert max(areas) / max(min(areas), 1) >= 10


def test_defect_noise_override():
    img = phantom_brain(128, 4)
    out, mask = generate_defect(img, DefectSpec(mu=0.0, sigma=1.0, rng_seed=0))
    assert out[mask].mean() < 10


def test_defect_spec_defaults_and_validation():
    spec = DefectSpec()
    assert spec.n_control == 5 and spec.edginess == 0.05
    assert spec.noise_base_shape == (15, 15)
    with pytest.raises(ValueError):
        DefectSpec(n_control=2)
    with pytest.raises(ValueError):
        DefectSpec(sigma=0.0)


def test_defect_fails_on_tiny_foreground():
    # 4 candidate pixels cannot supply 8 distinct control points
    img = np.zeros((64, 64), dtype=np.uint8)
    img[30:32, 30:32] = 200
    brain = img > 10
    from contrastad.exceptions import DataError
    with pytest.raises(DataError):
        generate_defect(img, DefectSpec(n_control=8, rng_seed=0), brain_mask=brain)


# ---------------------------------------------------------- augment_normal

def _find_seed(predicate, limit=500):
    for seed in range(limit):
        draws = np.random.default_rng(seed).random(4) < 0.5
        if predicate(draws):
            return seed
    raise AssertionError("no seed found")


def test_augment_identity_draw():
    img = phantom_brain(64, 5)
    seed = _find_seed(lambda d: not d.any())
    assert np.array_equal(augment_normal(img, seed), img)


def test_augment_flip_is_involution():
    img = phantom_brain(64, 6)
    seed = _find_seed(lambda d: list(d) == [False, False, True, False])
    once = augment_normal(img, seed)
    assert np.array_equal(once, img[:, ::-1])
    assert np.array_equal(augment_normal(once, seed), img)


def test_augment_bounds_sweep():
    img = phantom_brain(64, 7)
    for seed in range(40):
        out = augment_normal(img, seed)
        assert out.shape == img.shape
        assert out.dtype == np.uint8
        assert 0 <= out.min() and out.max() <= 255
        assert abs(out.mean() - img.mean()) <= 20 + 0.2 * img.mean()


def test_augment_deterministic():
    img = phantom_brain(64, 8)
    assert np.array_equal(augment_normal(img, 123), augment_normal(img, 123))


# ------------------------------------------------------- build_pair_dataset

def test_pair_dataset_counts():
    few = [phantom_brain(64, s) for s in (1, 2)]
    ds = build_pair_dataset(few, 8, 8, DefectSpec(), rng_seed=0)
    assert len(ds.normals) == 10
    assert len(ds.anomalous) == 8
    assert len(ds.originals) == 2
    assert all(any(o is f for f in few) for o in ds.originals)


def test_pair_dataset_no_augmentation():
    few = [phantom_brain(64, 1)]
    ds = build_pair_dataset(few, 0, 2, DefectSpec(), rng_seed=0)
    assert ds.normals == few


def test_pair_dataset_deterministic():
    few = [phantom_brain(64, s) for s in (3, 4)]
    a = build_pair_dataset(few, 4, 4, DefectSpec(), rng_seed=9)
    b = build_pair_dataset(few, 4, 4, DefectSpec(), rng_seed=9)
    for x, y in zip(a.normals, b.normals):
        assert np.array_equal(x, y)
    for (xi, xm), (yi, ym) in zip(a.anomalous, b.anomalous):
        assert np.array_equal(xi, yi) and np.array_equal(xm, ym)


def test_pair_dataset_defect_containment():
    few = [phantom_brain(64, s) for s in (5, 6)]
    ds = build_pair_dataset(few, 4, 6, DefectSpec(), rng_seed=10)
    for (img, mask), base in zip(ds.anomalous, ds.defect_base):
        brain = locate_brain(ds.normals[base])
        assert not (mask & ~brain).any()


def test_pair_dataset_invariants():
    with pytest.raises(ValueError):
        PairedDataset(few=[], pseudo_normal=[], anomalous=[])
    img = phantom_brain(64, 1)
    with pytest.raises(ValueError):
        PairedDataset(few=[img], pseudo_normal=[],
                      anomalous=[(img, np.zeros_like(img, dtype=bool))])


def test_dataset_roundtrip(tmp_path):
    few = [phantom_brain(64, s) for s in (7, 8)]
    ds = build_pair_dataset(few, 3, 3, DefectSpec(), rng_seed=11)
    manifest = save_dataset(ds, tmp_path / "corpus")
    assert manifest.exists()
    back = load_dataset(tmp_path / "corpus")
    assert len(back.few) == 2 and len(back.pseudo_normal) == 3
    for x, y in zip(ds.normals, back.normals):
        assert np.array_equal(x, y)
    for (xi, xm), (yi, ym) in zip(ds.anomalous, back.anomalous):
        assert np.array_equal(xi, yi) and np.array_equal(xm, ym)
    import json
    items = json.loads(manifest.read_text())["items"]
    assert {e["provenance"] for e in items} == {"original", "aug", "defect"}
    assert all("mask_path" in e for e in items if e["provenance"] == "defect")
