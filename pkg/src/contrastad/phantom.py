"""Procedural phantom images for desk-scale end-to-end experiments.

Each phantom is a smooth rotated ellipse on a black background, filled with
a warped ridge texture plus low-frequency shading and mild pixel noise, so
a few-shot detector faces realistic within-class variation. Test anomalies
are held-out-seed Bezier defects whose noise statistics differ from the
training synthesis defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .synth import DefectSpec, generate_defect, locate_brain


@dataclass
class PhantomTestSet:
    healthy: list[np.ndarray]
    anomalous: list[np.ndarray]
    masks: list[np.ndarray]


def phantom_brain(size: int = 256, seed: int = 0) -> np.ndarray:
    """One synthetic healthy image of shape (size, size), uint8."""
    rng = np.random.default_rng(seed)
    h = w = size
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h
    cx = w / 2 + rng.uniform(-0.04, 0.04) * w
    ry = rng.uniform(0.36, 0.44) * h / 1.0
    rx = rng.uniform(0.28, 0.36) * w / 1.0
    theta = rng.uniform(-0.25, 0.25)

    yy, xx = np.mgrid[0:h, 0:w]
    yr = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)
    xr = (yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    inside = (yr / ry) ** 2 + (xr / rx) ** 2 <= 1.0

    base = rng.uniform(120, 160)
    freq = rng.uniform(4.0, 7.0)
    phase = rng.uniform(0, 2 * np.pi)
    warp = gaussian_filter(rng.standard_normal((h, w)), size / 10.0)
    warp *= 0.15 / max(warp.std(), 1e-8)
    ridges = np.sin(2 * np.pi * freq * (yr / size + warp) + phase)

    grad_dir = rng.uniform(0, 2 * np.pi)
    grad = ((yy / h) * np.cos(grad_dir) + (xx / w) * np.sin(grad_dir)) * rng.uniform(10, 25)

    tex = base + 22.0 * ridges + grad + rng.normal(0, 3.0, (h, w))
    edge = np.minimum(distance_transform_edt(inside) / 4.0, 1.0)   # soft rim
    img = np.clip(tex, 0, 255) * inside * edge
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def test_defect_spec() -> DefectSpec:
    """Defect parameters for held-out test anomalies: more control points,
    rougher hulls, and noise statistics different from the training defaults
    (intensity means near the foreground level, so test defects are subtler
    than the full-range training ones)."""
    return DefectSpec(n_control=7, edginess=0.10,
                      mu_range=(110, 180), sigma_range=(15.0, 30.0))


def phantom_pool(n: int, size: int = 256, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    return [phantom_brain(size, int(s)) for s in seeds]


def phantom_test_set(n_healthy: int, n_anomalous: int, size: int = 256,
                     seed: int = 1, spec: DefectSpec | None = None) -> PhantomTestSet:
    """Held-out phantoms: fresh healthy images plus defect-inpainted ones."""
    rng = np.random.default_rng(seed)
    spec = spec or test_defect_spec()
    healthy = [phantom_brain(size, int(s))
               for s in rng.integers(0, 2**31 - 1, size=n_healthy)]
    anomalous, masks = [], []
    base_seeds = rng.integers(0, 2**31 - 1, size=n_anomalous)
    defect_seeds = rng.integers(0, 2**31 - 1, size=n_anomalous)
    for bs, dsd in zip(base_seeds, defect_seeds):
        base = phantom_brain(size, int(bs))
        img, mask = generate_defect(base, replace(spec, rng_seed=int(dsd)),
                                    brain_mask=locate_brain(base))
        anomalous.append(img)
        masks.append(mask)
    return PhantomTestSet(healthy=healthy, anomalous=anomalous, masks=masks)
