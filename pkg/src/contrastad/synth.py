"""Synthesis of the stage-1 training corpus from a handful of healthy images.

Produces pseudo-normal variants (elastic/grid distortion, flips, contrast
jitter) and pseudo-defective variants (smooth Bezier-hull blobs inpainted
with resized Gaussian noise), each defect paired with its exact pixel mask.
Every operation is pure given (input, seed), so workers may call them
concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from skimage.draw import polygon as draw_polygon
from skimage.filters import threshold_otsu
from skimage.measure import label as cc_label
from skimage.morphology import binary_closing, binary_opening, disk

from .exceptions import DataError, ForegroundNotFound
from .io import read_image, read_mask, write_image, write_mask

MIN_SIDE = 32


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ValueError(f"image too small: {img.shape}, need at least {MIN_SIDE}x{MIN_SIDE}")
    if img.min() < 0 or img.max() > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    return img


@dataclass
class DefectSpec:
    """Parameters of one synthetic defect episode.

    `mu`/`sigma` fix the noise statistics; when left as None they are drawn
    per episode from `mu_range` (integer, inclusive) and `sigma_range`.
    """

    n_control: int = 5
    edginess: float = 0.05
    mu: float | None = None
    sigma: float | None = None
    mu_range: tuple[int, int] = (0, 255)
    sigma_range: tuple[float, float] = (10.0, 20.0)
    noise_base_shape: tuple[int, int] = (15, 15)
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_control < 3:
            raise ValueError("n_control must be >= 3")
        if self.edginess < 0:
            raise ValueError("edginess must be >= 0")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be > 0")


@dataclass
class AugmentConfig:
    """Magnitudes for the pseudo-normal augmentations (each applied with prob `p`)."""

    p: float = 0.5
    elastic_alpha: float = 4.0      # displacement field std, px
    elastic_sigma: float = 8.0      # displacement smoothing, px
    grid_cells: int = 5
    grid_jitter: float = 0.10       # relative step jitter
    gain_range: tuple[float, float] = (0.8, 1.2)
    bias_range: tuple[float, float] = (-20.0, 20.0)


@dataclass
class PairedDataset:
    """Synthesized training corpus with provenance.

    `few` holds the untouched original shots, `pseudo_normal` their augmented
    variants, and `anomalous` the defect-inpainted images with their masks.
    `normals` is the union used for positive sampling; the originals double
    as the anchor pool.
    """

    few: list[np.ndarray]
    pseudo_normal: list[np.ndarray]
    anomalous: list[tuple[np.ndarray, np.ndarray]]
    aug_seeds: list[int] = field(default_factory=list)
    defect_seeds: list[int] = field(default_factory=list)
    defect_base: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.few:
            raise ValueError("PairedDataset.few must be nonempty")
        for img, mask in self.anomalous:
            if mask.shape != img.shape:
                raise ValueError("defect mask shape differs from its image")
            if not mask.any():
                raise ValueError("anomalous entry carries an empty mask")

    @property
    def normals(self) -> list[np.ndarray]:
        return self.few + self.pseudo_normal

    @property
    def originals(self) -> list[np.ndarray]:
        return self.few


def locate_brain(img: np.ndarray, threshold: float | None = None,
                 morph_radius: int = 5) -> np.ndarray:
    """Foreground mask: largest connected component after threshold + morphology.

    `threshold=None` uses Otsu's method on the nonzero pixels. Closing then
    opening with a disk of `morph_radius` removes specks and seals holes.
    Raises ForegroundNotFound when nothing survives.
    """
    img = validate_image(img)
    if threshold is None:
        nonzero = img[img > 0]
        if nonzero.size == 0:
            raise ForegroundNotFound("no foreground found: image is all zero")
        threshold = float(threshold_otsu(nonzero))
    binary = img > threshold
    if not binary.any():
        raise ForegroundNotFound(f"no foreground found above threshold {threshold}")
    if morph_radius > 0:
        footprint = disk(morph_radius)
        binary = binary_closing(binary, footprint)
        binary = binary_opening(binary, footprint)
    labels = cc_label(binary)
    if labels.max() == 0:
        raise ForegroundNotFound("no foreground found after morphology")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == sizes.argmax()


def bezier_hull(points, edginess: float, samples_per_segment: int = 24) -> np.ndarray:
    """Closed smooth polygon through `points` (returned as an (N, 2) array).

    Points are ordered by polar angle about their centroid; consecutive pairs
    are joined by cubic Bezier segments whose inner control points sit at the
    chord thirds, displaced outward perpendicular to the chord by
    `edginess * chord_length`. Each segment starts exactly at its control
    point, so all inputs lie on the output curve.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least 3 two-dimensional points")
    centroid = pts.mean(axis=0)
    angles = np.arctan2(pts[:, 0] - centroid[0], pts[:, 1] - centroid[1])
    pts = pts[np.argsort(angles)]

    n = len(pts)
    t = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)[:, None]
    segments = []
    for i in range(n):
        p0, p1 = pts[i], pts[(i + 1) % n]
        chord = p1 - p0
        length = np.hypot(*chord)
        if length == 0:
            segments.append(np.repeat(p0[None, :], samples_per_segment, axis=0))
            continue
        perp = np.array([-chord[1], chord[0]]) / length
        mid = (p0 + p1) / 2
        if np.dot(perp, mid - centroid) < 0:
            perp = -perp
        offset = perp * edginess * length
        c0 = p0 + chord / 3.0 + offset
        c1 = p0 + 2.0 * chord / 3.0 + offset
        seg = ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * c0
               + 3 * (1 - t) * t ** 2 * c1 + t ** 3 * p1)
        segments.append(seg)
    return np.concatenate(segments, axis=0)


def _sample_separated_points(rng: np.random.Generator, candidates: np.ndarray,
                             n: int, min_sep: float) -> np.ndarray | None:
    """Pick n candidate rows pairwise at least min_sep apart; None on failure."""
    chosen: list[np.ndarray] = []
    for _ in range(200):
        p = candidates[rng.integers(len(candidates))]
        if all(np.hypot(*(p - q)) >= min_sep for q in chosen):
            chosen.append(p.astype(float))
            if len(chosen) == n:
                return np.stack(chosen)
    return None


def generate_defect(img: np.ndarray, spec: DefectSpec,
                    brain_mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Inpaint one noise-filled Bezier blob inside the brain foreground.

    Control points are sampled inside the foreground mask with a minimum
    pairwise separation of 5% of the foreground bounding-box diagonal
    (halved on retry). The hull is rasterized, clipped to the foreground,
    and filled with Gaussian noise generated on a small grid and bilinearly
    upscaled. Pixels outside the mask are untouched; the input is never
    modified. Deterministic given `spec.rng_seed`.
    """
    img = validate_image(img)
    rng = np.random.default_rng(spec.rng_seed)
    if brain_mask is None:
        brain_mask = locate_brain(img)
    if not brain_mask.any():
        raise ForegroundNotFound("no foreground found")

    mu = float(spec.mu) if spec.mu is not None else float(
        rng.integers(spec.mu_range[0], spec.mu_range[1] + 1))
    sigma = float(spec.sigma) if spec.sigma is not None else float(
        rng.uniform(*spec.sigma_range))

    coords = np.argwhere(brain_mask)
    rmin, cmin = coords.min(axis=0)
    rmax, cmax = coords.max(axis=0)
    min_sep = 0.05 * np.hypot(rmax - rmin, cmax - cmin)

    h, w = img.shape
    mask = None
    sep = min_sep
    for _ in range(12):
        points = _sample_separated_points(rng, coords, spec.n_control, sep)
        if points is None:
            sep /= 2.0
            if sep < 1.0:
                break
            continue
        hull = bezier_hull(points, spec.edginess)
        rr, cc = draw_polygon(hull[:, 0], hull[:, 1], shape=(h, w))
        candidate = np.zeros((h, w), dtype=bool)
        candidate[rr, cc] = True
        candidate &= brain_mask  # strict containment in the foreground
        if candidate.any():
            mask = candidate
            break
    if mask is None:
        raise DataError("brain region too small to place a defect")

    noise = rng.normal(mu, sigma, size=spec.noise_base_shape)
    noise = cv2.resize(noise, (w, h), interpolation=cv2.INTER_LINEAR)
    noise = np.clip(noise, 0, 255)

    out = img.copy()
    out[mask] = np.rint(noise[mask]).astype(img.dtype)
    return out, mask


def _elastic(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    h, w = img.shape
    dx = gaussian_filter(rng.standard_normal((h, w)), cfg.elastic_sigma)
    dy = gaussian_filter(rng.standard_normal((h, w)), cfg.elastic_sigma)
    dx *= cfg.elastic_alpha / max(dx.std(), 1e-8)
    dy *= cfg.elastic_alpha / max(dy.std(), 1e-8)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return map_coordinates(img.astype(np.float32), [yy + dy, xx + dx],
                           order=1, mode="reflect")


def _grid_axis_map(size: int, cells: int, jitter: float,
                   rng: np.random.Generator) -> np.ndarray:
    steps = 1.0 + rng.uniform(-jitter, jitter, size=cells)
    edges = np.concatenate([[0.0], np.cumsum(steps)])
    edges *= (size - 1) / edges[-1]  # keep the distortion inside the frame
    uniform = np.linspace(0, size - 1, cells + 1)
    return np.interp(np.arange(size), uniform, edges)


def _grid_distort(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    h, w = img.shape
    map_y = _grid_axis_map(h, cfg.grid_cells, cfg.grid_jitter, rng)
    map_x = _grid_axis_map(w, cfg.grid_cells, cfg.grid_jitter, rng)
    yy, xx = np.meshgrid(map_y, map_x, indexing="ij")
    return map_coordinates(img.astype(np.float32), [yy, xx], order=1, mode="reflect")


def augment_normal(img: np.ndarray, rng_seed: int,
                   cfg: AugmentConfig | None = None) -> np.ndarray:
    """Healthy-preserving augmentation: elastic + grid distortion, horizontal
    flip, and contrast/brightness jitter, each applied with independent
    probability `cfg.p`. Deterministic per seed; output shape equals input.
    """
    img = validate_image(img)
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(rng_seed)
    apply = rng.random(4) < cfg.p

    out = img.astype(np.float32)
    if apply[0]:
        out = _elastic(out, rng, cfg)
    if apply[1]:
        out = _grid_distort(out, rng, cfg)
    if apply[2]:
        out = out[:, ::-1]
    if apply[3]:
        gain = rng.uniform(*cfg.gain_range)
        bias = rng.uniform(*cfg.bias_range)
        out = out * gain + bias
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def build_pair_dataset(few: list[np.ndarray], n_normal_aug: int, n_anomalous: int,
                       spec: DefectSpec, rng_seed: int,
                       aug_cfg: AugmentConfig | None = None) -> PairedDataset:
    """Assemble the full training corpus from the few healthy shots.

    Augmentation bases are drawn uniformly over `few`; defect bases uniformly
    over the combined normal set. Per-item seeds derive from `rng_seed`, so
    the whole dataset is reproducible.
    """
    if not few:
        raise ValueError("few must be nonempty")
    few = [validate_image(im) for im in few]
    rng = np.random.default_rng(rng_seed)

    aug_seeds = rng.integers(0, 2**31 - 1, size=n_normal_aug).tolist()
    aug_base = rng.integers(0, len(few), size=n_normal_aug).tolist()
    pseudo = [augment_normal(few[b], s, aug_cfg) for b, s in zip(aug_base, aug_seeds)]

    normals = few + pseudo
    defect_seeds = rng.integers(0, 2**31 - 1, size=n_anomalous).tolist()
    defect_base = rng.integers(0, len(normals), size=n_anomalous).tolist()

    brain_cache: dict[int, np.ndarray] = {}
    anomalous = []
    for b, s in zip(defect_base, defect_seeds):
        if b not in brain_cache:
            brain_cache[b] = locate_brain(normals[b])
        item_spec = replace(spec, rng_seed=int(s))
        anomalous.append(generate_defect(normals[b], item_spec, brain_mask=brain_cache[b]))

    return PairedDataset(few=few, pseudo_normal=pseudo, anomalous=anomalous,
                         aug_seeds=aug_seeds, defect_seeds=defect_seeds,
                         defect_base=defect_base)


def save_dataset(ds: PairedDataset, out_dir) -> Path:
    """Write the corpus as PNGs plus a sidecar JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(ds.few):
        name = f"orig_{i:04d}.png"
        write_image(out_dir / name, img)
        entries.append({"id": name, "provenance": "original", "seed": None})
    for i, img in enumerate(ds.pseudo_normal):
        name = f"aug_{i:04d}.png"
        write_image(out_dir / name, img)
        seed = ds.aug_seeds[i] if i < len(ds.aug_seeds) else None
        entries.append({"id": name, "provenance": "aug", "seed": seed})
    for i, (img, mask) in enumerate(ds.anomalous):
        name = f"defect_{i:04d}.png"
        mask_name = f"defect_{i:04d}_mask.png"
        write_image(out_dir / name, img)
        write_mask(out_dir / mask_name, mask)
        seed = ds.defect_seeds[i] if i < len(ds.defect_seeds) else None
        entries.append({"id": name, "provenance": "defect", "seed": seed,
                        "mask_path": mask_name})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"items": entries}, indent=2))
    return manifest


def load_dataset(in_dir) -> PairedDataset:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    few, pseudo, anomalous = [], [], []
    aug_seeds, defect_seeds = [], []
    for entry in manifest["items"]:
        img = read_image(in_dir / entry["id"])
        if entry["provenance"] == "original":
            few.append(img)
        elif entry["provenance"] == "aug":
            pseudo.append(img)
            aug_seeds.append(entry.get("seed"))
        elif entry["provenance"] == "defect":
            mask = read_mask(in_dir / entry["mask_path"])
            anomalous.append((img, mask))
            defect_seeds.append(entry.get("seed"))
        else:
            raise DataError(f"unknown provenance {entry['provenance']!r}")
    return PairedDataset(few=few, pseudo_normal=pseudo, anomalous=anomalous,
                         aug_seeds=aug_seeds, defect_seeds=defect_seeds)
