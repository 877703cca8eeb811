"""Coreset memory bank and nearest-neighbor anomaly scoring.

The bank holds a greedy k-center subset of the healthy patch features,
each vector traceable to the (image, grid cell) it came from, and is
fingerprinted against the exact extractor weights that produced it.
Queries are scored by squared distance to the nearest bank vector with a
softmax reweighting of the maximal cell.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .exceptions import ConfigurationError, FingerprintMismatch
from .extractor import (ExtractorConfig, WeightSet, aggregate_batch, build_extractor)
from .io import write_image

BANK_MAGIC = b"CSLT"
BANK_VERSION = 1


@dataclass
class MemoryBank:
    vectors: np.ndarray                      # (M, D) float32
    source_index: list[tuple[int, int, int]]  # (image id, row, col) per vector
    k_neighbors: int
    sampling_ratio: float
    extractor_fingerprint: bytes

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or len(self.vectors) == 0:
            raise ConfigurationError("bank needs a nonempty (M, D) vector matrix")
        if len(self.source_index) != len(self.vectors):
            raise ConfigurationError("one source index per vector required")
        if not (0 < self.sampling_ratio <= 1):
            raise ConfigurationError("sampling_ratio must be in (0, 1]")
        if self.k_neighbors < 2:
            raise ConfigurationError(
                "k_neighbors must be >= 2: with k=1 the reweighting factor is "
                "identically zero and every image scores 0")
        if len(self.extractor_fingerprint) != 32:
            raise ConfigurationError("fingerprint must be 32 bytes")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        m, d = self.vectors.shape
        trailer = json.dumps({"source_index": [list(s) for s in self.source_index]}).encode()
        with open(path, "wb") as f:
            f.write(BANK_MAGIC)
            f.write(struct.pack("<IIIId", BANK_VERSION, d, m, self.k_neighbors,
                                self.sampling_ratio))
            f.write(self.extractor_fingerprint)
            f.write(self.vectors.astype("<f4").tobytes())
            f.write(trailer)

    @classmethod
    def load(cls, path) -> "MemoryBank":
        path = Path(path)
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != BANK_MAGIC:
                raise ConfigurationError(f"{path} is not a bank file")
            version, d, m, k, ratio = struct.unpack("<IIIId", f.read(24))
            if version != BANK_VERSION:
                raise ConfigurationError(f"unsupported bank version {version}")
            fingerprint = f.read(32)
            vectors = np.frombuffer(f.read(4 * m * d), dtype="<f4").reshape(m, d)
            trailer = json.loads(f.read().decode())
        source = [tuple(s) for s in trailer["source_index"]]
        return cls(vectors=vectors.copy(), source_index=source, k_neighbors=k,
                   sampling_ratio=ratio, extractor_fingerprint=fingerprint)


@dataclass
class AnomalyMap:
    scores: np.ndarray          # (Hf, Wf) raw nearest-neighbor distances
    image_score: float          # reweighted score of the maximal cell
    raw_image_score: float      # max(scores)
    upsampled: np.ndarray       # (H, W) smoothed map

    def __post_init__(self):
        if not np.all(np.isfinite(self.scores)) or self.scores.min() < 0:
            raise ValueError("scores must be finite and nonnegative")


@dataclass
class Decision:
    tau: float
    is_anomaly: bool


def greedy_coreset(features: np.ndarray, n_select: int, seed: int = 0) -> list[int]:
    """Greedy farthest-point (k-center) selection, a 2-approximation of the
    minimax covering problem. Starts from a seeded random row."""
    feats = np.asarray(features)
    n = len(feats)
    if not (1 <= n_select <= n):
        raise ConfigurationError(f"cannot select {n_select} of {n} vectors")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    selected = [start]
    min_d = ((feats - feats[start]) ** 2).sum(axis=1)
    for _ in range(n_select - 1):
        nxt = int(np.argmax(min_d))
        selected.append(nxt)
        d = ((feats - feats[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d, d, out=min_d)
    return selected


def covering_radius(features: np.ndarray, selected: list[int]) -> float:
    """Max over points of the Euclidean distance to the nearest selected point."""
    feats = np.asarray(features, dtype=np.float64)
    sub = feats[selected]
    d2 = ((feats[:, None, :] - sub[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1).max()))


def _image_grids(images, weights: WeightSet, cfg_e: ExtractorConfig) -> list[np.ndarray]:
    model = build_extractor(cfg_e, weights)
    grids = []
    with torch.no_grad():
        for img in images:
            x = torch.from_numpy(np.asarray(img, dtype=np.float32))[None]
            maps, _ = model(x)
            emb = aggregate_batch(maps, cfg_e.patch_neighborhood)[0]
            grids.append(emb.permute(1, 2, 0).numpy())
    return grids


def build_bank(few, weights: WeightSet, cfg_e: ExtractorConfig,
               sampling_ratio: float = 0.10, seed: int = 0,
               k_neighbors: int = 9) -> MemoryBank:
    """Extract patch features from the original healthy shots and keep a
    greedy k-center coreset of ceil(ratio * N) vectors, with per-vector
    source indices for traceability."""
    if not few:
        raise ConfigurationError("need at least one healthy image")
    grids = _image_grids(few, weights, cfg_e)
    vectors, sources = [], []
    for img_id, grid in enumerate(grids):
        hf, wf, d = grid.shape
        vectors.append(grid.reshape(-1, d))
        ii, jj = np.unravel_index(np.arange(hf * wf), (hf, wf))
        sources.extend((img_id, int(i), int(j)) for i, j in zip(ii, jj))
    all_vecs = np.concatenate(vectors, axis=0)
    if sampling_ratio * len(all_vecs) < 1:
        raise ConfigurationError(
            f"sampling_ratio {sampling_ratio} selects no vectors from {len(all_vecs)}")
    n_select = math.ceil(sampling_ratio * len(all_vecs))
    chosen = greedy_coreset(all_vecs, n_select, seed=seed)
    return MemoryBank(vectors=all_vecs[chosen],
                      source_index=[sources[i] for i in chosen],
                      k_neighbors=k_neighbors, sampling_ratio=sampling_ratio,
                      extractor_fingerprint=weights.fingerprint())


def score_vectors(query: np.ndarray, bank_vectors: np.ndarray,
                  k_neighbors: int) -> tuple[np.ndarray, float, float]:
    """Nearest-bank distances for a (N, D) query block.

    Returns (per-cell raw scores, reweighted image score, raw image score).
    The maximal cell's score s* is scaled by 1 - e^{s*} / sum_{m in N_k(m*)}
    e^{d(x*, m)}, where m* is its nearest bank vector and N_k(m*) the
    k nearest bank vectors to m* (m* included); exponents are stabilized by
    subtracting the block max.
    """
    q = torch.from_numpy(np.ascontiguousarray(query, dtype=np.float64))
    b = torch.from_numpy(np.ascontiguousarray(bank_vectors, dtype=np.float64))
    d2 = torch.cdist(q, b) ** 2                            # (N, M)
    cell_min, cell_arg = d2.min(dim=1)
    raw = cell_min.numpy()

    star = int(cell_min.argmax())
    s_star = float(cell_min[star])
    m_star = int(cell_arg[star])
    bank_d2 = ((b - b[m_star]) ** 2).sum(dim=1)
    k = min(k_neighbors, len(b))
    nbr = torch.topk(bank_d2, k, largest=False).indices
    d_vals = d2[star, nbr].numpy()
    c = d_vals.max()                                       # >= s_star by minimality
    factor = 1.0 - math.exp(s_star - c) / np.exp(d_vals - c).sum()
    return raw, factor * s_star, s_star


class Scorer:
    """Reusable query scorer bound to one (bank, weights, config) triple."""

    def __init__(self, bank: MemoryBank, weights: WeightSet, cfg_e: ExtractorConfig):
        if weights.fingerprint() != bank.extractor_fingerprint:
            raise FingerprintMismatch(
                "refusing to score: bank was built with different extractor weights")
        self.bank = bank
        self.cfg = cfg_e
        self.model = build_extractor(cfg_e, weights)

    def score(self, img: np.ndarray) -> AnomalyMap:
        with torch.no_grad():
            x = torch.from_numpy(np.asarray(img, dtype=np.float32))[None]
            maps, _ = self.model(x)
            emb = aggregate_batch(maps, self.cfg.patch_neighborhood)[0]
            grid = emb.permute(1, 2, 0)
        hf, wf, d = grid.shape
        raw, image_score, raw_image = score_vectors(grid.reshape(-1, d).numpy(),
                                                    self.bank.vectors,
                                                    self.bank.k_neighbors)
        scores = raw.reshape(hf, wf)
        h, w = img.shape
        upsampled = cv2.resize(scores.astype(np.float32), (w, h),
                               interpolation=cv2.INTER_LINEAR)
        upsampled = gaussian_filter(upsampled, sigma=4.0)
        return AnomalyMap(scores=scores, image_score=float(image_score),
                          raw_image_score=float(raw_image), upsampled=upsampled)


def score_image(img: np.ndarray, bank: MemoryBank, weights: WeightSet,
                cfg_e: ExtractorConfig) -> AnomalyMap:
    """One-shot scoring; use Scorer directly when scoring many queries."""
    return Scorer(bank, weights, cfg_e).score(img)


def decide(amap: AnomalyMap, tau: float) -> Decision:
    return Decision(tau=tau, is_anomaly=bool(amap.image_score > tau))


def calibrate_tau(healthy_scores, q: float) -> float:
    """Empirical q-quantile (linear interpolation) of healthy validation scores."""
    scores = np.asarray(healthy_scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("need at least one healthy score")
    if not (0 < q <= 1):
        raise ValueError("q must be in (0, 1]")
    return float(np.quantile(scores, q, method="linear"))


def save_heatmap_overlay(img: np.ndarray, amap: AnomalyMap, path) -> None:
    """Query image blended with a color-mapped anomaly heatmap."""
    heat = amap.upsampled
    lo, hi = heat.min(), heat.max()
    norm = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    colored = cv2.applyColorMap((norm * 255).astype(np.uint8), cv2.COLORMAP_JET)
    base = cv2.cvtColor(np.asarray(img, dtype=np.uint8), cv2.COLOR_GRAY2BGR)
    overlay = cv2.addWeighted(base, 0.6, colored, 0.4, 0)
    write_image(path, overlay)


def verify_traceability(bank: MemoryBank, few, weights: WeightSet,
                        cfg_e: ExtractorConfig) -> float:
    """Max abs difference between stored vectors and the features recomputed
    from their recorded (image, cell) sources."""
    grids = _image_grids(few, weights, cfg_e)
    worst = 0.0
    for vec, (img_id, i, j) in zip(bank.vectors, bank.source_index):
        ref = grids[img_id][i, j]
        worst = max(worst, float(np.abs(ref.astype(np.float64) - vec.astype(np.float64)).max()))
    return worst
