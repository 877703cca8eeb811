"""Stage-1 fine-tuning loop.

Draws anchor/positive/negative triples from the synthesized corpus, computes
the contrastive + feature-adversarial objective on aggregated patch grids,
and updates every unfrozen extractor parameter (trunk and attention) with
Adam. Losses are averaged over batches of independent triples.
"""

from __future__ import annotations

import csv
import logging
import tempfile
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigurationError, DefectVanished, NumericalError
from .extractor import ExtractorConfig, WeightSet, aggregate_batch, build_extractor, initial_weights
from .losses import (AnchorParams, ContrastiveDistances, SfaParams, TritanhParams,
                     anchor_loss, koleo_loss, masked_distances, ssl_loss, tritanh_loss)
from .synth import PairedDataset

logger = logging.getLogger(__name__)

STATS_COLUMNS = ("epoch", "total", "tritanh", "ssl", "koleo",
                 "d_pull", "d_push", "grad_norm", "seconds")


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    iters_per_epoch: int = 32
    seed: int = 0
    loss: str = "tritanh"                   # "tritanh" | "anchor" (ablation)
    tritanh: TritanhParams = field(default_factory=TritanhParams)
    anchor: AnchorParams = field(default_factory=AnchorParams)
    sfa: SfaParams = field(default_factory=SfaParams)
    frozen_prefix: tuple[str, ...] = ()     # parameter-name prefixes excluded from updates
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.iters_per_epoch < 1:
            raise ConfigurationError("batch_size and iters_per_epoch must be >= 1")
        if self.loss not in ("tritanh", "anchor"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")


@dataclass
class EpochStats:
    epoch: int
    total: float
    tritanh: float
    ssl: float
    koleo: float
    d_pull: float
    d_push: float
    grad_norm: float
    seconds: float
    n_skipped: int = 0

    def row(self) -> list:
        return [getattr(self, c) for c in STATS_COLUMNS]


def sample_triple(ds: PairedDataset, rng: np.random.Generator):
    """(anchor, positive, (negative, mask)): anchor uniform over the original
    shots, positive uniform over the remaining normals, negative uniform over
    the defect set."""
    a, p, n = _sample_triple_indices(ds, rng)
    return ds.originals[a], ds.normals[p], ds.anomalous[n]


def _sample_triple_indices(ds: PairedDataset, rng: np.random.Generator) -> tuple[int, int, int]:
    n_norm = len(ds.normals)
    if n_norm < 2:
        raise ConfigurationError("need at least 2 normal images to form a triple")
    if not ds.anomalous:
        raise ConfigurationError("need at least one defect image")
    a = int(rng.integers(len(ds.originals)))
    p = int(rng.integers(n_norm - 1))
    if p >= a:  # anchor sits in normals[:len(few)]; skip it
        p += 1
    n = int(rng.integers(len(ds.anomalous)))
    return a, p, n


def mask_to_grid(mask: np.ndarray, grid_shape: tuple[int, int]) -> np.ndarray:
    """Max-pool downsample: a grid cell is true iff any covered pixel is true."""
    h, w = mask.shape
    hf, wf = grid_shape
    rows = (np.arange(h) * hf) // h
    cols = (np.arange(w) * wf) // w
    out = np.zeros((hf, wf), dtype=bool)
    idx = np.argwhere(mask)
    if idx.size:
        out[rows[idx[:, 0]], cols[idx[:, 1]]] = True
    return out


def _dump_batch(diag_dir, epoch, it, anchors, positives, negatives, masks) -> Path:
    diag_dir = Path(diag_dir) if diag_dir else Path(tempfile.gettempdir())
    diag_dir.mkdir(parents=True, exist_ok=True)
    path = diag_dir / f"nan_batch_e{epoch}_i{it}.npz"
    np.savez_compressed(path, anchors=np.stack(anchors), positives=np.stack(positives),
                        negatives=np.stack(negatives), masks=np.stack(masks))
    return path


def train_stage1(ds: PairedDataset, cfg_e: ExtractorConfig, cfg_t: TrainConfig,
                 init: WeightSet | None = None, stats_csv=None,
                 checkpoint_dir=None) -> tuple[WeightSet, list[EpochStats]]:
    """Fine-tune the extractor on the synthesized corpus.

    Returns the final weights and per-epoch statistics. Deterministic up to
    platform floating point given `cfg_t.seed`. Triples whose defect mask
    vanishes at grid resolution are skipped and counted. A non-finite loss
    aborts with a diagnostic dump of the offending batch.
    """
    if init is None:
        init = initial_weights(cfg_e, seed=cfg_t.seed)
    if cfg_t.epochs == 0:
        return init, []

    torch.manual_seed(cfg_t.seed)
    model = build_extractor(cfg_e, init)
    model.train()

    trainable = []
    for name, p in model.named_parameters():
        if any(name.startswith(pref) for pref in cfg_t.frozen_prefix):
            p.requires_grad_(False)
        else:
            trainable.append(p)
    if not trainable:
        raise ConfigurationError("frozen_prefix freezes every parameter")
    # Norm layers under a frozen prefix keep their running stats too, so the
    # whole prefix stays bit-identical across training.
    for name, module in model.named_modules():
        if isinstance(module, torch.nn.modules.batchnorm._BatchNorm) and \
                any(name.startswith(pref) for pref in cfg_t.frozen_prefix):
            module.eval()
    opt = torch.optim.Adam(trainable, lr=cfg_t.learning_rate, betas=cfg_t.betas)

    use_tritanh = cfg_t.loss == "tritanh"
    stats: list[EpochStats] = []
    writer = None
    if stats_csv is not None:
        stats_csv = Path(stats_csv)
        stats_csv.parent.mkdir(parents=True, exist_ok=True)
        writer = stats_csv.open("w", newline="")
        csv.writer(writer).writerow(STATS_COLUMNS)

    try:
        for epoch in range(cfg_t.epochs):
            t0 = time.time()
            acc = {k: [] for k in ("total", "tritanh", "ssl", "koleo", "d_pull", "d_push", "grad")}
            skipped = 0
            # The triple schedule is a fixed function of the seed, replayed
            # every epoch: the synthesized corpus acts as a fixed dataset.
            rng = np.random.default_rng(cfg_t.seed)
            for it in range(cfg_t.iters_per_epoch):
                idx = [_sample_triple_indices(ds, rng) for _ in range(cfg_t.batch_size)]
                anchors = [ds.originals[a] for a, _, _ in idx]
                positives = [ds.normals[p] for _, p, _ in idx]
                negatives = [ds.anomalous[n][0] for _, _, n in idx]
                masks = [ds.anomalous[n][1] for _, _, n in idx]

                batch = np.stack(anchors + positives + negatives).astype(np.float32)
                maps, _ = model(torch.from_numpy(batch))
                emb = aggregate_batch(maps, cfg_e.patch_neighborhood)   # (3B, D, Hf, Wf)
                grids = emb.permute(0, 2, 3, 1)                          # (3B, Hf, Wf, D)
                b = cfg_t.batch_size
                grid_shape = (grids.shape[1], grids.shape[2])

                losses, comp = [], {k: [] for k in ("tritanh", "ssl", "koleo", "d_pull", "d_push")}
                for i in range(b):
                    try:
                        d = masked_distances(grids[i], grids[b + i], grids[2 * b + i],
                                             mask_to_grid(masks[i], grid_shape))
                    except DefectVanished:
                        skipped += 1
                        continue
                    contrast = tritanh_loss(d, cfg_t.tritanh) if use_tritanh \
                        else anchor_loss(d, cfg_t.anchor)
                    s = ssl_loss(grids[i], sample_seed=cfg_t.seed)
                    k = koleo_loss(grids[i], cfg_t.sfa)
                    losses.append(contrast + cfg_t.sfa.gamma1 * s + cfg_t.sfa.gamma2 * k)
                    comp["tritanh"].append(float(contrast.detach()))
                    comp["ssl"].append(float(s.detach()))
                    comp["koleo"].append(float(k.detach()))
                    comp["d_pull"].append(float(d.d_pull.detach()))
                    comp["d_push"].append(float(d.d_push.detach()))
                if not losses:
                    continue
                loss = torch.stack(losses).mean()
                if not torch.isfinite(loss):
                    path = _dump_batch(checkpoint_dir, epoch, it,
                                       anchors, positives, negatives, masks)
                    raise NumericalError(f"non-finite loss at epoch {epoch}; batch dumped to {path}")
                opt.zero_grad()
                loss.backward()
                grad_norm = torch.sqrt(sum((p.grad ** 2).sum() for p in trainable
                                           if p.grad is not None))
                opt.step()

                acc["total"].append(float(loss.detach()))
                acc["grad"].append(float(grad_norm))
                for key in comp:
                    acc[key].append(float(np.mean(comp[key])))

            def mean(key):
                return float(np.mean(acc[key])) if acc[key] else float("nan")

            st = EpochStats(epoch=epoch, total=mean("total"), tritanh=mean("tritanh"),
                            ssl=mean("ssl"), koleo=mean("koleo"), d_pull=mean("d_pull"),
                            d_push=mean("d_push"), grad_norm=mean("grad"),
                            seconds=time.time() - t0, n_skipped=skipped)
            stats.append(st)
            logger.info("epoch %d: total=%.4f d_pull=%.4f d_push=%.4f (%.1fs)",
                        epoch, st.total, st.d_pull, st.d_push, st.seconds)
            if writer is not None:
                csv.writer(writer).writerow(st.row())
                writer.flush()
            if cfg_t.checkpoint_every and checkpoint_dir and \
                    (epoch + 1) % cfg_t.checkpoint_every == 0:
                ws = WeightSet.from_model(model, snapshot_id=f"{init.snapshot_id}+epoch{epoch}")
                ws.save(Path(checkpoint_dir) / f"epoch_{epoch:03d}.weights")
    finally:
        if writer is not None:
            writer.close()

    model.eval()
    final = WeightSet.from_model(
        model, snapshot_id=f"{init.snapshot_id}+ft(seed={cfg_t.seed},epochs={cfg_t.epochs})")
    return final, stats


def stats_to_dicts(stats: list[EpochStats]) -> list[dict]:
    return [asdict(s) for s in stats]
