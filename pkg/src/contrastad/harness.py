"""Few-shot experiment protocol: splits, end-to-end runs, AUROC, ablations.

A run is: sample K healthy shots -> synthesize the training corpus ->
fine-tune the extractor -> build the memory bank from the K shots only ->
score the held-out test split -> report image AUROC (reweighted and raw).
Every run writes a manifest with the resolved config, seeds, and weight
fingerprints; a hygiene guard forbids reads of test files before scoring.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import subprocess
import time
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import io as cio
from .bank import MemoryBank, Scorer, build_bank, calibrate_tau, save_heatmap_overlay
from .exceptions import ConfigurationError, DataError
from .extractor import ExtractorConfig, WeightSet, initial_weights
from .phantom import phantom_pool, phantom_test_set, test_defect_spec
from .synth import AugmentConfig, DefectSpec, build_pair_dataset
from .trainer import EpochStats, TrainConfig, train_stage1

logger = logging.getLogger(__name__)


def split_few_shot(healthy_pool, k: int, seed: int):
    """Uniform K-shot sample without replacement; returns (few, discarded)."""
    n = len(healthy_pool)
    if n < k:
        raise DataError(f"pool of {n} images cannot supply {k} shots")
    rng = np.random.default_rng(seed)
    idx = set(int(i) for i in rng.choice(n, size=k, replace=False))
    few = [healthy_pool[i] for i in sorted(idx)]
    discarded = [healthy_pool[i] for i in range(n) if i not in idx]
    return few, discarded


def auroc(scores, labels) -> float:
    """Rank-based image AUROC (Mann-Whitney U with midrank tie handling).

    `labels` are truthy for anomalous samples; both classes must be present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    lab = np.asarray([bool(l) for l in labels])
    if scores.shape != lab.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(lab.sum())
    n_neg = int((~lab).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC undefined: both classes must be present")
    ranks = rankdata(scores)
    u = ranks[lab].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class PhantomSettings:
    pool_size: int = 20
    test_healthy: int = 16
    test_anomalous: int = 16


@dataclass
class ExperimentConfig:
    """Everything one end-to-end run needs, JSON round-trippable."""

    k_shots: int = 2
    seed: int = 0
    image_size: int = 256
    data_dir: str | None = None             # real data; None -> phantom images
    phantom: PhantomSettings = field(default_factory=PhantomSettings)
    n_normal_aug: int = 16
    n_anomalous: int = 16
    defect: DefectSpec = field(default_factory=DefectSpec)
    test_defect: DefectSpec | None = None   # None -> phantom.test_defect_spec()
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    use_ssl: bool = True
    use_koleo: bool = True
    skip_stage1: bool = False               # frozen-backbone baseline path
    sampling_ratio: float = 0.10
    k_neighbors: int = 9
    tau_quantile: float = 0.99
    n_heatmaps: int = 4
    pretrained_source: str | None = None

    def __post_init__(self):
        if self.k_shots < 1:
            raise ConfigurationError("k_shots must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extractor"] = self.extractor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        for key, typ in (("phantom", PhantomSettings), ("defect", DefectSpec),
                         ("test_defect", DefectSpec), ("augment", AugmentConfig),
                         ("train", TrainConfig)):
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                for k, v in sub.items():
                    if isinstance(v, list):
                        sub[k] = tuple(v)
                if typ is TrainConfig:
                    from .losses import AnchorParams, SfaParams, TritanhParams
                    for pkey, ptyp in (("tritanh", TritanhParams), ("anchor", AnchorParams),
                                       ("sfa", SfaParams)):
                        if isinstance(sub.get(pkey), dict):
                            sub[pkey] = ptyp(**sub[pkey])
                d[key] = typ(**sub)
        if isinstance(d.get("extractor"), dict):
            d["extractor"] = ExtractorConfig.from_dict(d["extractor"])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class MetricsReport:
    auroc: float
    auroc_raw: float
    scores: list[float]
    raw_scores: list[float]
    labels: list[int]
    tau_reference: float
    config: dict
    config_hash: str
    git_describe: str
    snapshot_id: str
    weights_fingerprint: str
    runtime_seconds: float

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, default=str))


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=Path(__file__).resolve().parent, check=True,
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip()
    except Exception:
        return "unknown"


def _load_real_data(cfg: ExperimentConfig):
    root = Path(cfg.data_dir)
    train_paths = sorted((root / "train" / "good").glob("*.png"))
    test_good = sorted((root / "test" / "good").glob("*.png"))
    test_bad = sorted((root / "test" / "bad").glob("*.png"))
    if not train_paths:
        raise DataError(f"no healthy training images under {root / 'train' / 'good'}")
    if not test_good or not test_bad:
        raise DataError("test split needs both good/ and bad/ images")
    return train_paths, test_good, test_bad


def _resolve_sub_seeds(seed: int) -> dict[str, int]:
    rng = np.random.default_rng(seed)
    names = ("pool", "split", "synth", "init", "train", "bank", "test")
    return {n: int(s) for n, s in zip(names, rng.integers(0, 2**31 - 1, size=len(names)))}


def run_experiment(cfg: ExperimentConfig, out_dir=None,
                   init: WeightSet | None = None) -> MetricsReport:
    """Execute one full run and return its metrics report.

    With `out_dir` set, also writes report.json, manifest.json, the epoch
    stats CSV, final weights, the bank file, and a few heatmap overlays.
    When a stage fails, the stage name and partial state are serialized
    before the exception propagates.
    """
    t0 = time.time()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    seeds = _resolve_sub_seeds(cfg.seed)
    stage = "setup"
    state: dict = {"completed": []}

    train_cfg = replace(cfg.train, seed=seeds["train"])
    sfa = train_cfg.sfa
    if not cfg.use_ssl:
        sfa = replace(sfa, gamma1=0.0)
    if not cfg.use_koleo:
        sfa = replace(sfa, gamma2=0.0)
    train_cfg = replace(train_cfg, sfa=sfa)

    try:
        stage = "split"
        forbidden: list[Path] = []
        if cfg.data_dir is not None:
            train_paths, test_good, test_bad = _load_real_data(cfg)
            forbidden = list(test_good) + list(test_bad)
            few_paths, _ = split_few_shot(train_paths, cfg.k_shots, seeds["split"])
            with cio.hygiene_guard(forbidden):
                few = [cio.read_image(p) for p in few_paths]
            test_items = [(p, 0) for p in test_good] + [(p, 1) for p in test_bad]
        else:
            pool = phantom_pool(cfg.phantom.pool_size, cfg.image_size, seeds["pool"])
            few, _ = split_few_shot(pool, cfg.k_shots, seeds["split"])
            tset = phantom_test_set(cfg.phantom.test_healthy, cfg.phantom.test_anomalous,
                                    cfg.image_size, seeds["test"],
                                    cfg.test_defect or test_defect_spec())
            test_items = [(img, 0) for img in tset.healthy] + [(img, 1) for img in tset.anomalous]
        state["completed"].append("split")

        with cio.hygiene_guard(forbidden):
            stage = "init-weights"
            if init is None:
                init = initial_weights(cfg.extractor, seed=seeds["init"],
                                       pretrained_source=cfg.pretrained_source)
            state["completed"].append("init-weights")

            if cfg.skip_stage1:
                weights, stats = init, []
            else:
                stage = "synth"
                ds = build_pair_dataset(few, cfg.n_normal_aug, cfg.n_anomalous,
                                        cfg.defect, seeds["synth"], cfg.augment)
                state["completed"].append("synth")

                stage = "train"
                stats_csv = out_dir / "epoch_stats.csv" if out_dir else None
                weights, stats = train_stage1(ds, cfg.extractor, train_cfg, init=init,
                                              stats_csv=stats_csv, checkpoint_dir=out_dir)
                state["completed"].append("train")

            stage = "bank"
            bank = build_bank(few, weights, cfg.extractor, cfg.sampling_ratio,
                              seed=seeds["bank"], k_neighbors=cfg.k_neighbors)
            state["completed"].append("bank")

        stage = "score"
        scorer = Scorer(bank, weights, cfg.extractor)
        scores, raw_scores, labels = [], [], []
        maps = []
        for item, label in test_items:
            img = cio.read_image(item) if isinstance(item, (str, Path)) else item
            amap = scorer.score(img)
            scores.append(amap.image_score)
            raw_scores.append(amap.raw_image_score)
            labels.append(label)
            maps.append((img, amap, label))
        healthy_scores = [s for s, l in zip(scores, labels) if l == 0]
        tau_ref = calibrate_tau(healthy_scores, cfg.tau_quantile)
        report = MetricsReport(
            auroc=auroc(scores, labels),
            auroc_raw=auroc(raw_scores, labels),
            scores=scores, raw_scores=raw_scores, labels=labels,
            tau_reference=tau_ref,
            config=cfg.to_dict(), config_hash=cfg.config_hash(),
            git_describe=git_describe(),
            snapshot_id=weights.snapshot_id,
            weights_fingerprint=weights.fingerprint().hex(),
            runtime_seconds=time.time() - t0,
        )
        state["completed"].append("score")
    except Exception as exc:
        logger.error("run failed in stage %r: %s", stage, exc)
        if out_dir:
            (out_dir / "partial_state.json").write_text(json.dumps(
                {"failed_stage": stage, "completed": state["completed"],
                 "error": f"{type(exc).__name__}: {exc}",
                 "config": cfg.to_dict()}, indent=2, default=str))
        raise

    if out_dir:
        report.save(out_dir / "report.json")
        weights.save(out_dir / "weights.cadw")
        bank.save(out_dir / "bank.cslt")
        manifest = {
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "sub_seeds": seeds,
            "snapshot_id": weights.snapshot_id,
            "weights_fingerprint": weights.fingerprint().hex(),
            "bank_fingerprint": bank.extractor_fingerprint.hex(),
            "git_describe": report.git_describe,
            "ssl_sampling": {"max_cells": 4096, "sample_seed": train_cfg.seed},
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
        shown = 0
        for img, amap, label in maps:
            if label == 1 and shown < cfg.n_heatmaps:
                save_heatmap_overlay(img, amap, out_dir / f"heatmap_{shown:02d}.png")
                shown += 1
    return report


_SWITCH_KEYS = ("loss", "use_ssl", "use_koleo", "attention", "activation", "depth", "k_shots")


def apply_switch(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    if key == "loss":
        return replace(cfg, train=replace(cfg.train, loss=value))
    if key == "use_ssl":
        return replace(cfg, use_ssl=bool(value))
    if key == "use_koleo":
        return replace(cfg, use_koleo=bool(value))
    if key == "attention":
        return replace(cfg, extractor=replace(cfg.extractor, use_attention=bool(value)))
    if key == "activation":
        return replace(cfg, extractor=replace(cfg.extractor, activation=value))
    if key == "depth":
        return replace(cfg, extractor=replace(cfg.extractor, backbone_depth=int(value)))
    if key == "k_shots":
        return replace(cfg, k_shots=int(value))
    raise ConfigurationError(f"unknown ablation switch {key!r} (known: {_SWITCH_KEYS})")


def sweep_ablation(base: ExperimentConfig, grid, out_dir=None):
    """One run per ablation cell, failures recorded without stopping the sweep.

    `grid` is either a dict of switch name -> list of values (cartesian
    product) or an explicit list of {switch: value} cells. Returns
    [(switches, report_or_None, status)] and, with `out_dir`, writes a
    long-format summary CSV (one row per cell)."""
    if isinstance(grid, dict):
        keys = list(grid)
        cells = [dict(zip(keys, combo))
                 for combo in itertools.product(*(grid[k] for k in keys))]
    else:
        cells = [dict(cell) for cell in grid]
        keys = sorted({k for cell in cells for k in cell})
    for cell in cells:
        for k in cell:
            if k not in _SWITCH_KEYS:
                raise ConfigurationError(f"unknown ablation switch {k!r}")
    results = []
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for i, switches in enumerate(cells):
        cfg = base
        for k, v in switches.items():
            cfg = apply_switch(cfg, k, v)
        cell_dir = out_dir / f"cell_{i:03d}" if out_dir else None
        try:
            report = run_experiment(cfg, out_dir=cell_dir)
            status = "ok"
        except Exception as exc:  # record, keep sweeping
            logger.warning("sweep cell %d failed: %s", i, exc)
            report, status = None, f"{type(exc).__name__}: {exc}"
        results.append((switches, report, status))
    if out_dir:
        with (out_dir / "sweep.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["cell"] + keys + ["auroc", "auroc_raw", "config_hash", "status"])
            for i, (switches, report, status) in enumerate(results):
                row = [i] + [switches.get(k, "") for k in keys]
                if report is not None:
                    row += [f"{report.auroc:.6f}", f"{report.auroc_raw:.6f}",
                            report.config_hash, status]
                else:
                    row += ["", "", "", status]
                w.writerow(row)
    return results


def write_phantom_tree(out_dir, pool_size: int, test_healthy: int, test_anomalous: int,
                       size: int, seed: int) -> Path:
    """Materialize a phantom dataset as the on-disk layout run_experiment reads."""
    out_dir = Path(out_dir)
    seeds = _resolve_sub_seeds(seed)
    pool = phantom_pool(pool_size, size, seeds["pool"])
    for i, img in enumerate(pool):
        cio.write_image(out_dir / "train" / "good" / f"{i:04d}.png", img)
    tset = phantom_test_set(test_healthy, test_anomalous, size, seeds["test"])
    for i, img in enumerate(tset.healthy):
        cio.write_image(out_dir / "test" / "good" / f"{i:04d}.png", img)
    for i, (img, mask) in enumerate(zip(tset.anomalous, tset.masks)):
        cio.write_image(out_dir / "test" / "bad" / f"{i:04d}.png", img)
        cio.write_mask(out_dir / "ground_truth" / "bad" / f"{i:04d}_mask.png", mask)
    return out_dir
