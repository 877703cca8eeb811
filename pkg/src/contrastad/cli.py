"""Command-line interface.

Subcommands: synth, train, build-bank, score, eval, sweep, phantom-gen.
Global flags: --config <json>, --seed, --out-dir. Exit codes: 0 ok,
2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .bank import MemoryBank, Scorer, build_bank, decide, save_heatmap_overlay
from .exceptions import ConfigurationError, DataError, NumericalError
from .extractor import WeightSet, initial_weights
from .harness import ExperimentConfig, run_experiment, split_few_shot, sweep_ablation, write_phantom_tree
from .io import read_image
from .synth import build_pair_dataset, load_dataset, save_dataset
from .trainer import train_stage1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrastad",
                                     description="Few-shot grayscale anomaly detection")
    parser.add_argument("--config", type=Path, help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", type=Path, default=Path("runs/out"),
                        help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="write a procedural phantom dataset tree")
    p.add_argument("--pool", type=int, default=20)
    p.add_argument("--test-healthy", type=int, default=16)
    p.add_argument("--test-anomalous", type=int, default=16)
    p.add_argument("--size", type=int, default=256)

    p = sub.add_parser("synth", help="synthesize the stage-1 training corpus")
    p.add_argument("--few-dir", type=Path, required=True,
                   help="directory of healthy PNG shots")

    p = sub.add_parser("train", help="stage-1 fine-tuning on a synthesized corpus")
    p.add_argument("--dataset-dir", type=Path, required=True,
                   help="corpus directory written by `synth`")

    p = sub.add_parser("build-bank", help="build the coreset memory bank")
    p.add_argument("--few-dir", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)

    p = sub.add_parser("score", help="score query images against a bank")
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("images", nargs="+", type=Path)

    sub.add_parser("eval", help="full experiment: split/synth/train/bank/score")

    p = sub.add_parser("sweep", help="ablation sweep over config switches")
    p.add_argument("--grid", type=Path, required=True,
                   help="JSON dict of switch name -> list of values")

    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _read_few_dir(few_dir: Path):
    paths = sorted(few_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG images in {few_dir}")
    return [read_image(p) for p in paths]


def _cmd_phantom_gen(args, cfg: ExperimentConfig) -> int:
    write_phantom_tree(args.out_dir, args.pool, args.test_healthy,
                       args.test_anomalous, args.size, cfg.seed)
    print(f"phantom dataset written to {args.out_dir}")
    return 0


def _cmd_synth(args, cfg: ExperimentConfig) -> int:
    few = _read_few_dir(args.few_dir)
    ds = build_pair_dataset(few, cfg.n_normal_aug, cfg.n_anomalous,
                            cfg.defect, cfg.seed, cfg.augment)
    manifest = save_dataset(ds, args.out_dir)
    print(f"synthesized corpus: {len(ds.normals)} normals, {len(ds.anomalous)} "
          f"defects -> {manifest}")
    return 0


def _cmd_train(args, cfg: ExperimentConfig) -> int:
    ds = load_dataset(args.dataset_dir)
    init = initial_weights(cfg.extractor, seed=cfg.seed,
                           pretrained_source=cfg.pretrained_source)
    weights, stats = train_stage1(ds, cfg.extractor, replace(cfg.train, seed=cfg.seed),
                                  init=init, stats_csv=args.out_dir / "epoch_stats.csv",
                                  checkpoint_dir=args.out_dir)
    weights.save(args.out_dir / "weights.cadw")
    last = stats[-1].total if stats else float("nan")
    print(f"trained {cfg.train.epochs} epochs (final loss {last:.4f}) "
          f"-> {args.out_dir / 'weights.cadw'}")
    return 0


def _cmd_build_bank(args, cfg: ExperimentConfig) -> int:
    few = _read_few_dir(args.few_dir)
    weights = WeightSet.load(args.weights)
    bank = build_bank(few, weights, weights.config, cfg.sampling_ratio,
                      seed=cfg.seed, k_neighbors=cfg.k_neighbors)
    path = args.out_dir / "bank.cslt"
    bank.save(path)
    print(f"bank with {len(bank.vectors)} vectors (D={bank.dim}) -> {path}")
    return 0


def _cmd_score(args, cfg: ExperimentConfig) -> int:
    weights = WeightSet.load(args.weights)
    bank = MemoryBank.load(args.bank)
    scorer = Scorer(bank, weights, weights.config)
    results = []
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        img = read_image(path)
        amap = scorer.score(img)
        entry = {"image": str(path), "score": amap.image_score,
                 "raw_score": amap.raw_image_score}
        if args.tau is not None:
            entry["is_anomaly"] = decide(amap, args.tau).is_anomaly
        results.append(entry)
        save_heatmap_overlay(img, amap, args.out_dir / f"{path.stem}_heatmap.png")
    out = args.out_dir / "scores.json"
    out.write_text(json.dumps(results, indent=2))
    print(f"scored {len(results)} images -> {out}")
    return 0


def _cmd_eval(args, cfg: ExperimentConfig) -> int:
    report = run_experiment(cfg, out_dir=args.out_dir)
    print(f"image AUROC: {report.auroc:.4f} (raw variant {report.auroc_raw:.4f}) "
          f"-> {args.out_dir / 'report.json'}")
    return 0


def _cmd_sweep(args, cfg: ExperimentConfig) -> int:
    grid = json.loads(args.grid.read_text())
    results = sweep_ablation(cfg, grid, out_dir=args.out_dir)
    ok = sum(1 for _, _, status in results if status == "ok")
    print(f"sweep finished: {ok}/{len(results)} cells ok -> {args.out_dir / 'sweep.csv'}")
    return 0 if ok == len(results) else 4


_COMMANDS = {
    "phantom-gen": _cmd_phantom_gen,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "build-bank": _cmd_build_bank,
    "score": _cmd_score,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return _COMMANDS[args.command](args, cfg)
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
