"""Command-line pipeline: generate, train, refine, evaluate, explain.

Each command reads one flat config file and works inside its
``output_dir``, so a whole experiment is reproducible from a single seed:

    xbl generate --config run.cfg
    xbl train    --config run.cfg
    xbl refine   --config run.cfg
    xbl evaluate --config run.cfg --checkpoint refined.xblw
    xbl explain  --config run.cfg --checkpoint refined.xblw --ids 0,3

Exit codes: 0 on success, 2 for configuration problems, 3 for dataset
problems (missing, malformed, or inconsistent data).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config, run_id
from .data import DatasetSplit, load_image_dir, save_split, generate_decoy_dataset
from .errors import ConfigError, ContractError, DatasetError, SelectionError, XBLError
from .exemplar import load_exemplars, select_exemplars
from .metrics import accuracy, dataset_ap
from .model import Classifier, build_classifier, freeze_layers
from .saliency import gradcam, save_triptych
from .train import fit, load_model, save_model
from .utils import atomic_write_text

__all__ = ["main", "cmd_generate", "cmd_train", "cmd_refine",
           "cmd_evaluate", "cmd_explain"]

UNREFINED = "unrefined.xblw"
REFINED = "refined.xblw"
EVAL_SPLITS = ("validation", "test_clean", "test_swapped")


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def _dataset_dir(cfg: RunConfig) -> Path:
    return _out(cfg) / "dataset"


def _load_dataset(cfg: RunConfig, where: str | Path | None = None) -> DatasetSplit:
    root = Path(where) if where is not None else _dataset_dir(cfg)
    if not root.is_dir():
        raise DatasetError(
            f"dataset directory {root} does not exist; run `xbl generate` first")
    return load_image_dir(root)


def _freeze_prefix_layers(model: Classifier, blocks: int) -> None:
    """Freeze the first ``blocks`` conv blocks (conv + relu + pool each)."""
    n_blocks = len(model.cfg.conv_channels)
    count = 0
    for i in range(blocks):
        count += 3 if i < n_blocks - 1 else 2
    freeze_layers(model, count)


def _metric_rows(cfg: RunConfig, model: Classifier, data: DatasetSplit) -> str:
    """One CSV row per split: run_id,split,accuracy,activation_precision,tau,seed.

    A split whose instances lack relevance masks gets an empty AP field
    rather than a fabricated zero.
    """
    tag = run_id(cfg)
    lines = ["run_id,split,accuracy,activation_precision,tau,seed"]
    for split in EVAL_SPLITS:
        instances = data.by_name(split)
        acc = accuracy(model, instances)
        if all(im.relevance_mask is not None for im in instances):
            ap = f"{dataset_ap(model, instances, cfg.tau):.6f}"
        else:
            ap = ""
        lines.append(f"{tag},{split},{acc:.6f},{ap},{cfg.tau},{cfg.seed}")
    return "\n".join(lines) + "\n"


def _write_metrics(cfg: RunConfig, model: Classifier, data: DatasetSplit,
                   path: Path) -> str:
    text = _metric_rows(cfg, model, data)
    atomic_write_text(path, text)
    return text


def cmd_generate(cfg: RunConfig, force: bool = False) -> Path:
    root = _dataset_dir(cfg)
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetError(
            f"dataset directory {root} is not empty; pass --force to overwrite")
    data = generate_decoy_dataset(cfg.decoy_spec(), seed=cfg.seed)
    save_split(root, data)
    for split in ("train", "validation", "test_clean", "test_swapped"):
        print(f"{split}: {len(data.by_name(split))} images")
    return root


def cmd_train(cfg: RunConfig) -> Path:
    data = _load_dataset(cfg)
    model = build_classifier(cfg.model_config())
    result = fit(model, data.train, data.validation, cfg,
                 epochs=cfg.epochs_unrefined, loss_mode="ce_only",
                 log_path=_out(cfg) / "train_log.csv", run_tag=run_id(cfg),
                 rng_tag="train")
    checkpoint = _out(cfg) / UNREFINED
    save_model(checkpoint, model)
    text = _write_metrics(cfg, model, data, _out(cfg) / "metrics_unrefined.csv")
    print(f"stopped after {len(result.records)} epochs "
          f"(best validation loss {result.best_val_loss:.6f} "
          f"at epoch {result.best_epoch})")
    print(text, end="")
    return checkpoint


def cmd_refine(cfg: RunConfig, checkpoint: str | Path | None = None,
               exemplar_policy: str = "auto",
               good_id: int | None = None, bad_id: int | None = None) -> Path:
    if cfg.loss_mode not in ("exbl", "rrr"):
        raise ConfigError(
            f"refinement needs loss_mode exbl or rrr, config says {cfg.loss_mode!r}")
    source = Path(checkpoint) if checkpoint is not None else _out(cfg) / UNREFINED
    if not source.exists():
        raise DatasetError(
            f"checkpoint {source} does not exist; run `xbl train` first")
    data = _load_dataset(cfg)
    model = load_model(source, build_classifier(cfg.model_config()))

    exemplars = None
    if cfg.loss_mode == "exbl":
        exemplars = select_exemplars(
            model, data.train, policy=exemplar_policy, tau=cfg.tau,
            good_id=good_id, bad_id=bad_id, out_dir=_out(cfg) / "exemplars")
    _freeze_prefix_layers(model, cfg.freeze_prefix)
    result = fit(model, data.train, data.validation, cfg,
                 epochs=cfg.epochs_refine, loss_mode=cfg.loss_mode,
                 exemplars=exemplars, log_path=_out(cfg) / "refine_log.csv",
                 run_tag=run_id(cfg), rng_tag="refine")
    out = _out(cfg) / REFINED
    save_model(out, model)
    text = _write_metrics(cfg, model, data, _out(cfg) / "metrics_refined.csv")
    print(f"stopped after {len(result.records)} epochs "
          f"(best validation loss {result.best_val_loss:.6f} "
          f"at epoch {result.best_epoch})")
    print(text, end="")
    return out


def cmd_evaluate(cfg: RunConfig, checkpoint: str | Path,
                 dataset_dir: str | Path | None = None,
                 out_path: str | Path | None = None) -> str:
    source = Path(checkpoint)
    if not source.exists():
        raise DatasetError(f"checkpoint {source} does not exist")
    data = _load_dataset(cfg, dataset_dir)
    model = load_model(source, build_classifier(cfg.model_config()))
    target = Path(out_path) if out_path is not None \
        else _out(cfg) / f"metrics_{source.stem}.csv"
    text = _write_metrics(cfg, model, data, target)
    print(text, end="")
    return text


def cmd_explain(cfg: RunConfig, checkpoint: str | Path, ids: list[int],
                split: str = "test_swapped",
                out_dir: str | Path | None = None) -> list[Path]:
    source = Path(checkpoint)
    if not source.exists():
        raise DatasetError(f"checkpoint {source} does not exist")
    data = _load_dataset(cfg)
    instances = data.by_name(split)
    model = load_model(source, build_classifier(cfg.model_config()))
    target = Path(out_dir) if out_dir is not None else _out(cfg) / "explain"
    written = []
    for idx in ids:
        if not 0 <= idx < len(instances):
            raise DatasetError(
                f"id {idx} outside split {split!r} of {len(instances)} images")
        image = instances[idx]
        heatmap = gradcam(model, image.pixels)
        path = target / f"panel_{split}_{source.stem}_{idx:04d}.pgm"
        save_triptych(path, image.pixels, heatmap)
        written.append(path)
        print(f"wrote {path} (predicted class {heatmap.source_class})")
    return written


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xbl",
        description="Train, refine and inspect decoy-dataset classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to key=value config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    g = sub.add_parser("generate", help="write the synthetic decoy dataset")
    common(g)
    g.add_argument("--force", action="store_true",
                   help="overwrite a non-empty dataset directory")

    t = sub.add_parser("train", help="train the unrefined classifier")
    common(t)

    r = sub.add_parser("refine", help="explanation-guided refinement")
    common(r)
    r.add_argument("--checkpoint", default=None,
                   help="starting weights (default: <output_dir>/unrefined.xblw)")
    r.add_argument("--exemplar-policy", choices=("auto", "manual"), default="auto")
    r.add_argument("--good-id", type=int, default=None)
    r.add_argument("--bad-id", type=int, default=None)

    e = sub.add_parser("evaluate", help="accuracy and activation precision per split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None, help="dataset directory override")
    e.add_argument("--out", default=None, help="metrics CSV path override")

    x = sub.add_parser("explain", help="write heatmap panels for chosen images")
    common(x)
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--ids", required=True,
                   help="comma-separated image indices within the split")
    x.add_argument("--split", default="test_swapped",
                   choices=("train", "validation", "test_clean", "test_swapped"))
    x.add_argument("--out", default=None, help="panel directory override")
    return parser


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(p) for p in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"bad --ids value {text!r}: {exc}") from exc


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        overrides = {} if args.seed is None else {"seed": args.seed}
        cfg = parse_config(args.config, overrides)
        if args.command == "generate":
            cmd_generate(cfg, force=args.force)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "refine":
            cmd_refine(cfg, checkpoint=args.checkpoint,
                       exemplar_policy=args.exemplar_policy,
                       good_id=args.good_id, bad_id=args.bad_id)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint, dataset_dir=args.data,
                         out_path=args.out)
        elif args.command == "explain":
            cmd_explain(cfg, args.checkpoint, _parse_ids(args.ids),
                        split=args.split, out_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, SelectionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (ContractError, XBLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
