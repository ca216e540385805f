"""Command-line entry points.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mcgcn import checkpoint, config, datasynth, training
from mcgcn.config import ConfigError, RunConfig

log = logging.getLogger("mcgcn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
LOG_FILE = "train_log.jsonl"
CONFIG_FILE = "config.json"


def _dataset_dir(run: RunConfig, override=None) -> Path:
    return Path(override if override is not None else run.paths.dataset)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate(args) -> int:
    run = config.load(args.config)
    out = Path(args.out)
    training.generate(run, out)
    print(f"wrote {out / training.GRAPHS_FILE} and {out / training.SPLIT_FILE}")
    return EXIT_OK


def train_to(run: RunConfig, data: training.Dataset, out: Path) -> training.TrainResult:
    """Train and write checkpoint, per-step log and the resolved config into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    res = training.train(run, data, log_path=out / LOG_FILE)
    extra = {"task_mode": run.task_mode, "graph_mode": run.graph_mode, "dataset": data.split.get("config", {})}
    if res.gradnorm is not None:
        extra["task_weights"] = res.gradnorm.w.tolist()
    checkpoint.save(out, res.model_cfg, res.params, run.seed, extra)
    (out / CONFIG_FILE).write_text(run.to_json() + "\n", encoding="utf-8")
    return res


def cmd_train(args) -> int:
    run = config.load(args.config)
    data = training.load_dataset(_dataset_dir(run, args.data))
    out = Path(args.out)
    train_to(run, data, out)
    print(f"wrote checkpoint to {out}")
    return EXIT_OK


def evaluate_checkpoint(ckpt, data: training.Dataset, split: str) -> dict:
    cfg, params, manifest = checkpoint.load(ckpt)
    training.check_compatible(cfg, manifest, data)
    report = training.evaluate(cfg, params, data.subset(split))
    report["split"] = split
    return report


def cmd_eval(args) -> int:
    data = training.load_dataset(args.data)
    report = evaluate_checkpoint(args.checkpoint, data, args.split)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def ablation_grid(run: RunConfig):
    a = run.ablation
    return [(t, g, d) for t in a.task_modes for g in a.graph_modes for d in a.depths]


def cell_config(run: RunConfig, task_mode: str, graph_mode: str, depth: int, seed: int | None = None) -> RunConfig:
    cell = copy.deepcopy(run)
    cell.task_mode, cell.graph_mode, cell.model.depth = task_mode, graph_mode, depth
    if seed is not None:
        cell.seed = seed
    return cell.validate()


def run_ablation(run: RunConfig, out: Path, data: training.Dataset | None = None) -> list:
    """Train and evaluate every grid cell; returns one row per cell.

    With ``ablation.seeds`` set, each seed regenerates the dataset and the
    row reports the mean over seeds. Otherwise every cell shares ``data``
    (loaded from ``paths.dataset`` when not given) and ``run.seed``.
    """
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(run.ablation.seeds) or [None]
    datasets = {}
    for s in seeds:
        if s is None:
            datasets[s] = data if data is not None else training.load_dataset(_dataset_dir(run))
        else:
            seeded = copy.deepcopy(run)
            seeded.seed = s
            clusters, manifest = datasynth.generate_dataset(seeded.generator_config())
            datasets[s] = training.dataset_from_clusters(clusters, manifest, seeded)
    rows = []
    for task_mode, graph_mode, depth in ablation_grid(run):
        per_seed = []
        for s in seeds:
            cell = cell_config(run, task_mode, graph_mode, depth, s)
            res = training.train(cell, datasets[s])
            rep = training.evaluate(res.model_cfg, res.params, datasets[s].subset("test"))
            per_seed.append(rep)
            log.info("%s/%s/depth %d seed %s: %s", task_mode, graph_mode, depth, s, rep["distribution_auc"])
        row = {
            "task_mode": task_mode,
            "graph_mode": graph_mode,
            "depth": depth,
            "seeds": [cell_config(run, task_mode, graph_mode, depth, s).seed for s in seeds],
        }
        for key in ("distribution_auc", "morphology_auc"):
            vals = [r[key] for r in per_seed]
            row[key] = None if any(v is None for v in vals) else float(np.mean(vals))
            row[key + "_per_seed"] = vals
        rows.append(row)
    _write_json(out / "ablation.json", rows)
    (out / "ablation.md").write_text(ablation_markdown(rows), encoding="utf-8")
    return rows


def ablation_markdown(rows) -> str:
    def fmt(v):
        return "n/a" if v is None else f"{v:.3f}"

    lines = ["| task | graph | depth | distribution AUC | morphology AUC |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['task_mode']} | {r['graph_mode']} | {r['depth']} | {fmt(r['distribution_auc'])} | {fmt(r['morphology_auc'])} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    run = config.load(args.config)
    rows = run_ablation(run, Path(args.out), training.load_dataset(_dataset_dir(run, args.data)) if not run.ablation.seeds else None)
    print(ablation_markdown(rows), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcgcn", description="Multi-task graph networks for calcification clusters.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="dataset directory (default: paths.dataset)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metrics report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the ablation grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--data", help="dataset directory (default: paths.dataset)")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, training.CompatibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
