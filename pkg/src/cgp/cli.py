"""Command line entry point: ``cgp {prepare,train,sweep,report}``.

Run configs are flat JSON documents whose keys mirror TrainConfig, plus one
data source (``"dataset": <dir>`` or ``"sbm": {...}``) and, for sweeps,
``grid_w`` / ``grid_a`` / ``grid_x`` / ``repeats``.

Exit codes: 0 success, 2 configuration or validation error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .graph_io import DatasetError, SbmConfig, edge_homophily, generate_sbm, load_dataset, save_dataset
from .models import save_checkpoint
from .sparsifier import write_mask_tsv
from .trainer import ConfigError, TrainConfig, TrainingDiverged, train

log = logging.getLogger("cgp")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

METRICS_HEADER = ["epoch", "train_loss", "train_acc", "val_acc", "test_acc",
                  "sparsity_w", "sparsity_a", "sparsity_x", "event"]
SUMMARY_HEADER = ["p_w", "p_a", "p_x", "seed", "test_acc", "inference_macs",
                  "training_flops", "status"]
SWEEP_KEYS = ("grid_w", "grid_a", "grid_x", "repeats")
SOURCE_KEYS = ("dataset", "sbm")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def read_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a JSON object")
    return doc


def sbm_config(doc: dict) -> SbmConfig:
    try:
        return SbmConfig(**doc)
    except TypeError as exc:
        raise CliError(f"bad sbm config: {exc}") from None
    except ValueError as exc:
        raise CliError(str(exc)) from None


def load_source(doc: dict):
    present = [k for k in SOURCE_KEYS if k in doc]
    if len(present) != 1:
        raise CliError("config needs exactly one data source: 'dataset' or 'sbm'")
    try:
        if present[0] == "dataset":
            return load_dataset(doc["dataset"])
        return generate_sbm(sbm_config(doc["sbm"]))
    except DatasetError as exc:
        raise CliError(str(exc)) from None


def train_config(doc: dict, seed=None) -> TrainConfig:
    flat = {k: v for k, v in doc.items() if k not in SOURCE_KEYS + SWEEP_KEYS}
    if seed is not None:
        flat["seed"] = seed
    try:
        return TrainConfig.from_dict(flat)
    except (ConfigError, TypeError) as exc:
        raise CliError(str(exc)) from None


def write_run(out: Path, doc: dict, report) -> None:
    """Metrics, report, masks, checkpoint and config echo for one run."""
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in report.records:
            row = dataclasses.asdict(r)
            row["event"] = int(row["event"])
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k]
                        for k in METRICS_HEADER])
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True),
                                     encoding="utf-8")
    best = report.best_state
    masks = out / "masks"
    masks.mkdir(exist_ok=True)
    for wt in best["model"].weights:
        write_mask_tsv(masks / f"weight_{wt.name}.tsv", wt.mask, wt.values)
    write_mask_tsv(masks / "edge.tsv", best["edge_mask"].active, best["edge_mask"].values)
    write_mask_tsv(masks / "feature.tsv", best["feature_mask"].active,
                   best["feature_mask"].values)
    save_checkpoint(out / "checkpoint.json", best["model"], best["edge_mask"],
                    best["feature_mask"], meta={"epoch": report.best_epoch})
    echo = {k: v for k, v in doc.items() if k in SOURCE_KEYS}
    echo.update(report.config)  # effective config, after any CGP_PRECISION override
    (out / "config.json").write_text(json.dumps(echo, indent=1, sort_keys=True), encoding="utf-8")


def cmd_prepare(args) -> int:
    doc = read_config(args.config)
    cfg = sbm_config(doc.get("sbm", doc))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    g, splits = generate_sbm(cfg)
    out = Path(args.out)
    try:
        save_dataset(out, g, splits)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}") from None
    h = edge_homophily(g) if g.n_arcs else float("nan")
    print(f"nodes={g.n_nodes} arcs={g.n_arcs} features={g.d} classes={g.n_classes} "
          f"homophily={h:.4f} train={splits.train_idx.size} val={splits.val_idx.size} "
          f"test={splits.test_idx.size}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = read_config(args.config)
    cfg = train_config(doc, args.seed)
    g, splits = load_source(doc)
    try:
        report = train(g, splits, cfg)
    except ConfigError as exc:
        raise CliError(str(exc)) from None
    except TrainingDiverged as exc:
        raise CliError(f"training diverged at epoch {exc.epoch}: {exc}", EXIT_DIVERGED) from None
    write_run(Path(args.out), doc, report)
    print(f"best epoch {report.best_epoch}: val {report.best_val_acc:.4f} "
          f"test {report.test_acc_at_best:.4f}")
    return EXIT_OK


def _sweep_point(job):
    doc, cfg, out = job
    g, splits = load_source(doc)
    row = {"p_w": cfg.target_w, "p_a": cfg.target_a, "p_x": cfg.target_x, "seed": cfg.seed}
    try:
        report = train(g, splits, cfg)
        write_run(Path(out), doc, report)
        row.update(test_acc=report.test_acc_at_best,
                   inference_macs=report.inference_cost.total_macs,
                   training_flops=report.training_flops, status="ok")
    except (ConfigError, TrainingDiverged) as exc:
        row.update(test_acc="", inference_macs="", training_flops="",
                   status=f"failed: {exc}".replace("\n", " "))
    return row


def sweep_jobs(doc: dict, out: Path, seed_base=None) -> list:
    grids = [doc.get(k, [doc.get(t, 0.0)]) for k, t in
             (("grid_w", "target_w"), ("grid_a", "target_a"), ("grid_x", "target_x"))]
    repeats = doc.get("repeats", 1)
    if any(not isinstance(gr, list) or not gr for gr in grids) or repeats < 1:
        raise CliError("sweep grid is empty")
    base = seed_base if seed_base is not None else doc.get("seed", 0)
    jobs = []
    for p_w, p_a, p_x in itertools.product(*grids):
        for k in range(repeats):
            cfg = train_config(doc, base + k)
            cfg = dataclasses.replace(cfg, target_w=p_w, target_a=p_a, target_x=p_x)
            try:
                cfg.validate()
            except ConfigError as exc:
                raise CliError(str(exc)) from None
            name = f"w{p_w}_a{p_a}_x{p_x}_s{cfg.seed}"
            jobs.append((doc, cfg, out / "runs" / name))
    return jobs


def cmd_sweep(args) -> int:
    doc = read_config(args.config)
    out = Path(args.out)
    jobs = sweep_jobs(doc, out, args.seed)
    load_source(doc)  # fail fast on a bad data source
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, SUMMARY_HEADER)
        w.writeheader()
        w.writerows(rows)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} runs, {failed} failed -> {out / 'summary.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    """summary.csv -> long format (one metric value per row) for plotting."""
    src = Path(args.summary)
    try:
        with src.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise CliError(f"{src}: not found") from None
    if rows and set(SUMMARY_HEADER) - set(rows[0]):
        raise CliError(f"{src}: not a sweep summary (missing columns)")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["p_w", "p_a", "p_x", "seed", "metric", "value"])
        for r in rows:
            if r["status"] != "ok":
                continue
            for m in ("test_acc", "inference_macs", "training_flops"):
                w.writerow([r["p_w"], r["p_a"], r["p_x"], r["seed"], m, r[m]])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgp", description="Gradual co-pruning of GNN weights, edges and features.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="generate an SBM dataset directory")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="one training run")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="grid of sparsity targets x repeats")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, help="seed base; repeat k uses base + k")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="summary.csv to long-format CSV")
    sp.add_argument("summary")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cgp {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
