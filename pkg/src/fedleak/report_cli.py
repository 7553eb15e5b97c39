"""Command-line front end: federate, attack, sweep, report, plot.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline
from .attack import AttackConfig, AttackError
from .config import ConfigError, DPSection, ExperimentConfig, load_config
from .defense import DPConfigError
from .ingest import DatasetError
from .metrics import bootstrap_ci

log = logging.getLogger("fedleak")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

METRIC_COLUMNS = ("client", "round", "sigma0", "ssim", "ssim_prior", "rdlv", "rdlv_lo", "rdlv_hi", "iip", "cosine", "dp")


class UsageError(Exception):
    """Bad command-line input; maps to exit code 2."""


# ---------------------------------------------------------------- helpers


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _dp_from_args(args) -> DPSection | None:
    if args.dp_mech is None:
        return None
    try:
        return DPSection(
            mechanism=args.dp_mech,
            sigma0=args.sigma0,
            q=args.q,
            clip_norm=args.clip_norm,
            noise_mult=args.noise_mult,
        )
    except Exception as exc:  # pydantic validation
        raise ConfigError(f"dp: {exc}") from None


def _attack_cfg(section, args, seed: int) -> AttackConfig:
    data = section.model_dump()
    if getattr(args, "iterations", None) is not None:
        data["iterations"] = args.iterations
    if getattr(args, "no_bn_loss", False):
        data["use_bn_loss"] = False
    if getattr(args, "no_global_ckpt", False):
        data["use_global_ckpt"] = False
    if getattr(args, "no_prior", False):
        data["use_prior"] = False
    if getattr(args, "restarts", None) is not None:
        data["restarts"] = args.restarts
    return AttackConfig(**data, seed=seed)


def dp_label(dp: dict) -> str:
    if dp["mechanism"] == "percentile_gaussian":
        return f"gauss:{dp['sigma0']:g}"
    if dp["mechanism"] == "dp_sgd":
        return f"dpsgd:C={dp['clip_norm']:g},s={dp['noise_mult']:g}"
    return "none"


# ---------------------------------------------------------------- federate / attack


def cmd_federate(args) -> int:
    cfg = load_config(args.config)
    dp = _dp_from_args(args)
    run_dir, index = pipeline.federate(cfg, dp, out=Path(args.out) if args.out else None)
    summary = {
        "run_dir": str(run_dir),
        "run_id": index["snapshot"]["run_id"],
        "rounds": len(index["rounds"]),
        "best_round": index["best_round"],
        "best_mean_val_accuracy": index["best_mean_val_accuracy"],
        "best_test_accuracy": index["best_test_accuracy"],
    }
    print(_dump(summary))
    return EXIT_OK


def cmd_attack(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "index.json").is_file():
        raise UsageError(f"run_dir: {run_dir} is not a run directory")
    cfg, _ = pipeline.config_of_run(run_dir)
    section = load_config(args.config).attack if args.config else cfg.attack
    acfg = _attack_cfg(section, args, args.seed if args.seed is not None else cfg.seed)
    index = pipeline.run_index(run_dir)
    try:
        r = pipeline.resolve_round(len(index["rounds"]), args.round)
    except FileNotFoundError as exc:
        raise UsageError(f"round: {exc}") from None
    known = [c["client_id"] for c in index["plan"]["clients"]]
    if args.client not in known:
        raise UsageError(f"client: {args.client!r} not in run (clients: {known})")
    adir, record = pipeline.attack_run(run_dir, args.client, r, acfg, out=args.out)
    print(_dump({k: record[k] for k in ("attack_id", "client", "round", "mean_ssim", "mean_ssim_prior", "mean_rdlv", "iip", "arms")}
                | {"attack_dir": str(adir)}))
    return EXIT_OK


# ---------------------------------------------------------------- sweep


def sweep_cells(cfg: ExperimentConfig) -> list[dict]:
    """Cross product (DP setting x client x round x attack seed) as plain dicts."""
    clients = cfg.sweep.clients or [c.client_id for c in cfg.federation.clients]
    cells = []
    for dp in cfg.sweep.dp:
        for client in clients:
            for rnd in cfg.sweep.rounds:
                r = pipeline.resolve_round(cfg, rnd)
                for seed in cfg.sweep.attack_seeds:
                    cells.append({"dp": dp.model_dump(mode="json"), "client": client, "round": r, "seed": seed})
    return cells


def cell_key(cfg: ExperimentConfig, cell: dict) -> str:
    snap = cfg.snapshot()
    keep = {k: snap[k] for k in ("seed", "data", "model", "federation", "attack", "metrics")}
    blob = json.dumps([keep, cell], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _run_cell(payload: tuple[dict, dict, str]) -> tuple[str, dict]:
    snap, cell, out = payload
    cfg = ExperimentConfig.model_validate(snap)
    dp = DPSection.model_validate(cell["dp"])
    run_dir, index = pipeline.federate(cfg, dp, out=Path(out))
    acfg = cfg.attack.build(cell["seed"])
    data = pipeline.build_data(cfg)
    adir, record = pipeline.attack_run(run_dir, cell["client"], cell["round"], acfg, out=out, data=data)
    from .metrics import ModelEmbedder
    from .model import load_state

    embedder = ModelEmbedder(load_state(run_dir / "best.ckpt"))
    recon = np.stack([_read_png(adir / f"recon_{m}.png") for m in range(len(record["images"]))])
    shard = data.shard(cell["client"])
    ids = [row["target_id"] for row in record["images"]]
    originals = np.stack([shard.train.images[shard.train.ids.index(i)] for i in ids])
    spec = cfg.plan().client(cell["client"])
    return cell_key(cfg, cell), {
        **cell,
        "attack_id": record["attack_id"],
        "run_id": record["run_id"],
        "batch_size": spec.batch_size,
        "n_train": spec.n_train,
        "n_local_iterations": spec.n_local_iterations,
        "best_test_accuracy": index["best_test_accuracy"],
        "images": record["images"],
        "iip": record["iip"],
        "mean_cosine": record["mean_cosine"],
        "recon_embeddings": embedder(recon).tolist(),
        "original_ids": ids,
        "original_embeddings": embedder(originals).tolist(),
    }


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def run_sweep(cfg: ExperimentConfig, out: Path, workers: int = 1) -> Path:
    sid = cfg.digest("sweep")
    sdir = out / "sweeps" / sid
    cdir = sdir / "cells"
    cdir.mkdir(parents=True, exist_ok=True)
    (sdir / "config.json").write_text(_dump(cfg.snapshot()))
    cells = sweep_cells(cfg)
    todo = [c for c in cells if not (cdir / f"{cell_key(cfg, c)}.json").is_file()]
    log.info("sweep %s: %d cells, %d to run", sid, len(cells), len(todo))
    # federations first so workers only read them
    for dp in sorted({json.dumps(c["dp"], sort_keys=True) for c in todo}):
        pipeline.federate(cfg, DPSection.model_validate(json.loads(dp)), out=out)
    payloads = [(cfg.snapshot(), c, str(out)) for c in todo]
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_run_cell, payloads)
            for key, rec in results:
                (cdir / f"{key}.json").write_text(_dump(rec))
    else:
        for p in payloads:
            key, rec = _run_cell(p)
            (cdir / f"{key}.json").write_text(_dump(rec))
    compile_report(sdir)
    return sdir


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.workers < 1:
        raise UsageError("workers: must be >= 1")
    out = Path(args.out or cfg.output_dir)
    sdir = run_sweep(cfg, out, args.workers)
    print(_dump({"sweep_dir": str(sdir), "report": str(sdir / "report.json")}))
    return EXIT_OK


# ---------------------------------------------------------------- report


def compile_report(sweep_dir: str | Path) -> dict:
    """Group cells into leakage records and write report.json and metrics.csv."""
    sdir = Path(sweep_dir)
    cfg_path = sdir / "config.json"
    if not cfg_path.is_file():
        raise UsageError(f"sweep_dir: {sdir} has no config.json")
    cfg = ExperimentConfig.model_validate(json.loads(cfg_path.read_text()))
    cells = []
    for c in sweep_cells(cfg):
        p = sdir / "cells" / f"{cell_key(cfg, c)}.json"
        if p.is_file():
            cells.append(json.loads(p.read_text()))
    groups: dict[tuple, list[dict]] = {}
    for c in cells:
        groups.setdefault((json.dumps(c["dp"], sort_keys=True), c["client"], c["round"]), []).append(c)
    trials, level = cfg.metrics.bootstrap_trials, cfg.metrics.ci_level
    records = []
    for (dp_json, client, rnd), members in groups.items():
        dp = json.loads(dp_json)
        rows = [row for m in members for row in m["images"]]
        rdlv = [r["rdlv"] for r in rows]
        lo, hi = bootstrap_ci(rdlv, trials, level, seed=cfg.seed)
        first = members[0]
        records.append(
            {
                "client": client,
                "round": rnd,
                "dp": dp,
                "dp_label": dp_label(dp),
                "sigma0": dp["sigma0"] if dp["mechanism"] == "percentile_gaussian" else 0.0,
                "batch_size": first["batch_size"],
                "n_train": first["n_train"],
                "n_local_iterations": first["n_local_iterations"],
                "attack_ids": sorted(m["attack_id"] for m in members),
                "seeds": sorted(m["seed"] for m in members),
                "ssim": [r["ssim"] for r in rows],
                "ssim_prior": [r["ssim_prior"] for r in rows],
                "rdlv": rdlv,
                "mean_ssim": float(np.mean([r["ssim"] for r in rows])),
                "mean_ssim_prior": float(np.mean([r["ssim_prior"] for r in rows])),
                "mean_rdlv": float(np.mean(rdlv)),
                "rdlv_lo": lo,
                "rdlv_hi": hi,
                "iip": float(np.mean([m["iip"] for m in members])),
                "cosine": float(np.mean([m["mean_cosine"] for m in members])),
                "best_test_accuracy": first["best_test_accuracy"],
            }
        )
    records.sort(key=lambda r: (r["dp"]["mechanism"], r["sigma0"], r["dp_label"], r["client"], r["round"]))
    accuracy = {}
    for r in records:
        accuracy.setdefault(r["dp_label"], {"dp": r["dp"], "sigma0": r["sigma0"], "best_test_accuracy": r["best_test_accuracy"]})
    embeddings = [
        {
            "dp_label": dp_label(c["dp"]),
            "sigma0": c["dp"]["sigma0"] if c["dp"]["mechanism"] == "percentile_gaussian" else 0.0,
            "client": c["client"],
            "round": c["round"],
            "seed": c["seed"],
            "recon": c["recon_embeddings"],
            "original_ids": c["original_ids"],
            "original": c["original_embeddings"],
        }
        for c in sorted(cells, key=lambda c: (dp_label(c["dp"]), c["client"], c["round"], c["seed"]))
    ]
    report = {
        "experiment_id": sdir.name,
        "config": cfg.snapshot(),
        "n_cells": len(cells),
        "records": records,
        "accuracy": [accuracy[k] for k in sorted(accuracy, key=lambda k: (accuracy[k]["dp"]["mechanism"], accuracy[k]["sigma0"], k))],
        "embeddings": embeddings,
    }
    (sdir / "report.json").write_text(_dump(report))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow(
            [r["client"], r["round"], r["sigma0"], r["mean_ssim"], r["mean_ssim_prior"], r["mean_rdlv"],
             r["rdlv_lo"], r["rdlv_hi"], r["iip"], r["cosine"], r["dp_label"]]
        )
    (sdir / "metrics.csv").write_text(buf.getvalue())
    return report


def cmd_report(args) -> int:
    report = compile_report(args.sweep_dir)
    print(_dump({"report": str(Path(args.sweep_dir) / "report.json"), "records": len(report["records"])}))
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plots import render_all

    path = Path(args.report)
    if not path.is_file():
        raise UsageError(f"report: {path} does not exist")
    report = json.loads(path.read_text())
    out = Path(args.out) if args.out else path.parent / "plots"
    files = render_all(report, out)
    print(_dump({"plots": [str(f) for f in files]}))
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedleak", description="Gradient-leakage audits for federated learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("federate", help="run a federation and persist every round")
    f.add_argument("config")
    f.add_argument("--out")
    f.add_argument("--dp-mech", choices=["none", "percentile_gaussian", "dp_sgd"])
    f.add_argument("--sigma0", type=float, default=0.0)
    f.add_argument("--q", type=float, default=95.0)
    f.add_argument("--clip-norm", type=float, default=1.0)
    f.add_argument("--noise-mult", type=float, default=0.0)
    f.set_defaults(func=cmd_federate)

    a = sub.add_parser("attack", help="invert one stored client update")
    a.add_argument("run_dir")
    a.add_argument("--client", required=True)
    a.add_argument("--round", type=int, default=-1, help="round index; negative counts from the end")
    a.add_argument("--config", help="take the attack section from this config instead of the run's")
    a.add_argument("--iterations", type=int)
    a.add_argument("--restarts", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--no-bn-loss", action="store_true")
    a.add_argument("--no-global-ckpt", action="store_true")
    a.add_argument("--no-prior", action="store_true")
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep", help="DP grid x clients x rounds, resumable")
    s.add_argument("config")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="recompile report.json and metrics.csv of a sweep")
    r.add_argument("sweep_dir")
    r.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot", help="render PNG and SVG figures from a report")
    pl.add_argument("report")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, DPConfigError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AttackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure, reported not raised
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
