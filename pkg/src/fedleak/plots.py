"""Figures from a sweep report. Each figure is written as PNG, SVG and the CSV it was drawn from."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import bootstrap_ci, project_2d  # noqa: E402

# fixed salt and no date so SVG output is reproducible
plt.rcParams["svg.hashsalt"] = "fedleak"


def _save(fig, out: Path, name: str, header: list[str], rows: list[list]) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{name}.png", out / f"{name}.svg", out / f"{name}.csv"]
    fig.savefig(paths[0], dpi=100, metadata={"Software": None})
    fig.savefig(paths[1], metadata={"Date": None})
    plt.close(fig)
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return paths


def _mean_ci(values, trials=1000, seed=0):
    lo, hi = bootstrap_ci(values, trials, 0.95, seed)
    return float(np.mean(values)), lo, hi


def _ssim_vs(report: dict, key: str, out: Path, name: str, xlabel: str) -> list[Path]:
    """Mean SSIM (with CI band) against a client attribute, one line per DP setting."""
    groups: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in report["records"]:
        groups[r["dp_label"]][r[key]].extend(r["ssim"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rows = []
    for label in sorted(groups):
        xs = sorted(groups[label])
        stats = [_mean_ci(groups[label][x]) for x in xs]
        m = [s[0] for s in stats]
        ax.plot(xs, m, marker="o", label=label)
        ax.fill_between(xs, [s[1] for s in stats], [s[2] for s in stats], alpha=0.2)
        rows += [[label, x, *s] for x, s in zip(xs, stats)]
    prior = [v for r in report["records"] for v in r["ssim_prior"]]
    if prior:
        ax.axhline(float(np.mean(prior)), color="grey", ls="--", lw=1, label="prior")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("SSIM")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out, name, ["dp", key, "mean", "lo", "hi"], rows)


def plot_rdlv_vs_sigma(report: dict, out: Path) -> list[Path]:
    gauss = [r for r in report["records"] if r["dp"]["mechanism"] in ("none", "percentile_gaussian")]
    by_client: dict[str, list[dict]] = defaultdict(list)
    for r in gauss:
        by_client[r["client"]].append(r)
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    rows = []
    for client in sorted(by_client):
        recs = sorted(by_client[client], key=lambda r: (r["sigma0"], r["round"]))
        xs = [r["sigma0"] for r in recs]
        ax.plot(xs, [r["mean_rdlv"] for r in recs], marker="o", label=client)
        ax.fill_between(xs, [r["rdlv_lo"] for r in recs], [r["rdlv_hi"] for r in recs], alpha=0.2)
        rows += [[client, r["round"], r["sigma0"], r["mean_rdlv"], r["rdlv_lo"], r["rdlv_hi"]] for r in recs]
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("sigma0")
    ax.set_ylabel("RDLV")
    acc = sorted((a["sigma0"], a["best_test_accuracy"]) for a in report.get("accuracy", []) if a["dp"]["mechanism"] != "dp_sgd")
    if acc:
        ax2 = ax.twinx()
        ax2.plot([a[0] for a in acc], [a[1] for a in acc], color="k", ls=":", marker="s", label="test accuracy")
        ax2.set_ylabel("test accuracy")
        ax2.set_ylim(0, 1)
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    return _save(fig, out, "rdlv_vs_sigma0", ["client", "round", "sigma0", "mean", "lo", "hi"], rows)


def plot_iip_vs_sigma(report: dict, out: Path) -> list[Path]:
    by_client: dict[str, list[dict]] = defaultdict(list)
    for r in report["records"]:
        if r["dp"]["mechanism"] != "dp_sgd":
            by_client[r["client"]].append(r)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax2 = ax.twinx()
    rows = []
    for client in sorted(by_client):
        recs = sorted(by_client[client], key=lambda r: (r["sigma0"], r["round"]))
        xs = [r["sigma0"] for r in recs]
        line = ax.plot(xs, [r["iip"] for r in recs], marker="o", label=client)[0]
        ax2.plot(xs, [r["cosine"] for r in recs], ls=":", color=line.get_color())
        rows += [[client, r["round"], r["sigma0"], r["iip"], r["cosine"]] for r in recs]
    ax.set_xlabel("sigma0")
    ax.set_ylabel("IIP (solid)")
    ax2.set_ylabel("cosine similarity (dotted)")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out, "iip_vs_sigma0", ["client", "round", "sigma0", "iip", "cosine"], rows)


def plot_embedding(report: dict, out: Path, seed: int = 0) -> list[Path]:
    """2-D projection of reconstruction embeddings and the attacked originals."""
    points, kinds, labels = [], [], []
    seen = set()
    for e in report.get("embeddings", []):
        for v in e["recon"]:
            points.append(v)
            kinds.append("reconstruction")
            labels.append(e["sigma0"])
        for id_, v in zip(e["original_ids"], e["original"]):
            if id_ not in seen:
                seen.add(id_)
                points.append(v)
                kinds.append("original")
                labels.append(float("nan"))
    fig, ax = plt.subplots(figsize=(4.5, 4))
    rows = []
    if len(points) >= 2:
        xy = project_2d(np.asarray(points), seed=seed)
    else:
        xy = np.zeros((len(points), 2))
    rec = np.array([k == "reconstruction" for k in kinds], dtype=bool)
    if rec.any():
        sc = ax.scatter(xy[rec, 0], xy[rec, 1], c=np.asarray(labels)[rec], cmap="viridis", s=18, label="reconstruction")
        fig.colorbar(sc, ax=ax, label="sigma0")
    if (~rec).any():
        ax.scatter(xy[~rec, 0], xy[~rec, 1], marker="x", c="red", s=30, label="original")
    ax.legend(fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    rows = [[k, lab, float(x), float(y)] for k, lab, (x, y) in zip(kinds, labels, xy)]
    return _save(fig, out, "embedding_scatter", ["kind", "sigma0", "x", "y"], rows)


def render_all(report: dict, out: str | Path) -> list[Path]:
    out = Path(out)
    files = []
    files += _ssim_vs(report, "round", out, "ssim_vs_round", "FL round")
    files += _ssim_vs(report, "batch_size", out, "ssim_vs_batch_size", "batch size")
    files += _ssim_vs(report, "n_local_iterations", out, "ssim_vs_iterations", "local iterations")
    files += plot_rdlv_vs_sigma(report, out)
    files += plot_iip_vs_sigma(report, out)
    files += plot_embedding(report, out)
    return files
