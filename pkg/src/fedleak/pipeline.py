"""Glue between configuration, federation runs, attacks and metrics.

Everything here is deterministic given the configuration: datasets are
rebuilt from the config snapshot instead of being copied into run
directories, and output directories are named by content hashes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attack as attack_mod
from . import metrics
from .config import DPSection, ExperimentConfig
from .fl_sim import ClientSpec, ModelUpdate, accuracy, load_round, local_train, pretrain, run_federation
from .ingest import ClientShard, Dataset, PriorImage, compute_prior, load_dataset, partition, save_png, split, synthetic_dataset
from .model import BNConfig, ModelState, init_state, load_state, save_state

log = logging.getLogger(__name__)


@dataclass
class DeskData:
    prior: PriorImage
    test: Dataset
    shards: list[ClientShard]
    pretrain: Dataset | None = None

    def shard(self, client_id: str) -> ClientShard:
        for s in self.shards:
            if s.client_id == client_id:
                return s
        raise KeyError(client_id)

    def pool(self) -> Dataset:
        """Every client's training and validation images, each id once."""
        seen: dict[str, tuple[np.ndarray, int]] = {}
        names = self.shards[0].train.class_names
        for s in self.shards:
            for part in (s.train, s.valid):
                for i, id_ in enumerate(part.ids):
                    seen.setdefault(id_, (part.images[i], int(part.labels[i])))
        ids = sorted(seen)
        return Dataset(
            np.stack([seen[i][0] for i in ids]), np.array([seen[i][1] for i in ids]), names, tuple(ids)
        )


def build_data(cfg: ExperimentConfig) -> DeskData:
    d = cfg.data
    if d.source == "synthetic":
        full = synthetic_dataset(d.n_images, d.image_size, d.channels, seed=cfg.seed)
    else:
        root = Path(d.root)
        full = load_dataset(root, root / d.manifest, d.image_size, d.channels, d.class_names)
    if d.prior_root:
        proot = Path(d.prior_root)
        prior_ds = load_dataset(proot, proot / d.prior_manifest, d.image_size, d.channels, full.class_names)
        rest = full
    else:
        prior_ds, rest = split(full, d.n_prior, seed=cfg.seed)
    test, rest = split(rest, d.n_test, seed=cfg.seed + 1)
    warm = None
    if d.n_pretrain:
        warm, rest = split(rest, d.n_pretrain, seed=cfg.seed + 2)
    shards = partition(rest, cfg.plan(), seed=cfg.seed)
    return DeskData(compute_prior(prior_ds, like=rest), test, shards, warm)


def resolve_round(cfg_or_rounds, round_: int) -> int:
    rounds = cfg_or_rounds if isinstance(cfg_or_rounds, int) else cfg_or_rounds.federation.rounds
    r = round_ + rounds if round_ < 0 else round_
    if not 0 <= r < rounds:
        raise FileNotFoundError(f"round {round_} outside 0..{rounds - 1}")
    return r


# ---------------------------------------------------------------- federation


def federate(
    cfg: ExperimentConfig, dp: DPSection | None = None, data: DeskData | None = None, out: Path | None = None
) -> tuple[Path, dict]:
    """Run the federation for ``cfg`` under DP setting ``dp``; returns (run dir, index).

    A finished run with the same content hash is reused.
    """
    rid = cfg.federation_id(dp)
    run_dir = Path(out or cfg.output_dir) / "runs" / rid
    if (run_dir / "index.json").is_file() and (run_dir / "initial.ckpt").is_file():
        index = run_index(run_dir)
        if "best_test_accuracy" in index:
            return run_dir, index
    data = data or build_data(cfg)
    initial = init_state(cfg.arch(data.test.num_classes), cfg.seed, BNConfig(cfg.model.bn_momentum, cfg.model.bn_eps))
    m = cfg.model
    if m.pretrain_epochs:
        initial = pretrain(initial, data.pretrain, m.pretrain_epochs, m.pretrain_batch_size, m.pretrain_lr, cfg.seed)
    snapshot = {"config": cfg.snapshot(), "dp": (dp or DPSection()).model_dump(mode="json"), "run_id": rid}
    result = run_federation(cfg.plan(dp), data.shards, initial, run_dir, extra_index={"snapshot": snapshot})
    save_state(run_dir / "initial.ckpt", initial)
    index = run_index(run_dir)
    index["best_test_accuracy"] = accuracy(result.best_state, data.test)
    index["final_test_accuracy"] = accuracy(result.final_state, data.test)
    (run_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    log.info("run %s: best round %d, test accuracy %.4f", rid, result.best_round, index["best_test_accuracy"])
    return run_dir, index


def run_index(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "index.json"
    if not path.is_file():
        raise FileNotFoundError(f"{run_dir} is not a run directory (no index.json)")
    return json.loads(path.read_text())


def config_of_run(run_dir: str | Path) -> tuple[ExperimentConfig, DPSection]:
    snap = run_index(run_dir)["snapshot"]
    return ExperimentConfig.model_validate(snap["config"]), DPSection.model_validate(snap["dp"])


# ---------------------------------------------------------------- attacks


def _losses_csv(rows: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(attack_mod.LOSS_COLUMNS)
    for r in rows:
        w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue()


def attack_id(run_id: str, client: str, round_: int, acfg: attack_mod.AttackConfig) -> str:
    blob = json.dumps([run_id, client, round_, asdict(acfg)], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def evaluate_reconstruction(
    result: attack_mod.ReconstructionResult,
    originals: Dataset,
    prior: PriorImage,
    pool: Dataset,
    embedder: metrics.Embedder,
    k: int = 1,
) -> dict:
    """Per-image SSIM / RDLV against the attacked images, plus IIP.

    ``originals`` are the attacked client's training images in the order the
    client visited them. With a known batch order reconstruction m is
    compared with the m-th visited image, otherwise with its best SSIM match.
    """
    recon = result.images
    prior_img = prior.image
    if prior_img.shape[-1] != recon.shape[-1]:
        prior_img = np.broadcast_to(prior_img.mean(axis=-1, keepdims=True), recon.shape[1:])
    per_image = []
    for m, img in enumerate(recon):
        j = m if result.slot_order is not None else metrics.best_match(img, originals.images)[0]
        target = originals.images[j]
        s = metrics.ssim(target, img)
        sp = metrics.ssim(target, prior_img)
        per_image.append(
            {"slot": m, "target_id": originals.ids[j], "ssim": s, "ssim_prior": sp, "rdlv": metrics.rdlv_from_ssim(s, sp)}
        )
    iip = metrics.iip(recon, pool.images, pool.ids, originals.ids, embedder, k)
    rec_emb = embedder(recon)
    cos = []
    for m, row in enumerate(per_image):
        j = originals.ids.index(row["target_id"])
        cos.append(metrics.cosine(rec_emb[m], embedder(originals.images[j : j + 1])[0]))
        row["cosine"] = cos[-1]
    return {
        "images": per_image,
        "mean_ssim": float(np.mean([r["ssim"] for r in per_image])),
        "mean_ssim_prior": float(np.mean([r["ssim_prior"] for r in per_image])),
        "mean_rdlv": float(np.mean([r["rdlv"] for r in per_image])),
        "mean_cosine": float(np.mean(cos)),
        "iip": iip.score,
        "iip_k": k,
        "iip_matches": [asdict(mt) for mt in iip.matches],
        "labels_recovered": [int(v) for v in result.labels],
    }


def attack_run(
    run_dir: str | Path,
    client: str,
    round_: int,
    acfg: attack_mod.AttackConfig,
    out: str | Path | None = None,
    data: DeskData | None = None,
) -> tuple[Path, dict]:
    """Attack one stored update and write reconstructions, losses and result.json.

    An existing result with the same content hash is reused.
    """
    run_dir = Path(run_dir)
    index = run_index(run_dir)
    cfg, dp = config_of_run(run_dir)
    r = resolve_round(len(index["rounds"]), round_)
    aid = attack_id(index["snapshot"]["run_id"], client, r, acfg)
    adir = Path(out or cfg.output_dir) / "attacks" / aid
    done = adir / "result.json"
    if done.is_file():
        return adir, json.loads(done.read_text())
    global_ckpt, update = load_round(run_dir, r, client)
    round0 = load_state(run_dir / "initial.ckpt")
    data = data or build_data(cfg)
    result = attack_mod.invert(global_ckpt, update, acfg, data.prior, round0)
    shard = data.shard(client)
    originals = shard.train.subset(update.batch_order())
    embed_state = load_state(run_dir / ("best.ckpt" if cfg.metrics.embedder == "best" else "final.ckpt"))
    evaluation = evaluate_reconstruction(
        result, originals, data.prior, data.pool(), metrics.ModelEmbedder(embed_state), cfg.metrics.iip_k
    )
    adir.mkdir(parents=True, exist_ok=True)
    for m, img in enumerate(result.images):
        save_png(img, adir / f"recon_{m}.png")
    (adir / "losses.csv").write_text(_losses_csv(result.losses))
    record = {
        "attack_id": aid,
        "run_id": index["snapshot"]["run_id"],
        "client": client,
        "round": r,
        "dp": dp.model_dump(mode="json"),
        "dp_sigma": update.dp_sigma,
        "arms": {
            "use_bn_loss": acfg.use_bn_loss,
            "use_global_ckpt": acfg.use_global_ckpt,
            "use_prior": acfg.use_prior,
        },
        "attack_config": result.config,
        "config_hash": result.config_hash,
        "best_iteration": result.best_iteration,
        "best_loss": result.best_loss,
        "diverged": result.diverged,
        "labels_true": [int(v) for v in originals.labels],
        **evaluation,
    }
    done.write_text(json.dumps(record, indent=2, sort_keys=True))
    return adir, record


def attack_state(
    global_ckpt: ModelState,
    update,
    acfg: attack_mod.AttackConfig,
    prior: PriorImage,
    round0: ModelState | None,
    originals: Dataset,
    pool: Dataset | None = None,
    embedder: metrics.Embedder | None = None,
) -> dict:
    """In-memory variant of :func:`attack_run` for experiments that skip the disk."""
    result = attack_mod.invert(global_ckpt, update, acfg, prior, round0)
    pool = pool if pool is not None else originals
    embedder = embedder or metrics.ModelEmbedder(global_ckpt)
    out = evaluate_reconstruction(result, originals, prior, pool, embedder)
    out["result"] = result
    return out


def probe_update(
    global_state: ModelState,
    source: Dataset,
    n_images: int,
    batch_size: int,
    lr: float,
    seed: int,
    round_: int = 0,
    client_id: str = "probe",
) -> tuple[ModelUpdate, Dataset]:
    """Update a hypothetical client would send from ``n_images`` drawn out of ``source``.

    The probe is not aggregated, so sweeping its batch size or iteration
    count leaves the federation untouched. Returns the update and the
    probe's images in visiting order.
    """
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(source), size=n_images, replace=False))
    shard = ClientShard(client_id, source.subset(idx), source.subset([]))
    spec = ClientSpec(client_id, batch_size, n_images)
    update = local_train(global_state, shard, spec, round_, lr, batch_order_seed=seed)
    return update, shard.train.subset(update.batch_order())


def summarize(values: Sequence[float], trials: int = 1000, level: float = 0.95, seed: int = 0) -> dict:
    lo, hi = metrics.bootstrap_ci(values, trials, level, seed)
    return {"mean": float(np.mean(values)), "lo": lo, "hi": hi, "n": len(values)}
