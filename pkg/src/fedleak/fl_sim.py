"""FedAvg simulation that records every client update as the server sees it."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import defense
from .defense import DPConfig
from .ingest import ClientShard, Dataset
from .model import (
    ModelState,
    NonFiniteError,
    bn_update,
    forward,
    load_state,
    loss_and_grads,
    per_example_grads,
    read_arrays,
    save_state,
    write_arrays,
)

log = logging.getLogger(__name__)

UPDATE_VERSION = 1


class TrainingError(RuntimeError):
    pass


class AggregationError(ValueError):
    pass


class PersistenceError(OSError):
    pass


@dataclass(frozen=True)
class ClientSpec:
    client_id: str
    batch_size: int
    n_train: int
    n_valid: int = 0
    balanced: bool = True
    shares_with: str | None = None
    dp: DPConfig = field(default_factory=DPConfig)

    def __post_init__(self):
        if self.n_train < 1:
            raise ValueError(f"client {self.client_id}: n_train must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"client {self.client_id}: batch_size must be >= 1")

    @property
    def n_local_iterations(self) -> int:
        return math.ceil(self.n_train / self.batch_size)


@dataclass(frozen=True)
class FederationPlan:
    """Client roster, round count and step-wise learning-rate schedule.

    ``bn_aggregation`` is ``"weighted"`` (buffers averaged like weights) or
    ``"keep"`` (server keeps the previous global buffers).
    """

    clients: tuple[ClientSpec, ...]
    rounds: int = 1
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_decay_every: int = 40
    seed: int = 0
    bn_aggregation: str = "weighted"

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(self.clients))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.clients:
            raise ValueError("plan needs at least one client")
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate client ids in {ids}")
        if self.bn_aggregation not in ("weighted", "keep"):
            raise ValueError(f"bn_aggregation must be 'weighted' or 'keep', got {self.bn_aggregation!r}")

    @property
    def n_total(self) -> int:
        return sum(c.n_train for c in self.clients)

    def weights(self) -> dict[str, float]:
        n = self.n_total
        return {c.client_id: c.n_train / n for c in self.clients}

    def lr_at(self, round_: int) -> float:
        return self.lr * self.lr_decay ** (round_ // self.lr_decay_every)

    def client(self, client_id: str) -> ClientSpec:
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)

    def client_seed(self, client_id: str, round_: int) -> int:
        idx = [c.client_id for c in self.clients].index(client_id)
        return int(np.random.SeedSequence([self.seed, idx, round_]).generate_state(1)[0])


@dataclass(frozen=True)
class ModelUpdate:
    """What a client sends: weight deltas, its BN buffers and the training configuration."""

    client_id: str
    round: int
    delta: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    n_local_iterations: int
    batch_order_seed: int
    batch_size: int
    lr: float
    n_train: int
    dp: DPConfig = field(default_factory=DPConfig)
    dp_sigma: float = 0.0

    def l2_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.delta.values())))

    def batch_order(self) -> np.ndarray:
        return batch_order(self.batch_order_seed, self.n_train)

    def apply_to(self, global_state: ModelState) -> ModelState:
        """Client's final local state, rebuilt from the global state."""
        return global_state.replace(
            params={k: global_state.params[k] + self.delta[k] for k in global_state.params},
            buffers=self.buffers,
        )


@dataclass
class RoundLog:
    round: int
    lr: float
    global_state: ModelState
    updates: list[ModelUpdate]
    val_accuracy: dict[str, float]
    update_norms: dict[str, float]

    @property
    def mean_val_accuracy(self) -> float:
        return float(np.mean(list(self.val_accuracy.values()))) if self.val_accuracy else float("nan")


@dataclass
class FederationResult:
    logs: list[RoundLog]
    best_state: ModelState
    best_round: int
    final_state: ModelState
    initial_state: ModelState
    run_dir: Path | None = None


# ---------------------------------------------------------------- training


def batch_order(seed: int, n: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def sgd_epoch(
    state: ModelState,
    data: Dataset,
    order: Sequence[int],
    batch_size: int,
    lr: float,
    dp: DPConfig | None = None,
    rng: np.random.Generator | None = None,
    context: str = "",
) -> tuple[ModelState, list[list[tuple[np.ndarray, np.ndarray]]]]:
    """One pass of plain SGD in train mode over ``data`` in ``order``.

    Returns the new state and the batch statistics recorded per iteration.
    """
    params = dict(state.params)
    buffers = dict(state.buffers)
    layers = state.bn_layers
    recorded = []
    order = np.asarray(order)
    for it, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start : start + batch_size]
        batch = (data.images[idx], data.labels[idx])
        current = state.replace(params=params, buffers=buffers)
        try:
            if dp is not None and dp.mechanism == "dp_sgd":
                loss, per_ex, stats = per_example_grads(current, batch)
                grads = defense.dp_sgd_step(per_ex, dp.clip_norm, dp.noise_mult, rng)
            else:
                loss, grads, stats = loss_and_grads(current, batch, "train", return_stats=True)
        except NonFiniteError as exc:
            raise TrainingError(f"{context} iteration {it}: non-finite values at {exc.layer}") from exc
        if not np.isfinite(loss):
            raise TrainingError(f"{context} iteration {it}: non-finite loss")
        params = {k: params[k] - lr * grads[k] for k in params}
        buffers = bn_update(buffers, stats, state.bn.momentum, layers)
        recorded.append(stats)
    return state.replace(params=params, buffers=buffers), recorded


def local_train(
    global_state: ModelState,
    shard: ClientShard,
    client: ClientSpec,
    round_: int,
    lr: float,
    batch_order_seed: int,
) -> ModelUpdate:
    """One local epoch; the DP mechanism of ``client`` is applied before returning."""
    if len(shard.train) == 0:
        raise TrainingError(f"client {client.client_id}: empty training shard")
    n = len(shard.train)
    order = batch_order(batch_order_seed, n)
    dp_rng = np.random.default_rng([batch_order_seed, 1])
    local, _ = sgd_epoch(
        global_state, shard.train, order, client.batch_size, lr, client.dp, dp_rng,
        context=f"client {client.client_id} round {round_}",
    )
    delta = {k: local.params[k] - global_state.params[k] for k in global_state.params}
    buffers = dict(local.buffers)
    sigma = 0.0
    if client.dp.mechanism == "percentile_gaussian":
        delta, sigma = defense.percentile_gaussian(
            delta, client.dp.sigma0, client.dp.q, dp_rng, client.dp.percentile_method
        )
        if client.dp.noise_buffers and sigma > 0:
            buffers = {k: v + dp_rng.normal(0.0, sigma, size=v.shape) for k, v in buffers.items()}
            buffers = {k: np.maximum(v, 0.0) if k.endswith("running_var") else v for k, v in buffers.items()}
    return ModelUpdate(
        client_id=client.client_id,
        round=round_,
        delta=delta,
        buffers=buffers,
        n_local_iterations=math.ceil(n / client.batch_size),
        batch_order_seed=batch_order_seed,
        batch_size=client.batch_size,
        lr=lr,
        n_train=n,
        dp=client.dp,
        dp_sigma=sigma,
    )


def aggregate(
    global_state: ModelState,
    updates: Sequence[ModelUpdate],
    weights: Mapping[str, float] | Sequence[float],
    bn_aggregation: str = "weighted",
) -> ModelState:
    """W + sum_k w_k dW_k; BN buffers are the w_k-weighted mean of client buffers."""
    if not updates:
        raise AggregationError("no updates to aggregate")
    if isinstance(weights, Mapping):
        w = [float(weights[u.client_id]) for u in updates]
    else:
        w = [float(x) for x in weights]
    if len(w) != len(updates):
        raise AggregationError("one weight per update required")
    if abs(sum(w) - 1.0) > 1e-9:
        raise AggregationError(f"weights sum to {sum(w)}, not 1")
    if len({u.round for u in updates}) != 1:
        raise AggregationError("updates come from different rounds")
    names = set(global_state.params)
    for u in updates:
        if set(u.delta) != names:
            raise AggregationError(f"update from {u.client_id} has layers {sorted(set(u.delta) ^ names)} mismatched")
        if set(u.buffers) != set(global_state.buffers):
            raise AggregationError(f"update from {u.client_id} has mismatched BN buffers")
    acc = {k: np.zeros_like(v) for k, v in global_state.params.items()}
    for wk, u in zip(w, updates):
        for k in acc:
            acc[k] = acc[k] + wk * u.delta[k]
    params = {k: global_state.params[k] + acc[k] for k in acc}
    if bn_aggregation == "keep":
        buffers = dict(global_state.buffers)
    else:
        buffers = {k: np.zeros_like(v) for k, v in global_state.buffers.items()}
        for wk, u in zip(w, updates):
            for k in buffers:
                buffers[k] = buffers[k] + wk * u.buffers[k]
    return global_state.replace(params=params, buffers=buffers)


def accuracy(state: ModelState, data: Dataset, batch: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    correct = 0
    for s in range(0, len(data), batch):
        logits, _ = forward(state, data.images[s : s + batch], "eval")
        correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[s : s + batch]))
    return correct / len(data)


def pretrain(state: ModelState, data: Dataset, epochs: int, batch_size: int, lr: float, seed: int = 0) -> ModelState:
    """Centralised warm start on a split disjoint from the federation."""
    rng = np.random.default_rng(seed)
    for e in range(epochs):
        state, _ = sgd_epoch(state, data, rng.permutation(len(data)), batch_size, lr, context=f"pretrain epoch {e}")
    return state


# ---------------------------------------------------------------- persistence


def save_update(path: str | Path, update: ModelUpdate) -> None:
    meta = {
        "version": UPDATE_VERSION,
        "client_id": update.client_id,
        "round": update.round,
        "n_local_iterations": update.n_local_iterations,
        "batch_order_seed": update.batch_order_seed,
        "batch_size": update.batch_size,
        "lr": update.lr,
        "n_train": update.n_train,
        "dp": asdict(update.dp),
        "dp_sigma": update.dp_sigma,
        "delta": list(update.delta),
        "buffers": list(update.buffers),
    }
    arrays = {f"delta/{k}": v for k, v in update.delta.items()}
    arrays.update({f"buffer/{k}": v for k, v in update.buffers.items()})
    write_arrays(path, arrays, meta)


def load_update(path: str | Path) -> ModelUpdate:
    meta, arrays = read_arrays(path)
    if meta.get("version") != UPDATE_VERSION:
        raise PersistenceError(f"unsupported update version in {path}")
    return ModelUpdate(
        client_id=meta["client_id"],
        round=meta["round"],
        delta={k: arrays[f"delta/{k}"] for k in meta["delta"]},
        buffers={k: arrays[f"buffer/{k}"] for k in meta["buffers"]},
        n_local_iterations=meta["n_local_iterations"],
        batch_order_seed=meta["batch_order_seed"],
        batch_size=meta["batch_size"],
        lr=meta["lr"],
        n_train=meta["n_train"],
        dp=DPConfig(**meta["dp"]),
        dp_sigma=meta["dp_sigma"],
    )


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_round(run_dir: Path, log_: RoundLog, next_mean_acc: float) -> dict:
    rdir = run_dir / f"round_{log_.round}"
    rdir.mkdir(parents=True, exist_ok=True)
    save_state(rdir / "global.ckpt", log_.global_state)
    files = {"global.ckpt": sha256_file(rdir / "global.ckpt")}
    for u in log_.updates:
        name = f"client_{u.client_id}.update"
        save_update(rdir / name, u)
        files[name] = sha256_file(rdir / name)
    record = {
        "round": log_.round,
        "lr": log_.lr,
        "val_accuracy": log_.val_accuracy,
        "mean_val_accuracy": next_mean_acc,
        "update_norms": log_.update_norms,
        "files": files,
    }
    (rdir / "log.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


def plan_to_dict(plan: FederationPlan) -> dict:
    return asdict(plan)


def plan_from_dict(d: Mapping) -> FederationPlan:
    clients = tuple(
        ClientSpec(**{**c, "dp": DPConfig(**c.get("dp", {}))}) for c in d["clients"]
    )
    return FederationPlan(**{**d, "clients": clients})


# ---------------------------------------------------------------- federation


def iter_rounds(
    plan: FederationPlan, shards: Sequence[ClientShard], initial: ModelState
) -> Iterator[tuple[RoundLog, ModelState]]:
    """Yield ``(log of round t, global state W^{t+1})`` for t = 0 .. T-1.

    ``log.val_accuracy`` holds each client's validation accuracy of W^{t+1}.
    """
    by_id = {s.client_id: s for s in shards}
    missing = [c.client_id for c in plan.clients if c.client_id not in by_id]
    if missing:
        raise ValueError(f"no shard for clients {missing}")
    for c in plan.clients:
        if len(by_id[c.client_id].train) != c.n_train:
            raise ValueError(f"client {c.client_id}: shard has {len(by_id[c.client_id].train)} images, plan says {c.n_train}")
    weights = plan.weights()
    state = initial
    for t in range(plan.rounds):
        lr = plan.lr_at(t)
        updates = [
            local_train(state, by_id[c.client_id], c, t, lr, plan.client_seed(c.client_id, t)) for c in plan.clients
        ]
        new_state = aggregate(state, updates, weights, plan.bn_aggregation)
        val = {c.client_id: accuracy(new_state, by_id[c.client_id].valid) for c in plan.clients}
        norms = {u.client_id: u.l2_norm() for u in updates}
        yield RoundLog(t, lr, state, updates, val, norms), new_state
        state = new_state


def run_federation(
    plan: FederationPlan,
    shards: Sequence[ClientShard],
    initial: ModelState,
    run_dir: str | Path | None = None,
    extra_index: Mapping | None = None,
) -> FederationResult:
    """Run all rounds, persist them when ``run_dir`` is given, pick the best global model.

    The best model maximises mean client validation accuracy over the
    initial model and every aggregated model; ties go to the earliest.
    """
    run_path = Path(run_dir) if run_dir is not None else None
    by_id = {s.client_id: s for s in shards}
    init_acc = float(np.mean([accuracy(initial, by_id[c.client_id].valid) for c in plan.clients]))
    best_state, best_round, best_acc = initial, -1, init_acc
    logs: list[RoundLog] = []
    records = []
    state = initial
    try:
        if run_path is not None:
            run_path.mkdir(parents=True, exist_ok=True)
        for log_, new_state in iter_rounds(plan, shards, initial):
            logs.append(log_)
            acc = log_.mean_val_accuracy
            log.info("round %d: mean val acc %.4f", log_.round, acc)
            if run_path is not None:
                records.append(_write_round(run_path, log_, acc))
            if np.isfinite(acc) and acc > best_acc:
                best_state, best_round, best_acc = new_state, log_.round, acc
            state = new_state
        if run_path is not None:
            save_state(run_path / "final.ckpt", state)
            save_state(run_path / "best.ckpt", best_state)
            index = {
                "plan": plan_to_dict(plan),
                "rounds": [r["round"] for r in records],
                "best_round": best_round,
                "best_mean_val_accuracy": best_acc,
                "initial_mean_val_accuracy": init_acc,
                "round_files": {str(r["round"]): r["files"] for r in records},
                "final.ckpt": sha256_file(run_path / "final.ckpt"),
                "best.ckpt": sha256_file(run_path / "best.ckpt"),
                **dict(extra_index or {}),
            }
            (run_path / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    except OSError as exc:
        raise PersistenceError(f"cannot persist run to {run_path}: {exc}") from exc
    return FederationResult(logs, best_state, best_round, state, initial, run_path)


def load_round(run_dir: str | Path, round_: int, client_id: str) -> tuple[ModelState, ModelUpdate]:
    """Intercept: read W^t and one client's update from a run directory."""
    rdir = Path(run_dir) / f"round_{round_}"
    if not rdir.is_dir():
        raise FileNotFoundError(f"round {round_} not found in {run_dir}")
    upath = rdir / f"client_{client_id}.update"
    if not upath.is_file():
        raise FileNotFoundError(f"no update from client {client_id} in round {round_}")
    return load_state(rdir / "global.ckpt"), load_update(upath)
