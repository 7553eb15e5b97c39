"""Epoch-wise gradient inversion with BN-statistics tracking.

Given the global model W^t and one intercepted client update, the attack
optimises trainable images and label logits so that replaying the
client's local epoch on them (same batch size, iteration count, learning
rate and BN momentum) reproduces the intercepted weight change and BN
running statistics.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .ingest import PriorImage
from .model import (
    DTYPE,
    ArchSpec,
    BNConfig,
    ModelError,
    ModelState,
    bn_layer_names,
    bn_update,
    functional_forward,
    to_numpy,
    to_torch,
)

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "L_grad", "L_BN", "L_tv", "L_l2", "total")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyper-parameters and ablation switches.

    ``use_bn_loss=False`` is the fixed-statistics baseline: no BN loss and
    the client epoch is replayed with the global model's running statistics
    held fixed, as attacks that ignore BN updates do. ``use_global_ckpt=False``
    starts the attack network from the round-0 model. ``match`` selects
    epoch replay (default) or a single gradient over all images.
    """

    iterations: int = 2000
    lr: float = 0.01
    label_lr: float | None = 1.0
    lr_schedule: str = "cosine"
    w_grad: float = 1.0
    w_bn: float = 1e-3
    bn_autoscale: bool = True
    w_tv: float = 1e-4
    w_l2: float = 1e-6
    use_prior: bool = True
    use_bn_loss: bool = True
    use_global_ckpt: bool = True
    grayscale: bool = False
    know_batch_order: bool = True
    match: str = "epoch"
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise AttackError("iterations must be >= 1")
        if self.restarts < 1:
            raise AttackError("restarts must be >= 1")
        for name in ("w_grad", "w_bn", "w_tv", "w_l2", "lr", "label_lr"):
            if (getattr(self, name) or 0) < 0:
                raise AttackError(f"{name} must be >= 0")
        if self.match not in ("epoch", "single_step"):
            raise AttackError(f"match must be 'epoch' or 'single_step', got {self.match!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise AttackError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AttackNetwork:
    """Torch-side copy of the network the attacker replays.

    ``start_buffers`` are the running statistics the client started its
    epoch from; ``target_buffers`` are the intercepted end-of-epoch ones.
    """

    arch: ArchSpec
    bn: BNConfig
    params: dict[str, torch.Tensor]
    start_buffers: dict[str, torch.Tensor]
    target_buffers: dict[str, torch.Tensor]
    batch_size: int
    n_local_iterations: int
    n_images: int
    local_lr: float
    fixed_bn: bool = False

    @property
    def bn_layers(self) -> list[str]:
        return bn_layer_names(self.arch)


@dataclass(frozen=True)
class AttackLossBreakdown:
    total: float
    L_grad: float
    L_BN: float
    L_tv: float
    L_l2: float


@dataclass
class ReconstructionResult:
    images: np.ndarray
    label_logits: np.ndarray
    losses: np.ndarray
    best_iteration: int
    best_loss: float
    diverged: bool
    config_hash: str
    config: dict
    slot_order: np.ndarray | None = None
    restart_losses: list[float] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.label_logits, axis=1)

    def breakdown(self, i: int = -1) -> AttackLossBreakdown:
        row = self.losses[i]
        return AttackLossBreakdown(total=row[5], L_grad=row[1], L_BN=row[2], L_tv=row[3], L_l2=row[4])


# ---------------------------------------------------------------- loss terms


def grad_match_loss(simulated: Mapping[str, torch.Tensor], intercepted: Mapping[str, torch.Tensor]):
    """Sum over layers of the l2 norm of the difference."""
    if set(simulated) != set(intercepted):
        raise AttackError(f"layer mismatch: {sorted(set(simulated) ^ set(intercepted))}")
    terms = [torch.linalg.vector_norm(simulated[k] - intercepted[k]) for k in intercepted]
    return torch.stack(terms).sum()


def bn_loss(stats: Sequence, targets: Sequence):
    """sum_l ||mean_l - target_mean_l||_2 + sum_l ||var_l - target_var_l||_2."""
    if len(stats) != len(targets):
        raise AttackError(f"{len(stats)} BN layers against {len(targets)} targets")
    terms = []
    for (m, v), (tm, tv) in zip(stats, targets):
        if tuple(m.shape) != tuple(tm.shape) or tuple(v.shape) != tuple(tv.shape):
            raise AttackError("BN statistics shape mismatch")
        terms.append(torch.linalg.vector_norm(m - tm) + torch.linalg.vector_norm(v - tv))
    return torch.stack(terms).sum()


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV of N x H x W x C images: sum of |horizontal| + |vertical| neighbour differences."""
    dh = (x[:, :, 1:, :] - x[:, :, :-1, :]).abs().sum()
    dv = (x[:, 1:, :, :] - x[:, :-1, :, :]).abs().sum()
    return dh + dv


def prior_loss(x: torch.Tensor, w_tv: float, w_l2: float):
    """Returns (weighted total, tv, squared l2)."""
    tv = total_variation(x)
    l2 = (x**2).sum()
    return w_tv * tv + w_l2 * l2, tv, l2


# ---------------------------------------------------------------- attack network


def init_attack_network(
    global_ckpt: ModelState,
    update,
    use_global_ckpt: bool = True,
    round0_ckpt: ModelState | None = None,
    fixed_bn: bool = False,
) -> AttackNetwork:
    """Build the replay network from W^t (or round 0) and the intercepted update."""
    source = global_ckpt
    if not use_global_ckpt:
        if round0_ckpt is None:
            raise AttackError("use_global_ckpt=False needs the round-0 checkpoint")
        source = round0_ckpt
    if source.arch != global_ckpt.arch:
        raise ModelError("round-0 checkpoint architecture differs from the global one")
    if set(update.delta) != set(source.params):
        raise ModelError(f"update layers do not match the model: {sorted(set(update.delta) ^ set(source.params))}")
    if set(update.buffers) != set(source.buffers):
        raise ModelError("update BN buffers do not match the model")
    for k, v in update.delta.items():
        if tuple(np.shape(v)) != tuple(source.params[k].shape):
            raise ModelError(f"shape mismatch at {k}: {np.shape(v)} vs {source.params[k].shape}")
    return AttackNetwork(
        arch=source.arch,
        bn=source.bn,
        params=to_torch(source.params),
        start_buffers=to_torch(source.buffers),
        target_buffers=to_torch(update.buffers),
        batch_size=int(update.batch_size),
        n_local_iterations=int(update.n_local_iterations),
        n_images=int(update.n_train),
        local_lr=float(update.lr),
        fixed_bn=fixed_bn,
    )


def simulate_client_epoch(net: AttackNetwork, x_batches: Sequence[torch.Tensor], y_batches: Sequence[torch.Tensor]):
    """Replay the client's local epoch on trainable data.

    ``y_batches`` hold per-class probabilities. Returns ``(delta, buffers,
    stats)``: the simulated weight change, the running statistics after the
    epoch and the per-iteration batch statistics, all differentiable with
    respect to the inputs.
    """
    names = list(net.params)
    params = {k: v if v.requires_grad else v.detach().requires_grad_(True) for k, v in net.params.items()}
    start = params
    buffers = dict(net.start_buffers)
    layers = net.bn_layers
    all_stats = []
    mode = "eval" if net.fixed_bn else "train"
    for xb, yb in zip(x_batches, y_batches):
        logits, stats = functional_forward(net.arch, params, buffers, xb, mode, net.bn.eps)
        loss = F.cross_entropy(logits, yb)
        grads = torch.autograd.grad(loss, [params[n] for n in names], create_graph=True)
        params = {n: params[n] - net.local_lr * g for n, g in zip(names, grads)}
        if not net.fixed_bn:
            buffers = bn_update(buffers, stats, net.bn.momentum, layers)
            all_stats.append(stats)
    delta = {n: params[n] - start[n] for n in names}
    return delta, buffers, all_stats


def _single_step(net: AttackNetwork, x: torch.Tensor, y: torch.Tensor):
    names = list(net.params)
    params = {k: v.detach().requires_grad_(True) for k, v in net.params.items()}
    mode = "eval" if net.fixed_bn else "train"
    logits, stats = functional_forward(net.arch, params, net.start_buffers, x, mode, net.bn.eps)
    grads = torch.autograd.grad(F.cross_entropy(logits, y), [params[n] for n in names], create_graph=True)
    delta = {n: -net.local_lr * net.n_local_iterations * g for n, g in zip(names, grads)}
    buffers = dict(net.start_buffers)
    if not net.fixed_bn:
        for _ in range(net.n_local_iterations):
            buffers = bn_update(buffers, stats, net.bn.momentum, net.bn_layers)
    return delta, buffers


def _expand_channels(x: torch.Tensor, channels: int) -> torch.Tensor:
    return x.expand(-1, -1, -1, channels) if x.shape[-1] != channels else x


def _buffer_pairs(buffers: Mapping[str, torch.Tensor], layers: Sequence[str]):
    return [(buffers[f"{p}.running_mean"], buffers[f"{p}.running_var"]) for p in layers]


def attack_loss(
    net: AttackNetwork,
    target_delta: Mapping[str, torch.Tensor],
    x: torch.Tensor,
    y_prob: torch.Tensor,
    cfg: AttackConfig,
    w_bn: float | None = None,
):
    """Weighted total and its components for images ``x`` and label probabilities ``y_prob``.

    The weight change is compared in gradient units (divided by the local
    learning rate) so loss weights do not depend on the client's schedule.
    """
    x_full = _expand_channels(x, net.arch.in_channels)
    if cfg.match == "epoch":
        bs = net.batch_size
        xb = [x_full[i : i + bs] for i in range(0, x_full.shape[0], bs)]
        yb = [y_prob[i : i + bs] for i in range(0, y_prob.shape[0], bs)]
        delta, buffers, _ = simulate_client_epoch(net, xb, yb)
    else:
        delta, buffers = _single_step(net, x_full, y_prob)
    scale = 1.0 / net.local_lr if net.local_lr > 0 else 1.0
    l_grad = grad_match_loss({k: v * scale for k, v in delta.items()}, {k: v * scale for k, v in target_delta.items()})
    if cfg.use_bn_loss and not net.fixed_bn:
        layers = net.bn_layers
        l_bn = bn_loss(_buffer_pairs(buffers, layers), _buffer_pairs(net.target_buffers, layers))
    else:
        l_bn = torch.zeros((), dtype=DTYPE)
    wb = (cfg.w_bn if w_bn is None else w_bn) if cfg.use_bn_loss else 0.0
    p, tv, l2 = prior_loss(x, cfg.w_tv, cfg.w_l2)
    total = cfg.w_grad * l_grad + wb * l_bn + p
    return total, (l_grad, l_bn, tv, l2)


# ---------------------------------------------------------------- inversion


def _init_images(cfg: AttackConfig, prior: PriorImage | None, m: int, shape, gen: torch.Generator) -> torch.Tensor:
    h, w, c = shape
    if cfg.grayscale:
        c = 1
    if cfg.use_prior and prior is not None:
        p = torch.tensor(np.asarray(prior.image), dtype=DTYPE)
        if tuple(p.shape[:2]) != (h, w):
            raise AttackError(f"prior shape {tuple(p.shape)} does not match images {shape}")
        if c == 1 and p.shape[-1] != 1:
            p = p.mean(dim=-1, keepdim=True)
        return p.unsqueeze(0).repeat(m, 1, 1, 1).contiguous()
    return torch.rand((m, h, w, c), generator=gen, dtype=DTYPE)


def _run_once(net, target, cfg: AttackConfig, prior, seed: int):
    gen = torch.Generator().manual_seed(int(seed))
    arch = net.arch
    m = net.n_images
    x = _init_images(cfg, prior, m, (arch.image_size, arch.image_size, arch.in_channels), gen).requires_grad_(True)
    y = torch.rand((m, arch.num_classes), generator=gen, dtype=DTYPE).requires_grad_(True)

    w_bn = cfg.w_bn
    if cfg.use_bn_loss and cfg.bn_autoscale:
        with torch.enable_grad():
            _, (lg, lb, _, _) = attack_loss(net, target, x, torch.softmax(y, dim=1), cfg)
        lg, lb = float(lg.detach()), float(lb.detach())
        if lb > 0 and math.isfinite(lg) and math.isfinite(lb):
            w_bn = cfg.w_bn * lg / lb

    label_lr = cfg.lr if cfg.label_lr is None else cfg.label_lr
    opt = torch.optim.Adam([{"params": [x]}, {"params": [y], "lr": label_lr}], lr=cfg.lr)
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iterations)
    else:
        sched = None
    rows = []
    best = (math.inf, x.detach().clone(), y.detach().clone(), -1)
    bad = 0
    diverged = False
    for it in range(cfg.iterations):
        opt.zero_grad()
        total, (lg, lb, tv, l2) = attack_loss(net, target, x, torch.softmax(y, dim=1), cfg, w_bn)
        val = float(total.detach())
        rows.append((it, *(float(t.detach()) for t in (lg, lb, tv, l2)), val))
        if not math.isfinite(val):
            bad += 1
            if bad >= 3:
                diverged = True
                break
            continue
        bad = 0
        if val < best[0]:
            best = (val, x.detach().clone(), y.detach().clone(), it)
        total.backward()
        opt.step()
        if sched is not None:
            sched.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
    return best, np.array(rows, dtype=np.float64), diverged, w_bn


def invert(
    global_ckpt: ModelState,
    update,
    cfg: AttackConfig,
    prior: PriorImage | None = None,
    round0_ckpt: ModelState | None = None,
) -> ReconstructionResult:
    """Recover a client's images and labels from W^t and its intercepted update."""
    net = init_attack_network(
        global_ckpt, update, cfg.use_global_ckpt, round0_ckpt, fixed_bn=not cfg.use_bn_loss
    )
    target = to_torch(update.delta)
    results = []
    for r in range(cfg.restarts):
        results.append(_run_once(net, target, cfg, prior, cfg.seed + 1000 * r))
    losses = [res[0][0] for res in results]
    k = int(np.argmin(losses))
    (best_loss, bx, by, best_it), rows, diverged, w_bn = results[k]
    images = _expand_channels(bx, net.arch.in_channels).numpy().copy()
    return ReconstructionResult(
        images=np.clip(images, 0.0, 1.0),
        label_logits=by.numpy().copy(),
        losses=rows,
        best_iteration=best_it,
        best_loss=best_loss,
        diverged=diverged,
        config_hash=cfg.digest(),
        config={**asdict(cfg), "w_bn_effective": w_bn},
        slot_order=update.batch_order() if cfg.know_batch_order else None,
        restart_losses=losses,
    )


def oracle_loss(global_ckpt: ModelState, update, images, labels, cfg: AttackConfig) -> AttackLossBreakdown:
    """Attack loss evaluated at known images (in client batch order) and integer labels."""
    net = init_attack_network(global_ckpt, update, True, fixed_bn=not cfg.use_bn_loss)
    x = torch.tensor(np.asarray(images), dtype=DTYPE)
    y = F.one_hot(torch.tensor(np.asarray(labels), dtype=torch.long), net.arch.num_classes).to(DTYPE)
    total, (lg, lb, tv, l2) = attack_loss(net, to_torch(update.delta), x, y, cfg)
    return AttackLossBreakdown(*(float(t.detach()) for t in (total, lg, lb, tv, l2)))


def simulated_update(global_ckpt: ModelState, update, images, labels) -> tuple[dict, dict]:
    """Numpy weight change and buffers from replaying the epoch on given data (test helper)."""
    net = init_attack_network(global_ckpt, update, True)
    x = torch.tensor(np.asarray(images), dtype=DTYPE)
    y = F.one_hot(torch.tensor(np.asarray(labels), dtype=torch.long), net.arch.num_classes).to(DTYPE)
    bs = net.batch_size
    delta, buffers, _ = simulate_client_epoch(
        net, [x[i : i + bs] for i in range(0, len(x), bs)], [y[i : i + bs] for i in range(0, len(y), bs)]
    )
    return to_numpy(delta), to_numpy(buffers)
