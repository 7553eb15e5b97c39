"""Small BatchNorm image classifiers written in functional torch.

Parameters and running statistics live in plain dictionaries so that the
same forward pass serves three callers: client training (numpy state in,
numpy gradients out), the server-side attack (torch tensors with a graph
kept for second-order derivatives), and the test oracles.

Images are N x H x W x C at every public boundary; the channel-first
layout torch wants is an internal detail of :func:`functional_forward`.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

CHECKPOINT_VERSION = 1
DTYPE = torch.float64

BUFFER_KINDS = ("running_mean", "running_var")
ARCHITECTURES = ("cnn4", "resnet_mini")
# smooth activations keep the gradient of the weight gradient continuous in the input
ACTIVATIONS = {"relu": F.relu, "softplus": F.softplus, "gelu": F.gelu, "tanh": torch.tanh}
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class ModelError(ValueError):
    """Shape or architecture mismatch."""


class NonFiniteError(FloatingPointError):
    """An activation or loss stopped being finite."""

    def __init__(self, layer: str, message: str = ""):
        self.layer = layer
        super().__init__(message or f"non-finite values at {layer}")


@dataclass(frozen=True)
class BNConfig:
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ModelError(f"BN momentum must lie in (0, 1], got {self.momentum}")
        if self.eps <= 0:
            raise ModelError(f"BN epsilon must be positive, got {self.eps}")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description; enough to rebuild the layer layout.

    ``cnn4`` is a stack of conv3x3 -> BN -> activation -> pool blocks, one per
    entry of ``widths``, followed by a linear head. ``resnet_mini`` uses a
    stem block followed by one residual block per remaining width (all
    widths must match). The first ``pool_blocks`` stages (all by default)
    end with a 2x2 pooling, skipped once the spatial size drops below 2.
    """

    name: str = "cnn4"
    in_channels: int = 1
    image_size: int = 16
    num_classes: int = 2
    widths: tuple[int, ...] = (8, 8, 8, 8)
    pool: str = "max"
    pool_blocks: int | None = None
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.name not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.name!r}; known: {sorted(ARCHITECTURES)}")
        if self.pool not in ("max", "avg"):
            raise ModelError(f"pool must be 'max' or 'avg', got {self.pool!r}")
        if self.activation not in ACTIVATIONS:
            raise ModelError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        if not self.widths:
            raise ModelError("widths must be non-empty")
        if self.name == "resnet_mini" and len(set(self.widths)) != 1:
            raise ModelError("resnet_mini needs equal widths")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchSpec":
        return cls(**{**d, "widths": tuple(d.get("widths", cls.widths))})


@dataclass(frozen=True)
class ModelState:
    """All trainable parameters plus BN running statistics.

    Arrays are stored read-only; training produces new states.
    """

    arch: ArchSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    bn: BNConfig = field(default_factory=BNConfig)

    def __post_init__(self):
        for attr in ("params", "buffers"):
            frozen = {}
            for k, v in getattr(self, attr).items():
                arr = np.array(v, dtype=np.float64, copy=True)
                arr.setflags(write=False)
                frozen[k] = arr
            object.__setattr__(self, attr, frozen)
        for name, arr in self.buffers.items():
            if name.endswith("running_var") and np.any(arr < 0):
                raise ModelError(f"{name} has negative entries")

    @property
    def param_names(self) -> list[str]:
        return list(self.params)

    @property
    def bn_layers(self) -> list[str]:
        return bn_layer_names(self.arch)

    def replace(self, params=None, buffers=None) -> "ModelState":
        return ModelState(
            self.arch,
            dict(self.params if params is None else params),
            dict(self.buffers if buffers is None else buffers),
            self.bn,
        )

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# ---------------------------------------------------------------- layouts


def _conv_layers(arch: ArchSpec) -> list[tuple[str, int, int]]:
    """(layer prefix, in_ch, out_ch) for every conv+BN unit, in order."""
    out = []
    if arch.name == "cnn4":
        c = arch.in_channels
        for i, w in enumerate(arch.widths):
            out.append((f"layer{i}", c, w))
            c = w
    else:
        w = arch.widths[0]
        out.append(("layer0", arch.in_channels, w))
        for j in range(len(arch.widths) - 1):
            out.append((f"layer{2 * j + 1}", w, w))
            out.append((f"layer{2 * j + 2}", w, w))
    return out


def _pooled_stages(arch: ArchSpec) -> list[bool]:
    n = len(arch.widths) if arch.pool_blocks is None else arch.pool_blocks
    size, out = arch.image_size, []
    for i in range(len(arch.widths)):
        do = i < n and size >= 2
        if do:
            size //= 2
        out.append(do)
    return out


def _n_pools(arch: ArchSpec) -> int:
    return sum(_pooled_stages(arch))


def feature_dim(arch: ArchSpec) -> int:
    size = arch.image_size
    for _ in range(_n_pools(arch)):
        size //= 2
    return arch.widths[-1] * size * size


def head_name(arch: ArchSpec) -> str:
    return f"layer{len(_conv_layers(arch))}"


def bn_layer_names(arch: ArchSpec) -> list[str]:
    return [p for p, _, _ in _conv_layers(arch)]


def param_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for prefix, cin, cout in _conv_layers(arch):
        shapes[f"{prefix}.weight"] = (cout, cin, 3, 3)
        shapes[f"{prefix}.gamma"] = (cout,)
        shapes[f"{prefix}.beta"] = (cout,)
    h = head_name(arch)
    shapes[f"{h}.weight"] = (arch.num_classes, feature_dim(arch))
    shapes[f"{h}.bias"] = (arch.num_classes,)
    return shapes


def init_state(arch: ArchSpec, seed: int = 0, bn: BNConfig | None = None) -> ModelState:
    """He-style initialisation; gamma=1, beta=0, running stats (0, 1)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(arch).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "gamma":
            params[name] = np.ones(shape)
        elif kind in ("beta", "bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    buffers: dict[str, np.ndarray] = {}
    for prefix, _, cout in _conv_layers(arch):
        buffers[f"{prefix}.running_mean"] = np.zeros(cout)
        buffers[f"{prefix}.running_var"] = np.ones(cout)
    return ModelState(arch, params, buffers, bn or BNConfig())


# ---------------------------------------------------------------- forward


def to_torch(arrays: Mapping[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.tensor(np.asarray(v), dtype=DTYPE) for k, v in arrays.items()}


def to_numpy(tensors: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float64, copy=True) for k, v in tensors.items()}


def _batch_norm(h, gamma, beta, mean_buf, var_buf, mode: str, eps: float):
    if mode == "train":
        mean = h.mean(dim=(0, 2, 3))
        var = ((h - mean[None, :, None, None]) ** 2).mean(dim=(0, 2, 3))
        stats = (mean, var)
    else:
        mean, var = mean_buf, var_buf
        stats = None
    out = (h - mean[None, :, None, None]) / torch.sqrt(var[None, :, None, None] + eps)
    return out * gamma[None, :, None, None] + beta[None, :, None, None], stats


def _check(h: torch.Tensor, layer: str, enabled: bool):
    if enabled and not bool(torch.isfinite(h).all()):
        raise NonFiniteError(layer)


def functional_forward(
    arch: ArchSpec,
    params: Mapping[str, torch.Tensor],
    buffers: Mapping[str, torch.Tensor],
    images: torch.Tensor,
    mode: str = "train",
    eps: float = 1e-5,
    check_finite: bool = False,
    return_features: bool = False,
):
    """Run the network; returns ``(logits, batch_stats)``.

    ``batch_stats`` is a list of (mean, biased variance) per BN layer in
    train mode and an empty list in eval mode. With ``return_features``
    the penultimate activations are returned as a third element.
    """
    if mode not in ("train", "eval"):
        raise ModelError(f"mode must be 'train' or 'eval', got {mode!r}")
    if images.ndim != 4 or tuple(images.shape[1:]) != (arch.image_size, arch.image_size, arch.in_channels):
        raise ModelError(
            f"expected images N x {arch.image_size} x {arch.image_size} x {arch.in_channels}, "
            f"got {tuple(images.shape)}"
        )
    h = images.permute(0, 3, 1, 2)
    stats: list[tuple[torch.Tensor, torch.Tensor]] = []
    pool = F.max_pool2d if arch.pool == "max" else F.avg_pool2d
    act = ACTIVATIONS[arch.activation]

    def unit(h, prefix, relu=True):
        h = F.conv2d(h, params[f"{prefix}.weight"], padding=1)
        h, s = _batch_norm(
            h,
            params[f"{prefix}.gamma"],
            params[f"{prefix}.beta"],
            buffers.get(f"{prefix}.running_mean"),
            buffers.get(f"{prefix}.running_var"),
            mode,
            eps,
        )
        if s is not None:
            stats.append(s)
        if relu:
            h = act(h)
        _check(h, prefix, check_finite)
        return h

    pooled = _pooled_stages(arch)

    def maybe_pool(h, stage):
        return pool(h, 2) if pooled[stage] else h

    if arch.name == "cnn4":
        for stage, (prefix, _, _) in enumerate(_conv_layers(arch)):
            h = maybe_pool(unit(h, prefix), stage)
    else:
        h = maybe_pool(unit(h, "layer0"), 0)
        for j in range(len(arch.widths) - 1):
            r = unit(h, f"layer{2 * j + 1}")
            r = unit(r, f"layer{2 * j + 2}", relu=False)
            h = maybe_pool(act(h + r), j + 1)
    feats = h.reshape(h.shape[0], -1)
    head = head_name(arch)
    logits = feats @ params[f"{head}.weight"].T + params[f"{head}.bias"]
    _check(logits, head, check_finite)
    if return_features:
        return logits, stats, feats
    return logits, stats


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``target`` is class indices or per-class probabilities."""
    return F.cross_entropy(logits, target)


def forward(state: ModelState, images, mode: str = "eval"):
    """Numpy-facing forward pass; returns ``(logits, batch_stats)`` as arrays."""
    with torch.no_grad():
        logits, stats = functional_forward(
            state.arch,
            to_torch(state.params),
            to_torch(state.buffers),
            torch.tensor(np.asarray(images), dtype=DTYPE),
            mode,
            state.bn.eps,
            check_finite=True,
        )
    return logits.numpy(), [(m.numpy(), v.numpy()) for m, v in stats]


def embed(state: ModelState, images) -> np.ndarray:
    """Penultimate-layer features in eval mode."""
    with torch.no_grad():
        _, _, feats = functional_forward(
            state.arch,
            to_torch(state.params),
            to_torch(state.buffers),
            torch.tensor(np.asarray(images), dtype=DTYPE),
            "eval",
            state.bn.eps,
            return_features=True,
        )
    return feats.numpy()


def loss_and_grads(state: ModelState, batch, mode: str = "train", return_stats: bool = False):
    """Cross-entropy loss and exact gradients for every trainable tensor.

    ``batch`` is ``(images, labels)``; labels may be integer classes or an
    N x num_classes array of probabilities.
    """
    images, labels = batch
    images = np.asarray(images)
    if images.shape[0] < 1:
        raise ModelError("batch must be non-empty")
    params = {k: v.requires_grad_(True) for k, v in to_torch(state.params).items()}
    labels = np.asarray(labels)
    target = torch.tensor(labels, dtype=torch.long if labels.dtype.kind in "iu" else DTYPE)
    logits, stats = functional_forward(
        state.arch, params, to_torch(state.buffers), torch.tensor(np.asarray(images), dtype=DTYPE), mode, state.bn.eps,
        check_finite=True,
    )
    loss = cross_entropy(logits, target)
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("loss")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names])
    out = (float(loss.detach()), {n: g.numpy().copy() for n, g in zip(names, grads)})
    if return_stats:
        return out + ([(m.detach().numpy(), v.detach().numpy()) for m, v in stats],)
    return out


def per_example_grads(state: ModelState, batch) -> tuple[float, list[dict[str, np.ndarray]], list]:
    """Per-example gradients under a shared train-mode forward pass.

    BN couples the examples of a batch, so example i's gradient is that of
    its own loss term with the batch statistics of the whole batch. The
    mean of the returned gradients equals the batch gradient.
    """
    images, labels = batch
    params = {k: v.requires_grad_(True) for k, v in to_torch(state.params).items()}
    logits, stats = functional_forward(
        state.arch, params, to_torch(state.buffers), torch.tensor(np.asarray(images), dtype=DTYPE),
        "train", state.bn.eps, check_finite=True,
    )
    losses = F.cross_entropy(logits, torch.tensor(np.asarray(labels), dtype=torch.long), reduction="none")
    names = list(params)
    out = []
    for i in range(losses.shape[0]):
        g = torch.autograd.grad(losses[i], [params[n] for n in names], retain_graph=True)
        out.append({n: t.numpy().copy() for n, t in zip(names, g)})
    return float(losses.mean().detach()), out, [(m.detach().numpy(), v.detach().numpy()) for m, v in stats]


# ---------------------------------------------------------------- BN statistics


def bn_update(buffers: Mapping, batch_stats: Sequence, momentum: float, layers: Sequence[str]) -> dict:
    """Momentum update of running statistics, one BN layer per entry of ``layers``.

    Works on numpy arrays and on torch tensors (keeping the graph).
    """
    if len(batch_stats) != len(layers):
        raise ModelError(f"{len(batch_stats)} batch statistics for {len(layers)} BN layers")
    out = dict(buffers)
    for prefix, (mean, var) in zip(layers, batch_stats):
        old_m, old_v = buffers[f"{prefix}.running_mean"], buffers[f"{prefix}.running_var"]
        if tuple(mean.shape) != tuple(old_m.shape) or tuple(var.shape) != tuple(old_v.shape):
            raise ModelError(f"statistics shape mismatch at {prefix}")
        if isinstance(var, np.ndarray) and np.any(var < 0):
            raise ModelError(f"negative batch variance at {prefix}")
        out[f"{prefix}.running_mean"] = (1 - momentum) * old_m + momentum * mean
        out[f"{prefix}.running_var"] = (1 - momentum) * old_v + momentum * var
    return out


# ---------------------------------------------------------------- checkpoints


def write_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Write named arrays plus a JSON header as an ``.npz``-compatible zip.

    Entry timestamps are pinned so identical content gives identical bytes.
    """
    buf = io.BytesIO()
    entries = {"__meta__": np.array(json.dumps(meta, sort_keys=True)), **arrays}
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in entries.items():
            payload = io.BytesIO()
            np.lib.format.write_array(payload, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH), payload.getvalue())
    Path(path).write_bytes(buf.getvalue())


def read_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return meta, arrays


def save_state(path: str | Path, state: ModelState) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(state.arch),
        "bn": asdict(state.bn),
        "params": list(state.params),
        "buffers": list(state.buffers),
    }
    write_arrays(path, {**state.params, **state.buffers}, meta)


def load_state(path: str | Path) -> ModelState:
    meta, arrays = read_arrays(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {meta.get('version')} in {path}")
    params = {n: arrays[n] for n in meta["params"]}
    buffers = {n: arrays[n] for n in meta["buffers"]}
    return ModelState(ArchSpec.from_dict(meta["arch"]), params, buffers, BNConfig(**meta["bn"]))
