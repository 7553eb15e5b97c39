"""Experiment configuration: a YAML file validated against a pydantic schema.

The global seed can be overridden with the ``FEDLEAK_SEED`` environment
variable. Every model has ``extra="forbid"`` so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .attack import AttackConfig
from .defense import DPConfig
from .fl_sim import ClientSpec, FederationPlan
from .model import ArchSpec

SEED_ENV = "FEDLEAK_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    source: Literal["synthetic", "manifest"] = "synthetic"
    root: Optional[str] = None
    manifest: str = "manifest.csv"
    class_names: Optional[list[str]] = None
    prior_root: Optional[str] = None
    prior_manifest: str = "manifest.csv"
    image_size: int = Field(32, ge=2)
    channels: Literal[1, 3] = 1
    n_images: int = Field(800, ge=1)
    n_prior: int = Field(100, ge=1)
    n_test: int = Field(200, ge=1)
    n_pretrain: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _root_needed(self):
        if self.source == "manifest" and not self.root:
            raise ValueError("data.root is required when data.source is 'manifest'")
        return self


class ModelSection(_Strict):
    name: Literal["cnn4", "resnet_mini"] = "cnn4"
    widths: list[int] = [8, 8, 8, 8]
    pool: Literal["max", "avg"] = "avg"
    pool_blocks: Optional[int] = None
    activation: Literal["relu", "softplus", "gelu", "tanh"] = "gelu"
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_eps: float = Field(1e-5, gt=0)
    # centralised warm start on data.n_pretrain held-out images; 0 trains from scratch
    pretrain_epochs: int = Field(0, ge=0)
    pretrain_lr: float = Field(0.05, gt=0)
    pretrain_batch_size: int = Field(8, ge=1)


class DPSection(_Strict):
    mechanism: Literal["none", "percentile_gaussian", "dp_sgd"] = "none"
    sigma0: float = Field(0.0, ge=0)
    q: float = Field(95.0, gt=0, le=100)
    clip_norm: float = Field(1.0, gt=0)
    noise_mult: float = Field(0.0, ge=0)
    percentile_method: Literal["nearest_rank", "linear"] = "nearest_rank"
    noise_buffers: bool = False

    def build(self, seed: int) -> DPConfig:
        return DPConfig(**self.model_dump(), seed=seed)


class ClientSection(_Strict):
    client_id: str
    batch_size: int = Field(ge=1)
    n_train: int = Field(ge=1)
    n_valid: int = Field(0, ge=0)
    balanced: bool = True
    shares_with: Optional[str] = None


class FederationSection(_Strict):
    rounds: int = Field(12, ge=1)
    lr: float = Field(0.05, gt=0)
    lr_decay: float = Field(0.1, gt=0)
    lr_decay_every: int = Field(1000, ge=1)
    bn_aggregation: Literal["weighted", "keep"] = "weighted"
    clients: list[ClientSection]

    @field_validator("clients")
    @classmethod
    def _unique(cls, v):
        if not v:
            raise ValueError("at least one client is required")
        ids = [c.client_id for c in v]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate client ids {ids}")
        known = set(ids)
        for c in v:
            if c.shares_with is not None and c.shares_with not in known:
                raise ValueError(f"client {c.client_id} shares with unknown client {c.shares_with!r}")
        return v


class AttackSection(_Strict):
    iterations: int = Field(2000, ge=1)
    lr: float = Field(0.01, ge=0)
    label_lr: Optional[float] = Field(1.0, ge=0)
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    w_grad: float = Field(1.0, ge=0)
    w_bn: float = Field(1e-3, ge=0)
    bn_autoscale: bool = True
    w_tv: float = Field(1e-4, ge=0)
    w_l2: float = Field(1e-6, ge=0)
    use_prior: bool = True
    use_bn_loss: bool = True
    use_global_ckpt: bool = True
    grayscale: bool = False
    know_batch_order: bool = True
    match: Literal["epoch", "single_step"] = "epoch"
    restarts: int = Field(1, ge=1)

    def build(self, seed: int) -> AttackConfig:
        return AttackConfig(**self.model_dump(), seed=seed)


class SweepSection(_Strict):
    dp: list[DPSection] = [DPSection()]
    clients: list[str] = []
    rounds: list[int] = [-1]
    attack_seeds: list[int] = [0]

    @field_validator("dp", "attack_seeds", "rounds")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("grid must be non-empty")
        return v


class MetricsSection(_Strict):
    bootstrap_trials: int = Field(1000, ge=1)
    ci_level: float = Field(0.95, gt=0, lt=1)
    iip_k: int = Field(1, ge=1)
    embedder: Literal["best", "final"] = "best"


class ExperimentConfig(_Strict):
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "out"
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    federation: FederationSection
    attack: AttackSection = AttackSection()
    sweep: SweepSection = SweepSection()
    metrics: MetricsSection = MetricsSection()

    @model_validator(mode="after")
    def _paths_exist(self):
        if self.data.source == "manifest":
            root = Path(self.data.root)
            if not (root / self.data.manifest).is_file():
                raise ValueError(f"data.root: manifest {root / self.data.manifest} does not exist")
            if self.data.prior_root and not (Path(self.data.prior_root) / self.data.prior_manifest).is_file():
                raise ValueError(f"data.prior_root: manifest not found under {self.data.prior_root}")
        if self.model.pretrain_epochs > 0 and self.data.n_pretrain == 0:
            raise ValueError("model.pretrain_epochs: needs data.n_pretrain > 0")
        known = {c.client_id for c in self.federation.clients}
        for c in self.sweep.clients:
            if c not in known:
                raise ValueError(f"sweep.clients: unknown client {c!r}")
        return self

    # ------------------------------------------------------------ builders

    def arch(self, num_classes: int = 2) -> ArchSpec:
        m = self.model
        return ArchSpec(
            name=m.name,
            in_channels=self.data.channels,
            image_size=self.data.image_size,
            num_classes=len(self.data.class_names) if self.data.class_names else num_classes,
            widths=tuple(m.widths),
            pool=m.pool,
            pool_blocks=m.pool_blocks,
            activation=m.activation,
        )

    def plan(self, dp: DPSection | None = None) -> FederationPlan:
        f = self.federation
        dp_cfg = (dp or DPSection()).build(self.seed)
        clients = tuple(ClientSpec(**c.model_dump(), dp=dp_cfg) for c in f.clients)
        return FederationPlan(
            clients=clients,
            rounds=f.rounds,
            lr=f.lr,
            lr_decay=f.lr_decay,
            lr_decay_every=f.lr_decay_every,
            seed=self.seed,
            bn_aggregation=f.bn_aggregation,
        )

    def snapshot(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def digest(self, *parts: Any) -> str:
        blob = json.dumps([self.snapshot(), *parts], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def federation_id(self, dp: DPSection | None = None) -> str:
        """Content hash of everything that determines a federation run."""
        snap = self.snapshot()
        keep = {k: snap[k] for k in ("seed", "data", "model", "federation")}
        keep["dp"] = (dp or DPSection()).model_dump(mode="json")
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:12]


def _format(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(raw: dict[str, Any], env: dict[str, str] | None = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    raw = dict(raw or {})
    if SEED_ENV in env:
        try:
            raw["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"seed: {SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format(exc)) from None


def load_config(path: str | Path, env: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    return parse_config(raw or {}, env)
