"""Experiment configuration: JSON schema, validation, and CLI overrides.

A run is described by one JSON document whose keys mirror the RunConfig
fields.  Validation is strict: unknown keys and missing algorithm-required
keys raise SchemaError naming the offending dotted path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .data import DomainTransform
from .losses import LossConfig
from .nn import DTYPES, LayerSpec

ALGORITHMS = ("local", "fedavg", "fedprox", "fedproto", "sp_fedcl", "mp_fedcl")
CONTRASTIVE_ALGOS = ("sp_fedcl", "mp_fedcl")
SINGLE_PROTOTYPE_ALGOS = ("sp_fedcl", "fedproto")

DEFAULT_MU_PROX = 0.01
DEFAULT_LAMBDA_PROTO = 1.0


class SchemaError(ValueError):
    """A config document violates the schema."""


@dataclass
class ArchConfig:
    input_dim: int
    num_classes: int
    encoder: list[int] = field(default_factory=lambda: [512, 512])
    head: list[int] = field(default_factory=lambda: [256])

    def encoder_specs(self) -> tuple[LayerSpec, ...]:
        dims = [self.input_dim] + list(self.encoder)
        return tuple(LayerSpec(a, b, "relu") for a, b in zip(dims, dims[1:]))

    def head_specs(self) -> tuple[LayerSpec, ...]:
        dims = [self.encoder[-1]] + list(self.head) + [self.num_classes]
        specs = [LayerSpec(a, b, "relu") for a, b in zip(dims, dims[1:])]
        last = specs[-1]
        specs[-1] = LayerSpec(last.in_dim, last.out_dim, "none")
        return tuple(specs)


@dataclass
class PartitionConfig:
    kind: str  # "dirichlet" | "feature_skew"
    alpha: float | None = None
    transforms: list[DomainTransform] | None = None


@dataclass
class DatasetConfig:
    kind: str  # "synth_digits" | "synth_gaussian" | "idx" | "container"
    n: int | None = None  # stratified subsample target
    standardize: bool = False  # shift/scale features to zero mean, unit variance
    noise_sigma: float = 0.10  # synth_digits
    deform: float = 1.0  # synth_digits
    classes: int | None = None  # synth_gaussian
    dim: int | None = None
    n_per_class: int | None = None
    separation: float | None = None
    images: str | None = None  # idx
    labels: str | None = None
    path: str | None = None  # container


@dataclass
class SeedConfig:
    master: int = 0


@dataclass
class RunConfig:
    algorithm: str
    N: int
    T: int
    arch: ArchConfig
    dataset: DatasetConfig
    partition: PartitionConfig
    seeds: SeedConfig = field(default_factory=SeedConfig)
    E: int = 1
    B: int = 32
    lr: float = 0.01
    lr_decay: float = 0.95
    momentum: float = 0.5
    K: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    precision: str = "f64"
    eval_mode: str | None = None  # override; None picks the algorithm default
    workers: int | None = None  # None means one worker per client
    diagnostics: bool = True
    l1_smooth: float = 10.0
    kmeans_warm_start: bool = False  # seed clustering from the previous round's centroids


def _check_keys(raw: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise SchemaError(f"unknown key(s) {unknown} under {where!r}")


def _sub(raw: dict, key: str, required: bool = True) -> dict:
    value = raw.get(key)
    if value is None:
        if required:
            raise SchemaError(f"missing required key: {key}")
        return {}
    if not isinstance(value, dict):
        raise SchemaError(f"{key} must be an object")
    return value


def config_from_dict(raw: dict) -> RunConfig:
    """Parse, normalize, and validate one config document."""
    top_keys = {f.name for f in fields(RunConfig)}
    _check_keys(raw, top_keys, "<top level>")
    for key in ("algorithm", "N", "T", "arch", "dataset", "partition"):
        if key not in raw:
            raise SchemaError(f"missing required key: {key}")

    algorithm = raw["algorithm"]
    if algorithm not in ALGORITHMS:
        raise SchemaError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")

    arch_raw = _sub(raw, "arch")
    _check_keys(arch_raw, {f.name for f in fields(ArchConfig)}, "arch")
    for key in ("input_dim", "num_classes"):
        if key not in arch_raw:
            raise SchemaError(f"missing required key: arch.{key}")
    arch = ArchConfig(**arch_raw)
    if arch.input_dim < 1 or arch.num_classes < 2 or not arch.encoder or not arch.head:
        raise SchemaError("arch needs input_dim >= 1, num_classes >= 2, nonempty encoder/head")

    ds_raw = _sub(raw, "dataset")
    _check_keys(ds_raw, {f.name for f in fields(DatasetConfig)}, "dataset")
    if "kind" not in ds_raw:
        raise SchemaError("missing required key: dataset.kind")
    dataset = DatasetConfig(**ds_raw)
    if dataset.kind not in ("synth_digits", "synth_gaussian", "idx", "container"):
        raise SchemaError(f"unknown dataset.kind {dataset.kind!r}")
    if dataset.kind == "synth_digits" and not dataset.n:
        raise SchemaError("missing required key: dataset.n")
    if dataset.kind == "synth_gaussian":
        for key in ("classes", "dim", "n_per_class", "separation"):
            if getattr(dataset, key) is None:
                raise SchemaError(f"missing required key: dataset.{key}")
    if dataset.kind == "idx" and (not dataset.images or not dataset.labels):
        raise SchemaError("dataset.kind 'idx' needs dataset.images and dataset.labels")
    if dataset.kind == "container" and not dataset.path:
        raise SchemaError("dataset.kind 'container' needs dataset.path")

    part_raw = _sub(raw, "partition")
    _check_keys(part_raw, {f.name for f in fields(PartitionConfig)}, "partition")
    kind = part_raw.get("kind")
    if kind == "dirichlet":
        if part_raw.get("alpha") is None:
            raise SchemaError("missing required key: partition.alpha")
        partition = PartitionConfig("dirichlet", alpha=float(part_raw["alpha"]))
        if partition.alpha <= 0:
            raise SchemaError("partition.alpha must be > 0")
    elif kind == "feature_skew":
        transforms_raw = part_raw.get("transforms")
        if not transforms_raw:
            raise SchemaError("missing required key: partition.transforms")
        allowed = {"rotation_angle", "scale", "noise_sigma", "channel_shift"}
        transforms = []
        for i, t in enumerate(transforms_raw):
            _check_keys(t, allowed, f"partition.transforms[{i}]")
            transforms.append(DomainTransform(**t))
        partition = PartitionConfig("feature_skew", transforms=transforms)
    else:
        raise SchemaError(f"partition.kind must be 'dirichlet' or 'feature_skew', got {kind!r}")

    seeds_raw = _sub(raw, "seeds", required=False)
    _check_keys(seeds_raw, {"master"}, "seeds")
    seeds = SeedConfig(int(seeds_raw.get("master", 0)))

    loss_raw = _sub(raw, "loss", required=False)
    _check_keys(loss_raw, {f.name for f in fields(LossConfig)}, "loss")
    loss = LossConfig(**loss_raw)
    if algorithm in CONTRASTIVE_ALGOS and "use_contrastive" not in loss_raw:
        loss.use_contrastive = True
    if loss.use_contrastive and "tau" not in loss_raw:
        raise SchemaError(f"missing required key for {algorithm}: loss.tau")
    if algorithm == "fedprox" and "mu_prox" not in loss_raw:
        loss.mu_prox = DEFAULT_MU_PROX
    if algorithm == "fedproto" and "lambda_proto" not in loss_raw:
        loss.lambda_proto = DEFAULT_LAMBDA_PROTO
    try:
        loss.validate()
    except ValueError as exc:
        raise SchemaError(f"loss: {exc}") from exc

    config = RunConfig(
        algorithm=algorithm,
        N=int(raw["N"]),
        T=int(raw["T"]),
        arch=arch,
        dataset=dataset,
        partition=partition,
        seeds=seeds,
        E=int(raw.get("E", 1)),
        B=int(raw.get("B", 32)),
        lr=float(raw.get("lr", 0.01)),
        lr_decay=float(raw.get("lr_decay", 0.95)),
        momentum=float(raw.get("momentum", 0.5)),
        K=int(raw.get("K", 2)),
        loss=loss,
        precision=raw.get("precision", "f64"),
        eval_mode=raw.get("eval_mode"),
        workers=raw.get("workers"),
        diagnostics=bool(raw.get("diagnostics", True)),
        l1_smooth=float(raw.get("l1_smooth", 10.0)),
        kmeans_warm_start=bool(raw.get("kmeans_warm_start", False)),
    )
    if algorithm in SINGLE_PROTOTYPE_ALGOS:
        config.K = 1

    if min(config.N, config.T, config.E, config.B, config.K) < 1:
        raise SchemaError("N, T, E, B, and K must all be >= 1")
    if config.lr < 0 or config.lr_decay <= 0:
        raise SchemaError("need lr >= 0 and lr_decay > 0")
    if not 0 <= config.momentum < 1:
        raise SchemaError("momentum must lie in [0, 1)")
    if config.precision not in DTYPES:
        raise SchemaError(f"precision must be one of {sorted(DTYPES)}")
    if config.eval_mode not in (None, "prototype", "classifier"):
        raise SchemaError("eval_mode must be 'prototype', 'classifier', or omitted")
    if config.workers is not None and int(config.workers) < 1:
        raise SchemaError("workers must be >= 1")
    if config.partition.kind == "feature_skew" and len(config.partition.transforms) != config.N:
        raise SchemaError("partition.transforms must list exactly one transform per client")
    return config


def config_to_dict(config: RunConfig) -> dict:
    """Lossless inverse of config_from_dict."""
    out: dict = {
        "algorithm": config.algorithm,
        "N": config.N,
        "T": config.T,
        "E": config.E,
        "B": config.B,
        "lr": config.lr,
        "lr_decay": config.lr_decay,
        "momentum": config.momentum,
        "K": config.K,
        "loss": vars(config.loss).copy(),
        "arch": vars(config.arch).copy(),
        "dataset": {k: v for k, v in vars(config.dataset).items() if v is not None},
        "seeds": {"master": config.seeds.master},
        "precision": config.precision,
        "eval_mode": config.eval_mode,
        "workers": config.workers,
        "diagnostics": config.diagnostics,
        "l1_smooth": config.l1_smooth,
        "kmeans_warm_start": config.kmeans_warm_start,
    }
    if config.partition.kind == "dirichlet":
        out["partition"] = {"kind": "dirichlet", "alpha": config.partition.alpha}
    else:
        out["partition"] = {
            "kind": "feature_skew",
            "transforms": [vars(t).copy() for t in config.partition.transforms],
        }
    return out


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply `--set key.path=value` overrides; values parse as JSON literals."""
    for assignment in assignments:
        if "=" not in assignment:
            raise SchemaError(f"override {assignment!r} is not of the form key=value")
        path, text = assignment.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise SchemaError(f"override path {path!r} crosses a non-object value")
        node[parts[-1]] = value
    return raw


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("config document must be a JSON object")
    if "manifest_hash" in raw and isinstance(raw.get("config"), dict):
        raw = raw["config"]  # a manifest.json regenerates its own run
    if overrides:
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)
