"""Command-line harness: run, sweep-k, partition-report, and compare.

All randomness flows from the config's master seed; outputs are plain
RFC-4180 CSV (UTF-8, LF) plus JSON, and regenerating from the same manifest
yields byte-identical files.  Exit codes: 0 ok, 2 schema violation, 3 loss
divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .config import (
    SINGLE_PROTOTYPE_ALGOS,
    RunConfig,
    SchemaError,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
)
from .data import (
    ClientShard,
    Dataset,
    load_dataset,
    load_idx,
    partition_dirichlet,
    partition_feature_skew,
    subsample,
    synth_gaussian,
)
from .digits import synth_digits
from .federation import RunArtifacts, TrainingDiverged, run_training
from .prototypes import pool_to_dict
from .rng import STREAM_DATA, STREAM_INIT, STREAM_PARTITION, derive_seed

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NAN = 3
EXIT_IO = 4

METRICS_HEADER = "round,client_id,train_loss,eval_acc,lr,algorithm,seed"
CONVERGENCE_HEADER = (
    "round,global_grad_norm,delta_hat,sigma2_hat,G_hat,A_p,L2_hat,eta_bound,eta_used,decreasing_ok"
)


@dataclass
class ExperimentManifest:
    config: dict
    out_dir: str
    created_at: str
    tool_version: str
    resolved_seeds: dict
    manifest_hash: str


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def build_dataset(config: RunConfig) -> Dataset:
    """Materialize the configured dataset source, deterministically."""
    spec = config.dataset
    seed = derive_seed(config.seeds.master, STREAM_DATA)
    if spec.kind == "synth_digits":
        ds = synth_digits(spec.n, seed, spec.noise_sigma, spec.deform)
    elif spec.kind == "synth_gaussian":
        ds = synth_gaussian(spec.classes, spec.dim, spec.n_per_class, spec.separation, seed)
        if spec.n is not None and spec.n < ds.rows:
            ds = subsample(ds, spec.n, derive_seed(seed, 1))
    elif spec.kind == "idx":
        ds = load_idx(spec.images, spec.labels, num_classes=config.arch.num_classes)
        if spec.n is not None and spec.n < ds.rows:
            ds = subsample(ds, spec.n, derive_seed(seed, 1))
    elif spec.kind == "container":
        ds = load_dataset(spec.path)
        if spec.n is not None and spec.n < ds.rows:
            ds = subsample(ds, spec.n, derive_seed(seed, 1))
    else:
        raise SchemaError(f"unknown dataset.kind {spec.kind!r}")
    if ds.features.shape[1] != config.arch.input_dim:
        raise SchemaError(
            f"dataset has {ds.features.shape[1]} features but arch.input_dim is {config.arch.input_dim}"
        )
    if spec.standardize:
        mean = ds.features.mean()
        std = max(ds.features.std(), 1e-12)
        ds = Dataset((ds.features - mean) / std, ds.labels, ds.num_classes)
    return ds


def build_shards(config: RunConfig, dataset: Dataset | None = None) -> list[ClientShard]:
    ds = dataset if dataset is not None else build_dataset(config)
    seed = derive_seed(config.seeds.master, STREAM_PARTITION)
    if config.partition.kind == "dirichlet":
        return partition_dirichlet(ds, config.N, config.partition.alpha, seed)
    return partition_feature_skew(ds, config.partition.transforms, seed)


def make_manifest(config: RunConfig, out_dir: str) -> ExperimentManifest:
    config_doc = config_to_dict(config)
    resolved = {
        "master": config.seeds.master,
        "init": derive_seed(config.seeds.master, STREAM_INIT),
        "data": derive_seed(config.seeds.master, STREAM_DATA),
        "partition": derive_seed(config.seeds.master, STREAM_PARTITION),
    }
    hashed = json.dumps(
        {"config": config_doc, "tool_version": __version__, "resolved_seeds": resolved},
        sort_keys=True,
        separators=(",", ":"),
    )
    digest = hashlib.sha256(hashed.encode("utf-8")).hexdigest()
    return ExperimentManifest(
        config=config_doc,
        out_dir=str(out_dir),
        created_at=datetime.now(timezone.utc).isoformat(),
        tool_version=__version__,
        resolved_seeds=resolved,
        manifest_hash=digest,
    )


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _write_json(path, doc: dict) -> None:
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_metrics_csv(path, rows: list[dict]) -> None:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            ",".join(
                _fmt(r[key])
                for key in ("round", "client_id", "train_loss", "eval_acc", "lr", "algorithm", "seed")
            )
        )
    _write_text(path, "\n".join(lines) + "\n")


def write_convergence_csv(path, reports) -> None:
    lines = [CONVERGENCE_HEADER]
    for rep in reports:
        ok = "" if rep.decreasing_ok is None else ("true" if rep.decreasing_ok else "false")
        lines.append(
            ",".join(
                [
                    str(rep.round),
                    _fmt(rep.global_grad_norm),
                    _fmt(rep.delta_hat),
                    _fmt(rep.sigma2_hat),
                    _fmt(rep.G_hat),
                    str(rep.A_p),
                    _fmt(rep.L2_hat),
                    _fmt(rep.eta_bound),
                    _fmt(rep.eta_used),
                    ok,
                ]
            )
        )
    _write_text(path, "\n".join(lines) + "\n")


def run_experiment(config: RunConfig, out_dir) -> RunArtifacts:
    """Train per the config and persist metrics, convergence, result, and pool."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = make_manifest(config, out_dir)
    shards = build_shards(config)
    artifacts = run_training(config, shards)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), artifacts.metrics)
    write_convergence_csv(os.path.join(out_dir, "convergence.csv"), artifacts.convergence)
    result = dict(artifacts.summary)
    result["manifest_hash"] = manifest.manifest_hash
    result["tool_version"] = manifest.tool_version
    _write_json(os.path.join(out_dir, "result.json"), result)
    _write_json(os.path.join(out_dir, "pool.json"), pool_to_dict(artifacts.pool))
    _write_json(os.path.join(out_dir, "manifest.json"), vars(manifest).copy())
    return artifacts


def resolve_out_dir(flag_value, default: str) -> str:
    env = os.environ.get("PROTOFED_OUT")
    if env:
        return env
    if flag_value:
        return flag_value
    return default


def cmd_run(args) -> int:
    config = load_config(args.config, args.set)
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    out_dir = resolve_out_dir(args.out, os.path.splitext(os.path.basename(args.config))[0] + "_out")
    artifacts = run_experiment(config, out_dir)
    print(
        f"{config.algorithm}: mean_acc={artifacts.summary['mean_acc']:.4f} "
        f"std={artifacts.summary['std_acc']:.4f} ({out_dir})"
    )
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    config = load_config(args.config, args.set)
    if config.algorithm in SINGLE_PROTOTYPE_ALGOS:
        raise SchemaError(f"{config.algorithm} pins K to 1; sweep-k needs a configurable K")
    k_values = [int(part) for part in args.k.split(",") if part.strip()]
    if not k_values or any(k < 1 for k in k_values):
        raise SchemaError("--k needs a comma-separated list of integers >= 1")
    out_dir = resolve_out_dir(args.out, os.path.splitext(os.path.basename(args.config))[0] + "_ksweep")
    os.makedirs(out_dir, exist_ok=True)
    seeds = [config.seeds.master + i for i in range(args.trials)]
    rows = []
    means: dict[int, list[float]] = {k: [] for k in k_values}
    for k in k_values:
        for seed in seeds:
            run_cfg = replace(config, K=k, seeds=replace(config.seeds, master=seed))
            artifacts = run_training(run_cfg, build_shards(run_cfg))
            acc = artifacts.summary["mean_acc"]
            rows.append((k, seed, acc))
            means[k].append(acc)
    lines = ["K,seed,mean_acc"] + [f"{k},{seed},{_fmt(acc)}" for k, seed, acc in rows]
    _write_text(os.path.join(out_dir, "ksweep.csv"), "\n".join(lines) + "\n")
    _write_json(os.path.join(out_dir, "manifest.json"), vars(make_manifest(config, out_dir)).copy())
    per_seed_best = {}
    for seed in seeds:
        by_k = {k: acc for k, s, acc in rows if s == seed}
        per_seed_best[seed] = max(by_k, key=lambda k: by_k[k])
    overall = max(k_values, key=lambda k: sum(means[k]) / len(means[k]))
    for k in k_values:
        avg = sum(means[k]) / len(means[k])
        print(f"K={k}: mean_acc={avg:.4f}")
    print("per-seed argmax K: " + ", ".join(f"seed {s} -> K={k}" for s, k in per_seed_best.items()))
    print(f"best K by mean accuracy: {overall}")
    return EXIT_OK


def cmd_partition_report(args) -> int:
    config = load_config(args.config, args.set)
    out_dir = resolve_out_dir(args.out, os.path.splitext(os.path.basename(args.config))[0] + "_partition")
    os.makedirs(out_dir, exist_ok=True)
    shards = build_shards(config)
    lines = ["client_id,class,count"]
    for shard in shards:
        for j, count in enumerate(shard.label_histogram):
            lines.append(f"{shard.client_id},{j},{int(count)}")
    _write_text(os.path.join(out_dir, "partition.csv"), "\n".join(lines) + "\n")
    print(f"wrote per-client label histograms for {len(shards)} clients ({out_dir})")
    return EXIT_OK


def _compare_configs(path, overrides) -> list[RunConfig]:
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".json"))
        if not names:
            raise SchemaError(f"no .json configs under {path!r}")
        configs = [load_config(os.path.join(path, n), overrides) for n in names]
        anchor = config_to_dict(configs[0])
        for cfg in configs[1:]:
            doc = config_to_dict(cfg)
            for key in ("dataset", "partition", "seeds", "N", "T"):
                if doc[key] != anchor[key]:
                    raise SchemaError(f"compare configs disagree on {key!r}")
        return configs
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    algorithms = raw.pop("algorithms", None)
    if not algorithms:
        raise SchemaError("compare config needs an 'algorithms' list (or pass a directory)")
    if overrides:
        raw = apply_overrides(raw, overrides)
    configs = []
    for algo in algorithms:
        doc = json.loads(json.dumps(raw))
        doc["algorithm"] = algo
        configs.append(config_from_dict(doc))
    return configs


def cmd_compare(args) -> int:
    configs = _compare_configs(args.config, args.set)
    out_dir = resolve_out_dir(args.out, "comparison_out")
    os.makedirs(out_dir, exist_ok=True)
    base_master = configs[0].seeds.master
    seeds = [base_master + i for i in range(args.trials)]
    rows = []
    summary: dict[str, list[float]] = {}
    for cfg in configs:
        for seed in seeds:
            run_cfg = replace(cfg, seeds=replace(cfg.seeds, master=seed))
            artifacts = run_training(run_cfg, build_shards(run_cfg))
            rows.append((cfg.algorithm, seed, artifacts.summary["mean_acc"], artifacts.summary["std_acc"]))
            summary.setdefault(cfg.algorithm, []).append(artifacts.summary["mean_acc"])
    lines = ["algorithm,seed,mean_acc,std"] + [
        f"{algo},{seed},{_fmt(acc)},{_fmt(std)}" for algo, seed, acc, std in rows
    ]
    _write_text(os.path.join(out_dir, "comparison.csv"), "\n".join(lines) + "\n")
    for algo, accs in summary.items():
        print(f"{algo}: {100 * np.mean(accs):.2f}({100 * np.std(accs):.2f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofed",
        description="Deterministic federated-learning simulator with prototype-based training",
    )
    parser.add_argument("--version", action="version", version=f"protofed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="Path to a JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a config key by dot path (repeatable)")
        p.add_argument("--out", default=None, help="Output directory (PROTOFED_OUT wins)")

    p_run = sub.add_parser("run", help="Train one configuration and write metrics")
    common(p_run)
    p_run.add_argument("--workers", type=int, default=None, help="Client worker threads")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep-k", help="Train across a list of cluster counts")
    common(p_sweep)
    p_sweep.add_argument("--k", default="1,2,3,4", help="Comma-separated K values")
    p_sweep.add_argument("--trials", type=int, default=3, help="Seeds per K (master+i)")
    p_sweep.set_defaults(func=cmd_sweep_k)

    p_part = sub.add_parser("partition-report", help="Write per-client label histograms")
    common(p_part)
    p_part.set_defaults(func=cmd_partition_report)

    p_cmp = sub.add_parser("compare", help="Run an algorithm list on identical shards")
    common(p_cmp)
    p_cmp.add_argument("--trials", type=int, default=3, help="Seeds per algorithm (master+i)")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NAN
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
