"""Configuration-driven entry point.

Subcommands: run (one federated experiment), sweep (compare arms over a
seed list on shared splits), gradcheck (finite-difference verification of
every training path), partition-report (client-by-class count heatmap),
gen-data (write a synthetic CSV), lpm-oracle (free-feature fit under the
fixed frame, reporting per-class cosines and within-class variability).

Configs are flat `key = value` text files; any key can be overridden on the
command line with --set key=value. Relative output directories are placed
under $FEDGELA_OUT_ROOT when it is set. Exit codes: 0 success, 1 check
failure, 2 config error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import fedsim, metrics
from .datagen import save_csv, write_partition_csv
from .etfgeom import make_etf
from .neuralnet import (
    PhiVector,
    finite_diff_check,
    init_backbone,
    init_classifier,
    lpm_feature_fit,
    save_checkpoint,
)

__all__ = ["RunConfig", "ConfigError", "parse_config", "main", "entrypoint"]


class ConfigError(ValueError):
    """Invalid, unknown, missing, or conflicting configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved experiment configuration (defaults filled)."""

    dataset: str = "synthetic"
    csv_path: str | None = None
    classes: int = 10
    input_dim: int = 20
    n_per_class: int = 100
    class_sep: float = 3.0
    noise_sigma: float = 1.0
    scheme: str = "dirichlet"
    beta: float | None = 0.5
    classes_per_client: int | None = None
    clients: int = 10
    clients_per_round: int = 10
    min_size: int = 100
    test_frac: float = 0.2
    algo: str = "fedavg"
    lambda_prox: float = 0.0
    q_kind: str = "identity"
    gamma: float | None = None   # None -> 1/C at runtime
    rounds: int = 30
    epochs: int = 10
    batch_size: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    e_w: float = 1.0
    e_h: float = 1.0
    hidden: tuple = (64,)
    feature_dim: int | None = None   # None -> class count
    eval_every: int = 1
    finetune_epochs: int = 10
    seed: int = 0
    data_seed: int = 0
    partition_seed: int = 0
    out_dir: str = "runs/run"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "hidden":
                v = ",".join(str(int(h)) for h in v)
            out[f.name] = v
        return out


_INT_KEYS = {
    "classes", "input_dim", "n_per_class", "classes_per_client", "clients",
    "clients_per_round", "min_size", "rounds", "epochs", "batch_size",
    "eval_every", "finetune_epochs", "seed", "data_seed", "partition_seed",
    "feature_dim",
}
_FLOAT_KEYS = {
    "class_sep", "noise_sigma", "beta", "test_frac", "lambda_prox", "gamma",
    "lr", "momentum", "weight_decay", "e_w", "e_h",
}
_STR_KEYS = {"dataset", "csv_path", "scheme", "algo", "q_kind", "out_dir", "hidden"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def _coerce(key: str, value) -> object:
    if isinstance(value, str):
        value = value.strip()
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}': cannot parse {value!r}") from None
    return str(value)


def _read_config_file(path) -> dict:
    raw = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
        raw[key] = value.strip()
    return raw


def parse_config(source, overrides=None) -> RunConfig:
    """Build a validated RunConfig from a file path or a key/value mapping.

    Unknown keys are rejected; `overrides` (an iterable of 'key=value'
    strings or a mapping) wins over the file.
    """
    if isinstance(source, (str, os.PathLike)):
        raw = _read_config_file(source)
    else:
        # None means "unset" so config echoes (to_dict) re-parse cleanly
        raw = {k: v for k, v in dict(source).items() if v is not None}
    if overrides:
        items = overrides.items() if isinstance(overrides, dict) else []
        if not isinstance(overrides, dict):
            items = []
            for ov in overrides:
                if "=" not in ov:
                    raise ConfigError(f"override '{ov}' is not of the form key=value")
                k, v = ov.split("=", 1)
                items.append((k.strip(), v.strip()))
        for k, v in items:
            raw[k] = v

    unknown = set(raw) - _ALL_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")

    if "beta" in raw and "classes_per_client" in raw:
        raise ConfigError(
            "conflicting partition settings: both 'beta' (dirichlet) and "
            "'classes_per_client' (pcdd) given"
        )

    cfg = {}
    for key, value in raw.items():
        if key == "hidden":
            cfg[key] = value
        else:
            cfg[key] = _coerce(key, value)

    # scheme-dependent defaults and pairings
    scheme = cfg.get("scheme", "dirichlet" if "classes_per_client" not in cfg else "pcdd")
    if scheme not in ("dirichlet", "pcdd"):
        raise ConfigError(f"config key 'scheme' must be dirichlet or pcdd, got '{scheme}'")
    cfg["scheme"] = scheme
    if scheme == "pcdd":
        if "classes_per_client" not in cfg:
            raise ConfigError("scheme 'pcdd' requires 'classes_per_client'")
        cfg["beta"] = None
    else:
        cfg.setdefault("beta", 0.5)
        cfg["classes_per_client"] = None

    defaults = {f.name: f.default for f in fields(RunConfig)}
    merged = dict(defaults)
    merged.update(cfg)
    # chained seed defaults: data follows master, partition follows data
    if "data_seed" not in cfg:
        merged["data_seed"] = merged["seed"]
    if "partition_seed" not in cfg:
        merged["partition_seed"] = merged["data_seed"]
    if "clients_per_round" not in cfg:
        merged["clients_per_round"] = merged["clients"]
    if "min_size" not in cfg:
        merged["min_size"] = merged["batch_size"]

    hidden = merged["hidden"]
    if isinstance(hidden, str):
        try:
            merged["hidden"] = tuple(int(x) for x in hidden.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"config key 'hidden': cannot parse {hidden!r}") from None
    else:
        merged["hidden"] = tuple(int(x) for x in hidden)

    # range validation, each error naming its key
    if merged["dataset"] not in ("synthetic", "csv"):
        raise ConfigError(f"config key 'dataset' must be synthetic or csv, got '{merged['dataset']}'")
    if merged["dataset"] == "csv" and not merged["csv_path"]:
        raise ConfigError("missing required config key 'csv_path' for dataset=csv")
    if merged["algo"] not in fedsim.VALID_ALGOS:
        raise ConfigError(
            f"config key 'algo' must be one of {fedsim.VALID_ALGOS}, got '{merged['algo']}'"
        )
    if merged["q_kind"] not in ("identity", "exp", "sqrt"):
        raise ConfigError(f"config key 'q_kind' must be identity/exp/sqrt, got '{merged['q_kind']}'")
    if merged["scheme"] == "dirichlet" and not merged["beta"] > 0:
        raise ConfigError(f"config key 'beta' must be positive, got {merged['beta']}")
    if merged["scheme"] == "pcdd" and merged["classes_per_client"] < 1:
        raise ConfigError(
            f"config key 'classes_per_client' must be >= 1, got {merged['classes_per_client']}"
        )
    for key in ("classes", "input_dim", "n_per_class", "clients", "clients_per_round",
                "min_size", "batch_size", "eval_every"):
        if merged[key] < 1:
            raise ConfigError(f"config key '{key}' must be >= 1, got {merged[key]}")
    for key in ("class_sep", "noise_sigma", "lr", "e_w", "e_h"):
        if not merged[key] > 0:
            raise ConfigError(f"config key '{key}' must be positive, got {merged[key]}")
    for key in ("rounds", "epochs", "finetune_epochs"):
        if merged[key] < 0:
            raise ConfigError(f"config key '{key}' must be >= 0, got {merged[key]}")
    for key in ("lambda_prox", "momentum", "weight_decay"):
        if merged[key] < 0:
            raise ConfigError(f"config key '{key}' must be >= 0, got {merged[key]}")
    if merged["lambda_prox"] > 0 and merged["algo"] != "fedprox":
        raise ConfigError("config key 'lambda_prox' is only meaningful for algo=fedprox")
    if not 0.0 <= merged["test_frac"] < 1.0:
        raise ConfigError(f"config key 'test_frac' must be in [0, 1), got {merged['test_frac']}")
    if merged["gamma"] is not None and not merged["gamma"] > 0:
        raise ConfigError(f"config key 'gamma' must be positive, got {merged['gamma']}")
    if merged["clients_per_round"] > merged["clients"]:
        raise ConfigError(
            f"config key 'clients_per_round' ({merged['clients_per_round']}) exceeds "
            f"'clients' ({merged['clients']})"
        )
    if merged["classes"] < 2:
        raise ConfigError(f"config key 'classes' must be >= 2, got {merged['classes']}")
    if merged["feature_dim"] is not None and merged["feature_dim"] < 1:
        raise ConfigError(
            f"config key 'feature_dim' must be >= 1, got {merged['feature_dim']}"
        )
    return RunConfig(**merged)


def _resolve_out_dir(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    root = os.environ.get("FEDGELA_OUT_ROOT")
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _final_metrics(logs) -> tuple:
    for log in reversed(logs):
        if log.ga is not None:
            return log.ga, log.pa
    return None, None


def cmd_run(config: RunConfig) -> int:
    """Run one experiment; write rounds.csv, manifest.json and checkpoints."""
    out = _resolve_out_dir(config)
    result = fedsim.run_federation(config)
    fedsim.write_round_csv(result.logs, out / "rounds.csv")
    fedsim.write_manifest(out / "manifest.json", config, result.dataset)
    server = result.server
    clf = server.classifier if isinstance(server.classifier, np.ndarray) else None
    save_checkpoint(out / "global_model.npz", server.backbone, classifier=clf)
    clients_dir = out / "clients"
    clients_dir.mkdir(exist_ok=True)
    for c in result.clients:
        if c.backbone is not None:
            save_checkpoint(clients_dir / f"client_{c.client_id:03d}.npz",
                            c.backbone, classifier=c.classifier)
    ga, pa = _final_metrics(result.logs)
    if ga is not None:
        print(f"run complete: algo={config.algo} rounds={config.rounds} "
              f"GA={ga:.4f} PA={pa:.4f} -> {out}")
    else:
        print(f"run complete: algo={config.algo} rounds={config.rounds} -> {out}")
    return 0


def _parse_arm(spec: str) -> tuple:
    """'name:key=val[,key=val...]' -> (name, dict of overrides).

    Accepts loge_w as a convenience key (classifier length on a log10 axis):
    loge_w=3 means e_w = 1e3.
    """
    name, _, rest = spec.partition(":")
    name = name.strip()
    if not name:
        raise ConfigError(f"arm '{spec}' has no name")
    overrides = {}
    if rest.strip():
        for part in rest.split(","):
            if "=" not in part:
                raise ConfigError(f"arm '{spec}': bad override '{part}'")
            k, v = part.split("=", 1)
            k, v = k.strip(), v.strip()
            if k == "loge_w":
                try:
                    overrides["e_w"] = 10.0 ** float(v)
                except ValueError:
                    raise ConfigError(f"arm '{spec}': cannot parse loge_w={v!r}") from None
            else:
                overrides[k] = v
    return name, overrides


def cmd_sweep(base: RunConfig, arm_specs, seeds) -> int:
    """Run every arm for every seed on shared data/partition splits and
    write a per-arm summary of final PA/GA mean and std."""
    if len(arm_specs) < 2:
        raise ConfigError("sweep needs at least 2 arms")
    arms = [_parse_arm(s) for s in arm_specs]
    out = _resolve_out_dir(base).absolute()
    base_dict = base.to_dict()
    rows = []
    for name, overrides in arms:
        pas, gas = [], []
        for seed in seeds:
            cfg_dict = dict(base_dict)
            cfg_dict.update({"seed": seed, "data_seed": seed, "partition_seed": seed})
            cfg_dict.update(overrides)
            cfg_dict["out_dir"] = str(out / f"{name}_seed{seed}")
            cfg = parse_config(cfg_dict)
            arm_out = _resolve_out_dir(cfg)
            result = fedsim.run_federation(cfg)
            fedsim.write_round_csv(result.logs, arm_out / "rounds.csv")
            fedsim.write_manifest(arm_out / "manifest.json", cfg, result.dataset)
            ga, pa = _final_metrics(result.logs)
            if ga is None:
                raise RuntimeError(f"arm '{name}' seed {seed} recorded no evaluation")
            gas.append(ga)
            pas.append(pa)
        rows.append((name, len(seeds),
                     float(np.mean(pas)), float(np.std(pas)),
                     float(np.mean(gas)), float(np.std(gas))))
    summary = out / "summary.csv"
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("arm,seeds,pa_mean,pa_std,ga_mean,ga_std\n")
        for name, n, pm, ps, gm, gs in rows:
            fh.write(f"{name},{n},{pm:.17g},{ps:.17g},{gm:.17g},{gs:.17g}\n")
    width = max(len(r[0]) for r in rows)
    for name, _, pm, ps, gm, gs in rows:
        print(f"{name:<{width}}  PA {pm:.4f} +- {ps:.4f}   GA {gm:.4f} +- {gs:.4f}")
    print(f"summary -> {summary}")
    return 0


GRADCHECK_THRESHOLD = 1e-4


def gradcheck_battery(config: RunConfig, n_probes: int = 64):
    """Finite-difference check over every algorithm kind, phi pattern, and
    mask pattern on a small two-layer net. Yields (label, worst_rel_error).
    """
    n_classes, feat_dim, d_in, hidden = 5, 5, 6, 12
    rng = np.random.default_rng(config.seed)
    x = rng.standard_normal((8, d_in))
    etf = make_etf(feat_dim, n_classes, config.seed, e_w=config.e_w)
    phi_variants = {
        "phi_uniform": PhiVector(np.ones(n_classes)),
        "phi_zeros": PhiVector(np.array([2.0, 1.5, 0.0, 1.5, 0.0])),
    }
    mask_variants = {
        "full_mask": None,
        "restricted_mask": np.array([True, True, False, True, False]),
    }
    for algo in fedsim.VALID_ALGOS:
        lam = 0.1 if algo == "fedprox" else 0.0
        fixed = algo in ("fedge", "fedgela")
        for phi_name, phi in phi_variants.items():
            for mask_name, mask in mask_variants.items():
                allowed = np.arange(n_classes) if mask is None else np.nonzero(mask)[0]
                labels = rng.choice(allowed, size=len(x))
                params = init_backbone((d_in, hidden, feat_dim), (config.seed, 11))
                classifier = etf if fixed else init_classifier(feat_dim, n_classes,
                                                               (config.seed, 12))
                err = finite_diff_check(
                    params, x, labels, classifier, phi=phi, class_mask=mask,
                    e_h=config.e_h, step=1e-5, n_probes=n_probes,
                    seed=(config.seed, 13), lambda_prox=lam,
                )
                yield f"{algo}/{phi_name}/{mask_name}", err


def cmd_gradcheck(config: RunConfig) -> int:
    worst_label, worst = None, -1.0
    for label, err in gradcheck_battery(config):
        status = "ok" if err < GRADCHECK_THRESHOLD else "FAIL"
        print(f"{status:4s} {label:40s} rel_err={err:.3e}")
        if err > worst:
            worst_label, worst = label, err
    if worst >= GRADCHECK_THRESHOLD:
        print(f"gradcheck FAILED: worst offender {worst_label} at {worst:.3e}")
        return 1
    print(f"gradcheck passed: worst {worst_label} at {worst:.3e}")
    return 0


def cmd_partition_report(config: RunConfig) -> int:
    out = _resolve_out_dir(config)
    ds = fedsim.build_dataset(config)
    shards = fedsim.build_partition(ds, config)
    path = out / "partition.csv"
    write_partition_csv(shards, ds.n_classes, path)
    sizes = [s.n_k for s in shards]
    existing = [len(s.existing_classes) for s in shards]
    print(f"{len(shards)} clients, shard sizes {min(sizes)}..{max(sizes)}, "
          f"existing classes {min(existing)}..{max(existing)} -> {path}")
    return 0


def cmd_gen_data(config: RunConfig, out_path) -> int:
    ds = fedsim.build_dataset(config)
    save_csv(ds, out_path)
    print(f"wrote {ds.n} samples, {ds.n_classes} classes, d={ds.input_dim} -> {out_path}")
    return 0


def cmd_lpm_oracle(config: RunConfig, feature_dim, label_counts, iterations,
                   lr, threshold) -> int:
    counts = [int(x) for x in label_counts.split(",")]
    labels = np.repeat(np.arange(len(counts)), counts)
    d = feature_dim if feature_dim else max(len(counts), 2 * len(counts))
    etf = make_etf(d, len(counts), config.seed, e_w=config.e_w)
    feats = lpm_feature_fit(len(counts), d, config.e_h, etf, labels,
                            iterations=iterations, lr=lr, seed=config.seed)
    cos = np.sum(feats * etf.m.T[labels], axis=1)
    cos /= np.linalg.norm(feats, axis=1)
    nc1 = metrics.nc1_variability(feats, labels)
    for c in range(len(counts)):
        cc = cos[labels == c]
        print(f"class {c}: n={counts[c]} min_cos={cc.min():.6f} mean_cos={cc.mean():.6f}")
    print(f"worst cosine {cos.min():.6f}, within-class variability {nc1:.3e}")
    if cos.min() <= threshold:
        print(f"FAIL: worst cosine {cos.min():.6f} <= threshold {threshold}")
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgela",
        description="Federated learning simulator with a fixed simplex-frame "
                    "classifier and per-client distribution adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")

    p_run = sub.add_parser("run", help="run one federated experiment")
    add_common(p_run)

    p_sweep = sub.add_parser("sweep", help="compare arms over a seed list")
    add_common(p_sweep)
    p_sweep.add_argument("--arm", dest="arms", action="append", required=True,
                         metavar="NAME:KEY=VAL[,KEY=VAL...]",
                         help="one arm (config overrides); repeatable")
    p_sweep.add_argument("--seeds", default="0,1,2",
                         help="comma-separated master seeds (default 0,1,2)")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    add_common(p_grad)

    p_part = sub.add_parser("partition-report", help="client-by-class count table")
    add_common(p_part)

    p_gen = sub.add_parser("gen-data", help="write a synthetic dataset CSV")
    add_common(p_gen)
    p_gen.add_argument("--out", required=True, help="output CSV path")

    p_lpm = sub.add_parser("lpm-oracle", help="free-feature fit under the fixed frame")
    add_common(p_lpm)
    p_lpm.add_argument("--dim", type=int, default=0, help="feature dimension (default 2C)")
    p_lpm.add_argument("--label-counts", default="10,10,10,10",
                       help="comma-separated per-class sample counts")
    p_lpm.add_argument("--iters", type=int, default=3000)
    p_lpm.add_argument("--lr", type=float, default=0.5)
    p_lpm.add_argument("--threshold", type=float, default=0.99,
                       help="minimum acceptable feature-to-class-vector cosine")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        source = args.config if args.config else {}
        config = parse_config(source, overrides=args.overrides)
        if args.command == "run":
            return cmd_run(config)
        if args.command == "sweep":
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            return cmd_sweep(config, args.arms, seeds)
        if args.command == "gradcheck":
            return cmd_gradcheck(config)
        if args.command == "partition-report":
            return cmd_partition_report(config)
        if args.command == "gen-data":
            return cmd_gen_data(config, args.out)
        if args.command == "lpm-oracle":
            return cmd_lpm_oracle(config, args.dim, args.label_counts,
                                  args.iters, args.lr, args.threshold)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure inside a component
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint():
    sys.exit(main())
