"""Command-line pipeline: synth, fit-pca, transform, train, eval, bench.

Configuration is a flat key=value text file ('#' starts a comment);
command-line flags override file values. Every train run writes a
manifest in the same format holding the fully resolved configuration, so
re-running with --config <manifest> reproduces the run exactly at a fixed
thread count.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import net as net_mod
from . import pca as pca_mod
from .errors import (
    BadMagic,
    DegenerateBand,
    DimensionMismatch,
    EmptyBucket,
    EmptySet,
    IncomparableArchitectures,
    InconsistentShape,
    InvalidConfig,
    InvalidRule,
    NoConvergence,
    NonFiniteValue,
    NonPositiveTemperature,
    NotSymmetric,
    ShapeMismatch,
    TruncatedFile,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_USAGE_ERRORS = (InvalidConfig, InvalidRule, NonPositiveTemperature)
_NUMERIC_ERRORS = (NoConvergence, NotSymmetric, FloatingPointError)
_DATA_ERRORS = (BadMagic, TruncatedFile, NonFiniteValue, InconsistentShape,
                EmptySet, EmptyBucket, ShapeMismatch, DimensionMismatch,
                IncomparableArchitectures, DegenerateBand, OSError)

ENCODER_PRESETS = {
    "mlp-small": {"encoder_hidden": (256, 128), "head_hidden": (512, 256)},
    "mlp-tiny": {"encoder_hidden": (64, 32), "head_hidden": (128, 64)},
}

# Resolved train configuration: key -> (type, default). None defaults are
# required at run time (data, out).
_TRAIN_SCHEMA = {
    "preprocessor": (str, "none"),
    "encoder": (str, "mlp-small"),
    "weights": (str, "fresh"),
    "finetune": (str, "finetuned"),
    "pca_components": (int, 3),
    "pca_fraction": (float, 0.4),
    "ratio": (str, "5:1:1"),
    "threshold": (float, 0.5),
    "batch_size": (int, 64),
    "max_epochs": (int, 100),
    "early_stop_patience": (int, 5),
    "plateau_patience": (int, 2),
    "plateau_factor": (float, 0.1),
    "initial_lr": (float, 1e-3),
    "seed": (int, 0),
    "loss_mode": (str, "bce"),
    "pretrain_epochs": (int, 10),
    "temperature": (float, 0.1),
    "soft_weight": (float, 1.0),
    "augment_noise": (float, 0.1),
    "augment_band_dropout": (float, 0.1),
    "data": (str, None),
    "pca_model": (str, None),
    "out": (str, None),
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# --- config files -------------------------------------------------------------

def read_config(path) -> dict:
    """Parse flat key=value lines; '#' comments and blanks are skipped."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise InvalidConfig(f"{path}:{lineno}: expected key=value")
        key, value = text.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(key, raw, kind):
    try:
        if kind is bool:
            lowered = str(raw).strip().lower()
            if lowered in ("1", "true", "yes"):
                return True
            if lowered in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError):
        raise InvalidConfig(f"config key {key}: cannot parse {raw!r} as {kind.__name__}")


def resolve_train_config(config_path=None, overrides=None) -> dict:
    """defaults < config file < explicit overrides."""
    resolved = {key: default for key, (_, default) in _TRAIN_SCHEMA.items()}
    if config_path is not None:
        file_values = read_config(config_path)
        unknown = set(file_values) - set(_TRAIN_SCHEMA)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        for key, raw in file_values.items():
            resolved[key] = _coerce(key, raw, _TRAIN_SCHEMA[key][0])
    for key, value in (overrides or {}).items():
        if value is not None:
            resolved[key] = value
    return resolved


def write_manifest(path, resolved: dict, derived: dict | None = None) -> None:
    """Manifest doubles as a config file: resolved keys plus '#' comments."""
    lines = ["# resolved run configuration"]
    for key in _TRAIN_SCHEMA:
        value = resolved.get(key)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    for key, value in (derived or {}).items():
        lines.append(f"# {key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_ratio(text):
    parts = text.split(":")
    if len(parts) != 3:
        raise InvalidConfig(f"ratio must look like 5:1:1, got {text!r}")
    try:
        ratio = tuple(float(p) for p in parts)
    except ValueError:
        raise InvalidConfig(f"ratio must be numeric, got {text!r}")
    if any(r <= 0 for r in ratio):
        raise InvalidConfig("ratio components must be positive")
    return ratio


def _sibling(path, suffix):
    return Path(path).with_suffix(suffix)


# --- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = data_mod.SynthConfig(
        n_samples=args.n_samples, bands=args.bands, height=args.height,
        width=args.width, classes=args.classes, latent_rank=args.latent_rank,
        noise_sigma=args.noise_sigma, seed=args.seed)
    sample_set = data_mod.synthesize(config)
    sample_set = data_mod.split(sample_set, _parse_ratio(args.ratio), args.seed)
    data_mod.save_sampleset(sample_set, args.out)
    sizes = {name: len(sample_set.bucket_indices(name))
             for name in data_mod.SPLIT_NAMES}
    print(f"wrote {args.out}: {sample_set.n_samples} samples, "
          f"{sample_set.bands}x{sample_set.height}x{sample_set.width}, "
          f"{sample_set.n_classes} classes")
    print(f"split sizes {sizes} (seed {args.seed})")
    print(f"samples with empty labels: {sample_set.empty_label_count}")
    return EXIT_OK


def cmd_fit_pca(args) -> int:
    sample_set = data_mod.load_sampleset(args.data)
    model = pca_mod.fit_pca(sample_set, subsample_fraction=args.fraction,
                            seed=args.seed, bucket=args.bucket)
    cumulative = model.cumulative_explained
    print("cumulative explained ratio:",
          " ".join(f"{v:.6f}" for v in cumulative))
    if args.variance_threshold is not None:
        selected = pca_mod.select_components(
            model, variance_threshold=args.variance_threshold)
    else:
        selected = pca_mod.select_components(model, k=args.k)
    k = selected.n_components
    print(f"retained {k} components, cumulative ratio {cumulative[k - 1]:.6f}")
    pca_mod.save_pca(selected, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_transform(args) -> int:
    sample_set = data_mod.load_sampleset(args.data)
    model = pca_mod.load_pca(args.model)
    projected = pca_mod.transform_sampleset(model, sample_set)
    data_mod.save_sampleset(projected, args.out)
    print(f"wrote {args.out}: {projected.n_samples} samples with "
          f"{projected.bands} bands")
    return EXIT_OK


def _bucket_arrays(sample_set, bucket):
    idx = sample_set.bucket_indices(bucket)
    subset = sample_set.subset(idx)
    return subset.rasters.astype(np.float64), subset.labels.astype(np.float64)


def _build_from_preset(preset_name, input_dim, n_classes, seed):
    if preset_name not in ENCODER_PRESETS:
        raise InvalidConfig(f"unknown encoder preset {preset_name!r}; "
                            f"choose from {sorted(ENCODER_PRESETS)}")
    preset = ENCODER_PRESETS[preset_name]
    return net_mod.build_classifier(
        input_dim, n_classes, encoder_hidden=preset["encoder_hidden"],
        head_hidden=preset["head_hidden"], seed=seed)


def _adopt_encoder_weights(net, checkpoint_path, seed):
    """Copy encoder weights from a checkpoint; returns True if the first
    layer had to stay randomly initialised because its width changed."""
    source, _ = net_mod.load_network(checkpoint_path)
    if source.n_encoder_layers != net.n_encoder_layers:
        raise InvalidConfig("checkpoint encoder depth differs from preset")
    replaced = False
    for i in range(net.n_encoder_layers):
        src, dst = source.layers[i], net.layers[i]
        if src.out_dim != dst.out_dim:
            raise InvalidConfig(f"checkpoint encoder layer {i} width differs")
        if src.in_dim == dst.in_dim:
            net.weights[i][...] = source.weights[i]
            net.biases[i][...] = source.biases[i]
        elif i == 0:
            replaced = True       # fresh random first layer stays in place
        else:
            raise InvalidConfig(f"checkpoint encoder layer {i} input differs")
    net._version += 1
    return replaced


def cmd_train(args) -> int:
    overrides = {key: getattr(args, key, None) for key in _TRAIN_SCHEMA}
    resolved = resolve_train_config(args.config, overrides)
    if resolved["data"] is None or resolved["out"] is None:
        raise InvalidConfig("train needs --data and --out (or config keys)")
    if resolved["preprocessor"] not in ("pca", "none"):
        raise InvalidConfig("preprocessor must be 'pca' or 'none'")
    if resolved["finetune"] not in ("finetuned", "frozen"):
        raise InvalidConfig("finetune must be 'finetuned' or 'frozen'")
    if resolved["weights"] != "fresh" and not Path(resolved["weights"]).exists():
        raise InvalidConfig(f"weights checkpoint {resolved['weights']!r} not found")
    if resolved["finetune"] == "frozen" and resolved["loss_mode"] == "softcon_pretrain":
        raise InvalidConfig(
            "frozen + softcon_pretrain is contradictory; pretrain separately "
            "and pass the checkpoint via weights=")

    sample_set = data_mod.load_sampleset(resolved["data"])
    if sample_set.split_codes is None:
        sample_set = data_mod.split(sample_set, _parse_ratio(resolved["ratio"]),
                                    resolved["seed"])
    if sample_set.empty_label_count:
        print(f"note: {sample_set.empty_label_count} samples have empty labels")

    use_pca = resolved["preprocessor"] == "pca"
    pca_model = None
    derived = {}
    if use_pca:
        if resolved["pca_model"]:
            pca_model = pca_mod.load_pca(resolved["pca_model"])
        else:
            full = pca_mod.fit_pca(sample_set,
                                   subsample_fraction=resolved["pca_fraction"],
                                   seed=resolved["seed"], bucket="train")
            pca_model = pca_mod.select_components(full, k=resolved["pca_components"])
            pca_path = str(_sibling(resolved["out"], ".pca1"))
            pca_mod.save_pca(pca_model, pca_path)
            resolved["pca_model"] = pca_path
            print(f"fitted PCA ({pca_model.n_components} components) -> {pca_path}")

    x_train, y_train = _bucket_arrays(sample_set, "train")
    x_val, y_val = _bucket_arrays(sample_set, "val")
    if x_val.shape[0] == 0:
        raise EmptyBucket("validation bucket is empty; check the split ratio")
    if use_pca:
        x_train = pca_mod.project(pca_model, x_train)
        x_val = pca_mod.project(pca_model, x_val)

    input_dim = x_train.shape[1] * x_train.shape[2] * x_train.shape[3]
    net = _build_from_preset(resolved["encoder"], input_dim,
                             sample_set.n_classes, resolved["seed"])
    first_layer_replaced = False
    if resolved["weights"] != "fresh":
        first_layer_replaced = _adopt_encoder_weights(net, resolved["weights"],
                                                      resolved["seed"])
    if resolved["finetune"] == "frozen":
        net_mod.freeze_encoder(net, keep_first_trainable=first_layer_replaced)

    train_config = net_mod.TrainConfig(
        batch_size=resolved["batch_size"], max_epochs=resolved["max_epochs"],
        early_stop_patience=resolved["early_stop_patience"],
        plateau_patience=resolved["plateau_patience"],
        plateau_factor=resolved["plateau_factor"],
        initial_lr=resolved["initial_lr"], seed=resolved["seed"],
        pca_enabled=use_pca, loss_mode=resolved["loss_mode"],
        pretrain_epochs=resolved["pretrain_epochs"],
        temperature=resolved["temperature"], soft_weight=resolved["soft_weight"],
        augment_noise=resolved["augment_noise"],
        augment_band_dropout=resolved["augment_band_dropout"])

    with bench_mod._thread_limit(args.threads):
        result = net_mod.train(net, x_train, y_train, x_val, y_val, train_config)
    for record in result.history:
        print(f"epoch {record.epoch}: train={record.train_loss:.6f} "
              f"val={record.val_loss:.6f} lr={record.lr:.2e}"
              + (" *" if record.improved else ""))
    print(f"best epoch {result.best_epoch} (val {result.best_val_loss:.6f}), "
          f"stopped_early={result.stopped_early}")

    net_mod.save_network(result.net, resolved["out"])
    log_path = _sibling(resolved["out"], ".trainlog.json")
    log_payload = {
        "pretrain_losses": result.pretrain_history,
        "epochs": [dataclasses.asdict(r) for r in result.history],
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "stopped_early": result.stopped_early,
    }
    log_path.write_text(json.dumps(log_payload, indent=2))

    derived.update({
        "n_train": x_train.shape[0],
        "n_val": x_val.shape[0],
        "input_dim": input_dim,
        "param_count": net_mod.count_params(result.net),
        "first_layer_replaced": first_layer_replaced,
        "threads": args.threads,
    })
    write_manifest(_sibling(resolved["out"], ".manifest"), resolved, derived)
    print(f"wrote {resolved['out']}, {log_path}, "
          f"{_sibling(resolved['out'], '.manifest')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = net_mod.load_network(args.model)
    sample_set = data_mod.load_sampleset(args.data)
    bucket = None if args.bucket == "all" else args.bucket
    if bucket is not None and sample_set.split_codes is None:
        # MSB1 files carry no split tags; re-derive the training partition.
        # Pass the same --ratio and --seed the train run used.
        sample_set = data_mod.split(sample_set, _parse_ratio(args.ratio),
                                    args.seed)
    rasters, labels = _bucket_arrays(sample_set, bucket)
    if rasters.shape[0] == 0:
        raise EmptyBucket(f"bucket {args.bucket!r} is empty")
    if args.pca:
        rasters = pca_mod.project(pca_mod.load_pca(args.pca), rasters)
    with bench_mod._thread_limit(args.threads):
        probs = net_mod.predict_proba(net, rasters)
    rep = metrics_mod.evaluate(probs, labels, threshold=args.threshold)
    out = Path(args.out)
    out.write_text(rep.to_text())
    _sibling(out, ".json").write_text(rep.to_json())
    print(f"evaluated {rasters.shape[0]} samples from bucket {args.bucket!r}")
    print(f"accuracy {rep.accuracy:.4f}  macro_f1 {rep.macro_f1:.4f}  "
          f"macro_precision {rep.macro_precision:.4f}  "
          f"macro_recall {rep.macro_recall:.4f}")
    print(f"wrote {out} and {_sibling(out, '.json')}")
    return EXIT_OK


def cmd_bench(args) -> int:
    sample_set = data_mod.load_sampleset(args.data)
    rasters = sample_set.rasters.astype(np.float64)
    full_dim = sample_set.bands * sample_set.height * sample_set.width

    pca_model = pca_mod.load_pca(args.pca) if args.pca else None
    if pca_model is not None:
        reduced_dim = pca_model.n_components * sample_set.height * sample_set.width
    else:
        reduced_dim = args.k * sample_set.height * sample_set.width

    if args.model:
        net, _ = net_mod.load_network(args.model)
    else:
        dim = reduced_dim if pca_model is not None else full_dim
        net = _build_from_preset(args.encoder, dim, sample_set.n_classes,
                                 args.seed)

    latencies = []
    if pca_model is not None:
        if net.input_dim != reduced_dim:
            raise DimensionMismatch(
                f"model expects {net.input_dim} inputs, PCA projection yields "
                f"{reduced_dim}")
        latencies.append(bench_mod.measure_inference(
            net, rasters, batch_size=args.batch_size, repeats=args.repeats,
            pca_model=pca_model, threads=args.threads))
        projected = pca_mod.project(pca_model, rasters)
        latencies.append(bench_mod.measure_inference(
            net, projected, batch_size=args.batch_size, repeats=args.repeats,
            threads=args.threads))
        counterpart = _with_input_dim(net, full_dim, args.seed)
        sizes = bench_mod.compare_sizes(net, counterpart)
    else:
        if net.input_dim != full_dim:
            raise DimensionMismatch(
                f"model expects {net.input_dim} inputs, rasters yield {full_dim}")
        latencies.append(bench_mod.measure_inference(
            net, rasters, batch_size=args.batch_size, repeats=args.repeats,
            threads=args.threads))
        counterpart = _with_input_dim(net, reduced_dim, args.seed)
        sizes = bench_mod.compare_sizes(counterpart, net)

    report = bench_mod.BenchReport(latencies, sizes)
    out = Path(args.out)
    out.write_text(report.to_text())
    _sibling(out, ".json").write_text(report.to_json())
    print(report.to_text(), end="")
    print(f"wrote {out} and {_sibling(out, '.json')}")
    return EXIT_OK


def _with_input_dim(net, input_dim, seed):
    layers = [net_mod.LayerDef(input_dim if i == 0 else l.in_dim, l.out_dim,
                               l.activation, l.dropout)
              for i, l in enumerate(net.layers)]
    return net_mod.Network(layers, net.n_encoder_layers, seed=seed)


# --- parser --------------------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="specml",
                     description="Multispectral multi-label pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", dest="n_samples", type=int, default=2000)
    p.add_argument("--bands", type=int, default=13)
    p.add_argument("--height", type=int, default=4)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--classes", type=int, default=9)
    p.add_argument("--latent-rank", dest="latent_rank", type=int, default=3)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.01)
    p.add_argument("--ratio", default="5:1:1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-pca", help="fit and persist a PCA model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=0.4)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--k", type=int, default=3)
    group.add_argument("--variance-threshold", dest="variance_threshold",
                       type=float, default=None)
    p.add_argument("--bucket", default="train", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_fit_pca)

    p = sub.add_parser("transform", help="project a dataset through a PCA model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--preprocessor", choices=("pca", "none"), default=None)
    p.add_argument("--pca-model", dest="pca_model", default=None)
    p.add_argument("--pca-components", dest="pca_components", type=int, default=None)
    p.add_argument("--pca-fraction", dest="pca_fraction", type=float, default=None)
    p.add_argument("--encoder", default=None)
    p.add_argument("--weights", default=None)
    p.add_argument("--finetune", choices=("finetuned", "frozen"), default=None)
    p.add_argument("--ratio", default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--early-stop-patience", dest="early_stop_patience",
                   type=int, default=None)
    p.add_argument("--plateau-patience", dest="plateau_patience", type=int,
                   default=None)
    p.add_argument("--plateau-factor", dest="plateau_factor", type=float,
                   default=None)
    p.add_argument("--initial-lr", dest="initial_lr", type=float, default=None)
    p.add_argument("--loss-mode", dest="loss_mode",
                   choices=("bce", "softcon_pretrain"), default=None)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int,
                   default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset bucket")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pca", default=None)
    p.add_argument("--bucket", default="test",
                   choices=("train", "val", "test", "all"))
    p.add_argument("--ratio", default="5:1:1")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure latency and compare model sizes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--pca", default=None)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--encoder", default="mlp-small")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
