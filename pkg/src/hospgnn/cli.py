"""Command-line harness: synthesize data, train, evaluate, sweep.

Every command is deterministic given --seed. Exit codes: 0 success,
1 usage or config problem, 2 data problem, 3 numeric failure.

Results carry provenance: each run resolves its full config plus input
file fingerprints into a manifest whose hash is embedded in every
output file, so any table can be regenerated from its manifest.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .data import load_dataset, synth_clusters, write_dataset
from .errors import ConfigError, DataError, NumericError
from .graph import parse_variant
from .model import ModelConfig
from .train import (
    ABLATION_AXES,
    TrainConfig,
    evaluate,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    train,
)

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3


def _file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(cfg: TrainConfig, inputs, outputs, extra=None):
    manifest = {
        "tool": f"hospgnn {__version__}",
        "config": cfg.to_dict(),
        "inputs": {name: _file_sha256(p) for name, p in inputs.items()},
    }
    if extra:
        manifest.update(extra)
    # the hash pins what determines the numbers (tool, config, input
    # contents); output locations are recorded but excluded, so the same
    # run into two directories stamps identical files
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    manifest["manifest_hash"] = hashlib.sha256(blob.encode()).hexdigest()[:16]
    manifest["outputs"] = {name: str(p) for name, p in outputs.items()}
    return manifest


def _add_episode_flags(p):
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1)
    p.add_argument("--queries", type=int, default=15,
                   help="queries per class")
    p.add_argument("--label-fraction", type=float, default=1.0)


def _add_model_flags(p):
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--encoder-dim", type=int, default=32)
    p.add_argument("--no-encoder", action="store_true")
    p.add_argument("--metric-hidden", type=int, default=96)
    p.add_argument("--metric-input", choices=("distance", "absdiff"),
                   default="distance")
    p.add_argument("--metric-init", choices=("xavier", "kernel"),
                   default="xavier")
    p.add_argument("--metric-bandwidth", type=float, default=0.5)
    p.add_argument("--aggregate-normalize", choices=("channel", "neighbor"),
                   default="channel")
    p.add_argument("--aggregate-self", action="store_true",
                   help="append each vertex's own features to its aggregate")
    p.add_argument("--variant", default="full",
                   help="enabled edge channels: full, or letters from r/s/d")
    p.add_argument("--readout-channel", default="auto",
                   choices=("auto", "relative", "similar", "dissimilar"))
    p.add_argument("--standardize-vertex", action="store_true")
    p.add_argument("--precision", choices=("float64", "float32"),
                   default="float64")


def _add_train_flags(p):
    p.add_argument("--lambda", dest="structure_weight", type=float,
                   default=1e-5, help="structure loss weight")
    p.add_argument("--learning-rate", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=1e-6)
    p.add_argument("--batch", type=int, default=40,
                   help="episodes per optimizer step")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--eval-episodes", type=int, default=50)
    p.add_argument("--target-accuracy", type=float, default=None,
                   help="stop once validation accuracy reaches this")


# config-file keys to argparse dests; keys may use either the config
# field name or the flag spelling
_CONFIG_KEY_DESTS = {
    "seed": "seed",
    "workers": "workers",
    "n_way": "n_way",
    "k_shot": "k_shot",
    "n_query": "queries",
    "queries": "queries",
    "label_fraction": "label_fraction",
    "structure_weight": "structure_weight",
    "lambda": "structure_weight",
    "learning_rate": "learning_rate",
    "weight_decay": "weight_decay",
    "batch_episodes": "batch",
    "batch": "batch",
    "total_iterations": "iterations",
    "iterations": "iterations",
    "eval_every": "eval_every",
    "eval_episodes": "eval_episodes",
    "target_accuracy": "target_accuracy",
    "layers": "layers",
    "hidden_dim": "hidden_dim",
    "encoder_dim": "encoder_dim",
    "metric_hidden": "metric_hidden",
    "metric_input": "metric_input",
    "metric_init": "metric_init",
    "metric_bandwidth": "metric_bandwidth",
    "aggregate_normalize": "aggregate_normalize",
    "aggregate_self": "aggregate_self",
    "variant": "variant",
    "readout_channel": "readout_channel",
    "precision": "precision",
    "dtype": "precision",
    "standardize_vertex": "standardize_vertex",
    "use_encoder": "use_encoder",
}

_LETTER_FOR_CHANNEL = {"relative": "r", "similar": "s", "dissimilar": "d"}


def load_config_defaults(path):
    """Read a JSON config file into argparse default overrides.

    Flags given on the command line still win: these only replace the
    parser defaults.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    flat = dict(raw)
    model_part = flat.pop("model", None)
    if isinstance(model_part, dict):
        flat.update(model_part)

    defaults = {}
    for key, value in flat.items():
        dest = _CONFIG_KEY_DESTS.get(key)
        if dest is None:
            if key == "channels":
                value = "".join(_LETTER_FOR_CHANNEL[c] for c in value)
                defaults["variant"] = value
                continue
            raise ConfigError(f"config file {path}: unknown key {key!r}")
        if dest == "use_encoder":
            defaults["no_encoder"] = not bool(value)
        else:
            defaults[dest] = value
    return defaults


def make_parser(config_defaults=None):
    parser = argparse.ArgumentParser(
        prog="hospgnn",
        description="Few-shot episode-graph classifier with relative-metric "
                    "edge channels.",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1,
                        help="evaluation parallelism (training stays serial)")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of config keys; flags win over it")
    sub = parser.add_subparsers(dest="command", required=True)

    def finish(p):
        # global flags are accepted after the subcommand as well;
        # SUPPRESS keeps them from clobbering a value parsed before it
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--workers", type=int, default=argparse.SUPPRESS)
        p.add_argument("--config", type=Path, default=argparse.SUPPRESS)
        if config_defaults:
            known = {
                key: value for key, value in config_defaults.items()
                if any(action.dest == key for action in p._actions)
            }
            p.set_defaults(**known)
        return p

    p = sub.add_parser("synth", help="write a synthetic embedding dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--sep", type=float, default=6.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--out", type=Path, required=True)
    finish(p)

    p = sub.add_parser("train", help="train on embedding files")
    p.add_argument("--train", type=Path, required=True, dest="train_path")
    p.add_argument("--val", type=Path, required=True, dest="val_path")
    p.add_argument("--test", type=Path, default=None, dest="test_path")
    _add_episode_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out-dir", type=Path, default=Path("run"))
    finish(p)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--out", type=Path, default=None,
                   help="optional JSON report path")
    finish(p)

    p = sub.add_parser("ablate", help="sweep one axis, emit a results table")
    p.add_argument("--train", type=Path, required=True, dest="train_path")
    p.add_argument("--val", type=Path, required=True, dest="val_path")
    p.add_argument("--test", type=Path, required=True, dest="test_path")
    p.add_argument("--axis", required=True,
                   choices=ABLATION_AXES + ("loss",))
    p.add_argument("--values", nargs="*", default=None,
                   help="override the default value grid for the axis")
    _add_episode_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--out-dir", type=Path, default=Path("ablation"))
    finish(p)

    if config_defaults:
        top = {
            key: value for key, value in config_defaults.items()
            if key in ("seed", "workers")
        }
        parser.set_defaults(**top)
    return parser


def _extract_config_path(argv):
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


def config_from_args(args, feature_dim):
    """Materialize the resolved TrainConfig for this invocation."""
    model = ModelConfig(
        feature_dim=feature_dim,
        layers=args.layers,
        hidden_dim=args.hidden_dim,
        use_encoder=not args.no_encoder,
        encoder_dim=args.encoder_dim,
        metric_hidden=args.metric_hidden,
        metric_input=args.metric_input,
        metric_init=args.metric_init,
        metric_bandwidth=args.metric_bandwidth,
        channels=parse_variant(args.variant),
        readout_channel=args.readout_channel,
        standardize_vertex=args.standardize_vertex,
        aggregate_normalize=args.aggregate_normalize,
        aggregate_self=args.aggregate_self,
        dtype=args.precision,
    )
    return TrainConfig(
        model=model,
        n_way=args.n_way,
        k_shot=args.k_shot,
        n_query=args.queries,
        label_fraction=args.label_fraction,
        structure_weight=args.structure_weight,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        batch_episodes=args.batch,
        total_iterations=args.iterations,
        eval_every=args.eval_every,
        eval_episodes=args.eval_episodes,
        target_accuracy=args.target_accuracy,
        seed=args.seed,
    )


def write_metrics_csv(path, rows, manifest_hash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# manifest={manifest_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["iter", "loss", "val_acc", "val_ci"])
        for row in rows:
            writer.writerow([
                row.iteration,
                repr(row.loss),
                repr(row.val_accuracy),
                repr(row.val_ci),
            ])


def cmd_synth(args):
    ds = synth_clusters(
        args.classes, args.per_class, args.dim,
        sep=args.sep, noise_sigma=args.noise, seed=args.seed,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, args.out)
    print(
        f"wrote {args.out}: {len(ds)} items, {args.classes} classes, "
        f"dim {args.dim}, sep {args.sep}, seed {args.seed}"
    )
    return 0


def cmd_train(args):
    ds_train = load_dataset(args.train_path, "train")
    ds_val = load_dataset(args.val_path, "validation")
    ds_test = load_dataset(args.test_path, "test") if args.test_path else None
    if ds_val.dim != ds_train.dim:
        raise DataError(
            f"dimension mismatch: train dim {ds_train.dim}, val dim {ds_val.dim}"
        )
    if ds_test is not None and ds_test.dim != ds_train.dim:
        raise DataError(
            f"dimension mismatch: train dim {ds_train.dim}, test dim {ds_test.dim}"
        )
    cfg = config_from_args(args, feature_dim=ds_train.dim)

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.npz"
    metrics_path = out / "metrics.csv"
    summary_path = out / "summary.json"
    inputs = {"train": args.train_path, "val": args.val_path}
    if args.test_path:
        inputs["test"] = args.test_path
    manifest = build_manifest(
        cfg, inputs,
        {"checkpoint": ckpt_path, "metrics": metrics_path,
         "summary": summary_path},
    )

    def progress(row):
        print(
            f"iter {row.iteration:6d}  loss {row.loss:.4f}  "
            f"val {row.val_accuracy:.4f} ± {row.val_ci:.4f}"
        )

    best, metrics = train(ds_train, ds_val, cfg,
                          workers=args.workers, log=progress)
    save_checkpoint(best, ckpt_path)
    write_metrics_csv(metrics_path, metrics, manifest["manifest_hash"])

    if ds_test is not None:
        params = best.restore()
        test_acc, test_ci = evaluate(
            ds_test, params, cfg, cfg.eval_episodes,
            seed=cfg.seed + 0x7E57, workers=args.workers,
        )
    else:
        # no test split given: report the best validation score instead
        test_acc, test_ci = best.val_accuracy, 0.0

    summary = {
        "config": cfg.to_dict(),
        "best_iter": best.iteration,
        "test_acc": test_acc,
        "test_ci": test_ci,
        "manifest": manifest,
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(
        f"best iteration {best.iteration}: val {best.val_accuracy:.4f}, "
        f"test {test_acc:.4f} ± {test_ci:.4f}"
    )
    print(f"outputs in {out}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data, "test")
    cfg = ckpt.config
    if ds.dim != cfg.model.feature_dim:
        raise DataError(
            f"dimension mismatch: checkpoint expects dim "
            f"{cfg.model.feature_dim}, dataset has dim {ds.dim}"
        )
    params = ckpt.restore()
    acc, ci = evaluate(ds, params, cfg, args.episodes,
                       seed=args.seed, workers=args.workers)
    print(f"accuracy over {args.episodes} episodes: {acc:.4f} ± {ci:.4f}")
    if args.out is not None:
        manifest = build_manifest(
            cfg,
            {"checkpoint": args.checkpoint, "data": args.data},
            {"report": args.out},
            extra={"episodes": args.episodes, "eval_seed": args.seed},
        )
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({
            "accuracy": acc,
            "ci": ci,
            "episodes": args.episodes,
            "manifest": manifest,
        }, indent=2, sort_keys=True))
    return 0


DEFAULT_AXIS_VALUES = {
    "variant": ["d", "s", "r", "rd", "rs", "full"],
    "layers": [1, 2, 3],
    "loss": [0.0, 1e-5],
    "structure_weight": [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7],
    "label_fraction": [0.2, 0.4, 1.0],
}


def _format_table(axis, rows):
    header = f"{axis:>16s}  {'accuracy':>9s}  {'ci':>7s}  {'best_iter':>9s}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(
            f"{row.value:>16s}  {row.accuracy:9.4f}  {row.ci:7.4f}  "
            f"{row.best_iteration:9d}"
        )
    return "\n".join(lines)


def cmd_ablate(args):
    ds_train = load_dataset(args.train_path, "train")
    ds_val = load_dataset(args.val_path, "validation")
    ds_test = load_dataset(args.test_path, "test")
    cfg = config_from_args(args, feature_dim=ds_train.dim)

    axis = args.axis
    values = args.values
    if values is None:
        values = list(DEFAULT_AXIS_VALUES[axis])
    if axis == "loss":
        # two rows: classification loss alone vs the full objective
        axis = "structure_weight"
        if args.values is None:
            values = [0.0, cfg.structure_weight]
    if axis == "layers":
        values = [int(v) for v in values]
    elif axis in ("structure_weight", "label_fraction"):
        values = [float(v) for v in values]

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / f"{args.axis}_table.txt"
    csv_path = out / f"{args.axis}_table.csv"
    manifest = build_manifest(
        cfg,
        {"train": args.train_path, "val": args.val_path,
         "test": args.test_path},
        {"table": table_path, "csv": csv_path},
        extra={"axis": args.axis, "values": [str(v) for v in values]},
    )

    def progress(row):
        print(f"{row.axis}={row.value}: {row.accuracy:.4f} ± {row.ci:.4f}")

    rows = run_ablation(ds_train, ds_val, ds_test, cfg, axis, values,
                        workers=args.workers, log=progress)

    text = _format_table(args.axis, rows)
    table_path.write_text(f"# manifest={manifest['manifest_hash']}\n{text}\n")
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# manifest={manifest['manifest_hash']}\n")
        writer = csv.writer(fh)
        writer.writerow(["axis", "value", "accuracy", "ci", "best_iter"])
        for row in rows:
            writer.writerow([
                row.axis, row.value, repr(row.accuracy), repr(row.ci),
                row.best_iteration,
            ])
    print(text)
    print(f"outputs in {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        config_path = _extract_config_path(argv)
        defaults = load_config_defaults(config_path) if config_path else None
        parser = make_parser(defaults)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            # argparse exits 2 on usage problems; the contract says 1
            return 0 if exc.code == 0 else USAGE_EXIT
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_EXIT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return NUMERIC_EXIT


if __name__ == "__main__":
    sys.exit(main())
