"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric-check failure.

Configuration is a nested JSON document with ``encoder``, ``train``,
``protocol``, ``split`` and ``synthetic`` sections. Values resolve as
defaults < ``--config`` file < ``--set key=value`` < dedicated flags.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import platform
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Dataset, NoiseChannelConfig, SplitSpec, augment_noise, load_dataset, load_label_map,
                   make_synthetic_dataset, save_dataset)
from .encoder import EncoderConfig, init_params
from .errors import ConfigMismatch, DataError, InsufficientRuns
from .harness import (Protocol, ProtocolConfig, ReportRow, TaskSplits, export_embeddings, run_batch_ablation,
                      run_fewshot, run_noise_robustness, run_sweep, run_transfer, write_records, write_report,
                      write_summary, write_throughput)
from .objectives import (AugmentedBatch, LabeledBatch, LossConfig, Variant, ce_ce_loss, combined_loss,
                         cross_entropy, finite_difference_check, scl_loss, self_supervised_loss)
from .trainer import TrainConfig, evaluate, train_run

OUTPUT_ROOT_ENV = "SCL_OUTPUT_ROOT"
GRADCHECK_TOLERANCE = 1e-5

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# configuration ---------------------------------------------------------------

def default_config() -> dict:
    protocol = asdict(ProtocolConfig())
    protocol.pop("protocol")
    return {
        "encoder": EncoderConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "protocol": {k: (list(v) if isinstance(v, tuple) else v) for k, v in protocol.items()},
        "split": {"validation": None, "test": None, "train": None, "seed": 0},
        "synthetic": {"n": 2000, "num_classes": 4, "seed": 0},
    }


COMMAND_DEFAULTS = {"noise": {"protocol.n_labeled": 100}}


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _merge(base: dict, extra: dict, prefix: str = "") -> None:
    for k, v in extra.items():
        if k not in base:
            raise UsageError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


# flag name -> dotted config key
FLAG_KEYS = {
    "loss": "train.loss.variant", "lam": "train.loss.lambda", "tau": "train.loss.tau",
    "lr": "train.learning_rate", "batch_size": "train.batch_size", "epochs": "train.max_epochs",
    "patience": "train.patience", "dropout": "train.dropout_rate",
    "n": "protocol.n_labeled", "samples": "protocol.n_samples", "top_k": "protocol.top_k",
    "seeds": "protocol.seeds", "lambdas": "protocol.lambdas", "taus": "protocol.taus",
    "temperatures": "protocol.noise_temperatures", "per_class": "protocol.per_class",
    "batch_sizes": "protocol.batch_sizes", "jobs": "protocol.jobs",
    "split_seed": "split.seed",
}


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    for key, value in COMMAND_DEFAULTS.get(args.command, {}).items():
        set_dotted(cfg, key, value)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from None
        _merge(cfg, doc)
    for text in args.set or []:
        set_dotted(cfg, *parse_override(text))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            set_dotted(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["encoder"]["seed"] = args.seed
    return cfg


def build_objects(cfg: dict, command: str) -> tuple[EncoderConfig, TrainConfig, ProtocolConfig]:
    try:
        enc = EncoderConfig.from_dict(cfg["encoder"])
        train = TrainConfig.from_dict(cfg["train"])
        proto = dict(cfg["protocol"])
        if proto.get("seeds") is not None and len(proto["seeds"]) != proto["n_samples"]:
            proto["n_samples"] = len(proto["seeds"])
            proto["top_k"] = min(proto["top_k"], proto["n_samples"])
        protocol = ProtocolConfig(protocol=_PROTOCOLS.get(command, Protocol.FEWSHOT), **proto)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return enc, train, protocol


_PROTOCOLS = {"fewshot": Protocol.FEWSHOT, "sweep": Protocol.SWEEP, "noise": Protocol.NOISE,
              "transfer": Protocol.TRANSFER, "batch-ablation": Protocol.BATCH_ABLATION}


# data ------------------------------------------------------------------------

def _load(path: str | None, args, num_classes: int | None = None) -> Dataset:
    label_map = load_label_map(args.label_map) if getattr(args, "label_map", None) else None
    try:
        return load_dataset(path, label_map, num_classes)
    except FileNotFoundError:
        raise DataError(f"no such data file: {path}") from None


def load_primary(args, cfg: dict) -> Dataset:
    if getattr(args, "data", None):
        return _load(args.data, args)
    if getattr(args, "synthetic", False):
        s = cfg["synthetic"]
        return make_synthetic_dataset(int(s["n"]), int(s["num_classes"]), int(s["seed"]))
    raise UsageError("one of --data or --synthetic is required")


def load_splits(args, cfg: dict, name: str = "task") -> TaskSplits:
    ds = load_primary(args, cfg)
    val_path, test_path = getattr(args, "validation_data", None), getattr(args, "test_data", None)
    if val_path and test_path:
        return TaskSplits(ds, _load(val_path, args, ds.num_classes), _load(test_path, args, ds.num_classes), name)
    if val_path or test_path:
        raise UsageError("--validation-data and --test-data must be given together")
    try:
        spec = SplitSpec(**cfg["split"])
    except TypeError as exc:
        raise UsageError(f"invalid split config: {exc}") from None
    return TaskSplits.from_dataset(ds, spec, name)


# output ----------------------------------------------------------------------

def output_dir(args) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from None
    return path


def write_manifest(out: Path, args, cfg: dict, argv: Sequence[str], seeds: Sequence[int]) -> Path:
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": cfg,
        "seeds": list(seeds),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _print_rows(rows: Sequence[ReportRow]) -> None:
    for r in rows:
        p = "NA" if r.p_value is None else f"{r.p_value:.4g}"
        print(f"{r.setting}\tmean={r.mean:.4f}\tstd={r.std:.4f}\tp={p}\tn={r.n}")


def _write_protocol(out: Path, rows, records, **extra) -> None:
    write_report(rows, out / "report.tsv")
    write_records(records, out / "runs.jsonl")
    write_summary(rows, out / "summary.json", **extra)


def _baseline(args, splits, protocol, train, enc):
    if not getattr(args, "baseline", False):
        return None
    ce = run_fewshot(splits, protocol, _as_ce(train), enc)
    return ce.records


def _as_ce(train: TrainConfig) -> TrainConfig:
    from dataclasses import replace
    return replace(train, loss=LossConfig(train.loss.lam, train.loss.tau, Variant.CE))


# commands --------------------------------------------------------------------

def cmd_train(args, cfg, out):
    enc, train, _ = build_objects(cfg, args.command)
    splits = load_splits(args, cfg)
    result = train_run(splits.train, splits.validation, init_params(enc, splits.train.num_classes), train, enc,
                       test=splits.test if len(splits.test) else None, task=args.task)
    save_checkpoint(out / "model.ckpt", result.checkpoint)
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for m in result.history:
            d = m.to_dict()
            d.pop("updates_per_second")
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    summary = {"best_epoch": result.best_epoch, **result.checkpoint.metadata["metrics"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"best epoch {result.best_epoch}: validation accuracy {summary['validation_accuracy']:.4f}")
    return [train.seed]


def cmd_eval(args, cfg, out):
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_primary(args, cfg)
    acc = evaluate(ckpt, ds)
    (out / "summary.json").write_text(json.dumps({"accuracy": acc, "n": len(ds)}, indent=2) + "\n")
    print(f"accuracy {acc:.4f} on {len(ds)} examples")
    return []


def cmd_fewshot(args, cfg, out):
    enc, train, protocol = build_objects(cfg, args.command)
    splits = load_splits(args, cfg)
    baseline = _baseline(args, splits, protocol, train, enc)
    res = run_fewshot(splits, protocol, train, enc, baseline=baseline)
    records = res.records + (baseline or [])
    _write_protocol(out, [res.report], records, selected_samples=[r.sample for r in res.selected])
    _print_rows([res.report])
    return list(protocol.seed_list)


def cmd_sweep(args, cfg, out):
    enc, train, protocol = build_objects(cfg, args.command)
    splits = load_splits(args, cfg)
    res = run_sweep(splits, protocol, train, enc)
    scores = [{"lambda": lam, "tau": tau, "validation_score": s} for (lam, tau), s in res.scores.items()]
    _write_protocol(out, res.rows, res.records, best={"lambda": res.best[0], "tau": res.best[1]}, grid=scores)
    _print_rows(res.rows)
    print(f"best lambda={res.best[0]:g} tau={res.best[1]:g}")
    return list(protocol.seed_list)


def cmd_noise(args, cfg, out):
    enc, train, protocol = build_objects(cfg, args.command)
    splits = load_splits(args, cfg)
    res = run_noise_robustness(splits, protocol, train, enc)
    _write_protocol(out, res.rows, res.records)
    _print_rows(res.rows)
    return list(protocol.seed_list)


def cmd_transfer(args, cfg, out):
    _, train, protocol = build_objects(cfg, args.command)
    source = load_checkpoint(args.source)
    enc = EncoderConfig.from_dict(cfg["encoder"]) if args.check_config else source.config
    splits = load_splits(args, cfg, name=protocol.target_task)
    res = run_transfer(source, splits, protocol, train, enc)
    _write_protocol(out, [res.report], res.records)
    _print_rows([res.report])
    return list(protocol.seed_list)


def cmd_batch_ablation(args, cfg, out):
    enc, train, protocol = build_objects(cfg, args.command)
    splits = load_splits(args, cfg)
    rows, records = run_batch_ablation(splits, protocol.batch_sizes, train, enc, protocol)
    _write_protocol(out, rows, records)
    write_throughput(rows, out / "throughput.tsv")
    for r in rows:
        print(f"{r.setting}\taccuracy={r.mean:.4f}\tupdates/s={r.updates_per_second:.1f}")
    return list(protocol.seed_list)


def cmd_augment(args, cfg, out):
    ds = load_primary(args, cfg)
    aug = augment_noise(ds, NoiseChannelConfig(args.temperature, args.ratio, args.max_corruption, args.seed or 0))
    target = Path(args.output) if args.output else out / "augmented.jsonl"
    save_dataset(aug, target)
    print(f"wrote {len(aug)} examples to {target}")
    return [args.seed or 0]


def cmd_embed(args, cfg, out):
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_primary(args, cfg)
    summary = export_embeddings(ckpt, ds, out / "embeddings.tsv")
    print(f"intra-class cosine {summary.intra_class_cosine:.4f}, inter-class cosine {summary.inter_class_cosine:.4f}")
    return []


def cmd_synth(args, cfg, out):
    s = cfg["synthetic"]
    ds = make_synthetic_dataset(int(s["n"]), int(s["num_classes"]), int(s["seed"]))
    target = Path(args.output) if args.output else out / "synthetic.jsonl"
    save_dataset(ds, target)
    print(f"wrote {len(ds)} examples to {target}")
    return [int(s["seed"])]


def gradcheck_trials(variant: Variant, trials: int, seed: int = 0, h: float = 1e-5) -> float:
    """Largest finite-difference relative error over random batches for one loss."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(4, 13))
        d = int(rng.integers(2, 9))
        c = int(rng.integers(2, 5))
        tau = float(rng.choice([0.1, 0.3, 0.5, 1.0]))
        lam = float(rng.uniform(0.1, 0.9))
        z = rng.normal(size=(n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        if variant is Variant.SELF_SUPERVISED:
            batch = AugmentedBatch.consecutive(z if n % 2 == 0 else z[:-1])
            err = finite_difference_check(self_supervised_loss, batch, LossConfig(lam, tau, variant), h=h)
        else:
            y = rng.integers(c, size=n)
            batch = LabeledBatch(z, rng.normal(size=(n, c)), y, c)
            cfg = LossConfig(lam, tau, variant)
            if variant is Variant.CE:
                err = finite_difference_check(cross_entropy, batch, h=h)
            elif variant is Variant.SCL:
                err = finite_difference_check(lambda b, k: scl_loss(b, k.tau), batch, cfg, h=h)
            elif variant is Variant.COMBINED:
                err = finite_difference_check(combined_loss, batch, cfg, h=h)
            else:
                err = finite_difference_check(ce_ce_loss, batch, cfg, h=h, head_weights=rng.normal(size=(c, d)))
        worst = max(worst, err)
    return worst


def cmd_gradcheck(args, cfg, out):
    variant = Variant.parse(args.loss)
    worst = gradcheck_trials(variant, args.trials, args.seed or 0, args.h)
    ok = worst < GRADCHECK_TOLERANCE
    doc = {"loss": variant.value, "trials": args.trials, "h": args.h, "max_relative_error": worst,
           "tolerance": GRADCHECK_TOLERANCE, "passed": ok}
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"{variant.value}: max relative error {worst:.3e} over {args.trials} trials -> {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise _NumericFailure()
    return [args.seed or 0]


class _NumericFailure(Exception):
    pass


# parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data: bool = True, training: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="count", default=0)
    if data:
        p.add_argument("--data", help="JSONL dataset")
        p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic dataset")
        p.add_argument("--label-map", help="JSON object mapping label names to indices")
    if training:
        p.add_argument("--validation-data")
        p.add_argument("--test-data")
        p.add_argument("--split-seed", type=int)
        p.add_argument("--loss", choices=[v.value for v in Variant if v is not Variant.SELF_SUPERVISED])
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--patience", type=int)
        p.add_argument("--dropout", type=float)


def _protocol_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, help="labeled examples per training sample")
    p.add_argument("--samples", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--seeds", type=_csv(int))
    p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scl-finetune", description="Supervised contrastive fine-tuning experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fine-tune one model")
    _common(p)
    p.add_argument("--task", default="task")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fewshot", help="few-shot protocol with top-k selection")
    _common(p)
    _protocol_flags(p)
    p.add_argument("--baseline", action="store_true", help="also run CE and report p-values against it")
    p.set_defaults(func=cmd_fewshot)

    p = sub.add_parser("sweep", help="lambda x tau grid under the few-shot protocol")
    _common(p)
    _protocol_flags(p)
    p.add_argument("--lambdas", type=_csv(float))
    p.add_argument("--taus", type=_csv(float))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("noise", help="noise-augmented few-shot runs per temperature")
    _common(p)
    _protocol_flags(p)
    p.add_argument("--temperatures", type=_csv(float))
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("transfer", help="few-shot fine-tuning from a source checkpoint")
    _common(p)
    _protocol_flags(p)
    p.add_argument("--source", required=True, help="source task checkpoint")
    p.add_argument("--per-class", type=int)
    p.add_argument("--check-config", action="store_true",
                   help="require the configured encoder to match the source checkpoint")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("batch-ablation", help="CE and CE+SCL accuracy and updates/s per batch size")
    _common(p)
    _protocol_flags(p)
    p.add_argument("--batch-sizes", type=_csv(int))
    p.set_defaults(func=cmd_batch_ablation)

    p = sub.add_parser("augment", help="write a noise-augmented copy of a dataset")
    _common(p, training=False)
    p.add_argument("--temperature", type=float, default=0.5)
    p.add_argument("--ratio", type=int, default=3)
    p.add_argument("--max-corruption", type=float, default=0.3)
    p.add_argument("--output")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("embed", help="export embeddings with PCA coordinates")
    _common(p, training=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    _common(p, data=False, training=False)
    p.add_argument("--loss", default="combined", choices=[v.value for v in Variant])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write the synthetic dataset as JSONL")
    _common(p, data=False, training=False)
    p.add_argument("--output")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        if args.command == "synth" and args.seed is not None:
            cfg["synthetic"]["seed"] = args.seed
        out = output_dir(args)
        seeds = args.func(args, cfg, out)
        write_manifest(out, args, cfg, argv, seeds)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (DataError, ConfigMismatch, InsufficientRuns) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NumericFailure:
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
