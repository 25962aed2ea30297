"""Experiment protocols: few-shot, sweep, noise robustness, transfer, batch ablation.

Every protocol is a deterministic function of its datasets, configs and seed
list. Timing measurements are kept on the side (``RunRecord.throughput``,
``ReportRow.updates_per_second``) and are never part of the deterministic
serializations.
"""

from __future__ import annotations

import enum
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .checkpoint import Checkpoint
from .data import (Dataset, NoiseChannelConfig, augment_noise, make_splits, sample_per_class,
                   stratified_sample, SplitSpec)
from .encoder import (EncoderConfig, ModelParams, compose_input, encode_batch, init_encoder,
                      init_head)
from .errors import ConfigMismatch, InsufficientRuns
from .numerics import pca_project_2d
from .objectives import LossConfig, Variant
from .optim import OptimizerState
from .trainer import TrainConfig, dataset_features, train_run, train_step

PAPER_LAMBDAS = (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
PAPER_TAUS = (0.1, 0.3, 0.5, 0.7)
PAPER_NOISE_TEMPERATURES = (0.3, 0.5, 0.7, 0.9)
PAPER_BATCH_SIZES = (16, 64, 256)

REPORT_HEADER = "# std: population standard deviation; p_value: Welch two-sample t-test vs baseline"


class Protocol(str, enum.Enum):
    FEWSHOT = "fewshot"
    SWEEP = "sweep"
    NOISE = "noise"
    TRANSFER = "transfer"
    BATCH_ABLATION = "batch-ablation"


@dataclass(frozen=True)
class ProtocolConfig:
    protocol: Protocol = Protocol.FEWSHOT
    n_labeled: int = 20
    n_samples: int = 10
    top_k: int = 3
    seeds: Optional[tuple[int, ...]] = None
    lambdas: tuple[float, ...] = PAPER_LAMBDAS
    taus: tuple[float, ...] = PAPER_TAUS
    noise_temperatures: tuple[float, ...] = PAPER_NOISE_TEMPERATURES
    noise_ratio: int = 3
    max_corruption: float = 0.3
    per_class: int = 20
    batch_sizes: tuple[int, ...] = PAPER_BATCH_SIZES
    throughput_steps: int = 100
    source_task: str = "source"
    target_task: str = "target"
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        for name in ("seeds", "lambdas", "taus", "noise_temperatures", "batch_sizes"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))
        if self.seeds is not None and len(self.seeds) != self.n_samples:
            raise ValueError(f"{len(self.seeds)} seeds given for n_samples={self.n_samples}")
        if not 1 <= self.top_k <= self.n_samples:
            raise ValueError("top_k must lie in [1, n_samples]")
        if any(v <= 0 for v in (*self.lambdas, *self.taus)):
            raise ValueError("grid values must be positive")

    @property
    def seed_list(self) -> tuple[int, ...]:
        return self.seeds if self.seeds is not None else tuple(range(self.n_samples))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = self.protocol.value
        d["seeds"] = list(self.seed_list)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


@dataclass
class TaskSplits:
    train: Dataset  # pool the few-shot training sets are drawn from
    validation: Dataset
    test: Dataset
    name: str = "task"

    @classmethod
    def from_dataset(cls, ds: Dataset, spec: SplitSpec | None = None, name: str = "task") -> "TaskSplits":
        return cls(*make_splits(ds, spec), name=name)


@dataclass
class RunRecord:
    sample: int
    seed: int
    hyperparameters: dict
    validation_accuracy: float
    test_accuracy: float
    throughput: Optional[float] = None
    setting: str = ""

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("throughput")
        return d


@dataclass
class ReportRow:
    setting: str
    mean: float
    std: float
    p_value: Optional[float]
    n: int
    updates_per_second: Optional[float] = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("updates_per_second")
        return d


@dataclass
class FewShotResult:
    records: list[RunRecord]
    selected: list[RunRecord]
    report: ReportRow


# statistics ----------------------------------------------------------------

def select_top_k(records: Sequence[RunRecord], k: int) -> list[RunRecord]:
    """Best ``k`` runs by validation accuracy; ties go to the lower sample index."""
    return sorted(records, key=lambda r: (-r.validation_accuracy, r.sample))[:k]


def population_mean_std(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=0))


def welch_p_value(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Welch t-test. Zero variance in both groups gives 1.0 for equal means, else 0.0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InsufficientRuns("Welch's test needs at least two runs per group")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return 1.0 if a[0] == b[0] else 0.0
    p = float(stats.ttest_ind(a, b, equal_var=False).pvalue)
    return min(max(p, 0.0), 1.0)


def aggregate_report(records: Sequence[RunRecord] | dict[str, Sequence[RunRecord]],
                     baseline_records: Sequence[RunRecord] | None = None,
                     metric: str = "test_accuracy") -> list[ReportRow]:
    """Mean, population std and Welch p-value vs the baseline, one row per setting."""
    if isinstance(records, dict):
        groups = dict(records)
    else:
        groups = {}
        for r in records:
            groups.setdefault(r.setting, []).append(r)
    base = None
    if baseline_records is not None:
        base = [getattr(r, metric) for r in baseline_records]
        if len(base) < 2:
            raise InsufficientRuns("baseline needs at least two runs")
    rows = []
    for setting, group in groups.items():
        values = [getattr(r, metric) for r in group]
        if len(values) < 2:
            raise InsufficientRuns(f"setting {setting!r} has {len(values)} run(s); need >= 2")
        mean, std = population_mean_std(values)
        p = welch_p_value(values, base) if base is not None else None
        tps = [r.throughput for r in group if r.throughput is not None]
        rows.append(ReportRow(setting, mean, std, p, len(values), float(np.mean(tps)) if tps else None))
    return rows


# run scheduling ------------------------------------------------------------

def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    # results keep input order, so reports do not depend on scheduling
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def setting_label(loss: LossConfig, extra: str = "") -> str:
    v = loss.variant
    if v is Variant.CE:
        label = "ce"
    else:
        label = f"{v.value} lambda={loss.lam:g} tau={loss.tau:g}"
    return f"{label} {extra}".strip()


def _fresh_init(encoder_cfg: EncoderConfig, num_classes: int, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights, biases = init_encoder(encoder_cfg, rng)
    head_w, head_b = init_head(encoder_cfg.embed_dim, num_classes, rng)
    return ModelParams(weights, biases, head_w, head_b)


def _run_samples(splits: TaskSplits, cfg: ProtocolConfig, train_cfg: TrainConfig, encoder_cfg: EncoderConfig,
                 make_train: Callable[[int], Dataset], make_init: Callable[[int], ModelParams],
                 setting: str, hyper: dict) -> list[RunRecord]:
    def one(item):
        sample, seed = item
        train = make_train(seed)
        result = train_run(train, splits.validation, make_init(seed), replace(train_cfg, seed=seed),
                           encoder_cfg, test=splits.test, task=splits.name)
        best = result.history[result.best_epoch - 1]
        tput = result.steps / result.step_seconds if result.step_seconds > 0 else None
        return RunRecord(sample, seed, dict(hyper), best.validation_accuracy, best.test_accuracy, tput, setting)

    return _map(one, list(enumerate(cfg.seed_list)), cfg.jobs)


def _summarize(records: list[RunRecord], cfg: ProtocolConfig, baseline: Sequence[RunRecord] | None,
               setting: str) -> FewShotResult:
    selected = select_top_k(records, cfg.top_k)
    base = select_top_k(baseline, cfg.top_k) if baseline is not None else None
    row = aggregate_report({setting: selected}, base)[0]
    return FewShotResult(records, selected, row)


def _hyper(loss: LossConfig, **extra) -> dict:
    return {**loss.to_dict(), **extra}


# protocols -----------------------------------------------------------------

def run_fewshot(splits: TaskSplits, cfg: ProtocolConfig, train_cfg: TrainConfig,
                encoder_cfg: EncoderConfig | None = None, *,
                baseline: Sequence[RunRecord] | None = None) -> FewShotResult:
    """One model per stratified training sample; report the top-k by validation accuracy."""
    encoder_cfg = encoder_cfg or EncoderConfig()
    if cfg.n_labeled < splits.train.num_classes:
        raise ValueError("n_labeled must be at least the class count")
    setting = setting_label(train_cfg.loss, f"n={cfg.n_labeled}")
    records = _run_samples(
        splits, cfg, train_cfg, encoder_cfg,
        make_train=lambda seed: stratified_sample(splits.train, cfg.n_labeled, seed),
        make_init=lambda seed: _fresh_init(encoder_cfg, splits.train.num_classes, seed),
        setting=setting, hyper=_hyper(train_cfg.loss, n_labeled=cfg.n_labeled),
    )
    return _summarize(records, cfg, baseline, setting)


def select_best(scores: dict[tuple[float, float], float]) -> tuple[float, float]:
    """Highest score; ties prefer larger lambda, then smaller tau."""
    return max(scores, key=lambda lt: (scores[lt], lt[0], -lt[1]))


@dataclass
class SweepResult:
    best: tuple[float, float]
    scores: dict[tuple[float, float], float]
    rows: list[ReportRow]
    records: list[RunRecord]


def run_sweep(splits: TaskSplits, cfg: ProtocolConfig, train_cfg: TrainConfig,
              encoder_cfg: EncoderConfig | None = None) -> SweepResult:
    """Few-shot protocol at every (lambda, tau) grid point under identical seeds.

    A grid point's score is the mean validation accuracy of its top-k runs.
    """
    scores, rows, records = {}, [], []
    for lam in cfg.lambdas:
        for tau in cfg.taus:
            tc = replace(train_cfg, loss=LossConfig(lam, tau, Variant.COMBINED))
            res = run_fewshot(splits, cfg, tc, encoder_cfg)
            scores[(lam, tau)] = float(np.mean([r.validation_accuracy for r in res.selected]))
            rows.append(res.report)
            records.extend(res.records)
    return SweepResult(select_best(scores), scores, rows, records)


@dataclass
class NoiseResult:
    rows: list[ReportRow]
    records: list[RunRecord]
    test_ids: dict[float, list[str]]
    validation_ids: dict[float, list[str]]


def noise_training_set(base: Dataset, temperature: float, cfg: ProtocolConfig, seed: int) -> Dataset:
    return augment_noise(base, NoiseChannelConfig(temperature, cfg.noise_ratio, cfg.max_corruption, seed))


def run_noise_robustness(splits: TaskSplits, cfg: ProtocolConfig, train_cfg: TrainConfig,
                         encoder_cfg: EncoderConfig | None = None, *,
                         baseline: dict[float, Sequence[RunRecord]] | None = None) -> NoiseResult:
    """Few-shot runs on noise-augmented training sets, one report row per temperature.

    The labeled base sample for a seed is shared by every temperature and the
    validation/test splits never change.
    """
    if not cfg.noise_temperatures:
        raise ValueError("need at least one noise temperature")
    encoder_cfg = encoder_cfg or EncoderConfig()
    bases = {seed: stratified_sample(splits.train, cfg.n_labeled, seed) for seed in cfg.seed_list}
    rows, records, test_ids, val_ids = [], [], {}, {}
    for temp in cfg.noise_temperatures:
        setting = setting_label(train_cfg.loss, f"n={cfg.n_labeled} T={temp:g}")
        recs = _run_samples(
            splits, cfg, train_cfg, encoder_cfg,
            make_train=lambda seed, temp=temp: noise_training_set(bases[seed], temp, cfg, seed),
            make_init=lambda seed: _fresh_init(encoder_cfg, splits.train.num_classes, seed),
            setting=setting, hyper=_hyper(train_cfg.loss, n_labeled=cfg.n_labeled, noise_temperature=temp),
        )
        base = baseline.get(temp) if baseline else None
        rows.append(_summarize(recs, cfg, base, setting).report)
        records.extend(recs)
        test_ids[temp] = list(splits.test.ids)
        val_ids[temp] = list(splits.validation.ids)
    return NoiseResult(rows, records, test_ids, val_ids)


def transfer_init(source: Checkpoint, num_classes: int, seed: int) -> ModelParams:
    """Source encoder weights copied verbatim, head freshly initialized."""
    head_w, head_b = init_head(source.config.embed_dim, num_classes, np.random.default_rng(seed))
    enc = source.params.copy()
    return ModelParams(enc.weights, enc.biases, head_w, head_b)


def run_transfer(source_ckpt: Checkpoint, target: TaskSplits, cfg: ProtocolConfig, train_cfg: TrainConfig,
                 encoder_cfg: EncoderConfig | None = None, *,
                 baseline: Sequence[RunRecord] | None = None) -> FewShotResult:
    """Few-shot fine-tuning on the target task starting from a source task model.

    Each training sample holds ``cfg.per_class`` examples of every class.
    """
    encoder_cfg = encoder_cfg or source_ckpt.config
    if source_ckpt.config.architecture() != encoder_cfg.architecture():
        raise ConfigMismatch(f"source encoder {source_ckpt.config.architecture()} does not match "
                             f"target {encoder_cfg.architecture()}")
    c = target.train.num_classes
    setting = setting_label(train_cfg.loss, f"transfer {cfg.source_task}->{cfg.target_task} per_class={cfg.per_class}")
    records = _run_samples(
        target, cfg, train_cfg, encoder_cfg,
        make_train=lambda seed: sample_per_class(target.train, cfg.per_class, seed),
        make_init=lambda seed: transfer_init(source_ckpt, c, seed),
        setting=setting, hyper=_hyper(train_cfg.loss, per_class=cfg.per_class, source=cfg.source_task),
    )
    return _summarize(records, cfg, baseline, setting)


def time_updates(train: Dataset, train_cfg: TrainConfig, encoder_cfg: EncoderConfig, steps: int) -> float:
    """Updates per second over ``steps`` optimizer steps; featurization happens before the clock starts."""
    from .trainer import measure_throughput

    x, y = dataset_features(train, encoder_cfg)
    params = _fresh_init(encoder_cfg, train.num_classes, train_cfg.seed)
    state = OptimizerState()
    rng = np.random.default_rng(train_cfg.seed)
    bs = min(train_cfg.batch_size, len(y))
    batches = [rng.choice(len(y), size=bs, replace=False) for _ in range(steps)]
    elapsed = 0.0
    for idx in batches:
        t0 = time.perf_counter()
        params, state, _ = train_step(params, state, x[idx], y[idx], train_cfg, rng)
        elapsed += time.perf_counter() - t0
    return measure_throughput((steps, elapsed), min_steps=min(steps, 50))


def run_batch_ablation(splits: TaskSplits, batch_sizes: Sequence[int], train_cfg: TrainConfig,
                       encoder_cfg: EncoderConfig | None = None,
                       cfg: ProtocolConfig | None = None) -> tuple[list[ReportRow], list[RunRecord]]:
    """CE and CE+SCL at every batch size: test accuracy plus updates per second.

    Models train on the whole training split. Throughput comes from a separate
    fixed-length timing pass of ``cfg.throughput_steps`` updates.
    """
    cfg = cfg or ProtocolConfig(protocol=Protocol.BATCH_ABLATION)
    encoder_cfg = encoder_cfg or EncoderConfig()
    if any(b < 2 for b in batch_sizes):
        raise ValueError("batch sizes must be >= 2")
    variants = (LossConfig(train_cfg.loss.lam, train_cfg.loss.tau, Variant.CE),
                LossConfig(train_cfg.loss.lam, train_cfg.loss.tau, Variant.COMBINED))
    rows, all_records = [], []
    for bs in batch_sizes:
        for loss in variants:
            tc = replace(train_cfg, batch_size=bs, loss=loss)
            setting = setting_label(loss, f"batch={bs}")

            def one(item, tc=tc, setting=setting, bs=bs, loss=loss):
                sample, seed = item
                seeded = replace(tc, seed=seed)
                result = train_run(splits.train, splits.validation, _fresh_init(encoder_cfg, splits.train.num_classes, seed),
                                   seeded, encoder_cfg, test=splits.test, task=splits.name)
                best = result.history[result.best_epoch - 1]
                ups = time_updates(splits.train, seeded, encoder_cfg, cfg.throughput_steps)
                return RunRecord(sample, seed, _hyper(loss, batch_size=bs), best.validation_accuracy,
                                 best.test_accuracy, ups, setting)

            recs = _map(one, list(enumerate(cfg.seed_list)), cfg.jobs)
            rows.extend(aggregate_report({setting: recs}))
            all_records.extend(recs)
    return rows, all_records


# embeddings ----------------------------------------------------------------

@dataclass
class EmbeddingSummary:
    intra_class_cosine: float
    inter_class_cosine: float
    n: int

    @property
    def gap(self) -> float:
        return self.intra_class_cosine - self.inter_class_cosine


def cosine_summary(unit_rows: np.ndarray, labels: np.ndarray) -> EmbeddingSummary:
    """Mean cosine over distinct same-label pairs and over different-label pairs."""
    labels = np.asarray(labels)
    sim = unit_rows @ unit_rows.T
    upper = np.triu(np.ones(sim.shape, dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    intra = sim[upper & same]
    inter = sim[upper & ~same]
    return EmbeddingSummary(float(intra.mean()) if intra.size else float("nan"),
                            float(inter.mean()) if inter.size else float("nan"), len(labels))


def embed_dataset(ckpt: Checkpoint, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    inputs = [compose_input(ex.text_a, ex.text_b, ckpt.config) for ex in ds.examples]
    return encode_batch(inputs, ckpt.params, ckpt.config)


def _fmt(x: float) -> str:
    return repr(float(x))


def export_embeddings(ckpt: Checkpoint, ds: Dataset, path: str | os.PathLike) -> EmbeddingSummary:
    """Write id, label, raw dims and two PCA coordinates per example as TSV.

    A ``<path>.summary.json`` sidecar holds intra/inter-class mean cosine.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw, unit = embed_dataset(ckpt, ds)
    proj = pca_project_2d(raw)
    d = raw.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["id", "label", *(f"e{i}" for i in range(d)), "pc1", "pc2"]) + "\n")
        for ex, row, pc in zip(ds.examples, raw, proj):
            fh.write("\t".join([ex.id, str(ex.label), *map(_fmt, row), _fmt(pc[0]), _fmt(pc[1])]) + "\n")
    summary = cosine_summary(unit, ds.labels)
    sidecar = path.with_name(path.name + ".summary.json")
    sidecar.write_text(json.dumps({**asdict(summary), "gap": summary.gap}, indent=2, sort_keys=True) + "\n")
    return summary


# report files --------------------------------------------------------------

def _cell(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def write_report(rows: Sequence[ReportRow], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(REPORT_HEADER + "\n")
        fh.write("setting\tmean\tstd\tp_value\tn\n")
        for r in rows:
            fh.write("\t".join(_cell(v) for v in (r.setting, r.mean, r.std, r.p_value, r.n)) + "\n")
    return path


def write_throughput(rows: Sequence[ReportRow], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("setting\tupdates_per_second\n")
        for r in rows:
            fh.write(f"{r.setting}\t{_cell(r.updates_per_second)}\n")
    return path


def write_records(records: Iterable[RunRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_records(path: str | os.PathLike) -> list[RunRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RunRecord(**json.loads(line)) for line in fh if line.strip()]


def write_summary(rows: Sequence[ReportRow], path: str | os.PathLike, **extra) -> Path:
    path = Path(path)
    doc = {"std": "population", "p_value_test": "welch", "rows": [r.to_dict() for r in rows], **extra}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
