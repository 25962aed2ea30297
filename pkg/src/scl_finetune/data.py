"""Datasets, stratified few-shot sampling, splits and the simulated noise channel."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import EmptyFile, ParseError, TooFewExamples, UnknownLabel


@dataclass(frozen=True)
class Example:
    id: str
    text_a: str
    label: int
    text_b: Optional[str] = None

    @property
    def is_pair(self) -> bool:
        return self.text_b is not None

    def to_json(self) -> dict:
        d = {"id": self.id, "text_a": self.text_a}
        if self.text_b is not None:
            d["text_b"] = self.text_b
        d["label"] = self.label
        return d


@dataclass
class Dataset:
    examples: list[Example]
    num_classes: int
    label_names: Optional[list[str]] = None

    def __post_init__(self):
        for ex in self.examples:
            if not 0 <= ex.label < self.num_classes:
                raise UnknownLabel(f"label {ex.label} of {ex.id!r} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def label_distribution(self) -> np.ndarray:
        if not self.examples:
            return np.zeros(self.num_classes)
        counts = self.class_counts
        return counts / counts.sum()

    @property
    def is_pair(self) -> bool:
        return any(ex.is_pair for ex in self.examples)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return replace(self, examples=[self.examples[i] for i in indices])

    def without(self, ids: Iterable[str]) -> "Dataset":
        drop = set(ids)
        return replace(self, examples=[ex for ex in self.examples if ex.id not in drop])


# file IO ----------------------------------------------------------------

def load_label_map(path: str | os.PathLike) -> dict[str, int]:
    """JSON object mapping label strings to class indices."""
    with open(path, encoding="utf-8") as fh:
        mapping = json.load(fh)
    return {str(k): int(v) for k, v in mapping.items()}


def load_dataset(path: str | os.PathLike, label_map: dict[str, int] | None = None,
                 num_classes: int | None = None) -> Dataset:
    """Read one JSON object per line: ``{id?, text_a, text_b?, label}``.

    Without a label map, integer labels are used as-is and string labels are
    indexed in sorted order.
    """
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(lineno, "record is not an object")
            if "label" not in rec or rec["label"] is None:
                raise ParseError(lineno, "missing label")
            text_a = rec.get("text_a")
            if not isinstance(text_a, str) or not text_a.strip():
                raise ParseError(lineno, "missing or empty text_a")
            text_b = rec.get("text_b")
            if text_b is not None and not isinstance(text_b, str):
                raise ParseError(lineno, "text_b must be a string")
            records.append((lineno, rec))
    if not records:
        raise EmptyFile(f"{path} contains no records")

    raw_labels = [rec["label"] for _, rec in records]
    names = None
    if label_map is None:
        if all(isinstance(l, int) and not isinstance(l, bool) for l in raw_labels):
            label_map = None
        else:
            names = sorted({str(l) for l in raw_labels})
            label_map = {n: i for i, n in enumerate(names)}
    else:
        names = [n for n, _ in sorted(label_map.items(), key=lambda kv: kv[1])]

    examples = []
    for (lineno, rec), raw in zip(records, raw_labels):
        if label_map is None:
            label = raw
            if label < 0:
                raise UnknownLabel(f"line {lineno}: negative label {raw}")
        else:
            key = str(raw)
            if key not in label_map:
                raise UnknownLabel(f"line {lineno}: label {raw!r} not in label map")
            label = label_map[key]
        ex_id = str(rec.get("id", f"{path.stem}-{lineno}"))
        examples.append(Example(ex_id, rec["text_a"], int(label), rec.get("text_b")))

    inferred = max(ex.label for ex in examples) + 1
    if label_map is not None:
        inferred = max(inferred, max(label_map.values()) + 1)
    c = num_classes if num_classes is not None else max(inferred, 2)
    if c < inferred:
        raise UnknownLabel(f"label {inferred - 1} exceeds num_classes={c}")
    return Dataset(examples, c, names)


def save_dataset(ds: Dataset, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in ds.examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")
    return path


# sampling -----------------------------------------------------------------

def apportion(n: int, distribution: Sequence[float]) -> np.ndarray:
    """Largest-remainder allocation of ``n`` items across classes.

    Every class with nonzero frequency receives at least one item. Leftover
    units go to the largest fractional remainders, ties to the lower index.
    """
    p = np.asarray(distribution, dtype=np.float64)
    present = p > 0
    if n < int(present.sum()):
        raise TooFewExamples(f"cannot give {int(present.sum())} classes one example each from n={n}")
    quota = n * p / p.sum()
    counts = np.floor(quota).astype(np.int64)
    # exact ties arrive with float noise; round so they still go to the lower index
    remainder = np.round(quota - counts, 9)
    bumped = present & (counts == 0)
    counts[bumped] = 1
    left = n - int(counts.sum())
    if left > 0:
        order = sorted((i for i in range(p.size) if present[i] and not bumped[i]),
                       key=lambda i: (-remainder[i], i))
        for i in order[:left]:
            counts[i] += 1
    while left < 0:
        # the minimum-one rule overshot; take back from the weakest claims
        candidates = [i for i in range(p.size) if counts[i] > 1]
        i = min(candidates, key=lambda i: (quota[i] - counts[i] + 1, -i))
        counts[i] -= 1
        left += 1
    return counts


def _draw(ds: Dataset, per_class: Sequence[int], rng: np.random.Generator) -> list[int]:
    labels = ds.labels
    chosen = []
    for c, k in enumerate(per_class):
        if k == 0:
            continue
        pool = np.flatnonzero(labels == c)
        if pool.size < k:
            raise TooFewExamples(f"class {c} has {pool.size} examples, {k} requested")
        chosen.extend(rng.choice(pool, size=int(k), replace=False).tolist())
    return sorted(chosen)


def stratified_sample(ds: Dataset, n: int, seed: int) -> Dataset:
    """Draw ``n`` examples with per-class counts proportional to the label distribution."""
    if n > len(ds):
        raise TooFewExamples(f"requested {n} of {len(ds)} examples")
    if n < ds.num_classes:
        raise TooFewExamples(f"n={n} is below the class count {ds.num_classes}")
    counts = apportion(n, ds.label_distribution)
    return ds.subset(_draw(ds, counts, np.random.default_rng(seed)))


def sample_per_class(ds: Dataset, per_class: int, seed: int) -> Dataset:
    """Exactly ``per_class`` examples of every class."""
    counts = [per_class] * ds.num_classes
    return ds.subset(_draw(ds, counts, np.random.default_rng(seed)))


@dataclass(frozen=True)
class SplitSpec:
    validation: Optional[int] = None
    test: Optional[int] = None
    train: Optional[int] = None
    seed: int = 0

    def sizes(self, total: int) -> tuple[int, int]:
        val = self.validation if self.validation is not None else min(500, total // 10)
        test = self.test if self.test is not None else min(1000, total // 5)
        return val, test


def make_splits(ds: Dataset, spec: SplitSpec | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint stratified (train, validation, test) splits.

    Validation defaults to min(500, 10%) of the data and test to
    min(1000, 20%); train is the remainder unless ``spec.train`` caps it.
    """
    spec = spec or SplitSpec()
    n_val, n_test = spec.sizes(len(ds))
    n_train = spec.train if spec.train is not None else len(ds) - n_val - n_test
    if n_val + n_test + n_train > len(ds):
        raise TooFewExamples(f"split sizes {n_train}+{n_val}+{n_test} exceed {len(ds)} examples")
    validation = stratified_sample(ds, n_val, spec.seed) if n_val else ds.subset([])
    rest = ds.without(validation.ids)
    test = stratified_sample(rest, n_test, spec.seed + 1) if n_test else ds.subset([])
    rest = rest.without(test.ids)
    train = rest if spec.train is None else stratified_sample(rest, n_train, spec.seed + 2)
    return train, validation, test


# noise channel ------------------------------------------------------------

NOISE_OPS = ("delete", "duplicate", "swap", "replace")


@dataclass(frozen=True)
class NoiseChannelConfig:
    temperature: float = 0.0
    ratio: int = 3
    max_corruption: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("noise temperature must be >= 0")
        if self.ratio < 1:
            raise ValueError("augmentation ratio must be >= 1")
        if not 0.0 <= self.max_corruption <= 1.0:
            raise ValueError("max_corruption must lie in [0, 1]")

    @property
    def token_probability(self) -> float:
        return min(self.temperature, 1.0) * self.max_corruption


def corrupt_tokens(tokens: Sequence[str], p: float, vocab: Sequence[str],
                   rng: np.random.Generator) -> tuple[list[str], int]:
    """Apply the token-level noise channel; returns (tokens, number of corrupted positions).

    Each position is selected independently with probability ``p`` and then
    gets one operation drawn uniformly from delete / duplicate / swap with the
    previous output token / replace with a random vocabulary token. Deletion
    is skipped when it would empty the text.
    """
    out: list[str] = []
    hits = 0
    remaining = len(tokens)
    for tok in tokens:
        remaining -= 1
        if p <= 0.0 or rng.random() >= p:
            out.append(tok)
            continue
        hits += 1
        op = NOISE_OPS[int(rng.integers(len(NOISE_OPS)))]
        if op == "delete":
            if out or remaining:
                continue
            out.append(tok)
        elif op == "duplicate":
            out.extend((tok, tok))
        elif op == "swap":
            if out:
                out.append(out[-1])
                out[-2] = tok
            else:
                out.append(tok)
        else:
            out.append(vocab[int(rng.integers(len(vocab)))] if vocab else tok)
    if not out:
        out = [tokens[0]]
    return out, hits


def _corrupt_text(text: str, p: float, vocab: Sequence[str], rng: np.random.Generator) -> str:
    if p <= 0.0:
        return text
    tokens = text.split()
    new, hits = corrupt_tokens(tokens, p, vocab, rng)
    return text if hits == 0 else " ".join(new)


def augment_noise(ds: Dataset, cfg: NoiseChannelConfig) -> Dataset:
    """Originals followed by ``cfg.ratio`` noisy copies each, labels preserved.

    Augmented ids are ``<id>#aug<k>``. With temperature 0 the copies are
    byte-identical to their sources.
    """
    rng = np.random.default_rng(cfg.seed)
    p = cfg.token_probability
    vocab = sorted({tok for ex in ds.examples for text in (ex.text_a, ex.text_b) if text for tok in text.split()})
    originals = list(ds.examples)
    augmented = []
    for ex in ds.examples:
        for k in range(cfg.ratio):
            text_a = _corrupt_text(ex.text_a, p, vocab, rng)
            text_b = None if ex.text_b is None else _corrupt_text(ex.text_b, p, vocab, rng)
            augmented.append(Example(f"{ex.id}#aug{k}", text_a, ex.label, text_b))
    return replace(ds, examples=originals + augmented)


def is_augmented(example_id: str) -> bool:
    return "#aug" in example_id


# synthetic data -------------------------------------------------------------

def make_synthetic_dataset(n: int = 2000, num_classes: int = 4, seed: int = 0, *,
                           keywords_per_class: int = 6, signal: tuple[int, int] = (2, 3),
                           nuisance_groups: int = 4, nuisance_vocab: int = 10,
                           nuisance: tuple[int, int] = (6, 9), confusion: float = 0.1,
                           pair: bool = False, distribution: Sequence[float] | None = None) -> Dataset:
    """Topic-keyword sentences with a label-independent nuisance attribute.

    Each sentence carries a few keywords of its class plus several words of
    one of ``nuisance_groups`` style pools drawn independently of the label,
    so raw token overlap is dominated by structure the label does not
    explain. With probability ``confusion`` one keyword of another class is
    mixed in.
    """
    rng = np.random.default_rng(seed)
    keywords = [[f"k{c}x{j}" for j in range(keywords_per_class)] for c in range(num_classes)]
    styles = [[f"s{g}x{j}" for j in range(nuisance_vocab)] for g in range(nuisance_groups)]
    probs = np.full(num_classes, 1.0 / num_classes) if distribution is None else np.asarray(distribution, float)
    labels = rng.choice(num_classes, size=n, p=probs / probs.sum())

    def sentence(c: int, g: int) -> str:
        k = int(rng.integers(signal[0], signal[1] + 1))
        words = [keywords[c][int(i)] for i in rng.integers(keywords_per_class, size=k)]
        if num_classes > 1 and rng.random() < confusion:
            other = int(rng.choice([o for o in range(num_classes) if o != c]))
            words.append(keywords[other][int(rng.integers(keywords_per_class))])
        m = int(rng.integers(nuisance[0], nuisance[1] + 1))
        words += [styles[g][int(i)] for i in rng.integers(nuisance_vocab, size=m)]
        rng.shuffle(words)
        return " ".join(words)

    examples = []
    for i, c in enumerate(labels):
        c = int(c)
        g = int(rng.integers(nuisance_groups))
        text_b = sentence(c, g) if pair else None
        examples.append(Example(f"syn-{i:05d}", sentence(c, g), c, text_b))
    return Dataset(examples, num_classes, [f"class{c}" for c in range(num_classes)])
