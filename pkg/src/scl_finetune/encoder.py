"""Desk-scale encoder: special-token composition, hashed bag-of-tokens MLP, linear head.

The MLP stands in for a pre-trained language model. Its output row plays the
role of the [CLS] embedding: the raw vector feeds the classification head and
its l2-normalized copy feeds the contrastive objectives.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import l2_normalize_rows

CLS, SEP, EOS = "[CLS]", "[SEP]", "[EOS]"
SPECIAL_TOKENS = (CLS, SEP, EOS)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

BIAS_INIT = 0.01


@dataclass(frozen=True)
class EncoderConfig:
    vocab_hash_dim: int = 1024
    hidden_dims: tuple[int, ...] = (256,)
    embed_dim: int = 128
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be at least 2")
        if self.max_len < 4:
            raise ValueError("max_len must be at least 4")
        if self.vocab_hash_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("layer widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: (tuple(v) if k == "hidden_dims" else v) for k, v in d.items()})

    def architecture(self) -> tuple:
        """Everything except the seed; two encoders are swappable iff these agree."""
        return (self.vocab_hash_dim, self.hidden_dims, self.embed_dim, self.max_len)


# input composition ------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class ComposedInput:
    tokens: tuple[str, ...]

    @property
    def is_pair(self) -> bool:
        return SEP in self.tokens

    def __len__(self) -> int:
        return len(self.tokens)


def compose_input(sentence_a: Sequence[str] | str, sentence_b: Sequence[str] | str | None = None,
                  cfg: EncoderConfig | int = 64) -> ComposedInput:
    """Build ``[CLS] a [EOS]`` or ``[CLS] a [SEP] b [EOS]`` within the length budget.

    Overlong inputs lose trailing content tokens, taken from the longer
    segment first; special tokens are never dropped.
    """
    max_len = cfg.max_len if isinstance(cfg, EncoderConfig) else int(cfg)
    a = tokenize(sentence_a) if isinstance(sentence_a, str) else list(sentence_a)
    if not a:
        raise ValueError("sentence_a must be non-empty")
    if sentence_b is None:
        a = a[: max_len - 2]
        return ComposedInput((CLS, *a, EOS))
    b = tokenize(sentence_b) if isinstance(sentence_b, str) else list(sentence_b)
    budget = max_len - 3
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()
    return ComposedInput((CLS, *a, SEP, *b, EOS))


# feature hashing --------------------------------------------------------

@functools.lru_cache(maxsize=1 << 16)
def fnv1a_64(key: str) -> int:
    h = FNV_OFFSET
    for byte in key.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def featurize(inputs: Sequence[ComposedInput], cfg: EncoderConfig) -> np.ndarray:
    """Hashed token counts scaled by 1/sqrt(length).

    Tokens after [SEP] are hashed with a segment prefix so the two sides of a
    pair land in different buckets.
    """
    x = np.zeros((len(inputs), cfg.vocab_hash_dim))
    for row, inp in enumerate(inputs):
        segment = "a"
        for tok in inp.tokens:
            if tok == SEP:
                segment = "b"
            x[row, fnv1a_64(f"{segment}:{tok}") % cfg.vocab_hash_dim] += 1.0
        x[row] /= np.sqrt(len(inp.tokens))
    return x


# parameters -------------------------------------------------------------

@dataclass
class ModelParams:
    weights: list[np.ndarray]  # encoder layers, each (out, in)
    biases: list[np.ndarray]
    head_w: np.ndarray  # (C, d)
    head_b: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.head_b is None:
            self.head_b = np.zeros(self.head_w.shape[0])

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[0]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"enc.{i}.w"] = w
            out[f"enc.{i}.b"] = b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        n_layers = sum(1 for k in arrays if k.startswith("enc.") and k.endswith(".w"))
        return cls(
            weights=[arrays[f"enc.{i}.w"] for i in range(n_layers)],
            biases=[arrays[f"enc.{i}.b"] for i in range(n_layers)],
            head_w=arrays["head.w"],
            head_b=arrays["head.b"],
        )

    def copy(self) -> "ModelParams":
        return ModelParams.from_named({k: v.copy() for k, v in self.named().items()})


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator | None = None):
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    dims = [cfg.vocab_hash_dim, *cfg.hidden_dims, cfg.embed_dim]
    weights = [_glorot(rng, dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
    biases = [np.full(dims[i + 1], BIAS_INIT) for i in range(len(dims) - 1)]
    return weights, biases


def init_head(embed_dim: int, num_classes: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    return _glorot(rng, num_classes, embed_dim), np.zeros(num_classes)


def init_params(cfg: EncoderConfig, num_classes: int, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    weights, biases = init_encoder(cfg, rng)
    head_w, head_b = init_head(cfg.embed_dim, num_classes, rng)
    return ModelParams(weights, biases, head_w, head_b)


# forward / backward -----------------------------------------------------

@dataclass
class ForwardCache:
    activations: list[np.ndarray]  # input to each layer
    hidden: list[np.ndarray]  # tanh outputs before dropout
    masks: list[Optional[np.ndarray]]  # inverted-dropout multipliers per hidden layer


def encoder_forward(params: ModelParams, x: np.ndarray, dropout: float = 0.0,
                    rng: np.random.Generator | None = None) -> tuple[np.ndarray, ForwardCache]:
    """tanh hidden layers (with inverted dropout when ``dropout > 0``), linear output."""
    acts, hidden, masks = [], [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        acts.append(h)
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
            hidden.append(h)
            if dropout > 0.0:
                keep = 1.0 - dropout
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
                masks.append(mask)
            else:
                masks.append(None)
    return h, ForwardCache(acts, hidden, masks)


def encoder_backward(params: ModelParams, cache: ForwardCache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    g = grad_out
    for i in range(len(params.weights) - 1, -1, -1):
        a_in = cache.activations[i]
        grads[f"enc.{i}.w"] = g.T @ a_in
        grads[f"enc.{i}.b"] = g.sum(axis=0)
        if i == 0:
            break
        g = g @ params.weights[i]
        mask = cache.masks[i - 1]
        if mask is not None:
            g = g * mask
        g = g * (1.0 - cache.hidden[i - 1] ** 2)
    return grads


def classify(raw: np.ndarray, params: ModelParams) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != params.head_w.shape[1]:
        raise ValueError(f"expected (N, {params.head_w.shape[1]}) embeddings, got {raw.shape}")
    return raw @ params.head_w.T + params.head_b


def encode_features(x: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    raw, _ = encoder_forward(params, x)
    normalized, _ = l2_normalize_rows(raw)
    return raw, normalized


def encode_batch(inputs: Sequence[ComposedInput], params: ModelParams,
                 cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Raw N x d embeddings and their unit-row copy (no dropout)."""
    return encode_features(featurize(inputs, cfg), params)
