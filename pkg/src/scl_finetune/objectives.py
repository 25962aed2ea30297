"""Fine-tuning objectives with analytic gradients.

All losses compute in float64 (extended-precision input is honoured so the
finite-difference oracle can run above double precision). Contrastive terms take l2-normalized
embeddings and return the gradient with respect to those unit rows; callers
that start from raw encoder outputs chain through
:func:`scl_finetune.numerics.normalize_backward`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidPairing, InvalidTemperature
from .numerics import as_real, log_softmax, softmax


class Variant(str, enum.Enum):
    CE = "ce"
    SCL = "scl"
    COMBINED = "combined"
    SELF_SUPERVISED = "self"
    CE_CE = "ce-ce"

    @classmethod
    def parse(cls, name: "str | Variant") -> "Variant":
        if isinstance(name, Variant):
            return name
        key = str(name).strip().lower().replace("_", "-")
        aliases = {"ce+scl": "combined", "self-supervised": "self", "ce+ce": "ce-ce", "cece": "ce-ce"}
        key = aliases.get(key, key)
        for v in cls:
            if v.value == key:
                return v
        raise ValueError(f"unknown loss variant {name!r}")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.9
    tau: float = 0.3
    variant: Variant = Variant.COMBINED

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        _check_tau(self.tau)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "tau": self.tau, "variant": self.variant.value}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(lam=float(d.get("lambda", cls.lam)), tau=float(d.get("tau", cls.tau)),
                   variant=Variant.parse(d.get("variant", cls.variant)))


@dataclass
class LabeledBatch:
    """Embeddings (N x d, unit rows), logits (N x C) and integer labels."""

    embeddings: Optional[np.ndarray]
    logits: Optional[np.ndarray]
    labels: np.ndarray
    num_classes: Optional[int] = None
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.size < 1:
            raise ValueError("labels must be a non-empty 1-D array")
        if self.embeddings is not None:
            self.embeddings = as_real(self.embeddings)
            if self.embeddings.shape[0] != self.labels.size:
                raise ValueError("embeddings and labels disagree on batch size")
        if self.logits is not None:
            self.logits = as_real(self.logits)
            if self.logits.shape[0] != self.labels.size:
                raise ValueError("logits and labels disagree on batch size")
            if self.num_classes is None:
                self.num_classes = self.logits.shape[1]
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")
        self.class_counts = np.bincount(self.labels, minlength=self.num_classes)

    @property
    def n(self) -> int:
        return int(self.labels.size)


@dataclass
class AugmentedBatch:
    """2N unit embeddings plus the partner index of every row."""

    embeddings: np.ndarray
    pair_of: np.ndarray

    def __post_init__(self):
        self.embeddings = as_real(self.embeddings)
        self.pair_of = np.asarray(self.pair_of, dtype=np.int64)
        validate_pairing(self.pair_of, self.embeddings.shape[0])

    @classmethod
    def consecutive(cls, embeddings: np.ndarray) -> "AugmentedBatch":
        """Rows (0,1), (2,3), ... are augmentation partners."""
        n = np.asarray(embeddings).shape[0]
        return cls(embeddings, np.arange(n) ^ 1)


@dataclass
class LossOutput:
    value: float
    grad_embeddings: Optional[np.ndarray] = None
    grad_logits: Optional[np.ndarray] = None
    grad_head: Optional[np.ndarray] = None


def _scalar(x):
    # extended precision survives for the finite-difference oracle
    return x if isinstance(x, np.longdouble) else float(x)


def _check_tau(tau: float) -> None:
    if not (tau > 0 and np.isfinite(tau)):
        raise InvalidTemperature(f"temperature must be positive, got {tau!r}")


def validate_pairing(pair_of: np.ndarray, n: int) -> None:
    pair_of = np.asarray(pair_of)
    if pair_of.shape != (n,) or n < 2:
        raise InvalidPairing("pairing must cover every row of a batch of size >= 2")
    if pair_of.min() < 0 or pair_of.max() >= n:
        raise InvalidPairing("partner index out of range")
    idx = np.arange(n)
    if np.any(pair_of == idx):
        raise InvalidPairing("pairing has a fixed point")
    if np.any(pair_of[pair_of] != idx):
        raise InvalidPairing("pairing is not an involution")


def cross_entropy(batch: LabeledBatch) -> LossOutput:
    logits = batch.logits
    if logits is None:
        raise ValueError("cross_entropy needs logits")
    n = batch.n
    rows = np.arange(n)
    logp = log_softmax(logits, axis=1)
    value = _scalar(-np.sum(logp[rows, batch.labels]) / n)
    grad = softmax(logits, axis=1)
    grad[rows, batch.labels] -= 1.0
    return LossOutput(value=max(value, 0.0), grad_logits=grad / n)


def _contrastive(z: np.ndarray, positives: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Shared core of the supervised and self-supervised contrastive terms.

    ``positives`` is an N x N 0/1 matrix with zero diagonal. Anchors without
    positives contribute nothing. Each anchor's log-ratio is averaged over its
    positives.
    """
    n = z.shape[0]
    if n < 2:
        # a lone row has no positives: the degenerate-anchor rule gives zero
        return z.dtype.type(0.0), np.zeros_like(z)
    sim = (z @ z.T) / tau
    off = ~np.eye(n, dtype=bool)
    masked = np.where(off, sim, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    expd = np.where(off, np.exp(masked - row_max), 0.0)
    denom = expd.sum(axis=1, keepdims=True)
    lse = row_max[:, 0] + np.log(denom[:, 0])
    p = expd / denom

    n_pos = positives.sum(axis=1)
    active = n_pos > 0
    safe = np.where(active, n_pos, 1.0)
    pos_mean = (positives * sim).sum(axis=1) / safe
    value = _scalar(np.sum(np.where(active, lse - pos_mean, 0.0)))

    # d value / d sim_ij for active anchors i
    g = (p - positives / safe[:, None]) * active[:, None]
    grad = (g + g.T) @ z / tau
    return max(value, 0.0), grad


def positive_mask(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    m = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(m, 0.0)
    return m


def scl_loss(batch: LabeledBatch, tau: float) -> LossOutput:
    """Supervised contrastive term, summed over anchors.

    Anchors whose class appears once in the batch contribute exactly zero to
    both the value and the gradient.
    """
    _check_tau(tau)
    if batch.embeddings is None:
        raise ValueError("scl_loss needs embeddings")
    value, grad = _contrastive(batch.embeddings, positive_mask(batch.labels), tau)
    return LossOutput(value=value, grad_embeddings=grad)


def self_supervised_loss(batch: AugmentedBatch, cfg: LossConfig | float) -> LossOutput:
    """Contrast every row against its augmentation partner versus all others."""
    tau = cfg.tau if isinstance(cfg, LossConfig) else float(cfg)
    _check_tau(tau)
    n = batch.embeddings.shape[0]
    pos = np.zeros((n, n), dtype=batch.embeddings.dtype)
    pos[np.arange(n), batch.pair_of] = 1.0
    value, grad = _contrastive(batch.embeddings, pos, tau)
    return LossOutput(value=value, grad_embeddings=grad)


def combined_loss(batch: LabeledBatch, cfg: LossConfig) -> LossOutput:
    ce = cross_entropy(batch)
    scl = scl_loss(batch, cfg.tau)
    lam = cfg.lam
    return LossOutput(
        value=(1.0 - lam) * ce.value + lam * scl.value,
        grad_embeddings=lam * scl.grad_embeddings,
        grad_logits=(1.0 - lam) * ce.grad_logits,
    )


def ce_ce_loss(batch: LabeledBatch, head_weights: np.ndarray, cfg: LossConfig | float) -> LossOutput:
    """Cross-entropy on temperature-scaled logits of the normalized embedding.

    logits' = z W^T / tau with z the unit embedding rows and W the C x d head.
    Gradients are returned for z and for W.
    """
    tau = cfg.tau if isinstance(cfg, LossConfig) else float(cfg)
    _check_tau(tau)
    z = batch.embeddings
    w = as_real(head_weights)
    scaled = LabeledBatch(None, z @ w.T / tau, batch.labels, batch.num_classes)
    ce = cross_entropy(scaled)
    g = ce.grad_logits
    return LossOutput(value=ce.value, grad_embeddings=g @ w / tau, grad_head=g.T @ z / tau,
                      grad_logits=g)


def compute_loss(batch: LabeledBatch, cfg: LossConfig, head_weights: np.ndarray | None = None) -> LossOutput:
    """Dispatch on ``cfg.variant`` for the supervised objectives.

    CE_CE mixes the plain CE on ``batch.logits`` with the normalized,
    temperature-scaled CE using the same lambda weighting as the combined loss.
    """
    v = cfg.variant
    if v is Variant.CE:
        return cross_entropy(batch)
    if v is Variant.SCL:
        return scl_loss(batch, cfg.tau)
    if v is Variant.COMBINED:
        return combined_loss(batch, cfg)
    if v is Variant.CE_CE:
        if head_weights is None:
            raise ValueError("CE_CE needs head weights")
        ce = cross_entropy(batch)
        cc = ce_ce_loss(batch, head_weights, cfg)
        lam = cfg.lam
        return LossOutput(
            value=(1.0 - lam) * ce.value + lam * cc.value,
            grad_embeddings=lam * cc.grad_embeddings,
            grad_logits=(1.0 - lam) * ce.grad_logits,
            grad_head=lam * cc.grad_head,
        )
    raise ValueError(f"{v.value} is not a supervised objective")


# gradient verification ---------------------------------------------------

def _tangent_project(grad: np.ndarray, z: np.ndarray) -> np.ndarray:
    # the radial part can dwarf the tangent part; subtract it in extended precision
    g = grad.astype(np.longdouble)
    u = z.astype(np.longdouble)
    return (g - np.sum(g * u, axis=1, keepdims=True) * u).astype(np.float64)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = analytic.ravel()
    nu = numeric.ravel()
    keep = np.abs(a) > floor
    if not np.any(keep):
        return 0.0
    a, nu = a[keep], nu[keep]
    return float(np.max(np.abs(a - nu) / np.maximum(np.abs(a), np.abs(nu))))


def finite_difference_check(
    loss_fn: Callable[..., LossOutput],
    batch,
    cfg: LossConfig | None = None,
    h: float = 1e-6,
    head_weights: np.ndarray | None = None,
) -> float:
    """Largest elementwise relative error between analytic and central-difference gradients.

    ``loss_fn`` is called as ``loss_fn(batch, cfg)`` (``loss_fn(batch)`` when
    cfg is None, ``loss_fn(batch, head_weights, cfg)`` when head weights are
    given). Embedding rows are points on the unit sphere: each perturbed row is
    re-normalized and the analytic gradient is projected onto the tangent space
    before comparison. Only entries with analytic magnitude above 1e-8 count.

    The analytic gradient comes from the float64 path. The perturbed
    evaluations run in extended precision so that loss roundoff divided by 2h
    does not swamp small gradient entries.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError("step must lie in [1e-7, 1e-4]")
    ext = np.longdouble

    def call(b, w):
        if w is not None:
            return loss_fn(b, w, cfg).value
        return (loss_fn(b, cfg) if cfg is not None else loss_fn(b)).value

    def rebuild(emb=None, logits=None):
        if isinstance(batch, AugmentedBatch):
            return AugmentedBatch(emb, batch.pair_of)
        return LabeledBatch(emb, logits, batch.labels, batch.num_classes)

    if head_weights is not None:
        base = loss_fn(batch, head_weights, cfg)
    else:
        base = loss_fn(batch, cfg) if cfg is not None else loss_fn(batch)

    z = None if batch.embeddings is None else batch.embeddings.astype(ext)
    logits = None if getattr(batch, "logits", None) is None else batch.logits.astype(ext)
    w = None if head_weights is None else np.asarray(head_weights).astype(ext)
    step = ext(h)
    errors = []

    def central(x, bump):
        numeric = np.zeros(x.shape)
        for idx in np.ndindex(x.shape):
            hi, lo = bump(idx, step), bump(idx, -step)
            numeric[idx] = float((hi - lo) / (2 * step))
        return numeric

    if base.grad_embeddings is not None:
        def bump_z(idx, s):
            e = z.copy()
            e[idx] += s
            e[idx[0]] /= np.sqrt(np.sum(e[idx[0]] ** 2))
            return call(rebuild(emb=e, logits=logits), w)

        errors.append(_rel_err(_tangent_project(base.grad_embeddings, batch.embeddings), central(z, bump_z)))

    if base.grad_logits is not None and logits is not None and w is None:
        def bump_logits(idx, s):
            lg = logits.copy()
            lg[idx] += s
            return call(rebuild(emb=z, logits=lg), w)

        errors.append(_rel_err(base.grad_logits, central(logits, bump_logits)))

    if base.grad_head is not None:
        def bump_w(idx, s):
            ww = w.copy()
            ww[idx] += s
            return call(rebuild(emb=z, logits=logits), ww)

        errors.append(_rel_err(base.grad_head, central(w, bump_w)))

    return max(errors) if errors else 0.0
