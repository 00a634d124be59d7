"""Task losses, the presence-gated cross-modal distillation loss and the IWV.

The importance weight vector (IWV) is kept as raw logits; the normalized view
is recomputed from them at every use so repeated normalization never
compounds. Pairwise distillation terms are weighted by ratios of normalized
weights, ``w_i / w_j``, summed over ordered pairs ``i != j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import Batch, MckdModel, decode, decode_scaled, encode
from .tensor import Tensor

DICE_EPS = 1e-5
RELU_NORM_EPS = 1e-3
NORMALIZATIONS = ("softmax", "sigmoid", "relu")


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "iu":
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integer class indices")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    return np.eye(n_classes)[labels]


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood over all leading (batch / cell) positions."""
    logits = T.as_tensor(logits)
    onehot = _one_hot(labels, logits.shape[-1])
    if onehot.shape != logits.shape:
        raise T.DimensionError(f"labels {np.shape(labels)} do not match logits {logits.shape}")
    nll = -T.sum_(T.log_softmax(logits, axis=-1) * onehot, axis=-1)
    return T.mean(nll)


def soft_dice(probs, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Per-class soft Dice coefficients pooled over every non-class axis."""
    probs = T.as_tensor(probs)
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise T.DimensionError(f"prediction {probs.shape} vs target {target.shape}")
    axes = tuple(range(probs.ndim - 1))
    inter = T.sum_(probs * target, axis=axes)
    denom = T.sum_(probs, axis=axes) + target.sum(axis=axes)
    return (2.0 * inter + eps) / (denom + eps)


def dice_loss(logits, masks, eps: float = DICE_EPS) -> Tensor:
    logits = T.as_tensor(logits)
    target = _one_hot(masks, logits.shape[-1])
    if target.shape != logits.shape:
        raise T.DimensionError(f"masks {np.shape(masks)} do not match logits {logits.shape}")
    coef = soft_dice(T.softmax(logits, axis=-1), target, eps)
    return 1.0 - T.mean(coef)


def task_loss(model: MckdModel, logits: Tensor, labels) -> Tensor:
    """Cross-entropy, plus soft Dice for the segmentation head."""
    ce = cross_entropy(logits, labels)
    if model.config.head == "segmentation":
        return ce + dice_loss(logits, labels)
    return ce


REDUCTIONS = ("sum", "mean")


def _pnorm(diff: Tensor, p: int, reduction: str = "sum") -> Tensor:
    """Per-sample p-norm over the last axis; ``mean`` divides by the feature width."""
    if reduction not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}; choose from {REDUCTIONS}")
    if p == 1:
        out = T.sum_(T.abs_(diff), axis=-1)
    elif p == 2:
        out = T.sqrt(T.sum_(diff * diff, axis=-1))
    else:
        raise ValueError(f"unsupported p-norm {p!r}; use 1 or 2")
    return out * (1.0 / diff.shape[-1]) if reduction == "mean" else out


def ckd_pair(f_i, f_j, present_i, present_j, p: int = 1, reduction: str = "sum") -> Tensor:
    """Batch mean of present_i * present_j * ||f_i - f_j||_p, norms taken per sample."""
    f_i, f_j = T.as_tensor(f_i), T.as_tensor(f_j)
    if f_i.shape != f_j.shape:
        raise T.DimensionError(f"feature shapes differ: {f_i.shape} vs {f_j.shape}")
    gate = (np.asarray(present_i, dtype=bool) & np.asarray(present_j, dtype=bool)).astype(float)
    norms = _pnorm(f_i - f_j, p, reduction)
    return T.mean(norms * gate)


def ratio_matrix(w_norm) -> np.ndarray:
    w = np.asarray(w_norm, dtype=np.float64)
    return w[:, None] / w[None, :]


def ckd_total(features: Tensor, present: np.ndarray, w_norm, alpha: float, p: int = 1,
              reduction: str = "sum"):
    """alpha * sum_{i != j} (w_i / w_j) * ckd_pair(i, j).

    ``w_norm`` is treated as a constant. Returns ``(loss, pair_terms)`` where
    ``pair_terms`` is the symmetric N x N matrix of unweighted pair losses.
    """
    if p not in (1, 2):
        raise ValueError(f"unsupported p-norm {p!r}; use 1 or 2")
    n = features.shape[1]
    present = np.asarray(present, dtype=bool)
    ii, jj = np.triu_indices(n, k=1)
    diff = T.take(features, ii, axis=1) - T.take(features, jj, axis=1)
    gate = (present[:, ii] & present[:, jj]).astype(np.float64)
    pair = T.mean(_pnorm(diff, p, reduction) * gate, axis=0)
    r = ratio_matrix(w_norm)
    coef = r[ii, jj] + r[jj, ii]
    loss = float(alpha) * T.sum_(pair * coef)
    terms = np.zeros((n, n))
    terms[ii, jj] = pair.data
    terms[jj, ii] = pair.data
    return loss, terms


def normalize(raw, kind: str = "softmax") -> Tensor:
    """Map raw IWV logits to the weights used for ratios and feature scaling."""
    raw = T.as_tensor(raw)
    if kind == "softmax":
        return T.softmax(raw)
    if kind == "sigmoid":
        return T.sigmoid(raw)
    if kind == "relu":
        pos = T.relu(raw) + RELU_NORM_EPS
        return pos / T.sum_(pos)
    raise ValueError(f"unknown normalization {kind!r}; choose from {NORMALIZATIONS}")


@dataclass
class IWV:
    """Raw importance logits plus their cached normalized view."""

    raw: Tensor
    kind: str = "softmax"
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.kind not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.kind!r}")
        self.raw.requires_grad = True
        self.refresh()

    @classmethod
    def init(cls, n: int, rng: np.random.Generator, kind: str = "softmax",
             scale: float = 0.01) -> "IWV":
        return cls(Tensor(rng.normal(0.0, scale, size=n), requires_grad=True, name="iwv"), kind)

    def refresh(self) -> np.ndarray:
        self.normalized = normalize(self.raw.detach(), self.kind).data.copy()
        return self.normalized

    def __len__(self) -> int:
        return self.raw.shape[0]


@dataclass
class LossBreakdown:
    task: Tensor
    ckd: Tensor
    total: Tensor
    pair_terms: np.ndarray
    alpha: float

    def weighted_pairs(self, w_norm) -> float:
        r = ratio_matrix(w_norm)
        np.fill_diagonal(r, 0.0)
        return float((r * self.pair_terms).sum())


def inner_loss(model: MckdModel, batch: Batch, w_norm, alpha: float, p: int = 1,
               reduction: str = "sum") -> LossBreakdown:
    """Task loss on all N (imputed) blocks plus weighted CKD over present pairs."""
    w_norm = np.asarray(getattr(w_norm, "normalized", w_norm), dtype=np.float64)
    feats, _ = encode(model, batch)
    logits = decode(model, feats)
    task = task_loss(model, logits, batch.labels)
    ckd, terms = ckd_total(feats, batch.present, w_norm, alpha, p, reduction)
    return LossBreakdown(task=task, ckd=ckd, total=task + ckd, pair_terms=terms, alpha=float(alpha))


def meta_loss(model: MckdModel, batch: Batch, iwv: IWV, alpha: float | None = None,
              freeze: bool = True) -> Tensor:
    """Validation loss of the decoder fed with IWV-scaled features.

    With ``freeze`` (the training setting) model weights are constants and
    only ``iwv.raw`` is on the gradient path. ``freeze=False`` keeps the
    network differentiable, which the gradient checker uses to validate the
    same expression with respect to every input. ``alpha`` is unused.
    """
    del alpha
    net = model.frozen() if freeze else model
    feats, _ = encode(net, batch)
    w = normalize(iwv.raw, iwv.kind)
    logits = decode_scaled(net, feats.detach() if freeze else feats, w)
    return task_loss(model, logits, batch.labels)
