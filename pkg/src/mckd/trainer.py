"""Alternating meta-update of the IWV and inner training of the network.

Each meta cycle runs one Adam step on the raw IWV against the validation
loss of IWV-scaled features (network frozen), then ``inner_iters`` SGD steps
with Nesterov momentum on task + weighted CKD loss (IWV frozen). The network
learning rate follows a cosine schedule over ``total_iters`` inner steps.
Modality dropout removes 0..dropout_max modalities per sample in both loops.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, Split
from .losses import DICE_EPS, IWV, NORMALIZATIONS, REDUCTIONS, inner_loss, meta_loss
from .model import Batch, MckdModel, ModelConfig, decode, encode, encode_raw, init_params
from .optim import SGD, Adam, clip_grad_norm, cosine_lr
from .tensor import Tape

log = logging.getLogger(__name__)

CLIP_NORM = 10.0


class NumericalAbort(RuntimeError):
    """Raised when a loss or gradient stops being finite."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    alpha: float = 0.1
    p: int = 1
    ckd_reduction: str = "mean"
    inner_iters: int = 100
    total_iters: int = 2000
    batch_size: int = 64
    lr_model: float = 1e-2
    nesterov_momentum: float = 0.99
    cosine_anneal: bool = True
    lr_iwv: float = 1e-2
    wd_iwv: float = 5e-5
    dropout_max: int | None = None
    dropout_val: bool = True
    normalization: str = "softmax"
    iwv_init: tuple | None = None
    probe_modality: int = 0
    probe_size: int = 256
    seed: int = 0

    def validate(self, n_modalities: int) -> None:
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")
        if self.ckd_reduction not in REDUCTIONS:
            raise ValueError(f"ckd_reduction must be one of {REDUCTIONS}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name in ("inner_iters", "batch_size", "lr_model", "lr_iwv"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.total_iters < 0 or self.wd_iwv < 0 or not 0 <= self.nesterov_momentum < 1:
            raise ValueError("invalid total_iters / wd_iwv / momentum")
        if not 0 <= self.dropout_max_for(n_modalities) <= n_modalities - 1:
            raise ValueError(f"dropout_max must lie in [0, {n_modalities - 1}]")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.iwv_init is not None and len(self.iwv_init) != n_modalities:
            raise ValueError("iwv_init length must equal the number of modalities")
        if not 0 <= self.probe_modality < n_modalities:
            raise ValueError("probe_modality out of range")

    def dropout_max_for(self, n_modalities: int) -> int:
        return n_modalities - 1 if self.dropout_max is None else int(self.dropout_max)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["iwv_init"] is not None:
            d["iwv_init"] = list(d["iwv_init"])
        return d


@dataclass
class TrainState:
    model: MckdModel
    iwv: IWV
    sgd: SGD
    adam: Adam
    config: TrainConfig
    iteration: int = 0
    history: list = field(default_factory=list)


def metrics_header(n_modalities: int) -> list:
    return (["iter", "task_loss", "ckd_loss", "meta_loss", "val_metric"]
            + [f"w_{i + 1}" for i in range(n_modalities)] + ["impute_l1", "impute_cos"])


def format_row(row: dict, header: list) -> str:
    return ",".join(str(row[k]) if k == "iter" else repr(float(row[k])) for k in header)


# ----------------------------------------------------------- modality dropout


def drop_modalities(batch: Batch, rng: np.random.Generator, dropout_max: int) -> Batch:
    """Mark k ~ U{0..dropout_max} random modalities absent in every sample."""
    b, n = batch.present.shape
    dropout_max = min(int(dropout_max), n - 1)
    if dropout_max <= 0:
        return batch
    k = rng.integers(0, dropout_max + 1, size=b)
    ranks = np.argsort(rng.random((b, n)), axis=1).argsort(axis=1)
    present = batch.present & ~(ranks < k[:, None])
    return batch.with_present(present)


# ----------------------------------------------------------------- the loops


def init_state(config: TrainConfig, model_config: ModelConfig) -> TrainState:
    config.validate(model_config.n_modalities)
    seeds = np.random.SeedSequence(config.seed).generate_state(2)
    model = init_params(model_config, int(seeds[0]))
    if config.iwv_init is not None:
        from .tensor import Tensor
        iwv = IWV(Tensor(np.array(config.iwv_init, dtype=float), requires_grad=True, name="iwv"),
                  config.normalization)
    else:
        iwv = IWV.init(model_config.n_modalities, np.random.default_rng(int(seeds[1])),
                       config.normalization)
    sgd = SGD(model.parameters(), lr=config.lr_model, momentum=config.nesterov_momentum,
              nesterov=config.nesterov_momentum > 0)
    adam = Adam([iwv.raw], lr=config.lr_iwv, weight_decay=config.wd_iwv)
    return TrainState(model, iwv, sgd, adam, config)


def _finite_or_abort(value: float, what: str, state: TrainState, extra: dict | None = None):
    if not math.isfinite(value):
        diag = {"what": what, "iteration": state.iteration,
                "iwv_raw": state.iwv.raw.data.tolist(),
                "param_norms": {k: float(np.linalg.norm(p.data))
                                for k, p in state.model.params.items()},
                **(extra or {})}
        raise NumericalAbort(f"non-finite {what} at iteration {state.iteration}", diag)


def learning_rate(state: TrainState) -> float:
    cfg = state.config
    if not cfg.cosine_anneal:
        return cfg.lr_model
    return cosine_lr(cfg.lr_model, state.iteration, cfg.total_iters)


def inner_step(state: TrainState, batch: Batch):
    """One SGD step on task + CKD loss; returns the LossBreakdown."""
    cfg = state.config
    model = state.model
    model.zero_grad()
    with Tape() as tape:
        lb = inner_loss(model, batch, state.iwv.normalized, cfg.alpha, cfg.p, cfg.ckd_reduction)
        _finite_or_abort(lb.total.item(), "inner loss", state)
        tape.backward(lb.total)
    norm = clip_grad_norm(model.parameters(), CLIP_NORM)
    _finite_or_abort(norm, "inner gradient", state)
    state.sgd.step(learning_rate(state))
    state.iteration += 1
    return lb


def meta_step(state: TrainState, batch: Batch) -> float:
    """One Adam step on the raw IWV with the network frozen; returns the meta loss."""
    iwv = state.iwv
    iwv.raw.grad = None
    with Tape() as tape:
        loss = meta_loss(state.model, batch, iwv)
        value = loss.item()
        _finite_or_abort(value, "meta loss", state)
        tape.backward(loss)
    norm = clip_grad_norm([iwv.raw], CLIP_NORM)
    _finite_or_abort(norm, "meta gradient", state)
    state.adam.step()
    iwv.refresh()
    return value


def train(config: TrainConfig, dataset_train: Split, dataset_val: Split,
          model_config: ModelConfig, on_row=None):
    """Run meta cycles until ``total_iters`` inner steps have been taken.

    ``on_row`` (if given) is called with every metrics row as soon as it
    exists, so callers can persist progress before a later abort.
    Returns ``(state, rows)``.
    """
    state = init_state(config, model_config)
    n = model_config.n_modalities
    if config.total_iters == 0:
        return state, state.history
    if set(dataset_train.ids.tolist()) & set(dataset_val.ids.tolist()):
        raise ValueError("training and validation splits overlap")
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_train = np.random.default_rng(seeds[2])
    rng_val = np.random.default_rng(seeds[3])
    train_stream = dataset_train.batches(config.batch_size, rng_train)
    val_stream = dataset_val.batches(config.batch_size, rng_val)
    dmax = config.dropout_max_for(n)
    probe_batch = dataset_val.batch(np.arange(min(config.probe_size, len(dataset_val))))

    while state.iteration < config.total_iters:
        vb = next(val_stream)
        if config.dropout_val:
            vb = drop_modalities(vb, rng_val, dmax)
        m_loss = meta_step(state, vb)
        task_sum = ckd_sum = 0.0
        steps = 0
        for batch in itertools.islice(train_stream, min(config.inner_iters,
                                                        config.total_iters - state.iteration)):
            lb = inner_step(state, drop_modalities(batch, rng_train, dmax))
            task_sum += lb.task.item()
            ckd_sum += lb.ckd.item()
            steps += 1
        l1, cos = probe_imputation(state.model, probe_batch, config.probe_modality)
        row = {"iter": state.iteration, "task_loss": task_sum / steps,
               "ckd_loss": ckd_sum / steps, "meta_loss": m_loss,
               "val_metric": evaluate(state.model, dataset_val, ()),
               "impute_l1": l1, "impute_cos": cos}
        for i, w in enumerate(state.iwv.normalized):
            row[f"w_{i + 1}"] = float(w)
        state.history.append(row)
        log.debug("iter %d task %.4f ckd %.4f w %s", state.iteration, row["task_loss"],
                  row["ckd_loss"], np.round(state.iwv.normalized, 3))
        if on_row is not None:
            on_row(row)
    return state, state.history


# ---------------------------------------------------------------- evaluation


def predict(model: MckdModel, split: Split, present_row: np.ndarray, chunk: int = 512):
    n = len(split)
    out = []
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        present = np.broadcast_to(present_row, (len(idx), len(present_row)))
        feats, _ = encode(model, split.batch(idx, present))
        out.append(decode(model, feats).data.argmax(axis=-1))
    return np.concatenate(out)


def dice_scores(pred: np.ndarray, target: np.ndarray, n_classes: int,
                eps: float = DICE_EPS) -> np.ndarray:
    """Per-class hard Dice pooled over the whole split."""
    scores = np.empty(n_classes)
    for c in range(n_classes):
        p = pred == c
        g = target == c
        scores[c] = (2.0 * np.sum(p & g) + eps) / (p.sum() + g.sum() + eps)
    return scores


def evaluate(model: MckdModel, dataset: Split, missing_pattern=(), per_class: bool = False):
    """Accuracy (classification) or mean foreground Dice (segmentation).

    ``missing_pattern`` lists modality indices removed from every sample.
    Class 0 is background and is left out of the segmentation mean;
    ``per_class`` returns the Dice of every class including background.
    """
    n = model.config.n_modalities
    missing = sorted(set(int(i) for i in missing_pattern))
    if any(i < 0 or i >= n for i in missing):
        raise ValueError(f"missing pattern {missing} out of range for {n} modalities")
    if len(missing) == n:
        raise ValueError("cannot evaluate with every modality missing")
    present = np.ones(n, dtype=bool)
    present[missing] = False
    pred = predict(model, dataset, present)
    if model.config.head == "classification":
        return float(np.mean(pred == dataset.labels))
    scores = dice_scores(pred, dataset.labels, model.config.n_classes)
    return scores if per_class else float(scores[1:].mean())


def all_patterns(n: int) -> list:
    """Every missing-modality pattern that leaves at least one modality, as sorted tuples."""
    pats = []
    for k in range(n):
        pats.extend(itertools.combinations(range(n), k))
    return pats


def evaluate_patterns(model: MckdModel, dataset: Split, patterns=None) -> list:
    patterns = all_patterns(model.config.n_modalities) if patterns is None else patterns
    return [(tuple(p), evaluate(model, dataset, p)) for p in patterns]


def feature_distance(a: np.ndarray, b: np.ndarray) -> tuple:
    """Mean per-sample L1 distance and cosine similarity between rows of a and b."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    l1 = np.abs(a - b).sum(axis=1)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    cos = np.where(denom > 0, (a * b).sum(axis=1) / np.where(denom > 0, denom, 1.0),
                   np.where((na == 0) & (nb == 0), 1.0, 0.0))
    return float(l1.mean()), float(cos.mean())


def probe_imputation(model: MckdModel, batch_full: Batch, target_modality: int) -> tuple:
    """Distance between the imputed and the real feature of ``target_modality``."""
    real = encode_raw(model, batch_full.inputs).data[:, target_modality]
    present = np.ones_like(batch_full.present)
    present[:, target_modality] = False
    feats, _ = encode(model, batch_full.with_present(present))
    return feature_distance(feats.data[:, target_modality], real)


def model_config_for(dataset: Dataset, feature_dim: int = 32, encoder_hidden=(64,),
                     decoder_hidden=(64,)) -> ModelConfig:
    spec = dataset.spec
    return ModelConfig(n_modalities=spec.n_modalities, input_dims=spec.input_dims,
                       feature_dim=feature_dim, encoder_hidden=tuple(encoder_hidden),
                       decoder_hidden=tuple(decoder_hidden), head=spec.task,
                       n_classes=spec.n_classes, grid=spec.grid)
