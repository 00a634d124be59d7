"""Shared-encoder multi-modal network with mean imputation of missing features.

Each modality passes through its own linear input adapter (so modalities may
have different input widths), then through one trunk whose weights are shared
by every modality. Missing modalities get the per-sample mean of the present
modalities' features, all N feature blocks are concatenated, and an MLP decoder
produces class logits or a per-cell segmentation map.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class InputError(ValueError):
    """Raised for batches the model cannot consume."""


class CheckpointError(IOError):
    """Raised when a checkpoint directory is missing or malformed."""


FEATURE_NORMS = ("layer", "none")
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_modalities: int = 4
    input_dims: tuple = (32, 32, 32, 32)
    feature_dim: int = 32
    encoder_hidden: tuple = (64,)
    decoder_hidden: tuple = (64,)
    head: str = "classification"
    n_classes: int = 10
    grid: tuple = (16, 16)
    feature_norm: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "encoder_hidden", tuple(int(d) for d in self.encoder_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(int(d) for d in self.decoder_hidden))
        object.__setattr__(self, "grid", tuple(int(d) for d in self.grid))
        if self.n_modalities < 2:
            raise ValueError("need at least two modalities")
        if len(self.input_dims) != self.n_modalities:
            raise ValueError("input_dims must list one width per modality")
        if self.head not in ("classification", "segmentation"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.feature_norm not in FEATURE_NORMS:
            raise ValueError(f"feature_norm must be one of {FEATURE_NORMS}")
        if not self.encoder_hidden:
            raise ValueError("encoder_hidden needs at least one layer for the shared trunk")
        dims = (*self.input_dims, self.feature_dim, *self.encoder_hidden, *self.decoder_hidden,
                self.n_classes, *self.grid)
        if any(d <= 0 for d in dims) or self.n_classes < 2:
            raise ValueError("all dimensions must be positive")

    @property
    def out_dim(self) -> int:
        if self.head == "classification":
            return self.n_classes
        h, w = self.grid
        return h * w * self.n_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_dims", "encoder_hidden", "decoder_hidden", "grid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Batch:
    """Per-modality inputs, a presence mask and labels.

    ``inputs[i]`` has shape [B, input_dims[i]]; ``present`` is bool [B, N];
    labels are int class indices [B] or int grids [B, H, W].
    """

    inputs: list
    present: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.present = np.asarray(self.present, dtype=bool)
        if self.present.ndim != 2 or self.present.shape[1] != len(self.inputs):
            raise InputError("present mask must be [B, N] with N == len(inputs)")
        b = self.present.shape[0]
        if any(len(x) != b for x in self.inputs) or len(self.labels) != b:
            raise InputError("inputs, mask and labels disagree on batch size")

    @property
    def size(self) -> int:
        return self.present.shape[0]

    def with_present(self, present: np.ndarray) -> "Batch":
        return Batch(self.inputs, present, self.labels)


@dataclass
class MckdModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @property
    def theta(self) -> list:
        return [p for k, p in self.params.items() if not k.startswith("decoder.")]

    @property
    def zeta(self) -> list:
        return [p for k, p in self.params.items() if k.startswith("decoder.")]

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def frozen(self) -> "MckdModel":
        """Same weights, but no gradient will be recorded for them."""
        return MckdModel(self.config, {k: p.detach() for k, p in self.params.items()})

    def clone(self) -> "MckdModel":
        return MckdModel(
            self.config,
            {k: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=k)
             for k, p in self.params.items()},
        )


def _encoder_widths(config: ModelConfig) -> list:
    return [*config.encoder_hidden, config.feature_dim]


def init_params(config: ModelConfig, seed: int) -> MckdModel:
    """Kaiming-uniform (fan-in) weights and zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict = {}

    def layer(prefix: str, fan_in: int, fan_out: int) -> None:
        bound = np.sqrt(6.0 / fan_in)
        params[f"{prefix}.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True,
            name=f"{prefix}.weight")
        params[f"{prefix}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True,
                                          name=f"{prefix}.bias")

    widths = _encoder_widths(config)
    for i, d in enumerate(config.input_dims):
        layer(f"adapter.{i}", d, widths[0])
    for k in range(len(widths) - 1):
        layer(f"encoder.{k}", widths[k], widths[k + 1])
    dec = [config.n_modalities * config.feature_dim, *config.decoder_hidden, config.out_dim]
    for k in range(len(dec) - 1):
        layer(f"decoder.{k}", dec[k], dec[k + 1])
    return MckdModel(config, params)


def _linear(x, params: dict, prefix: str) -> Tensor:
    return T.matmul(x, params[f"{prefix}.weight"]) + params[f"{prefix}.bias"]


def encode_raw(model: MckdModel, inputs: Sequence[np.ndarray]) -> Tensor:
    """Shared-encoder features for every modality slot, [B, N, d], no imputation."""
    cfg = model.config
    p = model.params
    if len(inputs) != cfg.n_modalities:
        raise InputError(f"expected {cfg.n_modalities} modalities, got {len(inputs)}")
    b = len(inputs[0])
    hidden = []
    for i, x in enumerate(inputs):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.input_dims[i]:
            raise InputError(f"modality {i}: expected [B, {cfg.input_dims[i]}], got {x.shape}")
        hidden.append(T.relu(_linear(x, p, f"adapter.{i}")))
    h = T.concat(hidden, axis=0)
    n_layers = len(_encoder_widths(cfg)) - 1
    for k in range(n_layers):
        h = _linear(h, p, f"encoder.{k}")
        if k < n_layers - 1:
            h = T.relu(h)
    if cfg.feature_norm == "layer":
        h = standardize(h)
    h = T.reshape(h, (cfg.n_modalities, b, cfg.feature_dim))
    return T.transpose(h, (1, 0, 2))


def standardize(h: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Zero-mean, unit-variance rows (layer norm without affine parameters).

    Pins the feature scale, so distances between modality features cannot be
    shrunk by rescaling the trunk output and undoing it in the decoder.
    """
    d = h.shape[-1]
    mu = T.reshape(T.sum_(h, axis=-1) * (1.0 / d), (h.shape[0], 1))
    c = h - mu
    var = T.reshape(T.sum_(c * c, axis=-1) * (1.0 / d), (h.shape[0], 1))
    return c / T.sqrt(var + eps)


def impute(features: Tensor, present: np.ndarray) -> Tensor:
    """Replace absent slots by the mean of the sample's present features."""
    present = np.asarray(present, dtype=bool)
    counts = present.sum(axis=1)
    if np.any(counts == 0):
        raise InputError("every sample needs at least one present modality")
    if present.all():
        return features
    m = present.astype(np.float64)[:, :, None]
    avg = T.sum_(features * m, axis=1) / counts.astype(np.float64)[:, None]
    b, n, d = features.shape
    return features * m + T.reshape(avg, (b, 1, d)) * (1.0 - m)


def encode(model: MckdModel, batch: Batch) -> tuple:
    """Encode every modality and impute the missing ones.

    Returns ``(features [B, N, d], imputed [B, N] bool)``.
    """
    if np.any(batch.present.sum(axis=1) == 0):
        raise InputError("every sample needs at least one present modality")
    feats = encode_raw(model, batch.inputs)
    return impute(feats, batch.present), ~batch.present


def decode(model: MckdModel, features: Tensor) -> Tensor:
    cfg = model.config
    if features.ndim != 3 or features.shape[1:] != (cfg.n_modalities, cfg.feature_dim):
        raise InputError(
            f"features must be [B, {cfg.n_modalities}, {cfg.feature_dim}], got {features.shape}")
    b = features.shape[0]
    h = T.reshape(features, (b, cfg.n_modalities * cfg.feature_dim))
    n_layers = len(cfg.decoder_hidden) + 1
    for k in range(n_layers):
        h = _linear(h, model.params, f"decoder.{k}")
        if k < n_layers - 1:
            h = T.relu(h)
    if cfg.head == "segmentation":
        gh, gw = cfg.grid
        h = T.reshape(h, (b, gh, gw, cfg.n_classes))
    return h


def decode_scaled(model: MckdModel, features: Tensor, w_norm) -> Tensor:
    """Decode after multiplying modality block i by ``w_norm[i]``."""
    w_norm = T.as_tensor(w_norm)
    n = model.config.n_modalities
    if w_norm.shape != (n,):
        raise InputError(f"weight vector must have length {n}, got shape {w_norm.shape}")
    return decode(model, features * T.reshape(w_norm, (1, n, 1)))


def forward(model: MckdModel, batch: Batch) -> Tensor:
    feats, _ = encode(model, batch)
    return decode(model, feats)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: MckdModel, extra_arrays: dict | None = None,
                    meta: dict | None = None) -> None:
    """Write ``manifest.json`` plus one little-endian float64 file per array."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {k: p.data for k, p in model.params.items()}
    arrays.update(extra_arrays or {})
    entries = []
    for name, arr in arrays.items():
        fname = f"{name}.f64"
        np.ascontiguousarray(arr, dtype="<f8").tofile(path / fname)
        entries.append({"name": name, "file": fname, "shape": list(np.shape(arr))})
    manifest = {
        "format": "mckd-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "arrays": entries,
        **(meta or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple:
    """Return ``(model, extra_arrays, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        config = ModelConfig.from_dict(manifest["config"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    expected = init_params(config, 0).params
    params, extra = {}, {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        try:
            raw = np.fromfile(path / entry["file"], dtype="<f8")
        except OSError as exc:
            raise CheckpointError(str(exc)) from exc
        if raw.size != int(np.prod(shape)):
            raise CheckpointError(f"{entry['file']}: expected {np.prod(shape)} values, got {raw.size}")
        arr = raw.astype(np.float64).reshape(shape)
        name = entry["name"]
        if name in expected:
            if expected[name].shape != shape:
                raise CheckpointError(f"{name}: shape {shape} does not match config")
            params[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            extra[name] = arr
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)}")
    ordered = {k: params[k] for k in expected}
    return MckdModel(config, ordered), extra, manifest
