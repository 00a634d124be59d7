"""Synthetic multi-modal datasets with one planted informative modality.

Classification: every modality has its own class prototypes ``mu_c`` (drawn
with roughly unit norm) and observes ``snr_i * mu_y + N(0, I)``.
Segmentation: each sample has a latent label grid made of two nested discs;
modality i observes ``snr_i`` times the per-class indicator maps plus unit
Gaussian noise in every cell.

On disk a dataset is a directory holding ``manifest.json`` and raw
little-endian payloads: one float64 file per (split, modality), plus int64
labels and sample ids per split. Every payload is covered by a CRC-32.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import Batch

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid dataset specification."""


class IntegrityError(IOError):
    """Payload bytes do not match the manifest checksum."""


class FormatError(IOError):
    """Manifest or payload layout is inconsistent."""


@dataclass(frozen=True)
class SynthSpec:
    n_modalities: int = 4
    n_classes: int = 10
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    input_dim: int = 32
    informative: int = 0
    snr_informative: float = 2.0
    snr_others: float = 0.5
    task: str = "classification"
    grid: tuple = (16, 16)
    prototype_norm: float = 1.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        self.validate()

    def validate(self) -> None:
        if self.n_modalities < 2:
            raise ConfigError("n_modalities must be >= 2")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if not 0 <= self.informative < self.n_modalities:
            raise ConfigError("informative index out of range")
        if min(self.n_train, self.n_val, self.n_test) < 1 or self.input_dim < 1:
            raise ConfigError("split sizes and input_dim must be positive")
        if self.snr_others < 0 or self.snr_informative < self.snr_others:
            raise ConfigError("need snr_informative >= snr_others >= 0")
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "segmentation" and (len(self.grid) != 2 or min(self.grid) < 4):
            raise ConfigError("segmentation grid must be at least 4x4")
        if self.prototype_norm <= 0:
            raise ConfigError("prototype_norm must be positive")

    @property
    def input_dims(self) -> tuple:
        if self.task == "segmentation":
            h, w = self.grid
            d = h * w * (self.n_classes - 1)
        else:
            d = self.input_dim
        return (d,) * self.n_modalities

    @property
    def snr(self) -> np.ndarray:
        s = np.full(self.n_modalities, float(self.snr_others))
        s[self.informative] = self.snr_informative
        return s

    def split_sizes(self) -> dict:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        try:
            return cls(**known)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class Split:
    inputs: list
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx=None, present=None) -> Batch:
        if idx is None:
            idx = np.arange(len(self))
        inputs = [x[idx] for x in self.inputs]
        if present is None:
            present = np.ones((len(idx), len(self.inputs)), dtype=bool)
        return Batch(inputs, present, self.labels[idx])

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Endless stream of shuffled full batches, reshuffled every epoch."""
        n = len(self)
        bs = min(batch_size, n)
        while True:
            order = rng.permutation(n)
            for start in range(0, n - bs + 1, bs):
                yield self.batch(order[start:start + bs])


@dataclass
class Dataset:
    spec: SynthSpec
    splits: dict = field(default_factory=dict)

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def val(self) -> Split:
        return self.splits["val"]

    @property
    def test(self) -> Split:
        return self.splits["test"]


# ---------------------------------------------------------------- generation


def _prototypes(spec: SynthSpec) -> list:
    """One shared class constellation, independently rotated for each modality.

    Rotations keep every modality's Bayes accuracy a function of its snr alone
    (noise is isotropic), while the coordinates seen by each modality differ.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x9E37]))
    d = spec.input_dim
    base = rng.normal(0.0, spec.prototype_norm / np.sqrt(d), size=(spec.n_classes, d))
    out = []
    for _ in range(spec.n_modalities):
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        out.append(base @ (q * np.sign(np.diag(r))))
    return out


def _sample_rng(spec: SynthSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, 1, index]))


def _disc(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def latent_mask(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Nested discs: class k occupies the k-th ring inward (class 0 is background)."""
    h, w = spec.grid
    mask = np.zeros((h, w), dtype=np.int64)
    r = rng.uniform(0.2, 0.4) * min(h, w)
    cy = rng.uniform(r * 0.6, h - 1 - r * 0.6)
    cx = rng.uniform(r * 0.6, w - 1 - r * 0.6)
    for k in range(1, spec.n_classes):
        mask[_disc(h, w, cy, cx, r)] = k
        r *= rng.uniform(0.45, 0.7)
        cy += rng.uniform(-0.3, 0.3) * r
        cx += rng.uniform(-0.3, 0.3) * r
    return mask


def _draw(spec: SynthSpec, index: int, protos) -> tuple:
    rng = _sample_rng(spec, index)
    snr = spec.snr
    if spec.task == "classification":
        y = int(rng.integers(spec.n_classes))
        xs = [snr[i] * protos[i][y] + rng.standard_normal(spec.input_dim)
              for i in range(spec.n_modalities)]
        return xs, y
    mask = latent_mask(spec, rng)
    ind = np.stack([(mask == k) for k in range(1, spec.n_classes)], axis=-1).astype(np.float64)
    xs = [snr[i] * ind.reshape(-1) + rng.standard_normal(ind.size)
          for i in range(spec.n_modalities)]
    return xs, mask


def make_dataset(spec: SynthSpec) -> Dataset:
    """Generate all splits in memory; sample ``l`` always comes from seed (spec.seed, l)."""
    spec.validate()
    protos = _prototypes(spec) if spec.task == "classification" else None
    ds = Dataset(spec)
    offset = 0
    for name, n in spec.split_sizes().items():
        ids = np.arange(offset, offset + n, dtype=np.int64)
        offset += n
        draws = [_draw(spec, int(i), protos) for i in ids]
        inputs = [np.stack([d[0][m] for d in draws]) for m in range(spec.n_modalities)]
        labels = np.asarray([d[1] for d in draws], dtype=np.int64)
        ds.splits[name] = Split(inputs, labels, ids)
    return ds


def _payload(path: Path, arr: np.ndarray, dtype: str) -> dict:
    data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    path.write_bytes(data)
    return {"file": path.name, "shape": list(arr.shape), "dtype": dtype,
            "crc32": zlib.crc32(data)}


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, split in ds.splits.items():
        entry = {
            "modalities": [_payload(out / f"{name}_m{i}.f64", x, "<f8")
                           for i, x in enumerate(split.inputs)],
            "labels": _payload(out / f"{name}_labels.i64", split.labels, "<i8"),
            "ids": _payload(out / f"{name}_ids.i64", split.ids, "<i8"),
        }
        splits[name] = entry
    manifest = {"format": "mckd-dataset", "version": FORMAT_VERSION,
                "spec": ds.spec.to_dict(), "splits": splits}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def generate(spec: SynthSpec, out_dir) -> Path:
    """Generate and write a dataset; returns the manifest path."""
    return save_dataset(make_dataset(spec), out_dir)


def _read_payload(root: Path, entry: dict) -> np.ndarray:
    path = root / entry["file"]
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read {path}: {exc}") from exc
    if zlib.crc32(data) != entry["crc32"]:
        raise IntegrityError(f"checksum mismatch in {path}")
    dtype = np.dtype(entry["dtype"])
    shape = tuple(entry["shape"])
    if len(data) != int(np.prod(shape)) * dtype.itemsize:
        raise FormatError(f"{path}: size does not match shape {shape}")
    native = np.int64 if dtype.kind == "i" else np.float64
    return np.frombuffer(data, dtype=dtype).astype(native).reshape(shape)


def load(manifest_path) -> Dataset:
    """Read a dataset, verifying every checksum before returning anything."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read manifest {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"malformed manifest {path}: {exc}") from exc
    if manifest.get("format") != "mckd-dataset" or manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: not a version-{FORMAT_VERSION} mckd dataset")
    spec = SynthSpec.from_dict(manifest["spec"])
    root = path.parent
    ds = Dataset(spec)
    for name in SPLITS:
        entry = manifest["splits"][name]
        inputs = [_read_payload(root, e) for e in entry["modalities"]]
        labels = _read_payload(root, entry["labels"])
        ids = _read_payload(root, entry["ids"])
        if len(inputs) != spec.n_modalities:
            raise FormatError(f"split {name}: expected {spec.n_modalities} modality files")
        n = spec.split_sizes()[name]
        for i, x in enumerate(inputs):
            if x.shape != (n, spec.input_dims[i]):
                raise FormatError(f"split {name} modality {i}: shape {x.shape}")
        want = (n,) if spec.task == "classification" else (n, *spec.grid)
        if labels.shape != want or ids.shape != (n,):
            raise FormatError(f"split {name}: label/id shape mismatch")
        ds.splits[name] = Split(inputs, labels, ids)
    return ds


# ------------------------------------------------------------- Bayes oracle


def bayes_accuracy(spec: SynthSpec, modality: int, draws: int = 100_000,
                   seed: int = 12345, chunk: int = 20_000) -> float:
    """Monte-Carlo accuracy of the optimal classifier that sees one modality only.

    With equal priors and isotropic unit noise the Bayes rule is the nearest
    scaled prototype; ties (e.g. snr = 0) are broken uniformly at random.
    """
    if spec.task != "classification":
        raise ConfigError("bayes accuracy is defined for classification specs only")
    mu = _prototypes(spec)[modality] * spec.snr[modality]
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        y = rng.integers(spec.n_classes, size=n)
        x = mu[y] + rng.standard_normal((n, spec.input_dim))
        d2 = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(-1)
        d2 = d2 + rng.uniform(0, 1e-9, size=d2.shape) * (np.ptp(d2, axis=1, keepdims=True) == 0)
        hits += int((d2.argmin(axis=1) == y).sum())
        done += n
    return hits / draws


def bayes_gap(spec: SynthSpec, draws: int = 100_000, seed: int = 12345) -> float:
    """Informative-only minus other-only Bayes accuracy (other = first non-planted modality)."""
    other = next(i for i in range(spec.n_modalities) if i != spec.informative)
    return (bayes_accuracy(spec, spec.informative, draws, seed)
            - bayes_accuracy(spec, other, draws, seed + 1))
