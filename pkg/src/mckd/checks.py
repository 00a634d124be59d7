"""Finite-difference checks of every differentiable composite used in training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import IWV, inner_loss, meta_loss
from .model import Batch, ModelConfig, init_params

TOLERANCE = 1e-4
KINK_MARGIN = 1e-3
MAX_RESAMPLES = 50

CHECK_CONFIGS = {
    "classification": ModelConfig(n_modalities=3, input_dims=(4, 3, 5), feature_dim=4,
                                  encoder_hidden=(5,), decoder_hidden=(6,), n_classes=3),
    "segmentation": ModelConfig(n_modalities=2, input_dims=(8, 8), feature_dim=3,
                                encoder_hidden=(4,), decoder_hidden=(5,), head="segmentation",
                                n_classes=2, grid=(2, 2)),
}


@dataclass
class CheckResult:
    name: str
    error: float
    resamples: int

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _problem(cfg: ModelConfig, rng: np.random.Generator, batch_size: int = 3):
    model = init_params(cfg, int(rng.integers(2**31)))
    for p in model.parameters():
        p.data += rng.normal(0.0, 0.1, size=p.shape)  # non-zero biases exercise every path
    inputs = [rng.normal(size=(batch_size, d)) for d in cfg.input_dims]
    present = rng.random((batch_size, cfg.n_modalities)) < 0.7
    present[:, 0] = True
    present[0] = True
    if cfg.head == "segmentation":
        labels = rng.integers(0, cfg.n_classes, size=(batch_size, *cfg.grid))
    else:
        labels = rng.integers(0, cfg.n_classes, size=batch_size)
    iwv = IWV(T.Tensor(rng.normal(0.0, 0.5, size=cfg.n_modalities)))
    return model, Batch(inputs, present, labels), iwv


def _composites(model, batch, iwv):
    w = iwv.normalized
    yield "inner_loss/p1", lambda: inner_loss(model, batch, w, 0.5, 1, "mean").total, model.parameters()
    yield "inner_loss/p2", lambda: inner_loss(model, batch, w, 0.5, 2, "sum").total, model.parameters()
    yield "meta_loss/raw_w", lambda: meta_loss(model, batch, iwv), [iwv.raw]
    yield ("meta_loss/network", lambda: meta_loss(model, batch, iwv, freeze=False),
           model.parameters() + [iwv.raw])


def _min_kink(fn) -> float:
    with T.Tape(track_kinks=True) as tape:
        fn()
    return tape.min_kink


def run_gradchecks(seed: int = 0, heads=("classification", "segmentation")) -> list:
    """Check each composite at a random point away from relu/abs kinks."""
    rng = np.random.default_rng(seed)
    results = []
    for head in heads:
        cfg = CHECK_CONFIGS[head]
        names = [name for name, _, _ in _composites(*_problem(cfg, np.random.default_rng(0)))]
        for idx, name in enumerate(names):
            for attempt in range(MAX_RESAMPLES):
                model, batch, iwv = _problem(cfg, rng)
                _, fn, params = list(_composites(model, batch, iwv))[idx]
                if _min_kink(fn) >= KINK_MARGIN:
                    break
            else:
                raise RuntimeError(f"no kink-free point found for {head}/{name}")
            results.append(CheckResult(f"{head}/{name}", T.grad_check(fn, params), attempt))
    return results


def format_report(results) -> str:
    lines = ["composite,max_rel_error,resamples,status"]
    for r in results:
        lines.append(f"{r.name},{r.error:.3e},{r.resamples},{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
