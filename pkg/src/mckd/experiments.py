"""Paired training runs, sweeps and a minimal SVG line chart."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from xml.sax.saxutils import escape

import numpy as np

from .data import Dataset
from .model import ModelConfig
from .trainer import TrainConfig, evaluate, train

DEFAULT_ALPHAS = (0.0, 0.01, 0.1, 0.5, 1.0)
DEFAULT_NORMS = ("softmax", "sigmoid", "relu")


def worker_count(n_jobs: int) -> int:
    """Parallel workers for ``n_jobs``; ``MCKD_THREADS`` caps it (default: CPU count)."""
    cap = os.environ.get("MCKD_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def parallel_map(fn, jobs: list, workers: int | None = None) -> list:
    """Ordered map, in worker processes when more than one worker is allowed."""
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def run_one(job: tuple) -> dict:
    """Train one configuration and score it on the test split.

    ``job`` is ``(dataset, model_config, train_config)``. The planted
    modality's metric is the hardest pattern of the synthetic data.
    """
    dataset, model_config, config = job
    state, rows = train(config, dataset.train, dataset.val, model_config)
    planted = dataset.spec.informative
    result = {
        "alpha": config.alpha,
        "normalization": config.normalization,
        "seed": config.seed,
        "all_present": evaluate(state.model, dataset.test, ()),
        "planted_missing": evaluate(state.model, dataset.test, (planted,)),
        "w": state.iwv.normalized.tolist(),
        "rows": rows,
    }
    if model_config.head == "segmentation":
        result["per_class"] = evaluate(state.model, dataset.test, (planted,), per_class=True).tolist()
    return result


def sweep(dataset: Dataset, model_config: ModelConfig, config: TrainConfig, field: str,
          values, workers: int | None = None) -> list:
    """Train once per value of ``field`` with everything else (seed included) shared."""
    jobs = [(dataset, model_config, replace(config, **{field: v})) for v in values]
    return parallel_map(run_one, jobs, workers)


# ------------------------------------------------------------------ charts


def svg_line_chart(x_labels, series: dict, title: str, x_title: str, y_title: str,
                   width: int = 560, height: int = 360) -> str:
    """Polyline chart with categorical x positions; ``series`` maps name -> y values."""
    left, right, top, bottom = 64, 150, 36, 52
    pw, ph = width - left - right, height - top - bottom
    ys = np.array([v for vals in series.values() for v in vals], dtype=float)
    lo, hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    n = len(x_labels)

    def px(i):
        return left + (pw * i / (n - 1) if n > 1 else pw / 2)

    def py(v):
        return top + ph * (1 - (v - lo) / (hi - lo))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">'
           f'{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i, lab in enumerate(x_labels):
        out.append(f'<text x="{px(i):.1f}" y="{top + ph + 16}" text-anchor="middle">'
                   f'{escape(str(lab))}</text>')
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        out.append(f'<text x="{left - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.3f}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">'
               f'{escape(x_title)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(y_title)}</text>')
    for j, (name, vals) in enumerate(series.items()):
        color = colors[j % len(colors)]
        pts = " ".join(f"{px(i):.1f},{py(v):.1f}" for i, v in enumerate(vals))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}">'
                   f'<title>{escape(name)}</title></polyline>')
        ly = top + 14 * j + 8
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
