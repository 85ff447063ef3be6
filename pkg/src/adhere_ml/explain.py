"""Gradient attributions: integrated gradients, expected gradients and summaries.

All attributions explain the model's pre-sigmoid logit over a flat feature
vector (dynamic lags first, t-1 leading, then static features).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import IO, Protocol, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import model as mdl
from .model import Params


class Differentiable(Protocol):
    names: list[str]

    def logit(self, X: np.ndarray) -> np.ndarray: ...

    def grad(self, X: np.ndarray) -> np.ndarray: ...


@dataclass
class LinearLogit:
    w: np.ndarray
    b: float = 0.0
    names: list[str] = field(default_factory=list)

    def logit(self, X):
        return np.asarray(X, dtype=float) @ self.w + self.b

    def grad(self, X):
        return np.broadcast_to(self.w, np.shape(X)).astype(float)


@dataclass
class SumModel:
    """f1 + f2, used to check attribution linearity."""

    first: Differentiable
    second: Differentiable

    @property
    def names(self):
        return self.first.names

    def logit(self, X):
        return self.first.logit(X) + self.second.logit(X)

    def grad(self, X):
        return self.first.grad(X) + self.second.grad(X)


class HybridLogit:
    """Flat-vector view of the hybrid network's logit.

    The flat layout is lag-major with lag t-1 first, the same order as
    :class:`~adhere_ml.features.FeatureNameMap` and ``Design.flat``.
    """

    def __init__(self, params: Params, lags: int, channels: int, names: Sequence[str] | None = None):
        self.params = params
        self.lags = lags
        self.channels = channels
        self.names = list(names) if names is not None else []

    def _split(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n_dyn = self.lags * self.channels
        seq = X[:, :n_dyn].reshape(-1, self.lags, self.channels)[:, ::-1, :]
        return seq, X[:, n_dyn:]

    def logit(self, X):
        seq, static = self._split(X)
        return mdl.logit(self.params, seq, static)

    def grad(self, X):
        seq, static = self._split(X)
        _, dseq, dstatic = mdl.logit_input_gradients(self.params, seq, static)
        n = seq.shape[0]
        return np.hstack([dseq[:, ::-1, :].reshape(n, -1), dstatic])

    def _relu_inputs(self, x, baseline, alphas):
        seq, static = self._split(baseline + alphas[:, None] * (x - baseline))
        _, cache = mdl.forward(self.params, seq, static)
        return np.hstack([cache["s_pre"], cache["q_pre"]])

    def kinks(self, x, baseline, resolution: int = 1024, iters: int = 50) -> np.ndarray:
        """Path positions in (0, 1) where a ReLU input changes sign.

        The gradient jumps at these points, so quadrature that straddles them
        converges only at first order. Crossings are bracketed on a uniform
        grid and refined by bisection; two crossings of one unit inside a
        single grid cell go unnoticed.
        """
        grid = np.linspace(0.0, 1.0, resolution + 1)
        positive = self._relu_inputs(x, baseline, grid) > 0
        cell, unit = np.nonzero(positive[1:] != positive[:-1])
        if cell.size == 0:
            return np.zeros(0)
        lo, hi = grid[cell], grid[cell + 1]
        lo_sign = positive[cell, unit]
        rows = np.arange(cell.size)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            same = (self._relu_inputs(x, baseline, mid)[rows, unit] > 0) == lo_sign
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
        return np.unique(0.5 * (lo + hi))


class LogisticLogit(LinearLogit):
    def __init__(self, params: Params, names: Sequence[str] | None = None):
        super().__init__(np.asarray(params["w"], dtype=float), float(params["b"][0]), list(names or []))


@dataclass
class Attribution:
    values: np.ndarray
    residual: float
    names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def _check(x: np.ndarray, baseline: np.ndarray) -> None:
    if x.shape != baseline.shape:
        raise ValueError(f"baseline shape {baseline.shape} does not match input shape {x.shape}")


def _path_nodes(breaks: np.ndarray, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint nodes and weights on [0, 1], split at ``breaks``.

    Each smooth segment gets a share of ``steps`` proportional to its length
    (at least one node).
    """
    edges = np.concatenate([[0.0], np.sort(breaks), [1.0]])
    alphas, weights = [], []
    for a0, a1 in zip(edges[:-1], edges[1:]):
        width = a1 - a0
        if width <= 0:
            continue
        m = max(1, int(round(steps * width)))
        alphas.append(a0 + (np.arange(m) + 0.5) / m * width)
        weights.append(np.full(m, width / m))
    return np.concatenate(alphas), np.concatenate(weights)


def integrated_gradients(f: Differentiable, x, baseline, steps: int = 64) -> Attribution:
    """Midpoint-rule integrated gradients along the straight baseline-to-x path.

    When ``f`` exposes ``kinks(x, baseline)`` the path is split at those
    points first, so every segment integrates a smooth gradient.
    """
    x = np.asarray(x, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    _check(x, baseline)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    kinks = getattr(f, "kinks", None)
    breaks = kinks(x, baseline) if kinks is not None else np.zeros(0)
    alphas, weights = _path_nodes(breaks, steps)
    path = baseline + alphas[:, None] * (x - baseline)
    values = (x - baseline) * (weights[:, None] * f.grad(path)).sum(axis=0)
    delta = float(f.logit(x[None])[0] - f.logit(baseline[None])[0])
    return Attribution(
        values=values,
        residual=abs(float(values.sum()) - delta),
        names=list(getattr(f, "names", [])),
        meta={"method": "integrated_gradients", "steps": steps, "segments": int(breaks.size + 1)},
    )


def expected_gradients(
    f: Differentiable,
    x,
    background,
    n_baselines: int = 32,
    seed: int = 0,
    noise_sigma: float = 0.0,
) -> Attribution:
    """Integrated gradients averaged over baselines drawn from ``background``.

    Each draw picks a baseline with replacement and a single uniform path
    position. ``noise_sigma > 0`` adds Gaussian noise to the path point
    before taking the gradient.
    """
    x = np.asarray(x, dtype=float)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    _check(x, background[0])
    if n_baselines < 1:
        raise ValueError("n_baselines must be >= 1")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, background.shape[0], size=n_baselines)
    alphas = rng.random(n_baselines)
    base = background[picks]
    points = base + alphas[:, None] * (x - base)
    if noise_sigma > 0:
        points = points + rng.normal(0.0, noise_sigma, size=points.shape)
    contrib = (x - base) * f.grad(points)
    values = contrib.mean(axis=0)
    delta = float(f.logit(x[None])[0] - f.logit(base).mean())
    return Attribution(
        values=values,
        residual=abs(float(values.sum()) - delta),
        names=list(getattr(f, "names", [])),
        meta={
            "method": "expected_gradients",
            "n_baselines": n_baselines,
            "noise_sigma": noise_sigma,
            "seed": seed,
        },
    )


@dataclass
class ImportanceSummary:
    names: list[str]
    mean_signed: np.ndarray
    mean_abs: np.ndarray
    n_samples: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def ranking(self) -> list[str]:
        order = sorted(range(len(self.names)), key=lambda i: (-self.mean_abs[i], self.names[i]))
        return [self.names[i] for i in order]

    def rank_of(self, name: str) -> int:
        return self.ranking.index(name) + 1

    def top(self, k: int = 20) -> list[tuple[str, float, float]]:
        pos = {n: i for i, n in enumerate(self.names)}
        return [(n, float(self.mean_signed[pos[n]]), float(self.mean_abs[pos[n]])) for n in self.ranking[:k]]

    def write_csv(self, out: IO[str]) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["feature", "mean_signed", "mean_abs", "rank"])
        pos = {n: i for i, n in enumerate(self.names)}
        for rank, name in enumerate(self.ranking, start=1):
            i = pos[name]
            w.writerow([name, repr(float(self.mean_signed[i])), repr(float(self.mean_abs[i])), rank])

    def to_dict(self, top_k: int = 20) -> dict:
        return {
            "n_samples": self.n_samples,
            "meta": self.meta,
            "top": [{"feature": n, "mean_signed": s, "mean_abs": a} for n, s, a in self.top(top_k)],
        }

    def write_json(self, out: IO[str], top_k: int = 20) -> None:
        json.dump(self.to_dict(top_k), out, indent=2, sort_keys=True)
        out.write("\n")

    def write_svg(self, out: IO[str], top_k: int = 20) -> None:
        """Horizontal bar chart of mean signed attribution for the top features."""
        rows = self.top(top_k)
        bar_h, label_w, plot_w, pad = 18, 220, 360, 10
        height = pad * 2 + bar_h * len(rows) + 20
        scale = max([abs(s) for _, s, _ in rows] + [1e-12])
        mid = label_w + plot_w / 2
        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{label_w + plot_w + pad}" height="{height}" '
            'font-family="sans-serif" font-size="11">',
            f'<line x1="{mid:.1f}" y1="{pad}" x2="{mid:.1f}" y2="{height - 20}" stroke="#444"/>',
        ]
        for r, (name, signed, _) in enumerate(rows):
            y = pad + r * bar_h
            width = abs(signed) / scale * (plot_w / 2 - 5)
            x = mid if signed >= 0 else mid - width
            color = "#d62728" if signed >= 0 else "#1f77b4"
            parts.append(f'<text x="{label_w - 5}" y="{y + 13}" text-anchor="end">{escape(name)}</text>')
            parts.append(f'<rect x="{x:.2f}" y="{y + 3}" width="{width:.2f}" height="{bar_h - 6}" fill="{color}"/>')
        parts.append(f'<text x="{mid:.1f}" y="{height - 5}" text-anchor="middle">mean attribution (logit)</text>')
        parts.append("</svg>")
        out.write("\n".join(parts) + "\n")


def summarize(attributions: Sequence[Attribution] | np.ndarray, names: Sequence[str] | None = None) -> ImportanceSummary:
    """Mean signed and mean absolute attribution per feature."""
    if isinstance(attributions, np.ndarray):
        A = np.atleast_2d(attributions)
        meta = {}
    else:
        if not attributions:
            raise ValueError("no attributions to summarize")
        A = np.vstack([a.values for a in attributions])
        names = names or attributions[0].names
        meta = dict(attributions[0].meta)
    names = list(names) if names else [f"f{i}" for i in range(A.shape[1])]
    if len(names) != A.shape[1]:
        raise ValueError("feature name count does not match attribution width")
    return ImportanceSummary(names, A.mean(axis=0), np.abs(A).mean(axis=0), A.shape[0], meta)


def explain_samples(
    f: Differentiable,
    X: np.ndarray,
    background: np.ndarray,
    n_baselines: int = 32,
    seed: int = 0,
    noise_sigma: float = 0.0,
) -> list[Attribution]:
    """Expected-gradients attribution for every row of ``X`` (per-row seeds)."""
    seeds = np.random.SeedSequence(seed).generate_state(len(X))
    return [
        expected_gradients(f, x, background, n_baselines, int(s), noise_sigma)
        for x, s in zip(np.asarray(X, dtype=float), seeds)
    ]
