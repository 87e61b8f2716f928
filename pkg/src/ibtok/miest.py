"""Dependence estimators and exact oracles.

All quantities are in nats.  ``infonce`` is differentiable through the
graph builder :func:`infonce_node`; the discrete quantities are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .autodiff import Graph, evaluate

MIN_MIXTURE_SAMPLES = 10_000


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint probability table ``p(x, y)``; rows index X, columns index Y."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.size == 0:
            raise ValueError("joint table must be a non-empty matrix")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValueError("joint table entries must be finite and non-negative")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ValueError(f"joint table sums to {t.sum()!r}, not 1")
        object.__setattr__(self, "table", t)

    @classmethod
    def normalized(cls, weights) -> "DiscreteJoint":
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum())

    @property
    def px(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def py(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def transpose(self) -> "DiscreteJoint":
        return DiscreteJoint(self.table.T.copy())


@dataclass(frozen=True)
class MixtureChannel:
    """Input ``i`` drawn with ``weights[i]`` and mapped to ``N(means[i], exp(log_scales[i])^2)``."""

    weights: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        ls = np.asarray(self.log_scales, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if ls.ndim == 1:
            ls = ls[:, None]
        if w.ndim != 1 or mu.shape != ls.shape or mu.shape[0] != w.size:
            raise ValueError("weights, means and log_scales disagree in shape")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(ls))):
            raise ValueError("mixture means and scales must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "log_scales", ls)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_density(self, z: np.ndarray) -> np.ndarray:
        """``log q_j(z_n)`` for all samples ``n`` and components ``j``: shape (n, J)."""
        s = np.exp(self.log_scales)
        u = (z[:, None, :] - self.means[None]) / s[None]
        return np.sum(-0.5 * u * u - self.log_scales[None] - 0.5 * math.log(2 * math.pi), axis=2)


@dataclass(frozen=True)
class EmbeddingBatch:
    """Row-paired visual anchors and text embeddings; row ``i`` pairs with row ``i``."""

    visual: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.visual, dtype=np.float64))
        t = np.atleast_2d(np.asarray(self.text, dtype=np.float64))
        if v.shape != t.shape:
            raise ValueError(f"visual {v.shape} and text {t.shape} must share shape")
        if np.any(np.linalg.norm(v, axis=1) == 0) or np.any(np.linalg.norm(t, axis=1) == 0):
            raise ValueError("zero-norm row: cosine similarity undefined")
        object.__setattr__(self, "visual", v)
        object.__setattr__(self, "text", t)

    @property
    def size(self) -> int:
        return self.visual.shape[0]


# -- InfoNCE ---------------------------------------------------------------


def infonce_node(g: Graph, visual: int, text: int, tau: float) -> int:
    """Mean over anchors of ``s_ii/tau - logsumexp_k s_ik/tau`` with cosine scores."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    k = g.shape(visual)[0]
    scores = g.scale(g.cosine(visual, text), 1.0 / tau)
    positive = g.sum(g.mul(scores, g.const(np.eye(k))), axis=1)
    return g.mean(g.sub(positive, g.logsumexp(scores, axis=1)))


def infonce(batch: EmbeddingBatch, tau: float) -> float:
    """InfoNCE value (always <= 0); ``value + log K`` is the MI lower-bound estimate."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    value, _ = evaluate(lambda g: infonce_node(g, *g.inputs, tau), batch.visual, batch.text)
    return value


def infonce_mi(batch: EmbeddingBatch, tau: float) -> float:
    return infonce(batch, tau) + math.log(batch.size)


# -- exact discrete quantities -------------------------------------------


def discrete_entropy(dist) -> float:
    p = np.asarray(dist, dtype=np.float64).ravel()
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError("not a probability vector")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def discrete_mi(joint: DiscreteJoint) -> float:
    t = joint.table
    # marginal logs taken separately: px * py can underflow for tiny cells
    i, j = np.nonzero(t > 0)
    p = t[i, j]
    terms = p * (np.log(p) - np.log(joint.px[i]) - np.log(joint.py[j]))
    return max(float(np.sum(terms)), 0.0)


def pushforward_joint(joint: DiscreteJoint, f: Sequence[int], n_out: int | None = None) -> DiscreteJoint:
    """Joint of ``(f(X), Y)`` obtained by summing rows of X that share an image."""
    f = np.asarray(f)
    rows = joint.table.shape[0]
    if f.shape != (rows,) or not np.issubdtype(f.dtype, np.integer):
        raise ValueError(f"map must list one integer image per row ({rows} rows)")
    n_out = int(f.max()) + 1 if n_out is None else n_out
    if np.any(f < 0) or np.any(f >= n_out):
        raise ValueError(f"map values outside [0, {n_out})")
    out = np.zeros((n_out, joint.table.shape[1]))
    np.add.at(out, f, joint.table)
    return DiscreteJoint(out / out.sum())


def pushforward_mi(joint: DiscreteJoint, f: Sequence[int], n_out: int | None = None) -> float:
    """``I(f(X); Y)`` exactly."""
    return discrete_mi(pushforward_joint(joint, f, n_out))


# -- Monte-Carlo channel information -------------------------------------


def mixture_channel_mi(channel: MixtureChannel, n: int, seed: int = 0) -> tuple[float, float]:
    """Estimate ``I(Z; input) = E[log q(z|i) - log m(z)]`` and its standard error.

    ``m`` is the exact mixture marginal, so the only error is Monte-Carlo.
    """
    if n < MIN_MIXTURE_SAMPLES:
        raise ValueError(f"n must be at least {MIN_MIXTURE_SAMPLES}")
    rng = np.random.default_rng(seed)
    comp = rng.choice(channel.weights.size, size=n, p=channel.weights)
    eps = rng.standard_normal((n, channel.dim))
    z = channel.means[comp] + np.exp(channel.log_scales[comp]) * eps
    logq = channel.log_density(z)
    with np.errstate(divide="ignore"):
        log_w = np.log(channel.weights)
    log_m = logsumexp(logq + log_w[None], axis=1)
    r = logq[np.arange(n), comp] - log_m
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(n))


# -- CKA -------------------------------------------------------------------


def linear_cka(x, y) -> float:
    """Linear centered kernel alignment between two row-paired representations."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValueError("representations must have the same number of rows")
    if x.shape[0] < 3:
        raise ValueError("linear CKA needs at least 3 rows")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("representations must be finite")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    den_x = np.linalg.norm(xc.T @ xc)
    den_y = np.linalg.norm(yc.T @ yc)
    if den_x == 0 or den_y == 0:
        return 0.0
    return float(np.linalg.norm(xc.T @ yc) ** 2 / (den_x * den_y))
