"""Deterministic training loop, linear probes and held-out diagnostics."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..autodiff import NonFiniteError
from ..miest import linear_cka
from ..synthdata import SyntheticBatch, generate
from ..toymodel import LOSS_FIELDS, LossBreakdown, Objective, ToyModel, init_params
from .config import MOMENTUM, TrainConfig

log = logging.getLogger(__name__)

# counter-based stream roles: rng = default_rng([seed, step, role])
ROLE_INIT = 0
ROLE_BATCH = 1
ROLE_NOISE = 2
ROLE_PROBE = 3

METRIC_COLUMNS = (
    "step", "loss_total", "loss_mllm", "loss_infotok",
    "kl_u", "kl_g", "suff_u", "suff_g", "align_u", "align_g",
    "compact_bound_u", "compact_bound_g", "suff_bound_u", "suff_bound_g",
    "align_estimate_u", "align_estimate_g",
    "cka_vis_text", "probe_accuracy", "nuisance_probe_error",
)


class TrainingAbort(RuntimeError):
    """The objective became non-finite; carries the step and last good breakdown."""

    def __init__(self, step: int, breakdown: LossBreakdown | None, cause: Exception):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite objective at step {step}: {cause}; "
                         f"last breakdown {breakdown.as_dict() if breakdown else None}")


@dataclass
class MetricsRecord:
    step: int
    kl_u: float | None = None
    kl_g: float | None = None
    suff_u: float | None = None
    suff_g: float | None = None
    align_u: float | None = None
    align_g: float | None = None
    loss_i2t: float | None = None
    loss_t2i: float | None = None
    loss_infotok: float | None = None
    loss_mllm: float | None = None
    loss_total: float | None = None
    compact_bound_u: float | None = None
    compact_bound_g: float | None = None
    suff_bound_u: float | None = None
    suff_bound_g: float | None = None
    align_estimate_u: float | None = None
    align_estimate_g: float | None = None
    cka_vis_text: float | None = None
    probe_accuracy: float | None = None
    nuisance_probe_error: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    config: TrainConfig
    records: list[MetricsRecord]
    params: dict[str, np.ndarray]
    breakdowns: list[LossBreakdown]


# -- probes -------------------------------------------------------------------


def _split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 0, ROLE_PROBE]).permutation(n)
    cut = int(round(0.8 * n))
    return perm[:cut], perm[cut:]


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return (train - mean) / std, (test - mean) / std


def probe(representations, labels, seed: int = 0, iters: int = 300, lr: float = 0.5,
          l2: float = 1e-4) -> float:
    """Held-out accuracy of a softmax-regression probe fit by gradient descent.

    80/20 split by a seeded permutation; features standardized on the train
    part.
    """
    x = np.asarray(representations, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if x.ndim == 1:
        x = x[:, None]
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("probe needs at least two distinct labels")
    n_classes = int(y.max()) + 1
    if x.shape[0] < 10 * n_classes:
        raise ValueError(f"probe needs at least {10 * n_classes} samples")
    tr, te = _split(x.shape[0], seed)
    xtr, xte = _standardize(x[tr], x[te])
    onehot = np.eye(n_classes)[y[tr]]
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(iters):
        logits = xtr @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        err = (p - onehot) / xtr.shape[0]
        w -= lr * (xtr.T @ err + l2 * w)
        b -= lr * err.sum(axis=0)
    return float(np.mean(np.argmax(xte @ w + b, axis=1) == y[te]))


def nuisance_probe_error(representations, nuisance, seed: int = 0, ridge: float = 1e-3) -> float:
    """Fraction of nuisance variance a ridge regression fails to explain on held-out rows.

    1 means the representation carries no linearly decodable nuisance; 0 means
    perfect recovery.  ``nan`` when there are no nuisance coordinates.
    """
    nuisance = np.asarray(nuisance, dtype=np.float64)
    if nuisance.ndim == 1:
        nuisance = nuisance[:, None]
    if nuisance.shape[1] == 0:
        return math.nan
    x = np.asarray(representations, dtype=np.float64)
    tr, te = _split(x.shape[0], seed)
    xtr, xte = _standardize(x[tr], x[te])
    ytr, yte = nuisance[tr], nuisance[te]
    ymean = ytr.mean(axis=0)
    a = xtr.T @ xtr + ridge * xtr.shape[0] * np.eye(x.shape[1])
    w = np.linalg.solve(a, xtr.T @ (ytr - ymean))
    resid = yte - (xte @ w + ymean)
    total = np.sum((yte - ymean) ** 2)
    return float(np.sum(resid ** 2) / total) if total > 0 else math.nan


def report_cka(model: ToyModel, heldout: SyntheticBatch) -> float:
    """Linear CKA between pooled understanding anchors and text embeddings."""
    if len(heldout) < 3:
        raise ValueError("CKA needs a held-out batch of at least 3 samples")
    return linear_cka(model.posterior_means("u", heldout.images), heldout.texts)


# -- training -------------------------------------------------------------------


def step_batch(config: TrainConfig, data: SyntheticBatch, step: int) -> SyntheticBatch:
    rng = np.random.default_rng([config.seed, step, ROLE_BATCH])
    return data.take(rng.choice(len(data), size=config.batch_size, replace=False))


def step_noise(config: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([config.seed, step, ROLE_NOISE])
    shape = (config.batch_size, config.generator.d_text)
    return rng.standard_normal(shape), rng.standard_normal(shape)


def make_record(step: int, breakdown: LossBreakdown, config: TrainConfig, model: ToyModel,
                heldout: SyntheticBatch) -> MetricsRecord:
    rec = MetricsRecord(step=step, **breakdown.as_dict())
    h_target = math.log(config.generator.num_classes)
    log_k = math.log(config.batch_size)
    if breakdown.kl_u is not None:
        rec.compact_bound_u = breakdown.kl_u
        rec.compact_bound_g = breakdown.kl_g
        # generation target takes C equiprobable clean values: H = log C
        rec.suff_bound_u = breakdown.suff_u + h_target
        rec.suff_bound_g = breakdown.suff_g + h_target
        rec.align_estimate_u = breakdown.align_u + log_k
        rec.align_estimate_g = breakdown.align_g + log_k
    tokens = model.encode_batch(heldout.images)
    rec.cka_vis_text = report_cka(model, heldout)
    rec.probe_accuracy = probe(tokens, heldout.latent, seed=config.seed)
    d_sig = config.generator.d_signal
    rec.nuisance_probe_error = nuisance_probe_error(tokens, heldout.images[:, d_sig:], seed=config.seed)
    return rec


def run_training(config: TrainConfig, include_infotok: bool = True) -> TrainResult:
    """Train and return records, final parameters and every step's loss breakdown.

    With ``include_infotok=False`` the regularizer is never built; the run
    optimizes the task loss alone.
    """
    config.validate()
    dims = config.dims
    data = generate(config.generator, stream=0)
    heldout = generate(config.generator, stream=1)
    model = ToyModel(dims, init_params(dims, np.random.default_rng([config.seed, 0, ROLE_INIT])))
    objective = Objective(dims, config.batch_size, config.hyper, include_infotok,
                          d_text=config.generator.d_text)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    records: list[MetricsRecord] = []
    breakdowns: list[LossBreakdown] = []
    last = None
    for step in range(config.steps + 1):
        batch = step_batch(config, data, step)
        noise = step_noise(config, step)
        try:
            if step < config.steps:
                breakdown, grads, _ = objective.value_and_grad(model.params, batch, noise)
            else:
                breakdown, _ = objective.evaluate(model.params, batch, noise)
        except NonFiniteError as exc:
            raise TrainingAbort(step, last, exc) from exc
        last = breakdown
        breakdowns.append(breakdown)
        if step % config.log_interval == 0 or step == config.steps:
            records.append(make_record(step, breakdown, config, model, heldout))
            log.debug("step %d loss_total %.6f", step, breakdown.loss_total)
        if step == config.steps:
            break
        for name, g in grads.items():
            if config.optimizer == "momentum":
                velocity[name] = MOMENTUM * velocity[name] + g
                model.params[name] = model.params[name] - config.learning_rate * velocity[name]
            else:
                model.params[name] = model.params[name] - config.learning_rate * g
    return TrainResult(config, records, model.params, breakdowns)


def train(config: TrainConfig) -> list[MetricsRecord]:
    return run_training(config).records


def converged(records: list[MetricsRecord], steps: int) -> MetricsRecord:
    """Average every numeric field over the records in the final 10% of steps."""
    if not records:
        raise ValueError("no records")
    start = steps - max(1, steps // 10) if steps > 0 else 0
    tail = [r for r in records if r.step >= start] or [records[-1]]
    out = MetricsRecord(step=tail[-1].step)
    for f in fields(MetricsRecord):
        if f.name == "step":
            continue
        vals = [getattr(r, f.name) for r in tail]
        if any(v is None for v in vals):
            continue
        setattr(out, f.name, float(np.mean(vals)))
    return out


# -- output -----------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])


def read_metrics_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_summary(record: MetricsRecord, path, extra: dict | None = None) -> None:
    """Converged values as one JSON object on a single line."""
    payload = {c: getattr(record, c) for c in METRIC_COLUMNS}
    payload.update(extra or {})
    Path(path).write_text(json.dumps(payload, sort_keys=False) + "\n")


__all__ = [
    "LOSS_FIELDS", "METRIC_COLUMNS", "MetricsRecord", "TrainResult", "TrainingAbort",
    "converged", "probe", "nuisance_probe_error", "report_cka", "run_training", "train",
    "write_metrics_csv", "read_metrics_csv", "write_summary",
]
