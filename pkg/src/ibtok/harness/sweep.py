"""One-dimensional hyperparameter sweeps over seeds."""

from __future__ import annotations

import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .config import ConfigError, TrainConfig
from .train import MetricsRecord, TrainingAbort, converged, run_training

log = logging.getLogger(__name__)

# grid key -> InfoTokHyper.replace keyword
SWEEPABLE = {
    "beta": "beta", "alpha": "alpha", "lambda": "lam", "lam": "lam", "tau": "tau",
    "beta_u": "beta_u", "beta_g": "beta_g", "alpha_u": "alpha_u", "alpha_g": "alpha_g",
}


@dataclass
class SweepEntry:
    value: float
    seed: int
    record: MetricsRecord | None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.record is None


@dataclass
class SweepResult:
    param: str
    values: list[float]
    seeds: list[int]
    entries: list[SweepEntry]

    def runs(self, value: float) -> list[SweepEntry]:
        return [e for e in self.entries if e.value == value]

    def median(self, value: float, metric: str) -> float:
        """Seed-median of a converged metric at one grid point (failed runs skipped)."""
        vals = [getattr(e.record, metric) for e in self.runs(value) if not e.failed]
        if not vals:
            raise ValueError(f"no successful runs at {self.param}={value}")
        return statistics.median(vals)

    def medians(self, metric: str) -> list[float]:
        return [self.median(v, metric) for v in self.values]

    @property
    def complete(self) -> bool:
        return not any(e.failed for e in self.entries)


def parse_grid(spec: str) -> tuple[str, list[float]]:
    """``"beta=0.1,1,10"`` -> ``("beta", [0.1, 1.0, 10.0])``."""
    if "=" not in spec:
        raise ConfigError(f"grid spec {spec!r} must look like name=v1,v2,...")
    name, _, rhs = spec.partition("=")
    name = name.strip()
    if name not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {name!r}; choose from {sorted(SWEEPABLE)}")
    try:
        values = [float(v) for v in rhs.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid values in {spec!r}") from exc
    if not values:
        raise ConfigError("grid is empty")
    return name, values


def point_config(base: TrainConfig, param: str, value: float, seed: int) -> TrainConfig:
    return base.with_seed(seed).with_hyper(**{SWEEPABLE[param]: value})


def _run(cfg: TrainConfig) -> tuple[MetricsRecord | None, str | None]:
    try:
        return converged(run_training(cfg).records, cfg.steps), None
    except TrainingAbort as exc:
        return None, str(exc)


def sweep(base: TrainConfig, param: str, values: list[float], seeds: list[int] | None = None,
          workers: int = 1) -> SweepResult:
    """Train one model per (value, seed) and collect converged metrics.

    Runs that abort numerically are kept as failed entries.  With
    ``workers > 1`` grid points run in separate processes; results do not
    depend on the worker count.
    """
    if not values:
        raise ConfigError("grid is empty")
    if param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {param!r}")
    seeds = [base.seed] if seeds is None else list(seeds)
    jobs = [(v, s, point_config(base, param, v, s)) for v in values for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run, [cfg for _, _, cfg in jobs]))
    else:
        outcomes = [_run(cfg) for _, _, cfg in jobs]
    entries = []
    for (v, s, _), (rec, err) in zip(jobs, outcomes):
        if err:
            log.warning("run %s=%s seed=%d failed: %s", param, v, s, err)
        entries.append(SweepEntry(v, s, rec, err))
    return SweepResult(param, list(values), seeds, entries)
