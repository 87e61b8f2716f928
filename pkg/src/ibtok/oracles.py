"""Quick self-checks of the estimators against exact or statistical oracles.

These back the ``oracle`` and ``gradcheck`` CLI commands.  Each check is
small enough to finish in a few seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import GradCheckReport, grad_check
from .miest import (
    DiscreteJoint,
    EmbeddingBatch,
    MixtureChannel,
    discrete_entropy,
    discrete_mi,
    infonce_mi,
    linear_cka,
    mixture_channel_mi,
    pushforward_mi,
)
from .synthdata import GeneratorConfig, dpi_instance, generate
from .toymodel import InfoTokHyper, ModelDims, Objective, init_params
from .vib import GaussianPosterior, PriorSpec, kl_monte_carlo, kl_to_standard_normal

SUITES = ("kl", "mi", "dpi", "cka")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def kl_suite(seed: int = 0, n: int = 200_000) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for i in range(5):
        d = int(rng.integers(1, 9))
        post = GaussianPosterior(rng.uniform(-2, 2, d), rng.uniform(-1, 1, d))
        closed = kl_to_standard_normal(post)
        est, se = kl_monte_carlo(post, PriorSpec(d), n, seed=seed + i)
        z = abs(est - closed) / se
        checks.append(Check(f"kl closed form vs MC #{i} (d={d})", z < 3.0,
                            f"closed {closed:.6f} mc {est:.6f} +- {se:.2e} ({z:.2f} se)"))
    zero = kl_to_standard_normal(GaussianPosterior(np.zeros(3), np.zeros(3)))
    checks.append(Check("kl of prior against itself", abs(zero) < 1e-12, f"{zero:.3e}"))
    return checks


def mi_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    diag = discrete_mi(DiscreteJoint(np.eye(4) / 4))
    checks.append(Check("diagonal 4x4 joint", abs(diag - math.log(4)) < 1e-12, f"{diag:.15f}"))
    indep = discrete_mi(DiscreteJoint(np.full((2, 2), 0.25)))
    checks.append(Check("independent 2x2 joint", abs(indep) < 1e-12, f"{indep:.3e}"))
    ent = discrete_entropy([0.5, 0.25, 0.25])
    checks.append(Check("entropy [1/2,1/4,1/4]", abs(ent - 1.5 * math.log(2)) < 1e-12, f"{ent:.12f}"))
    est, se = mixture_channel_mi(MixtureChannel([1.0], [[0.5, -1.0]], [[0.2, -0.3]]), 50_000, seed)
    checks.append(Check("single-component channel", abs(est) <= 3 * se + 1e-12, f"{est:.2e} +- {se:.1e}"))
    est, se = mixture_channel_mi(MixtureChannel([0.5, 0.5], [[-10.0], [10.0]], [[0.0], [0.0]]), 50_000, seed)
    checks.append(Check("separated two-component channel", abs(est - math.log(2)) <= 3 * se + 1e-9,
                        f"{est:.6f} vs log 2"))
    worst = -math.inf
    for _ in range(50):
        k, d = int(rng.integers(2, 9)), int(rng.integers(1, 6))
        batch = EmbeddingBatch(rng.standard_normal((k, d)), rng.standard_normal((k, d)))
        worst = max(worst, infonce_mi(batch, float(rng.uniform(0.05, 2))) - math.log(k))
    checks.append(Check("InfoNCE estimate <= log K", worst <= 0.0, f"max excess {worst:.3e}"))
    return checks


def dpi_suite(seed: int = 0, instances: int = 20) -> list[Check]:
    violations = 0
    worst = -math.inf
    for i in range(instances):
        joint, maps = dpi_instance(seed + i, (4, 4), n_out=3)
        full = discrete_mi(joint)
        for f in maps:
            gap = pushforward_mi(joint, f, 3) - full
            worst = max(worst, gap)
            violations += gap > 1e-12
    return [Check(f"DPI over {instances} joints x 81 maps", violations == 0,
                  f"{violations} violations, max I(f(Z);Y) - I(Z;Y) = {worst:.3e}")]


def cka_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((64, 8))
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    self_cka = linear_cka(x, x)
    rot = linear_cka(x, x @ q)
    scaled = abs(linear_cka(3.0 * x, x @ q) - rot)
    null = linear_cka(x, rng.standard_normal((64, 8)))
    return [
        Check("self-similarity", abs(self_cka - 1) < 1e-10, f"{self_cka:.12f}"),
        Check("orthogonal invariance", abs(rot - 1) < 1e-10, f"{rot:.12f}"),
        Check("isotropic scaling invariance", scaled < 1e-10, f"{scaled:.2e}"),
        Check("independent representations", null < 0.3, f"{null:.4f}"),
    ]


def run_suite(name: str, seed: int = 0) -> list[Check]:
    suites = {"kl": kl_suite, "mi": mi_suite, "dpi": dpi_suite, "cka": cka_suite}
    if name not in suites:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return suites[name](seed)


def random_objective_point(seed: int, batch_size: int = 4, dims: ModelDims | None = None):
    """A random model, batch, noise and hyper setting for gradient checks."""
    dims = dims or ModelDims()
    rng = np.random.default_rng(seed)
    hyper = InfoTokHyper(*rng.uniform(0.1, 2.0, 4), lam=float(rng.uniform(0.05, 1.0)),
                         tau=float(rng.uniform(0.1, 1.0)))
    gen = GeneratorConfig(num_classes=dims.n_classes, d_image=dims.d_image, d_text=dims.d_latent,
                          d_nuisance=min(4, dims.d_image - 1), n=max(2 * dims.n_classes, 16),
                          seed=seed)
    batch = generate(gen).take(np.arange(batch_size))
    params = init_params(dims, rng)
    for name, value in params.items():
        if value.ndim == 1:
            params[name] = 0.3 * rng.standard_normal(value.shape)
    noise = (rng.standard_normal((batch_size, dims.d_latent)),
             rng.standard_normal((batch_size, dims.d_latent)))
    obj = Objective(dims, batch_size, hyper, d_text=dims.d_latent)
    return obj, obj.make_inputs(params, batch, noise)


def gradcheck_total_loss(seed: int, eps: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    obj, point = random_objective_point(seed)
    return grad_check(obj.graph, point, eps, tolerance, output=obj.handles["loss_total"])
