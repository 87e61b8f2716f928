"""Toy two-branch model: shared encoder, per-branch Gaussian projections,
decoder heads, and the regularized training objective.

Tokens are stored flat: an image maps to a ``(n_tokens * d_token,)`` row in
which token ``j`` occupies columns ``j*d_token:(j+1)*d_token``.  Each branch
mean-pools the tokens and maps the pooled vector to a diagonal Gaussian over
the task-facing latent.  Branch ``u`` feeds a class-logit head, branch ``g`` a
reconstruction head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Graph, Tensor, backward, forward
from .miest import infonce_node
from .synthdata import SyntheticBatch
from .vib import LOG_SIGMA_MAX, LOG_SIGMA_MIN, GaussianPosterior, kl_node, reparam_node

BRANCHES = ("u", "g")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelDims:
    d_image: int = 16
    n_tokens: int = 4
    d_token: int = 8
    d_latent: int = 4
    n_classes: int = 4
    d_hidden: int = 32

    @property
    def d_tokens(self) -> int:
        return self.n_tokens * self.d_token


@dataclass(frozen=True)
class InfoTokHyper:
    beta_u: float = 1.0
    beta_g: float = 1.0
    alpha_u: float = 1.0
    alpha_g: float = 1.0
    lam: float = 0.1
    tau: float = 0.2

    def __post_init__(self):
        for f in ("beta_u", "beta_g", "alpha_u", "alpha_g", "lam"):
            v = getattr(self, f)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f} must be a finite non-negative number, got {v!r}")
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau!r}")

    @classmethod
    def symmetric(cls, beta: float = 1.0, alpha: float = 1.0, lam: float = 0.1, tau: float = 0.2):
        return cls(beta, beta, alpha, alpha, lam, tau)

    def replace(self, **kw) -> "InfoTokHyper":
        d = asdict(self)
        if "beta" in kw:
            b = kw.pop("beta")
            d.update(beta_u=b, beta_g=b)
        if "alpha" in kw:
            a = kw.pop("alpha")
            d.update(alpha_u=a, alpha_g=a)
        d.update(kw)
        return InfoTokHyper(**d)


LOSS_FIELDS = (
    "kl_u", "kl_g", "suff_u", "suff_g", "align_u", "align_g",
    "loss_i2t", "loss_t2i", "loss_infotok", "loss_mllm", "loss_total",
)


@dataclass
class LossBreakdown:
    """All scalar terms of one objective evaluation.

    Fields a particular evaluation did not produce are ``None``.
    """

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

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def infotok_residual(self, hyper: InfoTokHyper) -> float:
        u = self.kl_u - hyper.beta_u * self.suff_u - hyper.alpha_u * self.align_u
        g = self.kl_g - hyper.beta_g * self.suff_g - hyper.alpha_g * self.align_g
        return abs(self.loss_infotok - (u + g))

    def total_residual(self, hyper: InfoTokHyper) -> float:
        return abs(self.loss_total - (self.loss_mllm + hyper.lam * self.loss_infotok))


# -- parameters ----------------------------------------------------------


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; the order is the serialization order."""
    shapes = {
        "enc_w1": (dims.d_image, dims.d_hidden),
        "enc_b1": (dims.d_hidden,),
        "enc_w2": (dims.d_hidden, dims.d_tokens),
        "enc_b2": (dims.d_tokens,),
    }
    for b in BRANCHES:
        shapes[f"proj_{b}_w_mu"] = (dims.d_token, dims.d_latent)
        shapes[f"proj_{b}_b_mu"] = (dims.d_latent,)
        shapes[f"proj_{b}_w_ls"] = (dims.d_token, dims.d_latent)
        shapes[f"proj_{b}_b_ls"] = (dims.d_latent,)
    shapes["dec_u_w"] = (dims.d_latent, dims.n_classes)
    shapes["dec_u_b"] = (dims.n_classes,)
    shapes["dec_g_w"] = (dims.d_latent, dims.d_image)
    shapes["dec_g_b"] = (dims.d_image,)
    return shapes


def init_params(dims: ModelDims, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Weights ``N(0, 1/fan_in)``, biases zero."""
    params = {}
    for name, shape in param_shapes(dims).items():
        if len(shape) == 2:
            params[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            params[name] = np.zeros(shape)
    return params


def zero_params(dims: ModelDims) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape) for name, shape in param_shapes(dims).items()}


def save_params(params: dict[str, np.ndarray], path) -> None:
    """Text format: a magic line, then per parameter a header line
    ``<name> <dim> [<dim>]`` followed by one line of ``%.17g`` values in
    row-major order.  Reloading is bit-exact."""
    with open(Path(path), "w") as fh:
        fh.write("# ibtok-weights v1\n")
        for name, value in params.items():
            fh.write(" ".join([name, *map(str, value.shape)]) + "\n")
            fh.write(" ".join(format(float(v), ".17g") for v in value.ravel()) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "# ibtok-weights v1":
        raise ValueError(f"{path}: not an ibtok weight file")
    params = {}
    body = lines[1:]
    for head, vals in zip(body[::2], body[1::2]):
        name, *shape = head.split()
        shape = tuple(int(s) for s in shape)
        arr = np.array([float(v) for v in vals.split()], dtype=np.float64)
        params[name] = arr.reshape(shape)
    return params


# -- graph builders --------------------------------------------------------


def param_nodes(g: Graph, dims: ModelDims) -> dict[str, int]:
    return {name: g.input(shape, name) for name, shape in param_shapes(dims).items()}


def encoder_nodes(g: Graph, p: dict[str, int], images: int) -> int:
    """Two-layer map ``tanh(x W1 + b1) W2 + b2`` -> flat token rows."""
    hidden = g.act(g.add(g.matmul(images, p["enc_w1"]), p["enc_b1"]), "tanh")
    return g.add(g.matmul(hidden, p["enc_w2"]), p["enc_b2"], name="tokens")


def pooling_matrix(dims: ModelDims) -> np.ndarray:
    pool = np.zeros((dims.d_tokens, dims.d_token))
    for j in range(dims.n_tokens):
        pool[j * dims.d_token:(j + 1) * dims.d_token] += np.eye(dims.d_token) / dims.n_tokens
    return pool


def projection_nodes(g: Graph, dims: ModelDims, p: dict[str, int], branch: str,
                     tokens: int) -> tuple[int, int]:
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    pooled = g.matmul(tokens, g.const(pooling_matrix(dims)), name=f"pooled_{branch}")
    mu = g.add(g.matmul(pooled, p[f"proj_{branch}_w_mu"]), p[f"proj_{branch}_b_mu"],
               name=f"mu_{branch}")
    raw = g.add(g.matmul(pooled, p[f"proj_{branch}_w_ls"]), p[f"proj_{branch}_b_ls"])
    ls = g.act(raw, "clip", LOG_SIGMA_MIN, LOG_SIGMA_MAX, name=f"log_sigma_{branch}")
    return mu, ls


def head_nodes(g: Graph, p: dict[str, int], branch: str, z: int) -> int:
    return g.add(g.matmul(z, p[f"dec_{branch}_w"]), p[f"dec_{branch}_b"],
                 name=f"head_{branch}")


def sufficiency_nodes(g: Graph, branch: str, head: int, target: int) -> tuple[int, int]:
    """Return ``(mean log-likelihood, per-row error node)`` for a branch.

    ``u``: per-row cross-entropy; mean log-softmax of the true class.
    ``g``: per-row squared error; mean unit-variance Gaussian log-density.
    """
    if branch == "u":
        err = g.xent(head, target)
        return g.scale(g.mean(err), -1.0, name="suff_u"), err
    d = g.shape(head)[1]
    err = g.sqerr(head, target)
    loglik = g.shift(g.scale(g.mean(err), -0.5), -0.5 * d * LOG_2PI, name="suff_g")
    return loglik, err


# -- the objective -----------------------------------------------------------


class Objective:
    """Static graph of the full objective for a fixed batch size and hyper setting.

    Graph inputs, in order: every parameter (``param_shapes`` order), then
    ``images``, ``texts``, ``labels``, ``targets``, ``noise_u``, ``noise_g``.
    With ``include_infotok=False`` only the task loss is built and
    ``loss_total`` is the task loss itself.
    """

    DATA_INPUTS = ("images", "texts", "labels", "targets", "noise_u", "noise_g")

    def __init__(self, dims: ModelDims, batch_size: int, hyper: InfoTokHyper,
                 include_infotok: bool = True, d_text: int | None = None):
        k = batch_size
        if include_infotok and k < 2:
            raise ValueError("the alignment term needs a batch of at least 2")
        if k < 1:
            raise ValueError("batch size must be positive")
        d_text = dims.d_latent if d_text is None else d_text
        if include_infotok and d_text != dims.d_latent:
            raise ValueError("text embeddings must have the latent dimension for cosine alignment")
        self.dims, self.batch_size, self.hyper = dims, k, hyper
        self.include_infotok = include_infotok
        g = self.graph = Graph()
        p = self.params = param_nodes(g, dims)
        images = g.input((k, dims.d_image), "images", differentiable=False)
        texts = g.input((k, d_text), "texts", differentiable=False)
        labels = g.input((k,), "labels", differentiable=False)
        targets = g.input((k, dims.d_image), "targets", differentiable=False)
        noise = {b: g.input((k, dims.d_latent), f"noise_{b}", differentiable=False)
                 for b in BRANCHES}

        tokens = encoder_nodes(g, p, images)
        h = self.handles = {"tokens": tokens}
        for b, target in (("u", labels), ("g", targets)):
            mu, ls = projection_nodes(g, dims, p, b, tokens)
            z = reparam_node(g, mu, ls, noise[b])
            head = head_nodes(g, p, b, z)
            suff, err = sufficiency_nodes(g, b, head, target)
            h.update({f"mu_{b}": mu, f"log_sigma_{b}": ls, f"z_{b}": z,
                      f"head_{b}": head, f"suff_{b}": suff, f"err_{b}": err})
        h["loss_i2t"] = g.mean(h["err_u"], name="loss_i2t")
        h["loss_t2i"] = g.scale(g.mean(h["err_g"]), 1.0 / dims.d_image, name="loss_t2i")
        h["loss_mllm"] = g.add(h["loss_i2t"], h["loss_t2i"], name="loss_mllm")
        if not include_infotok:
            h["loss_total"] = h["loss_mllm"]
            return
        branch_terms = []
        for b in BRANCHES:
            beta = getattr(hyper, f"beta_{b}")
            alpha = getattr(hyper, f"alpha_{b}")
            h[f"kl_{b}"] = kl_node(g, h[f"mu_{b}"], h[f"log_sigma_{b}"])
            # the visual anchor is the posterior mean; no sampling
            h[f"align_{b}"] = infonce_node(g, h[f"mu_{b}"], texts, hyper.tau)
            term = g.sub(h[f"kl_{b}"], g.scale(h[f"suff_{b}"], beta))
            term = g.sub(term, g.scale(h[f"align_{b}"], alpha), name=f"loss_infotok_{b}")
            branch_terms.append(term)
        h["loss_infotok"] = g.add(*branch_terms, name="loss_infotok")
        h["loss_total"] = g.add(h["loss_mllm"], g.scale(h["loss_infotok"], hyper.lam),
                                name="loss_total")

    def make_inputs(self, params: dict[str, np.ndarray], batch: SyntheticBatch,
                    noise: Sequence[np.ndarray]) -> list[Tensor]:
        if len(batch) != self.batch_size:
            raise ValueError(f"objective built for batch size {self.batch_size}, got {len(batch)}")
        noise_u, noise_g = noise
        arrays = [params[name] for name in param_shapes(self.dims)]
        arrays += [batch.images, batch.texts, batch.y_understand, batch.y_generate, noise_u, noise_g]
        return [Tensor.from_array(a) for a in arrays]

    def evaluate(self, params, batch, noise) -> tuple[LossBreakdown, list[Tensor]]:
        vals = forward(self.graph, self.make_inputs(params, batch, noise))
        out = LossBreakdown()
        for name in LOSS_FIELDS:
            if name in self.handles:
                setattr(out, name, vals[self.handles[name]].item())
        return out, vals

    def value_and_grad(self, params, batch, noise) -> tuple[LossBreakdown, dict[str, np.ndarray], list[Tensor]]:
        breakdown, vals = self.evaluate(params, batch, noise)
        grads = backward(self.graph, self.handles["loss_total"])
        names = list(param_shapes(self.dims))
        return breakdown, {n: grads[i].value for i, n in enumerate(names)}, vals


def zero_noise(batch_size: int, dims: ModelDims) -> tuple[np.ndarray, np.ndarray]:
    z = np.zeros((batch_size, dims.d_latent))
    return z, z.copy()


# -- array-facing model API --------------------------------------------------


class ToyModel:
    """Parameter container plus single-purpose evaluations of the model parts."""

    def __init__(self, dims: ModelDims | None = None, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.dims = dims or ModelDims()
        if params is None:
            params = init_params(self.dims, np.random.default_rng(seed))
        shapes = param_shapes(self.dims)
        if set(params) != set(shapes):
            raise ValueError("parameter names do not match the model layout")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = {name: np.array(params[name], dtype=np.float64) for name in shapes}

    def _run(self, build, **data) -> tuple[list[Tensor], int]:
        g = Graph()
        p = param_nodes(g, self.dims)
        nodes = {k: g.input(np.shape(v), k, differentiable=False) for k, v in data.items()}
        out = build(g, p, nodes)
        inputs = [Tensor.from_array(self.params[n]) for n in param_shapes(self.dims)]
        inputs += [Tensor.from_array(v) for v in data.values()]
        return forward(g, inputs), out

    def encode(self, image) -> np.ndarray:
        """Token matrix ``(n_tokens, d_token)`` for one image vector."""
        x = np.asarray(image, dtype=np.float64)
        if x.shape != (self.dims.d_image,):
            raise ValueError(f"image must have shape ({self.dims.d_image},), got {x.shape}")
        vals, out = self._run(lambda g, p, n: encoder_nodes(g, p, n["x"]), x=x[None])
        return vals[out].value.reshape(self.dims.n_tokens, self.dims.d_token)

    def encode_batch(self, images) -> np.ndarray:
        """Flat token rows ``(n, n_tokens * d_token)``."""
        x = np.atleast_2d(np.asarray(images, dtype=np.float64))
        vals, out = self._run(lambda g, p, n: encoder_nodes(g, p, n["x"]), x=x)
        return vals[out].value

    def project(self, branch: str, tokens) -> GaussianPosterior:
        if branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
        t = np.asarray(tokens, dtype=np.float64).reshape(1, self.dims.d_tokens)
        holder = {}

        def build(g, p, n):
            holder["mu"], ls = projection_nodes(g, self.dims, p, branch, n["t"])
            return ls

        vals, ls = self._run(build, t=t)
        return GaussianPosterior(vals[holder["mu"]].value[0], vals[ls].value[0])

    def posterior_means(self, branch: str, images) -> np.ndarray:
        """Pooled visual anchors (posterior means) for a batch of images."""
        x = np.atleast_2d(np.asarray(images, dtype=np.float64))

        def build(g, p, n):
            return projection_nodes(g, self.dims, p, branch, encoder_nodes(g, p, n["x"]))[0]

        vals, out = self._run(build, x=x)
        return vals[out].value

    def sufficiency_term(self, branch: str, z_tilde, target) -> float:
        """Mean decoder log-likelihood of ``target`` given latent samples."""
        if branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
        z = np.atleast_2d(np.asarray(z_tilde, dtype=np.float64))
        if branch == "u":
            y = np.atleast_1d(np.asarray(target))
            if np.any(y < 0) or np.any(y >= self.dims.n_classes) or np.any(y != np.round(y)):
                raise ValueError(f"class index out of range [0, {self.dims.n_classes})")
        else:
            y = np.atleast_2d(np.asarray(target, dtype=np.float64))

        def build(g, p, n):
            return sufficiency_nodes(g, branch, head_nodes(g, p, branch, n["z"]), n["y"])[0]

        vals, out = self._run(build, z=z, y=y)
        return vals[out].item()

    def objective(self, batch_size: int, hyper: InfoTokHyper, include_infotok: bool = True,
                  d_text: int | None = None) -> Objective:
        return Objective(self.dims, batch_size, hyper, include_infotok, d_text)

    def total_loss(self, batch: SyntheticBatch, hyper: InfoTokHyper, noise) -> LossBreakdown:
        return self.objective(len(batch), hyper, d_text=batch.texts.shape[1]).evaluate(
            self.params, batch, noise)[0]

    def infotok_loss(self, batch: SyntheticBatch, hyper: InfoTokHyper, noise) -> LossBreakdown:
        """The regularizer terms only; task-loss fields are left ``None``."""
        if len(batch) < 2:
            raise ValueError("the alignment term needs a batch of at least 2")
        full = self.total_loss(batch, hyper, noise)
        keep = ("kl_u", "kl_g", "suff_u", "suff_g", "align_u", "align_g", "loss_infotok")
        return LossBreakdown(**{k: getattr(full, k) for k in keep})

    def mllm_loss(self, batch: SyntheticBatch, noise) -> float:
        obj = Objective(self.dims, len(batch), InfoTokHyper(), include_infotok=False,
                        d_text=batch.texts.shape[1])
        return obj.evaluate(self.params, batch, noise)[0].loss_mllm

    def save(self, path) -> None:
        save_params(self.params, path)

    @classmethod
    def load(cls, path, dims: ModelDims | None = None) -> "ToyModel":
        return cls(dims, load_params(path))


def aggregate_mean(post: GaussianPosterior | Sequence[GaussianPosterior]) -> np.ndarray:
    """Visual anchor(s) from posterior mean(s); row-stacked for a sequence."""
    if isinstance(post, GaussianPosterior):
        return post.mu.copy()
    return np.stack([p.mu for p in post])
