"""Synthetic paired image/text data whose information structure is known exactly.

Each sample has a latent class ``c``.  The image is the class anchor plus
Gaussian noise in its first ``d_image - d_nuisance`` coordinates; the last
``d_nuisance`` coordinates are unit-variance noise independent of ``c``.  The
text is a text-space class anchor plus noise.  Anchors depend only on the
config seed, so every ``stream`` of the same config shares them.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .miest import DiscreteJoint

MAX_MAP_FAMILY = 10_000

_ANCHOR_STREAM = 0
_SAMPLE_STREAM = 1


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 4
    d_image: int = 16
    d_text: int = 4
    sigma_image: float = 0.25
    sigma_text: float = 0.25
    d_nuisance: int = 4
    n: int = 1000
    seed: int = 0

    def validate(self) -> "GeneratorConfig":
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not self.d_image > self.d_nuisance >= 0:
            raise ValueError("need d_image > d_nuisance >= 0")
        if self.d_text < 1:
            raise ValueError("d_text must be positive")
        if not (self.sigma_image > 0 and self.sigma_text > 0):
            raise ValueError("noise scales must be positive")
        if self.n < 2 * self.num_classes:
            raise ValueError("n must be at least 2 * num_classes")
        return self

    @property
    def d_signal(self) -> int:
        return self.d_image - self.d_nuisance


@dataclass
class SyntheticBatch:
    images: np.ndarray       # (n, d_image)
    texts: np.ndarray        # (n, d_text)
    y_understand: np.ndarray  # (n,) int class index
    y_generate: np.ndarray   # (n, d_image) clean image
    latent: np.ndarray       # (n,) int class index

    def __len__(self) -> int:
        return self.latent.shape[0]

    def take(self, idx) -> "SyntheticBatch":
        return SyntheticBatch(
            self.images[idx], self.texts[idx], self.y_understand[idx],
            self.y_generate[idx], self.latent[idx],
        )

    @property
    def d_image(self) -> int:
        return self.images.shape[1]


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((rows, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def anchors(config: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Image anchors ``(C, d_image)`` (zero on nuisance coordinates) and text anchors ``(C, d_text)``."""
    config.validate()
    rng = np.random.default_rng([config.seed, _ANCHOR_STREAM])
    image = np.zeros((config.num_classes, config.d_image))
    image[:, : config.d_signal] = _unit_rows(rng, config.num_classes, config.d_signal)
    text = _unit_rows(rng, config.num_classes, config.d_text)
    return image, text


def generate(config: GeneratorConfig, stream: int = 0) -> SyntheticBatch:
    """Draw ``config.n`` samples.  Different ``stream`` values give disjoint draws."""
    config.validate()
    image_anchor, text_anchor = anchors(config)
    rng = np.random.default_rng([config.seed, _SAMPLE_STREAM, stream])
    c = rng.integers(0, config.num_classes, size=config.n)
    clean = image_anchor[c]
    images = clean.copy()
    images[:, : config.d_signal] += config.sigma_image * rng.standard_normal((config.n, config.d_signal))
    images[:, config.d_signal:] = rng.standard_normal((config.n, config.d_nuisance))
    texts = text_anchor[c] + config.sigma_text * rng.standard_normal((config.n, config.d_text))
    return SyntheticBatch(images, texts, c.copy(), clean, c)


def true_label_mi(config: GeneratorConfig) -> float:
    """``H(c) = log C``: the ceiling of any information about the understanding target."""
    config.validate()
    return math.log(config.num_classes)


def nearest_anchor_accuracy(config: GeneratorConfig, batch: SyntheticBatch) -> float:
    image_anchor, _ = anchors(config)
    d = config.d_signal
    dist = np.sum((batch.images[:, None, :d] - image_anchor[None, :, :d]) ** 2, axis=2)
    return float(np.mean(np.argmin(dist, axis=1) == batch.latent))


def dpi_instance(seed: int, sizes: tuple[int, int], n_out: int | None = None):
    """Random joint over ``(Z, Y)`` and every deterministic map ``Z -> {0..n_out-1}``.

    ``n_out`` defaults to ``|Z|``.  Maps are tuples listing the image of each
    ``z``; the family has ``n_out ** |Z|`` members.
    """
    nz, ny = sizes
    n_out = nz if n_out is None else n_out
    if not (1 <= nz <= 5 and 1 <= ny <= 4 and n_out >= 1):
        raise ValueError("need 1 <= |Z| <= 5, 1 <= |Y| <= 4")
    if n_out ** nz > MAX_MAP_FAMILY:
        raise ValueError(f"map family of size {n_out ** nz} exceeds {MAX_MAP_FAMILY}")
    rng = np.random.default_rng(seed)
    joint = DiscreteJoint.normalized(rng.random((nz, ny)) + 1e-3)
    maps = list(itertools.product(range(n_out), repeat=nz))
    return joint, maps


def csv_header(batch: SyntheticBatch) -> list[str]:
    return (
        ["latent", "y_understand"]
        + [f"image_{j}" for j in range(batch.images.shape[1])]
        + [f"text_{j}" for j in range(batch.texts.shape[1])]
    )


def write_csv(batch: SyntheticBatch, path) -> None:
    """One row per sample: ``latent, y_understand, image_0.., text_0..``.

    Floats use ``repr`` so a reload is bit-exact.  The clean generation target
    is not stored; it is recoverable as the class anchor.
    """
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(batch))
        for i in range(len(batch)):
            w.writerow(
                [int(batch.latent[i]), int(batch.y_understand[i])]
                + [repr(float(v)) for v in batch.images[i]]
                + [repr(float(v)) for v in batch.texts[i]]
            )


def read_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_csv`: ``(latent, y_understand, images, texts)``."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n_img = sum(h.startswith("image_") for h in header)
    arr = np.array(body, dtype=np.float64)
    return (arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2:2 + n_img], arr[:, 2 + n_img:])


def config_dict(config: GeneratorConfig) -> dict:
    return asdict(config)
