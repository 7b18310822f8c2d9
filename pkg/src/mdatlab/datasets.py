"""Synthetic source/target tasks and paired mini-batching.

Two generators are provided: intertwined moons with a rotated target domain,
and small glyph images with a pixel-level target shift. Every generator is a
pure function of its config (including the seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .autodiff import Rng

SHIFT_KINDS = ("brightness", "inversion", "noise")


class LabelLeakageError(RuntimeError):
    """A training code path asked for target evaluation labels."""


class DomainDataset:
    """Inputs plus labels for one domain.

    ``labels`` are the training labels (source only). ``eval_labels`` are the
    held-back target labels, readable only on an unsealed dataset; the view
    returned by :meth:`for_training` is sealed and raises on access.
    """

    def __init__(self, inputs, labels=None, domain: str = "source", eval_labels=None,
                 sealed: bool = False):
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ValueError(f"inputs must be N x d with N >= 1, got {inputs.shape}")
        if not np.all(np.isfinite(inputs)):
            raise ValueError("inputs contain non-finite values")
        if domain not in ("source", "target"):
            raise ValueError(f"unknown domain {domain!r}")
        if domain == "target" and labels is not None:
            raise ValueError("target datasets carry eval_labels, never training labels")
        for lab in (labels, eval_labels):
            if lab is not None and np.shape(lab) != (inputs.shape[0],):
                raise ValueError("label count does not match inputs")
        self.inputs = inputs
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.domain = domain
        self._eval_labels = None if eval_labels is None else np.asarray(eval_labels, dtype=np.int64)
        self.sealed = sealed

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def eval_labels(self) -> np.ndarray | None:
        if self.sealed:
            raise LabelLeakageError(f"{self.domain} evaluation labels requested on a training view")
        return self._eval_labels

    @property
    def has_eval_labels(self) -> bool:
        return self._eval_labels is not None

    def truth(self) -> np.ndarray | None:
        """Labels to score predictions against (training labels, else eval labels)."""
        return self.labels if self.labels is not None else self.eval_labels

    def for_training(self) -> "DomainDataset":
        return DomainDataset(self.inputs, self.labels, self.domain, self._eval_labels, sealed=True)

    def strip_eval_labels(self) -> "DomainDataset":
        return DomainDataset(self.inputs, self.labels, self.domain, None, self.sealed)

    def with_inputs(self, inputs: np.ndarray) -> "DomainDataset":
        return DomainDataset(inputs, self.labels, self.domain, self._eval_labels, self.sealed)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray, per_feature: bool = True) -> "Standardizer":
        """Per-feature statistics, or one shared mean/std (for images, where a
        constant background pixel would otherwise get a near-zero std)."""
        if per_feature:
            mean, std = x.mean(axis=0), x.std(axis=0)
        else:
            mean, std = np.full(x.shape[1], x.mean()), np.full(x.shape[1], x.std())
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass
class TaskData:
    """Training sets for both domains plus held-out evaluation splits."""

    source: DomainDataset
    target: DomainDataset
    source_test: DomainDataset
    target_test: DomainDataset
    n_classes: int
    standardizer: Standardizer | None = None
    image_shape: tuple[int, int] | None = None

    def standardized(self) -> "TaskData":
        """Standardize every split with statistics of the source training set.

        Image tasks share one mean/std across pixels; other tasks use
        per-feature statistics.
        """
        if self.standardizer is not None:
            return self
        st = Standardizer.fit(self.source.inputs, per_feature=self.image_shape is None)
        return replace(
            self,
            source=self.source.with_inputs(st.transform(self.source.inputs)),
            target=self.target.with_inputs(st.transform(self.target.inputs)),
            source_test=self.source_test.with_inputs(st.transform(self.source_test.inputs)),
            target_test=self.target_test.with_inputs(st.transform(self.target_test.inputs)),
            standardizer=st,
        )


@dataclass(frozen=True)
class MoonsConfig:
    n_per_domain: int = 300
    noise: float = 0.1
    rotation_degrees: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.n_per_domain < 2 or self.n_per_domain % 2:
            raise ValueError(f"n_per_domain must be even and >= 2, got {self.n_per_domain}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


def moons_points(t: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Noise-free moon coordinates for angles ``t`` in [0, pi]."""
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return np.where(labels[:, None] == 0, upper, lower)


def _draw_moons(n: int, noise: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    labels = np.repeat(np.array([0, 1]), n // 2)
    t = rng.uniform(0.0, math.pi, size=n)
    x = moons_points(t, labels) + rng.normal(0.0, noise, size=(n, 2))
    order = rng.permutation(n)
    return x[order], labels[order]


def rotate(points: np.ndarray, degrees: float, center=(0.0, 0.0)) -> np.ndarray:
    a = math.radians(degrees)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    center = np.asarray(center, dtype=np.float64)
    return (points - center) @ rot.T + center


def gen_moons(cfg: MoonsConfig) -> TaskData:
    """Source moons and a fresh target draw rotated about the combined centroid.

    Splits are drawn from independent streams: source, target, source test,
    target test. Target splits carry their labels only as ``eval_labels``.
    """
    s_rng, t_rng, st_rng, tt_rng = Rng(cfg.seed).split(4)
    n = cfg.n_per_domain
    xs, ys = _draw_moons(n, cfg.noise, s_rng)
    xt, yt = _draw_moons(n, cfg.noise, t_rng)
    xs_test, ys_test = _draw_moons(n, cfg.noise, st_rng)
    xt_test, yt_test = _draw_moons(n, cfg.noise, tt_rng)
    center = np.concatenate([xs, xt]).mean(axis=0)
    return TaskData(
        source=DomainDataset(xs, ys, "source"),
        target=DomainDataset(rotate(xt, cfg.rotation_degrees, center), None, "target", yt),
        source_test=DomainDataset(xs_test, ys_test, "source"),
        target_test=DomainDataset(rotate(xt_test, cfg.rotation_degrees, center), None,
                                  "target", yt_test),
        n_classes=2,
    )


@dataclass(frozen=True)
class GlyphConfig:
    grid: int = 8
    n_classes: int = 4
    shift: str = "inversion"
    strength: float = 1.0
    n_per_domain: int = 400
    jitter: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.grid < 4:
            raise ValueError(f"grid must be >= 4, got {self.grid}")
        if self.n_classes < 2:
            raise ValueError(f"need at least two classes, got {self.n_classes}")
        if self.shift not in SHIFT_KINDS:
            raise ValueError(f"unknown shift {self.shift!r}; choose from {SHIFT_KINDS}")
        if self.strength < 0:
            raise ValueError("shift strength must be >= 0")
        if self.n_per_domain < self.n_classes:
            raise ValueError("n_per_domain must be at least n_classes")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


def glyph_templates(grid: int, n_classes: int, rng: Rng) -> np.ndarray:
    """One binary stroke pattern per class: a random walk of lit pixels."""
    templates = np.zeros((n_classes, grid, grid))
    steps = np.array([[0, 1], [1, 0], [0, -1], [-1, 0]])
    for k in range(n_classes):
        pos = rng.integers(1, grid - 1, size=2)
        for _ in range(grid * 2):
            templates[k, pos[0], pos[1]] = 1.0
            pos = np.clip(pos + steps[rng.integers(0, 4)], 0, grid - 1)
    return templates.reshape(n_classes, grid * grid)


def apply_shift(x: np.ndarray, kind: str, strength: float, rng: Rng | None = None) -> np.ndarray:
    """Pixel-level target shift; ``strength == 0`` leaves ``x`` unchanged."""
    if kind == "inversion":
        out = (1.0 - strength) * x + strength * (1.0 - x)
    elif kind == "brightness":
        out = x + 0.5 * strength
    elif kind == "noise":
        if rng is None:
            raise ValueError("noise shift needs an rng")
        out = x + strength * 0.3 * rng.normal(size=x.shape)
    else:
        raise ValueError(f"unknown shift {kind!r}")
    return np.clip(out, 0.0, 1.0)


def _draw_glyphs(templates: np.ndarray, n: int, jitter: float, rng: Rng):
    k = templates.shape[0]
    labels = np.arange(n) % k
    labels = labels[rng.permutation(n)]
    x = templates[labels] + rng.normal(0.0, jitter, size=(n, templates.shape[1]))
    return np.clip(x, 0.0, 1.0), labels


def gen_glyphs(cfg: GlyphConfig) -> TaskData:
    tmpl_rng, s_rng, t_rng, st_rng, tt_rng, shift_rng = Rng(cfg.seed).split(6)
    templates = glyph_templates(cfg.grid, cfg.n_classes, tmpl_rng)
    n = cfg.n_per_domain
    xs, ys = _draw_glyphs(templates, n, cfg.jitter, s_rng)
    xt, yt = _draw_glyphs(templates, n, cfg.jitter, t_rng)
    xs_test, ys_test = _draw_glyphs(templates, n, cfg.jitter, st_rng)
    xt_test, yt_test = _draw_glyphs(templates, n, cfg.jitter, tt_rng)
    xt = apply_shift(xt, cfg.shift, cfg.strength, shift_rng)
    xt_test = apply_shift(xt_test, cfg.shift, cfg.strength, shift_rng)
    return TaskData(
        source=DomainDataset(xs, ys, "source"),
        target=DomainDataset(xt, None, "target", yt),
        source_test=DomainDataset(xs_test, ys_test, "source"),
        target_test=DomainDataset(xt_test, None, "target", yt_test),
        n_classes=cfg.n_classes,
        image_shape=(cfg.grid, cfg.grid),
    )


class Batch(NamedTuple):
    x_src: np.ndarray
    y_src: np.ndarray
    x_tgt: np.ndarray


def steps_per_epoch(n_src: int, n_tgt: int, batch_size: int) -> int:
    return min(n_src, n_tgt) // batch_size


def paired_batches(source: DomainDataset, target: DomainDataset, batch_size: int,
                   rng: Rng) -> Iterator[Batch]:
    """One epoch of equal-sized source/target batches; the ragged tail is dropped.

    Both domains are reshuffled independently on every call.
    """
    if batch_size < 1 or batch_size > min(len(source), len(target)):
        raise ValueError(f"batch_size {batch_size} must be in [1, {min(len(source), len(target))}]")
    if source.labels is None:
        raise ValueError("source dataset has no labels")
    src_order = rng.permutation(len(source))
    tgt_order = rng.permutation(len(target))
    for i in range(steps_per_epoch(len(source), len(target), batch_size)):
        s = src_order[i * batch_size:(i + 1) * batch_size]
        t = tgt_order[i * batch_size:(i + 1) * batch_size]
        yield Batch(source.inputs[s], source.labels[s], target.inputs[t])


# CSV dump: x0..x{d-1},label,domain with label -1 when hidden.

def dump_csv(dataset: DomainDataset, path: str | Path, include_eval_labels: bool = False) -> Path:
    path = Path(path)
    if dataset.labels is not None:
        labels = dataset.labels
    elif include_eval_labels and dataset.has_eval_labels:
        labels = dataset.eval_labels
    else:
        labels = np.full(len(dataset), -1)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(dataset.dim)] + ["label", "domain"])
        for row, lab in zip(dataset.inputs, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab), dataset.domain])
    return path


def load_csv(path: str | Path) -> DomainDataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 2
    if header[:d] != [f"x{j}" for j in range(d)] or header[d:] != ["label", "domain"]:
        raise ValueError(f"{path}: unexpected header {header}")
    if not body:
        raise ValueError(f"{path}: no rows")
    domains = {r[-1] for r in body}
    if len(domains) != 1:
        raise ValueError(f"{path}: mixed domains {sorted(domains)}")
    domain = domains.pop()
    x = np.array([[float(v) for v in r[:d]] for r in body])
    labels = np.array([int(r[d]) for r in body])
    hidden = bool(np.all(labels == -1))
    if domain == "source":
        return DomainDataset(x, None if hidden else labels, "source")
    return DomainDataset(x, None, "target", None if hidden else labels)
