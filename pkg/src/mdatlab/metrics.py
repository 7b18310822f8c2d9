"""Diagnostics on trained bundles: proxy A-distance, equilibrium gap, and the
boundary / embedding / reconstruction exports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .autodiff import Tensor
from .datasets import DomainDataset, Standardizer
from .losses import decoder_domain_label, recon_mse
from .nn import ModelBundle, feature_extract, predict_classes, reconstruct
from .trainer import EpochLog

DIVERGENCE_KINDS = ("decoder_margin", "fresh_logistic")


@dataclass(frozen=True)
class DivergenceReport:
    error: float
    distance: float
    kind: str


def proxy_a_distance(error: float) -> float:
    return 2.0 * (1.0 - 2.0 * error)


def _embed(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    return feature_extract(bundle, Tensor(x)).data


def _recon_losses(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    xt = Tensor(x)
    return recon_mse(xt, reconstruct(bundle, feature_extract(bundle, xt))).data


def proxy_divergence(bundle: ModelBundle, src: DomainDataset, tgt: DomainDataset,
                     kind: str = "fresh_logistic", margin: float = 1.0,
                     seed: int = 0) -> DivergenceReport:
    """Domain-classification error and the proxy A-distance ``2(1 - 2 eps)``.

    ``decoder_margin`` scores the decoder-derived labels (1 = source-like)
    directly. ``fresh_logistic`` fits a logistic probe on the first half of each
    domain's embeddings and measures error on the second half; the bundle is
    only read.
    """
    if len(src) != len(tgt):
        raise ValueError(f"need equal sample counts, got {len(src)} and {len(tgt)}")
    if kind == "decoder_margin":
        h_src = decoder_domain_label(_recon_losses(bundle, src.inputs), margin)
        h_tgt = decoder_domain_label(_recon_losses(bundle, tgt.inputs), margin)
        error = float(np.mean(np.concatenate([h_src != 1, h_tgt != 0])))
    elif kind == "fresh_logistic":
        if len(src) < 4:
            raise ValueError("fresh_logistic needs at least 4 samples per domain")
        z_src, z_tgt = _embed(bundle, src.inputs), _embed(bundle, tgt.inputs)
        rng = np.random.default_rng(seed)
        perm_s, perm_t = rng.permutation(len(src)), rng.permutation(len(tgt))
        half = len(src) // 2
        train_x = np.concatenate([z_src[perm_s[:half]], z_tgt[perm_t[:half]]])
        test_x = np.concatenate([z_src[perm_s[half:]], z_tgt[perm_t[half:]]])
        train_y = np.r_[np.zeros(half), np.ones(half)]
        test_y = np.r_[np.zeros(len(src) - half), np.ones(len(tgt) - half)]
        scaler = StandardScaler().fit(train_x)
        probe = LogisticRegression(max_iter=1000).fit(scaler.transform(train_x), train_y)
        error = float(np.mean(probe.predict(scaler.transform(test_x)) != test_y))
    else:
        raise ValueError(f"unknown divergence kind {kind!r}; choose from {DIVERGENCE_KINDS}")
    return DivergenceReport(error, proxy_a_distance(error), kind)


def equilibrium_gap(logs: Sequence[EpochLog], m: float) -> float:
    """Relative distance of the final decoder objective from the margin."""
    if not logs:
        raise ValueError("need at least one epoch")
    final = logs[-1].decoder_objective
    if final is None:
        raise ValueError("logs carry no decoder objective")
    return abs(final - m) / m


def boundary_grid(bundle: ModelBundle, bounds=(-2.0, 3.0, -1.5, 2.0), resolution: int = 100,
                  standardizer: Standardizer | None = None) -> np.ndarray:
    """Predicted class on a ``resolution x resolution`` lattice over ``bounds``.

    Rows are ``(x0, x1, class)`` in raw input coordinates; ``standardizer``
    maps them into the space the bundle was trained in.
    """
    if bundle.extractor.spec.d_in != 2:
        raise ValueError(f"boundary grid needs 2-D inputs, bundle takes {bundle.extractor.spec.d_in}")
    x_lo, x_hi, y_lo, y_hi = bounds
    gx, gy = np.meshgrid(np.linspace(x_lo, x_hi, resolution), np.linspace(y_lo, y_hi, resolution))
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    inputs = pts if standardizer is None else standardizer.transform(pts)
    return np.column_stack([pts, predict_classes(bundle, inputs)])


def export_embeddings(bundle: ModelBundle, datasets: Sequence[DomainDataset]) -> list[list]:
    """Rows ``z0..z{d-1}, domain, label`` (label -1 where none is known)."""
    rows: list[list] = []
    for ds in datasets:
        z = _embed(bundle, ds.inputs)
        labels = ds.labels if ds.labels is not None else (
            ds.eval_labels if ds.has_eval_labels else np.full(len(ds), -1))
        for zi, lab in zip(z, labels):
            rows.append([*map(float, zi), ds.domain, int(lab)])
    return rows


def write_boundary_csv(grid: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x0", "x1", "class"])
        for x0, x1, c in grid:
            w.writerow([repr(float(x0)), repr(float(x1)), int(c)])
    return path


def write_embeddings_csv(rows: list[list], path: str | Path) -> Path:
    path = Path(path)
    d = len(rows[0]) - 2 if rows else 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"z{j}" for j in range(d)] + ["domain", "label"])
        for row in rows:
            w.writerow([repr(v) for v in row[:d]] + row[d:])
    return path


def to_pixels(x: np.ndarray, standardizer: Standardizer | None = None) -> np.ndarray:
    """Map [0, 1] intensities (after undoing standardization) to uint8."""
    raw = x if standardizer is None else standardizer.inverse(x)
    return np.clip(np.rint(raw * 255.0), 0, 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path: str | Path) -> Path:
    """Plain (P2) 8-bit PGM."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if img.min() < 0 or img.max() > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    path = Path(path)
    h, w = img.shape
    body = "\n".join(" ".join(str(int(v)) for v in row) for row in img)
    path.write_text(f"P2\n{w} {h}\n255\n{body}\n")
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens.extend(line.split("#", 1)[0].split())
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if pixels.size != w * h or pixels.max(initial=0) > maxval:
        raise ValueError(f"{path}: bad pixel data")
    return pixels.reshape(h, w).astype(np.uint8)


def reconstruct_inputs(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    xt = Tensor(x)
    return reconstruct(bundle, feature_extract(bundle, xt)).data


def export_reconstructions(bundle: ModelBundle, samples: np.ndarray, out_dir: str | Path,
                           image_shape: tuple[int, int],
                           standardizer: Standardizer | None = None,
                           prefix: str = "recon") -> list[Path]:
    """Write ``{prefix}_{i:04d}.pgm`` for every reconstructed sample."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recon = reconstruct_inputs(bundle, samples)
    paths = []
    for i, row in enumerate(to_pixels(recon, standardizer)):
        paths.append(write_pgm(row.reshape(image_shape), out_dir / f"{prefix}_{i:04d}.pgm"))
    return paths


def mean_intensity(x: np.ndarray, standardizer: Standardizer | None = None) -> float:
    raw = x if standardizer is None else standardizer.inverse(x)
    return float(np.mean(np.clip(raw, 0.0, 1.0)))
