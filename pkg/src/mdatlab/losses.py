"""Objectives of the adversarial reconstruction game and the DAT baseline.

Dataset sums are implemented as batch means so that ``alpha`` and ``m`` do not
depend on the batch size. The per-sample reconstruction loss is the mean (not
the sum) of squared errors over input features.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, ShapeError, bce_with_logits, frozen, grad_reverse, log_softmax_nll
from .nn import ModelBundle, discriminate, feature_extract, predict, reconstruct


@dataclass
class LossValues:
    """Batch (or epoch-mean) loss terms. ``None`` marks a term the method lacks."""

    task_nll: float | None = None
    recon_src: float | None = None
    recon_tgt: float | None = None
    hinge_tgt: float | None = None
    decoder_objective: float | None = None
    extractor_adv: float | None = None
    dat_domain: float | None = None

    def as_dict(self) -> dict[str, float | None]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def recon_mse(x, x_hat: Tensor) -> Tensor:
    """Per-sample reconstruction loss, shape ``(batch,)``."""
    x = _as_tensor(x)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    return (x_hat - x).square().mean(axis=-1)


def margin_hinge(value, m: float) -> Tensor:
    """``max(0, m - value)``, elementwise."""
    if m < 0:
        raise ValueError(f"margin must be non-negative, got {m}")
    return (m - _as_tensor(value)).relu()


def task_nll(bundle: ModelBundle, x, y) -> Tensor:
    return log_softmax_nll(predict(bundle, feature_extract(bundle, _as_tensor(x))), y)


def _check_batch(x, what: str) -> None:
    if np.shape(x)[0] == 0:
        raise ShapeError(f"empty {what} batch")


class DecoderTerms(NamedTuple):
    objective: Tensor
    recon_src: Tensor
    recon_tgt: Tensor
    hinge_tgt: Tensor


def decoder_terms(x_src, x_tgt, bundle: ModelBundle, m: float) -> DecoderTerms:
    _check_batch(x_src, "source")
    _check_batch(x_tgt, "target")
    x_src, x_tgt = _as_tensor(x_src), _as_tensor(x_tgt)
    # the extractor is a constant in the decoder's phase
    with frozen(bundle.extractor.parameters()):
        z_src = feature_extract(bundle, x_src)
        z_tgt = feature_extract(bundle, x_tgt)
    lr_src = recon_mse(x_src, reconstruct(bundle, z_src)).mean()
    lr_tgt_each = recon_mse(x_tgt, reconstruct(bundle, z_tgt))
    hinge = margin_hinge(lr_tgt_each, m).mean()
    return DecoderTerms(lr_src + hinge, lr_src, lr_tgt_each.mean(), hinge)


def decoder_objective(x_src, x_tgt, bundle: ModelBundle, m: float) -> Tensor:
    """Mean source reconstruction loss plus mean target hinge ``[m - L_r]^+``."""
    return decoder_terms(x_src, x_tgt, bundle, m).objective


def source_recon_objective(x_src, bundle: ModelBundle) -> Tensor:
    """Decoder objective with the target hinge removed (ablation)."""
    _check_batch(x_src, "source")
    x_src = _as_tensor(x_src)
    with frozen(bundle.extractor.parameters()):
        z = feature_extract(bundle, x_src)
    return recon_mse(x_src, reconstruct(bundle, z)).mean()


class ExtractorTerms(NamedTuple):
    objective: Tensor
    task_nll: Tensor
    recon_tgt: Tensor | None


def extractor_terms(x_src, y_src, x_tgt, bundle: ModelBundle, alpha: float) -> ExtractorTerms:
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    _check_batch(x_src, "source")
    _check_batch(x_tgt, "target")
    nll = task_nll(bundle, x_src, y_src)
    if alpha == 0:
        return ExtractorTerms(nll, nll, None)
    x_tgt = _as_tensor(x_tgt)
    with frozen(bundle.decoder.parameters()):
        lr_tgt = recon_mse(x_tgt, reconstruct(bundle, feature_extract(bundle, x_tgt))).mean()
    return ExtractorTerms(nll + alpha * lr_tgt, nll, lr_tgt)


def extractor_objective(x_src, y_src, x_tgt, bundle: ModelBundle, alpha: float) -> Tensor:
    """Source NLL plus ``alpha`` times mean target reconstruction loss.

    With ``alpha == 0`` the target term is skipped entirely, so the result is
    the source-only objective itself.
    """
    return extractor_terms(x_src, y_src, x_tgt, bundle, alpha).objective


def dat_losses(x_src, x_tgt, bundle: ModelBundle, lam: float) -> tuple[Tensor, float]:
    """Domain cross-entropy (source=0, target=1) behind a gradient reversal.

    Backpropagating the returned loss trains the discriminator to minimise it,
    while the extractor receives ``-lam`` times its gradient. The second value
    is the extractor's effective adversarial term, ``-lam * L_d``.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    _check_batch(x_src, "source")
    _check_batch(x_tgt, "target")
    x = Tensor(np.concatenate([np.asarray(getattr(x_src, "data", x_src)),
                               np.asarray(getattr(x_tgt, "data", x_tgt))]))
    n_src = np.shape(x_src)[0] if not isinstance(x_src, Tensor) else x_src.shape[0]
    domains = np.zeros(x.shape[0])
    domains[n_src:] = 1.0
    z = grad_reverse(feature_extract(bundle, x), lam)
    loss = bce_with_logits(discriminate(bundle, z), domains)
    return loss, -lam * loss.item()


def decoder_domain_label(recon_loss, m: float):
    """Domain guess from reconstruction loss: 1 = source-like, 0 = target-like.

    Thresholds the hinge at ``m/2`` (for ``m = 1`` this is ``ceil([1-L]^+ - 0.5)``);
    the tie at exactly ``m/2`` goes to 0. Works on scalars and arrays.
    """
    if m <= 0:
        raise ValueError(f"margin must be positive, got {m}")
    hinge = np.maximum(0.0, m - np.asarray(recon_loss, dtype=np.float64))
    labels = (hinge > m / 2).astype(np.int64)
    return int(labels) if labels.ndim == 0 else labels
