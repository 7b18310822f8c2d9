"""Training loops: MDAT, the DAT baseline, source-only and the ablation that
drops the target hinge from the decoder objective."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Rng, Tensor, backward
from .datasets import Batch, DomainDataset, TaskData, paired_batches, steps_per_epoch
from .losses import (
    LossValues,
    dat_losses,
    decoder_terms,
    extractor_terms,
    recon_mse,
    source_recon_objective,
    task_nll,
)
from .nn import (
    BundleSpecs,
    ModelBundle,
    SgdMomentum,
    feature_extract,
    init_bundle,
    predict_classes,
    reconstruct,
    toy_specs,
    zero_grad,
)

METHODS = ("mdat", "dat", "source_only", "arn_no_mdat")
LR_SCHEDULES = ("constant", "dann")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    method: str = "mdat"
    alpha: float = 0.02
    margin: float = 5.0
    lr: float = 0.01
    lr_schedule: str = "constant"
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 50
    seed: int = 1
    z_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (32,)

    def validate(self, allow_degenerate_margin: bool = False) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.method in ("mdat", "arn_no_mdat"):
            if self.margin < 0 or (self.margin == 0 and not allow_degenerate_margin):
                raise ConfigError(f"margin must be > 0 for {self.method}, got {self.margin}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.z_dim < 1 or any(h < 1 for h in self.hidden + self.disc_hidden):
            raise ConfigError("layer widths must be >= 1")
        return self

    def specs(self, d_in: int, n_classes: int) -> BundleSpecs:
        return toy_specs(d_in, n_classes, self.z_dim, self.hidden, self.disc_hidden)


LOG_COLUMNS = ("epoch", "task_nll", "recon_src", "recon_tgt", "hinge_tgt", "decoder_obj",
               "dat_domain", "src_acc", "tgt_acc", "seconds")


@dataclass
class EpochLog:
    epoch: int
    task_nll: float | None
    recon_src: float | None
    recon_tgt: float | None
    hinge_tgt: float | None
    decoder_objective: float | None
    dat_domain: float | None
    src_acc: float
    tgt_acc: float
    seconds: float

    def row(self, timing: bool = True) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return [str(self.epoch), fmt(self.task_nll), fmt(self.recon_src), fmt(self.recon_tgt),
                fmt(self.hinge_tgt), fmt(self.decoder_objective), fmt(self.dat_domain),
                fmt(self.src_acc), fmt(self.tgt_acc), fmt(self.seconds) if timing else ""]


def logs_to_csv(logs: list[EpochLog], timing: bool = False) -> str:
    """Render logs as CSV. Wall time is left blank unless ``timing`` is set,
    which keeps the file byte-reproducible for a fixed config and seed."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for log in logs:
        w.writerow(log.row(timing))
    return buf.getvalue()


def write_logs(logs: list[EpochLog], path: str | Path, timing: bool = False) -> Path:
    path = Path(path)
    path.write_text(logs_to_csv(logs, timing))
    return path


def read_logs(path: str | Path) -> list[EpochLog]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")

        def val(s):
            return None if s == "" else float(s)

        return [EpochLog(int(r["epoch"]), val(r["task_nll"]), val(r["recon_src"]),
                         val(r["recon_tgt"]), val(r["hinge_tgt"]), val(r["decoder_obj"]),
                         val(r["dat_domain"]), float(r["src_acc"]), float(r["tgt_acc"]),
                         val(r["seconds"]) or 0.0)
                for r in reader]


@dataclass
class TrainResult:
    bundle: ModelBundle
    logs: list[EpochLog]
    config: TrainConfig
    seed: int


@dataclass
class Optimizers:
    extractor: SgdMomentum  # theta_e and theta_y
    decoder: SgdMomentum
    discriminator: SgdMomentum

    @classmethod
    def create(cls, cfg: TrainConfig) -> "Optimizers":
        return cls(*(SgdMomentum(cfg.lr, cfg.momentum) for _ in range(3)))

    def set_lr(self, lr: float) -> None:
        for opt in (self.extractor, self.decoder, self.discriminator):
            opt.lr = lr


def dann_lambda(progress: float) -> float:
    """Progressive adversarial weight ``2 / (1 + exp(-10 p)) - 1``."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def dann_lr(lr: float, progress: float) -> float:
    return lr / (1.0 + 10.0 * progress) ** 0.75


def _guard(values: LossValues) -> LossValues:
    for name, v in values.as_dict().items():
        if v is not None and (not math.isfinite(v) or abs(v) > DIVERGENCE_LIMIT):
            raise DivergenceError(f"loss term {name} diverged: {v}")
    return values


def _run_phase(loss: Tensor, params: dict[str, Tensor], opt: SgdMomentum) -> None:
    zero_grad(params)
    backward(loss)
    opt.step(params)


def source_only_step(bundle: ModelBundle, batch: Batch, cfg: TrainConfig,
                     opts: Optimizers) -> LossValues:
    params = bundle.parameters("ey")
    nll = task_nll(bundle, batch.x_src, batch.y_src)
    _guard(LossValues(task_nll=nll.item()))
    _run_phase(nll, params, opts.extractor)
    return LossValues(task_nll=nll.item())


def _extractor_phase(bundle: ModelBundle, batch: Batch, cfg: TrainConfig,
                     opts: Optimizers) -> tuple[float, float | None]:
    terms = extractor_terms(batch.x_src, batch.y_src, batch.x_tgt, bundle, cfg.alpha)
    recon = None if terms.recon_tgt is None else terms.recon_tgt.item()
    _guard(LossValues(task_nll=terms.task_nll.item(), recon_tgt=recon))
    _run_phase(terms.objective, bundle.parameters("ey"), opts.extractor)
    return terms.task_nll.item(), recon


def _target_recon(bundle: ModelBundle, x_tgt: np.ndarray) -> float:
    x = Tensor(x_tgt)
    return recon_mse(x, reconstruct(bundle, feature_extract(bundle, x))).mean().item()


def mdat_step(bundle: ModelBundle, batch: Batch, cfg: TrainConfig,
              opts: Optimizers) -> LossValues:
    """Extractor/predictor update, then decoder update on a fresh forward pass."""
    nll, recon_tgt = _extractor_phase(bundle, batch, cfg, opts)
    dec = decoder_terms(batch.x_src, batch.x_tgt, bundle, cfg.margin)
    values = _guard(LossValues(
        task_nll=nll,
        recon_src=dec.recon_src.item(),
        recon_tgt=recon_tgt if recon_tgt is not None else dec.recon_tgt.item(),
        hinge_tgt=dec.hinge_tgt.item(),
        decoder_objective=dec.objective.item(),
    ))
    _run_phase(dec.objective, bundle.parameters("r"), opts.decoder)
    return values


def arn_no_mdat_step(bundle: ModelBundle, batch: Batch, cfg: TrainConfig,
                     opts: Optimizers) -> LossValues:
    """As :func:`mdat_step`, but the decoder only fits the source batch."""
    nll, recon_tgt = _extractor_phase(bundle, batch, cfg, opts)
    obj = source_recon_objective(batch.x_src, bundle)
    if recon_tgt is None:
        recon_tgt = _target_recon(bundle, batch.x_tgt)
    values = _guard(LossValues(task_nll=nll, recon_src=obj.item(), recon_tgt=recon_tgt,
                               decoder_objective=obj.item()))
    _run_phase(obj, bundle.parameters("r"), opts.decoder)
    return values


def dat_step(bundle: ModelBundle, batch: Batch, cfg: TrainConfig, opts: Optimizers,
             progress: float) -> LossValues:
    """Joint update of extractor, predictor and discriminator.

    The discriminator descends ``alpha * L_d``; through the reversal the
    extractor receives ``-alpha * lambda(p)`` times the same gradient.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    lam = dann_lambda(progress)
    nll = task_nll(bundle, batch.x_src, batch.y_src)
    domain, adv = dat_losses(batch.x_src, batch.x_tgt, bundle, lam)
    values = _guard(LossValues(task_nll=nll.item(), dat_domain=domain.item(),
                               extractor_adv=cfg.alpha * adv))
    params = bundle.parameters("eyd")
    zero_grad(params)
    backward(nll + cfg.alpha * domain)
    opts.extractor.step(bundle.parameters("ey"))
    opts.discriminator.step(bundle.group("d"))
    return values


def evaluate(bundle: ModelBundle, dataset: DomainDataset) -> float:
    """Argmax accuracy against the dataset's labels (eval labels for targets)."""
    truth = dataset.truth()
    if truth is None:
        raise ValueError("dataset has no labels to evaluate against")
    return float(np.mean(predict_classes(bundle, dataset.inputs) == truth))


def _mean(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def run_training(cfg: TrainConfig, data: TaskData, allow_degenerate_margin: bool = False,
                 bundle: ModelBundle | None = None) -> TrainResult:
    """Train on ``data`` (standardized on the fly) and log one record per epoch.

    Training paths only ever see sealed views of the target set; evaluation
    labels are read solely by :func:`evaluate` on the held-out splits.
    """
    cfg.validate(allow_degenerate_margin)
    data = data.standardized()
    source = data.source.for_training()
    target = data.target.for_training()
    if source.dim != target.dim:
        raise ValueError(f"source dim {source.dim} != target dim {target.dim}")
    init_rng, batch_rng = Rng(cfg.seed).split(2)
    if bundle is None:
        bundle = init_bundle(cfg.specs(source.dim, data.n_classes), init_rng)
    elif bundle.extractor.spec.d_in != source.dim:
        raise ValueError("bundle input dimension does not match the data")
    opts = Optimizers.create(cfg)
    n_steps = steps_per_epoch(len(source), len(target), cfg.batch_size)
    total = max(1, cfg.epochs * n_steps)
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        records: list[LossValues] = []
        for batch in paired_batches(source, target, cfg.batch_size, batch_rng):
            progress = step / total
            if cfg.lr_schedule == "dann":
                opts.set_lr(dann_lr(cfg.lr, progress))
            try:
                if cfg.method == "mdat":
                    rec = mdat_step(bundle, batch, cfg, opts)
                elif cfg.method == "arn_no_mdat":
                    rec = arn_no_mdat_step(bundle, batch, cfg, opts)
                elif cfg.method == "dat":
                    rec = dat_step(bundle, batch, cfg, opts, progress)
                else:
                    rec = source_only_step(bundle, batch, cfg, opts)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch} step {step}: {exc}") from exc
            records.append(rec)
            step += 1
        logs.append(EpochLog(
            epoch=epoch,
            task_nll=_mean([r.task_nll for r in records]),
            recon_src=_mean([r.recon_src for r in records]),
            recon_tgt=_mean([r.recon_tgt for r in records]),
            hinge_tgt=_mean([r.hinge_tgt for r in records]),
            decoder_objective=_mean([r.decoder_objective for r in records]),
            dat_domain=_mean([r.dat_domain for r in records]),
            src_acc=evaluate(bundle, data.source_test),
            tgt_acc=evaluate(bundle, data.target_test),
            seconds=time.perf_counter() - t0,
        ))
    return TrainResult(bundle, logs, cfg, cfg.seed)
