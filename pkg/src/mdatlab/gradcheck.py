"""Finite-difference suite over every training objective.

Each objective is checked on random 4-sample batches for several seeds,
against the parameter groups it trains. The DAT domain loss passes its
extractor gradient through a reversal layer, so that group is compared
against ``-lambda`` times the numerical derivative.
"""

from __future__ import annotations

from typing import Callable, Iterable

from .autodiff import GradCheckReport, Rng, Tensor, finite_diff_check
from .losses import (
    dat_losses,
    decoder_objective,
    extractor_objective,
    recon_mse,
    source_recon_objective,
    task_nll,
)
from .nn import ModelBundle, feature_extract, init_bundle, reconstruct, toy_specs

D_IN, N_CLASSES, BATCH = 3, 3, 4
ALPHA, MARGIN, LAMBDA = 0.3, 1.0, 0.6


def _small_bundle(rng: Rng) -> ModelBundle:
    return init_bundle(toy_specs(D_IN, N_CLASSES, d_z=4, hidden=(6,), disc_hidden=(5,)), rng)


def _objectives(bundle: ModelBundle, x_src, y_src, x_tgt) -> list[tuple[str, Callable[[], Tensor], str, dict | None]]:
    def target_recon() -> Tensor:
        return recon_mse(x_tgt, reconstruct(bundle, feature_extract(bundle, Tensor(x_tgt)))).mean()

    reverse = {name: -LAMBDA for name in bundle.group("e")}
    return [
        ("task_nll", lambda: task_nll(bundle, x_src, y_src), "ey", None),
        ("target_recon", target_recon, "er", None),
        ("decoder_objective", lambda: decoder_objective(x_src, x_tgt, bundle, MARGIN), "r", None),
        ("source_recon", lambda: source_recon_objective(x_src, bundle), "r", None),
        ("extractor_objective",
         lambda: extractor_objective(x_src, y_src, x_tgt, bundle, ALPHA), "ey", None),
        ("dat_domain", lambda: dat_losses(x_src, x_tgt, bundle, LAMBDA)[0], "ed", reverse),
    ]


def gradcheck_suite(seeds: Iterable[int] = range(10), step: float = 1e-5,
                    tolerance: float = 1e-4) -> GradCheckReport:
    report = GradCheckReport(tolerance=tolerance)
    for seed in seeds:
        init_rng, data_rng = Rng(seed).split(2)
        bundle = _small_bundle(init_rng)
        x_src = data_rng.normal(size=(BATCH, D_IN))
        y_src = data_rng.integers(0, N_CLASSES, size=BATCH)
        # the target batch sits near the margin so the hinge is active for some samples
        x_tgt = data_rng.normal(size=(BATCH, D_IN)) * 1.5 + 0.5
        for name, fn, groups, scale in _objectives(bundle, x_src, y_src, x_tgt):
            sub = finite_diff_check(fn, bundle.parameters(groups), step=step,
                                    tolerance=tolerance, grad_scale=scale)
            report.merge(sub, prefix=f"seed{seed}/{name}/")
    return report


if __name__ == "__main__":
    r = gradcheck_suite()
    print(f"max rel error {r.max_rel_error:.3e}, passed={r.passed}")
