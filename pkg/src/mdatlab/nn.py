"""MLP building blocks for the extractor, label predictor, decoder and domain
discriminator, plus classical-momentum SGD and a text checkpoint format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Rng, ShapeError, Tensor, tensor_op

ACTIVATIONS = ("relu", "sigmoid", "identity")
GROUPS = ("e", "y", "r", "d")


class SpecError(ValueError):
    pass


class MissingGradError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activations: tuple[str, ...] | None = None
    head: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise SpecError("an MLP needs at least one layer (two widths)")
        if any(w < 1 for w in self.widths):
            raise SpecError(f"all widths must be >= 1, got {self.widths}")
        n_hidden = len(self.widths) - 2
        acts = self.activations
        if acts is None:
            acts = ("relu",) * n_hidden
        acts = tuple(acts)
        if len(acts) != n_hidden:
            raise SpecError(f"expected {n_hidden} hidden activations, got {len(acts)}")
        for a in acts:
            if a not in ACTIVATIONS:
                raise SpecError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", acts)
        if self.head not in ("logits", "linear"):
            raise SpecError(f"unknown head kind {self.head!r}")

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]


class Mlp:
    """Dense layers ``x @ W + b`` with the activations named in the MlpSpec."""

    def __init__(self, spec: MlpSpec, prefix: str, rng: Rng | None = None):
        self.spec = spec
        self.prefix = prefix
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                s = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-s, s, size=(fan_in, fan_out))
            self.layers.append((
                Tensor(w, requires_grad=True, name=f"{prefix}.{i}.weight"),
                Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.{i}.bias"),
            ))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.spec.d_in:
            raise ShapeError(f"{self.prefix}: expected batch x {self.spec.d_in}, got {x.shape}")
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i < last:
                act = self.spec.activations[i]
                if act == "relu":
                    h = h.relu()
                elif act == "sigmoid":
                    h = h.sigmoid()
        return h

    def parameters(self) -> Iterator[Tensor]:
        for w, b in self.layers:
            yield w
            yield b

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}


@dataclass(frozen=True)
class BundleSpecs:
    extractor: MlpSpec
    predictor: MlpSpec
    decoder: MlpSpec
    discriminator: MlpSpec | None = None


def toy_specs(d_in: int, n_classes: int, d_z: int = 16, hidden: tuple[int, ...] = (64, 64),
              disc_hidden: tuple[int, ...] = (32,)) -> BundleSpecs:
    """Default architecture; the decoder mirrors the extractor."""
    return BundleSpecs(
        extractor=MlpSpec((d_in, *hidden, d_z)),
        predictor=MlpSpec((d_z, n_classes), head="logits"),
        decoder=MlpSpec((d_z, *reversed(hidden), d_in)),
        discriminator=MlpSpec((d_z, *disc_hidden, 1), head="logits"),
    )


@dataclass
class ModelBundle:
    extractor: Mlp
    predictor: Mlp
    decoder: Mlp
    discriminator: Mlp | None = None

    def group(self, name: str) -> dict[str, Tensor]:
        net = {"e": self.extractor, "y": self.predictor, "r": self.decoder,
               "d": self.discriminator}[name]
        if net is None:
            raise SpecError(f"bundle has no parameter group {name!r}")
        return net.named_parameters()

    def parameters(self, groups: str = "eyrd") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for g in groups:
            if g == "d" and self.discriminator is None:
                continue
            out.update(self.group(g))
        return out

    @property
    def specs(self) -> BundleSpecs:
        return BundleSpecs(self.extractor.spec, self.predictor.spec, self.decoder.spec,
                           None if self.discriminator is None else self.discriminator.spec)


def validate_specs(specs: BundleSpecs) -> None:
    e, y, r = specs.extractor, specs.predictor, specs.decoder
    if r.d_in != e.d_out:
        raise SpecError(f"decoder input {r.d_in} != extractor output {e.d_out}")
    if r.d_out != e.d_in:
        raise SpecError(f"decoder output {r.d_out} != extractor input {e.d_in}")
    if y.d_in != e.d_out:
        raise SpecError(f"predictor input {y.d_in} != extractor output {e.d_out}")
    if y.d_out < 2:
        raise SpecError("predictor needs at least two classes")
    d = specs.discriminator
    if d is not None and (d.d_in != e.d_out or d.d_out != 1):
        raise SpecError(f"discriminator must map {e.d_out} -> 1, got {d.widths}")


def init_bundle(specs: BundleSpecs, rng: Rng | None) -> ModelBundle:
    """Glorot-uniform weights, zero biases. ``rng=None`` gives all-zero weights.

    Networks are initialised in the fixed order e, y, r, d from one stream, so
    the first three groups do not depend on whether a discriminator exists.
    """
    validate_specs(specs)
    return ModelBundle(
        extractor=Mlp(specs.extractor, "e", rng),
        predictor=Mlp(specs.predictor, "y", rng),
        decoder=Mlp(specs.decoder, "r", rng),
        discriminator=None if specs.discriminator is None else Mlp(specs.discriminator, "d", rng),
    )


def feature_extract(bundle: ModelBundle, x: Tensor) -> Tensor:
    return bundle.extractor(x)


def predict(bundle: ModelBundle, z: Tensor) -> Tensor:
    return bundle.predictor(z)


def reconstruct(bundle: ModelBundle, z: Tensor) -> Tensor:
    return bundle.decoder(z)


def discriminate(bundle: ModelBundle, z: Tensor) -> Tensor:
    if bundle.discriminator is None:
        raise SpecError("this bundle has no discriminator parameters")
    return bundle.discriminator(z)


def predict_classes(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    logits = predict(bundle, feature_extract(bundle, Tensor(x)))
    return np.argmax(logits.data, axis=1)


@dataclass
class SgdMomentum:
    """Classical momentum: ``v <- mu*v - lr*g``; ``w <- w + v``."""

    lr: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise MissingGradError(f"no gradient for {name}; run backward first")
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"gradient shape {p.grad.shape} != {p.data.shape} for {name}")
        for name, p in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v - self.lr * p.grad
            self.velocity[name] = v
            p.data += v


def sgd_step(state: SgdMomentum, params: dict[str, Tensor]) -> None:
    state.step(params)


def zero_grad(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# Checkpoint format (text, one item per line):
#   mdatlab-checkpoint 1
#   spec <group> <w0,w1,...> <act0,act1,...|-> <head>      one per present group
#   param <name> <d0,d1,...> <v0> <v1> ...                 row-major, repr() floats
# Parameters are listed group by group (e, y, r, d), each layer weight then bias.

def save_checkpoint(bundle: ModelBundle, path: str | Path) -> Path:
    path = Path(path)
    lines = ["mdatlab-checkpoint 1"]
    specs = bundle.specs
    for g, spec in zip(GROUPS, (specs.extractor, specs.predictor, specs.decoder,
                                specs.discriminator)):
        if spec is None:
            continue
        acts = ",".join(spec.activations) or "-"
        lines.append(f"spec {g} {','.join(map(str, spec.widths))} {acts} {spec.head}")
    for name, p in bundle.parameters().items():
        shape = ",".join(map(str, p.shape))
        values = " ".join(repr(float(v)) for v in p.data.reshape(-1))
        lines.append(f"param {name} {shape} {values}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_checkpoint(path: str | Path) -> ModelBundle:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "mdatlab-checkpoint 1":
        raise ValueError(f"{path}: not an mdatlab checkpoint")
    specs: dict[str, MlpSpec] = {}
    values: dict[str, tuple[tuple[int, ...], np.ndarray]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "spec":
            _, g, widths, acts, head = parts
            act_t = () if acts == "-" else tuple(acts.split(","))
            specs[g] = MlpSpec(tuple(int(w) for w in widths.split(",")), act_t, head)
        elif parts[0] == "param":
            name, shape = parts[1], tuple(int(d) for d in parts[2].split(","))
            values[name] = (shape, np.array([float(v) for v in parts[3:]]))
        else:
            raise ValueError(f"{path}:{lineno}: unknown record {parts[0]!r}")
    bundle = init_bundle(BundleSpecs(specs["e"], specs["y"], specs["r"], specs.get("d")), None)
    params = bundle.parameters()
    if set(params) != set(values):
        raise ValueError(f"{path}: parameter names do not match the stored specs")
    for name, p in params.items():
        shape, flat = values[name]
        if shape != p.shape or flat.size != p.data.size:
            raise ValueError(f"{path}: shape mismatch for {name}")
        p.data[...] = flat.reshape(shape)
    return bundle
