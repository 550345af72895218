"""Composite data + physics loss, Adam, and a deterministic training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffops
from .fieldgrid import B_SLICE, E_SLICE, EPS0, TARGET_CHANNELS, SampleRecord
from .unet import ArchSpec, Checkpoint, UNetParams, backward, forward, init_params, save_checkpoint

log = logging.getLogger(__name__)

LOSS_TERMS = ("mse", "gauss", "faraday", "ampere")


class NumericalAbort(FloatingPointError):
    """A loss term became non-finite during training."""

    def __init__(self, term: str, step: int):
        self.term, self.step = term, step
        super().__init__(f"non-finite {term!r} loss at step {step}")


@dataclass(frozen=True)
class LossSpec:
    lambda_gauss: float = 1.0
    lambda_faraday: float = 0.0
    lambda_ampere: float = 0.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0")


@dataclass(frozen=True)
class OptimSpec:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    max_steps: int = 100
    seed: int = 0
    shuffle: bool = True
    checkpoint_every: int = 0
    log_every: int = 10

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class PhysicsContext:
    """Per-sample quantities the physics terms need besides the prediction."""

    spacing: tuple
    omega: float
    permittivity: np.ndarray | float = EPS0
    conductivity: np.ndarray | float = 0.0

    @classmethod
    def from_record(cls, rec: SampleRecord) -> "PhysicsContext":
        eps, sigma = physical_medium(rec)
        return cls(rec.geom.spacing, rec.omega, eps, sigma)


def physical_medium(rec: SampleRecord):
    """Permittivity and conductivity that the target fields actually obey.

    Oracle samples record their homogeneous background medium in ``meta``; the
    subject ellipsoid in the material grids is an input feature only.
    """
    medium = rec.meta.get("medium")
    if medium is not None:
        return EPS0 * medium["eps_r"], float(medium["sigma"])
    m = rec.materials
    return m.permittivity.astype(np.float64), m.conductivity.astype(np.float64)


def composite_loss(prediction: np.ndarray, target: np.ndarray, ctx: PhysicsContext,
                   spec: LossSpec = LossSpec(), need_grad: bool = False):
    """Data MSE plus weighted Maxwell residual penalties on the predicted fields.

    Returns ``(total, breakdown)`` or ``(total, breakdown, grad)`` where
    ``grad`` is d total / d prediction.  The breakdown holds unweighted term
    values; terms with zero weight are still reported but never enter the
    total or its gradient.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape or prediction.shape[0] != len(TARGET_CHANNELS):
        raise ValueError(f"prediction {prediction.shape} and target {target.shape} "
                         f"must both be ({len(TARGET_CHANNELS)}, nx, ny, nz)")
    diff = prediction - target
    mse = float(np.mean(diff ** 2))
    E6, B6 = prediction[E_SLICE], prediction[B_SLICE]
    h = ctx.spacing

    gauss, g_gauss = diffops.gauss_loss_and_grad(B6, h)
    faraday, gE_f, gB_f = diffops.faraday_loss_and_grad(E6, B6, h, ctx.omega)
    ampere, gE_a, gB_a = diffops.ampere_loss_and_grad(
        E6, B6, h, ctx.omega, ctx.permittivity, ctx.conductivity)

    total = mse
    if spec.lambda_gauss:
        total += spec.lambda_gauss * gauss
    if spec.lambda_faraday:
        total += spec.lambda_faraday * faraday
    if spec.lambda_ampere:
        total += spec.lambda_ampere * ampere
    breakdown = {"mse": mse, "gauss": gauss, "faraday": faraday, "ampere": ampere,
                 "total": total}
    if not need_grad:
        return total, breakdown

    grad = diff * (2.0 / diff.size)
    if spec.lambda_gauss:
        grad[B_SLICE] += spec.lambda_gauss * g_gauss
    if spec.lambda_faraday:
        grad[E_SLICE] += spec.lambda_faraday * gE_f
        grad[B_SLICE] += spec.lambda_faraday * gB_f
    if spec.lambda_ampere:
        grad[E_SLICE] += spec.lambda_ampere * gE_a
        grad[B_SLICE] += spec.lambda_ampere * gB_a
    return total, breakdown, grad


def adam_step(params: np.ndarray, grads: np.ndarray, m: np.ndarray, v: np.ndarray,
              step: int, optim: OptimSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update; ``step`` is 1 for the first update."""
    m = optim.beta1 * m + (1 - optim.beta1) * grads
    v = optim.beta2 * v + (1 - optim.beta2) * grads * grads
    m_hat = m / (1 - optim.beta1 ** step)
    v_hat = v / (1 - optim.beta2 ** step)
    return params - optim.lr * m_hat / (np.sqrt(v_hat) + optim.eps), m, v


def zero_baseline(sample: SampleRecord) -> np.ndarray:
    return np.zeros((len(TARGET_CHANNELS),) + sample.geom.shape)


@dataclass(eq=False)
class TrainState:
    params: UNetParams
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, arch: ArchSpec, seed: int) -> "TrainState":
        p = init_params(arch, seed)
        return cls(p, np.zeros_like(p.vector), np.zeros_like(p.vector))

    def to_checkpoint(self, extra: dict | None = None) -> Checkpoint:
        return Checkpoint(self.params.copy(), self.step, (self.m.copy(), self.v.copy()), extra)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TrainState":
        if ckpt.moments is None:
            raise ValueError("checkpoint carries no optimizer state; cannot resume")
        history = list((ckpt.extra or {}).get("history", []))
        return cls(ckpt.params.copy(), ckpt.moments[0].copy(), ckpt.moments[1].copy(),
                   ckpt.step, history)


def batch_indices(step: int, n: int, optim: OptimSpec) -> list[int]:
    """Sample indices for 0-based ``step``; a pure function of (step, n, seed)."""
    out = []
    for pos in range(step * optim.batch_size, (step + 1) * optim.batch_size):
        epoch, i = divmod(pos, n)
        if optim.shuffle:
            perm = np.random.default_rng([optim.seed, epoch]).permutation(n)
            out.append(int(perm[i]))
        else:
            out.append(i)
    return out


@dataclass
class PreparedSample:
    x: np.ndarray
    y: np.ndarray
    ctx: PhysicsContext

    @classmethod
    def from_record(cls, rec: SampleRecord) -> "PreparedSample":
        return cls(rec.input_stack(), rec.target_stack().astype(np.float64),
                   PhysicsContext.from_record(rec))


def loss_and_grad(params: UNetParams, batch: Sequence[PreparedSample], spec: LossSpec
                  ) -> tuple[dict, np.ndarray]:
    """Batch-averaged loss breakdown and parameter gradient, reduced in batch order."""
    grad = np.zeros_like(params.vector)
    acc = dict.fromkeys(LOSS_TERMS + ("total",), 0.0)
    for s in batch:
        pred, tape = forward(params, s.x)
        _, parts, g_pred = composite_loss(pred, s.y, s.ctx, spec, need_grad=True)
        grad += backward(tape, g_pred)
        for k in acc:
            acc[k] += parts[k]
    n = len(batch)
    return {k: v / n for k, v in acc.items()}, grad / n


def _check_finite(parts: dict, step: int, spec: LossSpec) -> None:
    weights = {"mse": 1.0, "gauss": spec.lambda_gauss, "faraday": spec.lambda_faraday,
               "ampere": spec.lambda_ampere}
    for term in LOSS_TERMS:
        if weights[term] and not math.isfinite(parts[term]):
            raise NumericalAbort(term, step)


def train(samples: Sequence[SampleRecord] | Sequence[PreparedSample], spec: LossSpec,
          optim: OptimSpec, arch: ArchSpec | None = None, *, init_seed: int | None = None,
          state: TrainState | None = None, checkpoint_dir=None,
          on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Train until ``optim.max_steps`` total steps; resumes from ``state`` if given.

    Each step records ``{step, mse, gauss, faraday, ampere, total}`` measured
    on the batch before the update.
    """
    if not samples:
        raise ValueError("training set is empty")
    prepared = [s if isinstance(s, PreparedSample) else PreparedSample.from_record(s)
                for s in samples]
    if state is None:
        if arch is None:
            raise ValueError("arch is required when not resuming")
        state = TrainState.fresh(arch, optim.seed if init_seed is None else init_seed)
    params = state.params
    n = len(prepared)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    while state.step < optim.max_steps:
        batch = [prepared[i] for i in batch_indices(state.step, n, optim)]
        parts, grad = loss_and_grad(params, batch, spec)
        _check_finite(parts, state.step, spec)
        record = {"step": state.step, **parts}
        state.history.append(record)
        if on_step:
            on_step(record)
        if optim.log_every and state.step % optim.log_every == 0:
            log.info("step %d total %.6g mse %.6g gauss %.6g", state.step, parts["total"],
                     parts["mse"], parts["gauss"])
        vec, state.m, state.v = adam_step(params.vector, grad, state.m, state.v,
                                          state.step + 1, optim)
        params = UNetParams(params.arch, vec, params.seed)
        state.params = params
        state.step += 1
        if ckpt_dir and optim.checkpoint_every and state.step % optim.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"ckpt_{state.step:06d}.emw",
                            state.to_checkpoint(checkpoint_extra(spec, optim, state)))
    return state


def checkpoint_extra(spec: LossSpec, optim: OptimSpec, state: TrainState) -> dict:
    return {"loss": asdict(spec), "optim": asdict(optim), "history": state.history}


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec) + "\n")


def predict(params: UNetParams, rec: SampleRecord) -> np.ndarray:
    return forward(params, rec.input_stack())[0]
