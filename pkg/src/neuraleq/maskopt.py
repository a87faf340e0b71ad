"""Per-input additive mask optimization against the learned scorer.

For an input log-magnitude grid x, find a mask m minimizing

    score(x + m) + alpha * sum(m**2) + beta * var(m)

by plain gradient descent. Because the transformed grid is x + m, the
proximity term ||x - (x + m)||^2 is exactly ||m||^2. Starting from a
sum of smoothed rectangular blocks keeps the solution smooth instead of
drifting into the noise-like perturbations an unconstrained, randomly
initialised search finds.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .dsp import Mask, Spectrogram
from .errors import BlockTooLarge, NonFiniteObjective, ShapeMismatch
from .gradcheck import GradCheckReport, check_function, crosses_kink
from .scorer import ScorerModel

log = logging.getLogger(__name__)

MAX_HALVINGS = 20


@dataclass(frozen=True)
class BlockInitSpec:
    n_blocks: int = 24
    width_range: tuple[int, int] = (20, 60)  # frames
    height_range: tuple[int, int] = (16, 48)  # bins
    gain_range: tuple[float, float] = (-0.1, 0.1)
    smoothing_kernel: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")
        for name in ("width_range", "height_range", "gain_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty")
        if self.width_range[0] < 1 or self.height_range[0] < 1:
            raise ValueError("block sizes must be >= 1")
        k = self.smoothing_kernel
        if k < 1 or k % 2 == 0:
            raise ValueError("smoothing_kernel must be an odd integer >= 1")


@dataclass(frozen=True)
class GaussianInit:
    sigma: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class ZerosInit:
    pass


InitMode = Union[BlockInitSpec, GaussianInit, ZerosInit]


@dataclass(frozen=True)
class OptimConfig:
    alpha: float = 1e-4
    beta: float = 1e-2
    learning_rate: float = 10.0
    max_iters: int = 2000
    target_score: float = 0.2
    init: InitMode = field(default_factory=BlockInitSpec)

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if not 0.0 < self.target_score < 1.0:
            raise ValueError("target_score must lie in (0, 1)")


@dataclass(frozen=True)
class ObjectiveTerms:
    value: float
    score: float
    proximity: float
    variance: float


@dataclass
class MaskOptResult:
    mask: Mask
    trajectory: list[ObjectiveTerms]
    iterations_run: int
    stopped_reason: str  # target_reached | max_iters | stalled
    initial: ObjectiveTerms

    @property
    def final(self) -> ObjectiveTerms:
        return self.trajectory[-1] if self.trajectory else self.initial


def box_smooth(values: np.ndarray, k: int) -> np.ndarray:
    """k x k moving average; near edges only in-bounds cells are averaged."""
    if k == 1:
        return values.astype(np.float64, copy=True)
    r = k // 2

    def axis_sum(a, axis):
        a = np.moveaxis(a, axis, 0)
        c = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])
        n = a.shape[0]
        hi = np.minimum(np.arange(n) + r + 1, n)
        lo = np.maximum(np.arange(n) - r, 0)
        return np.moveaxis(c[hi] - c[lo], 0, axis)

    total = axis_sum(axis_sum(values, 0), 1)
    count = axis_sum(axis_sum(np.ones_like(values, dtype=np.float64), 0), 1)
    return total / count


def init_mask_blocks(spec: BlockInitSpec, shape: tuple[int, int]) -> Mask:
    """Sum of random constant rectangles ("sticky notes"), then box-smoothed."""
    frames, bins = shape
    if frames < 1 or bins < 1:
        raise ValueError("mask shape must be positive")
    m = np.zeros(shape)
    if spec.n_blocks:
        if spec.width_range[0] > frames or spec.height_range[0] > bins:
            raise BlockTooLarge(
                f"minimum block {spec.width_range[0]}x{spec.height_range[0]} exceeds grid {frames}x{bins}"
            )
        rng = np.random.default_rng(spec.seed)
        wmax = min(spec.width_range[1], frames)
        hmax = min(spec.height_range[1], bins)
        for _ in range(spec.n_blocks):
            w = int(rng.integers(spec.width_range[0], wmax + 1))
            h = int(rng.integers(spec.height_range[0], hmax + 1))
            t0 = int(rng.integers(0, frames - w + 1))
            f0 = int(rng.integers(0, bins - h + 1))
            gain = float(rng.uniform(*spec.gain_range))
            m[t0 : t0 + w, f0 : f0 + h] += gain
    return Mask(box_smooth(m, spec.smoothing_kernel))


def initial_mask(init: InitMode, shape) -> Mask:
    if isinstance(init, BlockInitSpec):
        return init_mask_blocks(init, shape)
    if isinstance(init, GaussianInit):
        return Mask(init.sigma * np.random.default_rng(init.seed).standard_normal(shape))
    if isinstance(init, ZerosInit):
        return Mask.zeros(shape)
    raise TypeError(f"unknown init mode {init!r}")


def _penalties(m: np.ndarray, alpha: float, beta: float):
    centred = m - m.mean()
    proximity = float(np.sum(m * m))
    variance = float(np.mean(centred * centred))
    grad = 2.0 * alpha * m + (2.0 * beta / m.size) * centred
    return proximity, variance, grad


def _check_shapes(model: ScorerModel, x: Spectrogram, m: Mask) -> None:
    want = (model.input_frames, model.input_bins)
    if x.log_mag.shape != want or m.values.shape != want:
        raise ShapeMismatch(f"spectrogram {x.log_mag.shape} and mask {m.values.shape} must both be {want}")


def evaluate_objective(model: ScorerModel, x: Spectrogram, m: Mask, alpha: float, beta: float, need_grad=True):
    """Objective terms and (optionally) the gradient w.r.t. the mask values."""
    _check_shapes(model, x, m)
    net = model.network
    out, cache = net.forward(model.prepare(x.log_mag + m.values))
    s = float(out[0])
    proximity, variance, pen_grad = _penalties(m.values, alpha, beta)
    terms = ObjectiveTerms(s + alpha * proximity + beta * variance, s, proximity, variance)
    if not need_grad:
        return terms, None, cache
    _, dx = net.backward(cache, np.ones(1))
    return terms, Mask(model.input_grad(dx) + pen_grad), cache


def objective(model: ScorerModel, x: Spectrogram, m: Mask, alpha: float, beta: float) -> tuple[float, Mask]:
    terms, grad, _ = evaluate_objective(model, x, m, alpha, beta)
    return terms.value, grad


def check_objective_gradient(
    model: ScorerModel,
    x: Spectrogram,
    m: Mask,
    alpha: float,
    beta: float,
    n_coords: int = 200,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Finite-difference check of the objective gradient on random mask entries."""
    _, grad, base = evaluate_objective(model, x, m, alpha, beta)

    def f(values):
        terms, _, cache = evaluate_objective(model, x, Mask(values), alpha, beta, need_grad=False)
        return terms.value, cache

    return check_function(
        f,
        m.values,
        grad.values,
        n_coords=n_coords,
        tol=tol,
        seed=seed,
        skip=lambda cp, cm: crosses_kink(model.network, base, cp, cm, 1e-4),
    )


def optimize_mask(model: ScorerModel, x: Spectrogram, config: OptimConfig | None = None) -> MaskOptResult:
    """Gradient descent on the mask with per-step halving on objective increase.

    A step that raises the objective is retried at half the step size, up to
    20 times; if every retry still raises it, the mask is left unchanged and
    the run stops as "stalled".
    """
    config = config or OptimConfig()
    shape = (model.input_frames, model.input_bins)
    m = initial_mask(config.init, shape).values
    a, b = config.alpha, config.beta
    net = model.network

    terms, grad, _ = evaluate_objective(model, x, Mask(m), a, b)
    if not np.isfinite(terms.value):
        raise NonFiniteObjective(0, terms.value)
    initial = terms
    trajectory: list[ObjectiveTerms] = []
    reason = "max_iters"
    if terms.score < config.target_score:
        return MaskOptResult(Mask(m), trajectory, 0, "target_reached", initial)

    for it in range(1, config.max_iters + 1):
        lr = config.learning_rate
        for _ in range(MAX_HALVINGS + 1):
            trial = m - lr * grad.values
            new_terms, _, cache = evaluate_objective(model, x, Mask(trial), a, b, need_grad=False)
            if not np.isfinite(new_terms.value):
                raise NonFiniteObjective(it, new_terms.value)
            if new_terms.value <= terms.value:
                break
            lr *= 0.5
        else:
            reason = "stalled"
            break

        m = trial
        terms = new_terms
        _, dx = net.backward(cache, np.ones(1))
        _, _, pen_grad = _penalties(m, a, b)
        grad = Mask(model.input_grad(dx) + pen_grad)
        trajectory.append(terms)
        if terms.score < config.target_score:
            reason = "target_reached"
            break

    log.debug("mask optimisation stopped after %d iterations (%s)", len(trajectory), reason)
    return MaskOptResult(Mask(m), trajectory, len(trajectory), reason, initial)


def mask_total_variation(m: Mask | np.ndarray) -> float:
    """Mean absolute difference over all horizontally and vertically adjacent pairs."""
    v = m.values if isinstance(m, Mask) else np.asarray(m, dtype=np.float64)
    dh = np.abs(np.diff(v, axis=1)).ravel()
    dv = np.abs(np.diff(v, axis=0)).ravel()
    n = dh.size + dv.size
    if n == 0:
        return 0.0
    return float((dh.sum() + dv.sum()) / n)


def write_trajectory_csv(path, result: MaskOptResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "objective", "score", "proximity", "variance"])
        rows = [result.initial] + result.trajectory
        for i, t in enumerate(rows):
            w.writerow([i] + [format(v, ".17g") for v in (t.value, t.score, t.proximity, t.variance)])
