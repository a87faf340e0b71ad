"""Central finite-difference checks for analytic gradients.

Coordinates whose perturbation could cross a ReLU or max-pool kink are
skipped: a coordinate is skipped when the +h/-h evaluations disagree in
activation pattern, or when any unit lying within `kink_tol` of its kink
changes value under the perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor_nn import ForwardCache, MaxPool2x2, Network, ReLU, activation_pattern, kink_margins

REL_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckReport:
    checked: int = 0
    skipped: int = 0
    max_rel_error: float = 0.0
    failures: list = field(default_factory=list)

    def add(self, where, analytic, numeric, tol):
        err = relative_error(analytic, numeric)
        self.checked += 1
        self.max_rel_error = max(self.max_rel_error, err)
        if err >= tol:
            self.failures.append((where, analytic, numeric, err))

    @property
    def ok(self) -> bool:
        return self.checked > 0 and not self.failures


def crosses_kink(network: Network, base: ForwardCache, plus: ForwardCache, minus: ForwardCache, kink_tol: float) -> bool:
    for pb, pp, pm in zip(
        activation_pattern(network, base),
        activation_pattern(network, plus),
        activation_pattern(network, minus),
    ):
        if not (np.array_equal(pb, pp) and np.array_equal(pb, pm)):
            return True
    margins = kink_margins(network, base)
    inputs_p = _kink_inputs(network, plus)
    inputs_m = _kink_inputs(network, minus)
    for margin, ip, im in zip(margins, inputs_p, inputs_m):
        near = margin < kink_tol
        if not near.any():
            continue
        moved = ip != im
        if moved.ndim > near.ndim:
            moved = moved.any(axis=-1)
        if np.any(moved & near):
            return True
    return False


def _kink_inputs(network, cache):
    out = []
    for layer, c in zip(network.layers, cache.layer_caches):
        if isinstance(layer, ReLU):
            out.append(c)
        elif isinstance(layer, MaxPool2x2):
            out.append(MaxPool2x2.windows(c[2]))
    return out


def check_network(
    network: Network,
    x: np.ndarray,
    upstream: np.ndarray,
    n_params: int = 200,
    n_inputs: int = 200,
    h: float = 1e-5,
    tol: float = 1e-5,
    kink_tol: float = 1e-4,
    seed: int = 0,
    mode: str = "eval",
    dropout_seed=None,
) -> GradCheckReport:
    """Check backward() of f = <upstream, network(x)> against central differences."""
    rng = np.random.default_rng(seed)
    out, cache = network.forward(x, mode, dropout_seed)
    param_grads, input_grad = network.backward(cache, upstream)
    report = GradCheckReport()

    def evaluate():
        y, c = network.forward(x_work, mode, dropout_seed)
        return float(np.sum(upstream * y)), c

    x_work = np.array(x, dtype=np.float64)
    slots = [(i, name) for i, p in enumerate(network.params) for name in sorted(p)]
    sizes = np.array([network.params[i][name].size for i, name in slots])
    if len(slots) and n_params:
        picks = rng.choice(int(sizes.sum()), size=min(n_params, int(sizes.sum())), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for flat in picks:
            s = int(np.searchsorted(offsets, flat, side="right") - 1)
            i, name = slots[s]
            arr = network.params[i][name]
            j = np.unravel_index(int(flat - offsets[s]), arr.shape)
            orig = arr[j]
            arr[j] = orig + h
            fp, cp = evaluate()
            arr[j] = orig - h
            fm, cm = evaluate()
            arr[j] = orig
            if crosses_kink(network, cache, cp, cm, kink_tol):
                report.skipped += 1
                continue
            report.add((i, name, j), float(param_grads[i][name][j]), (fp - fm) / (2 * h), tol)

    if n_inputs:
        picks = rng.choice(x_work.size, size=min(n_inputs, x_work.size), replace=False)
        for flat in picks:
            j = np.unravel_index(int(flat), x_work.shape)
            orig = x_work[j]
            x_work[j] = orig + h
            fp, cp = evaluate()
            x_work[j] = orig - h
            fm, cm = evaluate()
            x_work[j] = orig
            if crosses_kink(network, cache, cp, cm, kink_tol):
                report.skipped += 1
                continue
            report.add(("input", j), float(input_grad[j]), (fp - fm) / (2 * h), tol)
    return report


def check_function(
    f: Callable[[np.ndarray], tuple[float, object]],
    x: np.ndarray,
    grad: np.ndarray,
    n_coords: int = 200,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    skip: Callable[[object, object], bool] | None = None,
) -> GradCheckReport:
    """Generic check of `grad` against central differences of `f`.

    `f` returns (value, aux); `skip(aux_plus, aux_minus)` may veto a
    coordinate, e.g. when the perturbation crosses a kink.
    """
    rng = np.random.default_rng(seed)
    x_work = np.array(x, dtype=np.float64)
    report = GradCheckReport()
    for flat in rng.choice(x_work.size, size=min(n_coords, x_work.size), replace=False):
        j = np.unravel_index(int(flat), x_work.shape)
        orig = x_work[j]
        x_work[j] = orig + h
        fp, ap = f(x_work)
        x_work[j] = orig - h
        fm, am = f(x_work)
        x_work[j] = orig
        if skip is not None and skip(ap, am):
            report.skipped += 1
            continue
        report.add(j, float(grad[j]), (fp - fm) / (2 * h), tol)
    return report
