"""Saliency maps for the scorer.

`cam` is an exact class activation map: the scorer's head is global average
pooling followed by one dense unit, so the pre-sigmoid logit equals the
spatial mean of sum_k w_k * A_k plus the bias. Positive values push the
score toward 1 (cheap).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram
from .errors import ArchitectureMismatch
from .scorer import ScorerModel
from .tensor_nn import Dense, GlobalAvgPool, Sigmoid


@dataclass
class SaliencyMap:
    values: np.ndarray
    method: str  # "cam" | "input_gradient"


def upsample_bilinear(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resampling: corners map onto corners."""
    h, w = grid.shape
    H, W = shape

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(h, H)
    c0, c1, fc = coords(w, W)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bottom = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def _cam_head(model: ScorerModel):
    layers = model.network.layers
    if (
        len(layers) < 4
        or not isinstance(layers[-1], Sigmoid)
        or not isinstance(layers[-2], Dense)
        or not isinstance(layers[-3], GlobalAvgPool)
        or layers[-2].out_features != 1
    ):
        raise ArchitectureMismatch("class activation maps need a global-average-pool + single dense unit head")
    return layers[-2]


def cam_grid(model: ScorerModel, spec: Spectrogram) -> np.ndarray:
    """CAM on the pooled feature grid, before upsampling."""
    dense = _cam_head(model)
    _, cache = model.network.forward(model.prepare(spec.log_mag), keep_activations=True)
    features = cache.activations[len(model.network.layers) - 3]
    return np.tensordot(dense.params["weights"][0], features, axes=1)


def cam(model: ScorerModel, spec: Spectrogram) -> SaliencyMap:
    grid = cam_grid(model, spec)
    return SaliencyMap(upsample_bilinear(grid, (model.input_frames, model.input_bins)), "cam")


def input_gradient_saliency(model: ScorerModel, spec: Spectrogram) -> SaliencyMap:
    _, grad = model.score_and_grad(spec.log_mag)
    return SaliencyMap(np.abs(grad), "input_gradient")


def frame_contrast(values: np.ndarray, frame_labels: np.ndarray) -> tuple[float, float] | None:
    """Mean |value| over frames labelled 1 and over frames labelled 0.

    Returns None when either label is absent.
    """
    mag = np.abs(values).mean(axis=1)
    on, off = frame_labels == 1, frame_labels == 0
    if not on.any() or not off.any():
        return None
    return float(mag[on].mean()), float(mag[off].mean())
