"""Dynamic time warping over spectrogram frames and post-alignment distances."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .dsp import Spectrogram
from .errors import EmptyInput, PathMismatch


@dataclass
class DtwPath:
    steps: list[tuple[int, int]]
    cost: float


def _rows(x) -> np.ndarray:
    return x.log_mag if isinstance(x, Spectrogram) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def accumulated_cost(dist: np.ndarray) -> np.ndarray:
    n, m = dist.shape
    inf = float("inf")
    # plain lists: scalar numpy indexing dominates the O(nm) loop otherwise
    prev = [0.0] + [inf] * m
    rows = []
    for i in range(n):
        d = dist[i].tolist()
        row = [inf] * (m + 1)
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = best + d[j - 1]
        rows.append(row[1:])
        prev = row
    return np.array(rows)


def dtw_align(a, b) -> DtwPath:
    """Classic DTW with steps (1,0), (0,1), (1,1) and Euclidean frame distance.

    Backtracking prefers the diagonal predecessor on ties, then (1,0).
    Accepts Spectrograms or plain (frames x features) arrays.
    """
    xa, xb = _rows(a), _rows(b)
    if xa.shape[0] == 0 or xb.shape[0] == 0 or xa.size == 0 or xb.size == 0:
        raise EmptyInput("both sequences need at least one frame")
    dist = cdist(xa, xb)
    acc = accumulated_cost(dist)

    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    steps = [(i, j)]
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        steps.append((i, j))
    steps.reverse()
    return DtwPath(steps, float(acc[-1, -1]))


def validate_path(path: DtwPath, n_a: int, n_b: int) -> None:
    s = path.steps
    if not s or s[0] != (0, 0) or s[-1] != (n_a - 1, n_b - 1):
        raise PathMismatch(f"path must run from (0, 0) to ({n_a - 1}, {n_b - 1})")
    for (i0, j0), (i1, j1) in zip(s, s[1:]):
        if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
            raise PathMismatch(f"illegal step ({i0}, {j0}) -> ({i1}, {j1})")


def aligned_distance(a, b, path: DtwPath) -> tuple[float, float]:
    """(mean Euclidean frame distance, mean per-frame RMS log-magnitude difference)."""
    xa, xb = _rows(a), _rows(b)
    if xa.shape[1] != xb.shape[1]:
        raise PathMismatch("frames have different numbers of bins")
    validate_path(path, xa.shape[0], xb.shape[0])
    idx = np.array(path.steps)
    diff = xa[idx[:, 0]] - xb[idx[:, 1]]
    sq = np.sum(diff * diff, axis=1)
    return float(np.mean(np.sqrt(sq))), float(np.mean(np.sqrt(sq / xa.shape[1])))


def write_path_csv(path_file, path: DtwPath) -> None:
    with open(path_file, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j"])
        w.writerows(path.steps)
