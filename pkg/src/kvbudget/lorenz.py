"""Lorenz curves and Gini coefficients of per-layer importance.

The Lorenz curve of a priority sequence plots cumulative priority
against prefix size ratio. Because positions are sorted descending, the
curve dominates the diagonal; the (doubled) area between them is the
Gini coefficient, a scalar measure of how concentrated a layer's
importance distribution is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .importance import PrioritySequence

_FINAL_TOL = 1e-9


@dataclass(frozen=True)
class LorenzCurve:
    """Points ``(x, y)`` with x the prefix ratio and y cumulative priority.

    The origin (0, 0) is implied and not stored.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        if self.x.shape != self.y.shape or self.x.ndim != 1 or len(self.x) == 0:
            raise ValueError("curve requires matching non-empty x and y vectors")
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("x must be strictly increasing")
        if np.any(np.diff(self.y) < 0):
            raise ValueError("y must be nondecreasing")
        if abs(self.x[-1] - 1.0) > _FINAL_TOL or abs(self.y[-1] - 1.0) > _FINAL_TOL:
            raise ValueError(f"curve must end at (1, 1), got ({self.x[-1]}, {self.y[-1]})")
        if np.any(self.y < self.x - _FINAL_TOL):
            raise ValueError("curve dips below the equality line")


@dataclass(frozen=True)
class LayerStats:
    layer: int
    gini: float
    curve: LorenzCurve


def lorenz_curve(seq: PrioritySequence, layer: int) -> LorenzCurve:
    """Curve of one layer: points ((j+1)/N, cumulative[l][j]) for j = 0..N-1."""
    if not 0 <= layer < seq.meta.layers:
        raise IndexError(f"layer {layer} out of range [0, {seq.meta.layers})")
    n = seq.meta.seq_len
    x = np.arange(1, n + 1) / n
    return LorenzCurve(x=x, y=seq.cumulative[layer].copy())


def gini(curve: LorenzCurve) -> float:
    """Twice the trapezoidal area between the curve and the equality line.

    Integration runs from the implied origin through every stored point,
    and the result is clamped to [0, 1]. Uniform importance gives 0; a
    single atom among N tokens gives (N-1)/N.
    """
    xs = np.concatenate(([0.0], curve.x))
    ys = np.concatenate(([0.0], curve.y))
    area_under = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
    return float(np.clip(2.0 * (area_under - 0.5), 0.0, 1.0))


def layer_stats(seq: PrioritySequence) -> list[LayerStats]:
    """Lorenz curve and Gini coefficient for every layer."""
    stats = []
    for layer in range(seq.meta.layers):
        curve = lorenz_curve(seq, layer)
        stats.append(LayerStats(layer=layer, gini=gini(curve), curve=curve))
    return stats
