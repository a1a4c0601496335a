"""Per-token KV importance and descending-priority orderings.

Importance of a position is the total attention mass it receives,
averaged over heads. Normalizing per layer gives each token's share of
the layer's contextual information; sorting those shares descending
yields the priority sequence whose running sums ("cumulative priority")
drive budget allocation.

All operations here are pure functions on immutable inputs; layers can
be processed independently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLayerError
from .trace import AttentionTrace, TraceMeta


@dataclass(frozen=True)
class ImportanceProfile:
    """Raw and normalized importance per layer and position.

    ``raw[l][n]`` is accumulated attention mass; ``normalized[l]`` sums
    to 1 for every layer.
    """

    meta: TraceMeta
    raw: np.ndarray
    normalized: np.ndarray


@dataclass(frozen=True)
class PrioritySequence:
    """Descending-importance ordering with cumulative priorities.

    ``order[l]`` is a permutation of positions sorted by decreasing
    normalized importance (ties broken by ascending position);
    ``cumulative[l][j]`` is the total importance share captured by the
    top ``j + 1`` positions.
    """

    meta: TraceMeta
    order: np.ndarray
    cumulative: np.ndarray


def compute_importance(trace: AttentionTrace) -> ImportanceProfile:
    """Derive the importance profile of a trace.

    Full form: column sums of each attention matrix, averaged over
    heads. Shortcut form: raw values are taken from the trace directly.
    """
    if trace.attention is not None:
        raw = trace.attention.sum(axis=2).mean(axis=1)
    else:
        raw = trace.importance.copy()
    totals = raw.sum(axis=1)
    if np.any(totals <= 0.0):
        layer = int(np.argwhere(totals <= 0.0)[0][0])
        raise DegenerateLayerError(f"layer {layer} has all-zero importance")
    normalized = raw / totals[:, None]
    return ImportanceProfile(meta=trace.meta, raw=raw, normalized=normalized)


def priority_sequence(profile: ImportanceProfile) -> PrioritySequence:
    """Sort each layer's normalized importance descending and accumulate.

    The stable sort on negated values makes ties resolve to the lower
    original position, so the ordering is deterministic.
    """
    order = np.argsort(-profile.normalized, axis=1, kind="stable")
    ranked = np.take_along_axis(profile.normalized, order, axis=1)
    cumulative = np.cumsum(ranked, axis=1)
    return PrioritySequence(meta=profile.meta, order=order, cumulative=cumulative)
