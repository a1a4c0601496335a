"""Shared builders for tests."""

from __future__ import annotations

import numpy as np
import pytest

from kvbudget import AttentionTrace, TraceMeta, compute_importance, priority_sequence


def shortcut_trace(importance) -> AttentionTrace:
    """Trace in importance-only form from a nested list or array."""
    raw = np.asarray(importance, dtype=float)
    meta = TraceMeta(layers=raw.shape[0], heads=1, seq_len=raw.shape[1])
    trace = AttentionTrace(meta=meta, importance=raw)
    trace.validate()
    return trace


def full_trace(attention, heads: int = 1) -> AttentionTrace:
    """Trace in full form; ``attention`` is (L, H, N, N) or (N, N) for L=H=1."""
    att = np.asarray(attention, dtype=float)
    if att.ndim == 2:
        att = att[None, None]
    meta = TraceMeta(layers=att.shape[0], heads=att.shape[1], seq_len=att.shape[2])
    trace = AttentionTrace(meta=meta, attention=att)
    trace.validate()
    return trace


def seq_from_importance(importance):
    return priority_sequence(compute_importance(shortcut_trace(importance)))


@pytest.fixture
def two_layer_seq():
    """The reference pair of cumulative curves [0.7,0.9,0.95,1.0] / [0.3,0.6,0.8,1.0]."""
    return seq_from_importance([[0.7, 0.2, 0.05, 0.05], [0.3, 0.3, 0.2, 0.2]])
