"""Numpy implementations of the hot kernels; used when the compiled core is absent."""

from __future__ import annotations

import numpy as np


def info_nce_loss(queries, keys, tau: float) -> float:
    q = np.ascontiguousarray(queries, dtype=np.float64)
    k = np.ascontiguousarray(keys, dtype=np.float64)
    logits = (q @ k.T) / tau
    diag = np.diag(logits)

    def _lse(x, axis):
        m = x.max(axis=axis, keepdims=True)
        return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)

    row = np.mean(_lse(logits, 1) - diag)
    col = np.mean(_lse(logits, 0) - diag)
    return float(0.5 * (row + col))


def topk_hits(sim, correct, k: int) -> np.ndarray:
    """Whether any of the k best columns per row is marked correct (ties: lower index first)."""
    sim = np.asarray(sim, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return np.take_along_axis(correct, order, axis=1).any(axis=1)
