"""Symmetric decoupled contrastive loss with label smoothing and masking.

For a b x b similarity matrix ``S`` (streets in rows, cells in columns) and
a boolean negative mask, the row loss is

    L_i = -<target_i, S_i / tau> + log sum_{j active} exp(S_ij / tau)

where the target puts ``1 - eps`` on the positive ``j = i`` and spreads
``eps`` uniformly over the active negatives. The positive is never part of
the log-partition. The column direction applies the same loss to ``S.T``
and ``mask.T``; the result is the mean over rows of both directions.
"""

from __future__ import annotations

import numpy as np


class DegenerateBatchError(ValueError):
    """A row or column without any active negative."""


class EmbeddingNormError(ValueError):
    pass


def similarity_matrix(street_embs: np.ndarray, cell_embs: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    q = np.asarray(street_embs, dtype=np.float64)
    r = np.asarray(cell_embs, dtype=np.float64)
    if q.shape != r.shape:
        raise ValueError(f"embedding batches differ in shape: {q.shape} vs {r.shape}")
    for name, x in (("street", q), ("cell", r)):
        dev = np.abs(np.linalg.norm(x, axis=1) - 1.0)
        if np.any(dev > tol):
            raise EmbeddingNormError(f"{name} embeddings are not unit norm (max deviation {dev.max():.2e})")
    return q @ r.T


def _directional(logits: np.ndarray, mask: np.ndarray, eps: float, skip_degenerate: bool, label: str):
    """Per-row losses and d(row loss)/d(logits) for one matching direction."""
    b = logits.shape[0]
    n_active = mask.sum(axis=1)
    valid = n_active > 0
    if not np.all(valid) and not skip_degenerate:
        bad = int(np.flatnonzero(~valid)[0])
        raise DegenerateBatchError(f"{label} {bad} has no active negatives")
    masked = np.where(mask, logits, -np.inf)
    row_max = np.max(masked, axis=1, where=mask, initial=-np.inf)
    row_max = np.where(valid, row_max, 0.0)
    ex = np.where(mask, np.exp(masked - row_max[:, None]), 0.0)
    z = ex.sum(axis=1)
    lse = np.where(valid, row_max + np.log(np.where(valid, z, 1.0)), 0.0)
    diag = np.diagonal(logits)
    safe_n = np.maximum(n_active, 1)
    neg_mean = np.where(mask, logits, 0.0).sum(axis=1) / safe_n
    losses = -(1.0 - eps) * diag - eps * neg_mean + lse

    grad = ex / np.where(valid, z, 1.0)[:, None] - eps * mask / safe_n[:, None]
    grad[np.arange(b), np.arange(b)] -= (1.0 - eps)
    grad[~valid] = 0.0
    losses = np.where(valid, losses, 0.0)
    return losses, grad, valid


def dcl_loss_and_grad(S: np.ndarray, mask: np.ndarray, tau: float, eps: float,
                      skip_degenerate: bool = False) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to ``S``.

    With ``skip_degenerate`` rows/columns without active negatives are left
    out of the mean instead of raising :class:`DegenerateBatchError`.
    """
    S = np.asarray(S, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or mask.shape != S.shape:
        raise ValueError("S and mask must be matching square matrices")
    if np.any(np.diagonal(mask)):
        raise ValueError("mask diagonal must be False")
    if not tau > 0:
        raise ValueError("temperature must be positive")
    if not 0 <= eps < 1:
        raise ValueError("label smoothing must be in [0, 1)")
    logits = S / tau
    loss_r, g_r, v_r = _directional(logits, mask, eps, skip_degenerate, "row")
    loss_c, g_c, v_c = _directional(logits.T, mask.T, eps, skip_degenerate, "column")
    n_r, n_c = max(int(v_r.sum()), 1), max(int(v_c.sum()), 1)
    loss = 0.5 * (loss_r.sum() / n_r + loss_c.sum() / n_c)
    grad = 0.5 * (g_r / n_r + g_c.T / n_c) / tau
    return float(loss), grad


def dcl_loss(S: np.ndarray, mask: np.ndarray, tau: float, eps: float,
             skip_degenerate: bool = False) -> float:
    return dcl_loss_and_grad(S, mask, tau, eps, skip_degenerate)[0]


def batch_recall_at1(S: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of rows whose positive beats every active negative."""
    S = np.asarray(S, dtype=np.float64)
    competing = np.where(mask, S, -np.inf)
    return float(np.mean(np.diagonal(S) > competing.max(axis=1)))
