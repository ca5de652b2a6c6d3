"""Batch-repulsion losses on conditional embeddings and the collapse diagnostic.

All four losses operate on an embedding matrix H (B x d_h) and are written
against the autodiff ops so gradients flow back into the encoder during
pre-training. ``effective_rank`` is a pure diagnostic (numpy SVD, no graph).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, exp, log, relu, sqrt, square

DISP_KINDS = ("nce-l2", "nce-cos", "hinge", "cov", "none")

_MASK_NEG = -1e30  # additive mask: exp() underflows to exactly 0


def _as_tensor(H) -> Tensor:
    return H if isinstance(H, Tensor) else Tensor(H)


def _require_batch(H: Tensor) -> int:
    if H.data.ndim != 2:
        raise ValueError(f"embeddings must be (B, d_h), got {H.data.shape}")
    B = H.data.shape[0]
    if B < 2:
        raise ValueError("pairwise dispersive losses need a batch of at least 2")
    return B


def _pairwise_sq_dists(H: Tensor, sq: Tensor) -> Tensor:
    B = H.data.shape[0]
    return sq.reshape((B, 1)) + sq.reshape((1, B)) - 2.0 * (H @ H.T)


def _logsumexp_rows(M: Tensor) -> Tensor:
    """Row logsumexp, stabilized by a constant row max (gradient-exact)."""
    rowmax = np.max(M.data, axis=1, keepdims=True)
    return log(exp(M - Tensor(rowmax)).sum(axis=1)) + Tensor(rowmax[:, 0])


def nce_l2(H, temperature: float) -> Tensor:
    """InfoNCE over squared Euclidean distances.

    Per row i: -log[ exp(||h_i||^2 / T) / sum_{k != i} exp(-||h_i - h_k||^2 / T) ],
    averaged over the batch. The asymmetric numerator (+norm, not -self-distance)
    is intentional and makes the loss scale-sensitive.
    """
    H = _as_tensor(H)
    B = _require_batch(H)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    sq = square(H).sum(axis=1)
    M = _pairwise_sq_dists(H, sq) * (-1.0 / temperature) + Tensor(np.diag(np.full(B, _MASK_NEG)))
    terms = sq * (1.0 / temperature) - _logsumexp_rows(M)
    return -terms.mean()


def nce_cos(H, temperature: float) -> Tensor:
    """InfoNCE over cosine similarities (constant numerator exp(1/T)).

    Rows with norm < 1e-12 are treated as similarity 0 to every other row so
    the loss stays defined at initialization.
    """
    H = _as_tensor(H)
    B = _require_batch(H)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    nsq = square(H).sum(axis=1)
    norm = sqrt(nsq)
    tiny = norm.data < 1e-12
    involves_tiny = tiny[:, None] | tiny[None, :]
    denom = norm.reshape((B, 1)) * norm.reshape((1, B)) + Tensor(involves_tiny.astype(np.float64))
    sim = (H @ H.T) / denom * Tensor((~involves_tiny).astype(np.float64))
    M = sim * (1.0 / temperature) + Tensor(np.diag(np.full(B, _MASK_NEG)))
    terms = (1.0 / temperature) - _logsumexp_rows(M)
    return -terms.mean()


def hinge(H, margin: float) -> Tensor:
    """Mean over ordered pairs of max(0, margin - ||h_i - h_j||_2)."""
    H = _as_tensor(H)
    B = _require_batch(H)
    if margin <= 0:
        raise ValueError("margin must be positive")
    sq = square(H).sum(axis=1)
    dist = sqrt(relu(_pairwise_sq_dists(H, sq)))  # relu guards tiny negative fp dust
    offdiag = Tensor(1.0 - np.eye(B))
    contrib = relu(-dist + margin) * offdiag
    return contrib.sum() * (1.0 / (B * (B - 1)))


def cov_loss(H) -> Tensor:
    """Squared off-diagonal entries of the sample covariance, averaged by d_h."""
    H = _as_tensor(H)
    B = _require_batch(H)
    d_h = H.data.shape[1]
    Hc = H - H.mean(axis=0)
    C = (Hc.T @ Hc) * (1.0 / (B - 1))
    off = square(C) * Tensor(1.0 - np.eye(d_h))
    return off.sum() * (1.0 / d_h)


def dispersive_loss(H, config) -> Tensor:
    """Dispatch on ``config.disp_kind``; kind 'none' contributes exactly 0."""
    kind = config.disp_kind
    if kind == "none":
        return Tensor(0.0)
    if kind == "nce-l2":
        return nce_l2(H, config.disp_temperature)
    if kind == "nce-cos":
        return nce_cos(H, config.disp_temperature)
    if kind == "hinge":
        return hinge(H, config.hinge_margin)
    if kind == "cov":
        return cov_loss(H)
    raise ValueError(f"unknown dispersive kind {kind!r}; expected one of {DISP_KINDS}")


def effective_rank(H, tol: float = 1e-3) -> int:
    """Count singular values of the row-centered H above tol * s_max.

    The collapse diagnostic: identical rows give 0; a well-spread batch
    approaches min(B - 1, d_h).
    """
    arr = H.data if isinstance(H, Tensor) else np.asarray(H, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("effective_rank needs a (B >= 2, d_h) matrix")
    centered = arr - arr.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s.size == 0 or s[0] <= 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


__all__ = [
    "DISP_KINDS",
    "nce_l2",
    "nce_cos",
    "hinge",
    "cov_loss",
    "dispersive_loss",
    "effective_rank",
]
