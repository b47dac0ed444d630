"""Within-cluster (NT-Xent) and between-cluster (redundancy reduction) losses.

Both operate on ``(M, C)`` batches of softmax label rows from the two views.
All functions are differentiable torch expressions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-12


@dataclass
class LossConfig:
    """Loss weights: ``loss = between_weight * L_B + alpha * L_W``.

    ``between_weight`` is 1 for the standard objective; the ablation sweep
    sets it to 0 (within-only) or sets ``alpha`` to 0 (between-only).
    """

    tau: float = 0.5
    lam: float = 5e-2
    alpha: float = 5e-3
    between_weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lam < 0 or self.alpha < 0 or self.between_weight < 0:
            raise ValueError("lam, alpha and between_weight must be nonnegative")


def _as_tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def cosine_similarity(u, v) -> torch.Tensor:
    """``u.v / (|u| |v|)``; a zero vector gives 0."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    return (u * v).sum(-1) / (u.norm(dim=-1).clamp_min(EPS) * v.norm(dim=-1).clamp_min(EPS))


def similarity_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    a = a / a.norm(dim=1, keepdim=True).clamp_min(EPS)
    b = b / b.norm(dim=1, keepdim=True).clamp_min(EPS)
    return a @ b.T


def within_cluster_terms(ya, yb, tau: float) -> torch.Tensor:
    """Per-anchor NT-Xent losses, shape ``(2M,)``: the a-anchors then the b-anchors.

    Anchor ``i`` is contrasted against its positive (the other view of the
    same sample) over the ``2M - 1`` other rows of the stacked batch.
    """
    ya, yb = _as_tensor(ya), _as_tensor(yb)
    m = ya.shape[0]
    if m < 2:
        raise ValueError("within-cluster loss needs at least 2 samples per batch")
    rows = torch.cat([ya, yb], dim=0)
    logits = similarity_matrix(rows, rows) / tau
    self_mask = torch.eye(2 * m, dtype=torch.bool, device=rows.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    positive = torch.cat([torch.arange(m, 2 * m), torch.arange(0, m)]).to(rows.device)
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_prob[torch.arange(2 * m), positive]


def within_cluster_loss(ya, yb, tau: float) -> torch.Tensor:
    return within_cluster_terms(ya, yb, tau).mean()


def cross_correlation(ya, yb) -> torch.Tensor:
    """``C x C`` cosine similarities between batch-centred columns of ``ya`` and ``yb``.

    A zero-variance column yields a row (or column) of zeros.
    """
    ya, yb = _as_tensor(ya), _as_tensor(yb)
    if ya.shape != yb.shape:
        raise ValueError(f"shape mismatch: {tuple(ya.shape)} vs {tuple(yb.shape)}")
    if ya.shape[0] < 2:
        raise ValueError("cross-correlation needs at least 2 samples per batch")
    ca = ya - ya.mean(dim=0, keepdim=True)
    cb = yb - yb.mean(dim=0, keepdim=True)
    return similarity_matrix(ca.T, cb.T)


def redundancy_loss(corr: torch.Tensor, lam: float) -> torch.Tensor:
    """Diagonal pulled to 1, off-diagonal entries pushed to 0 with weight ``lam``."""
    diag = torch.diagonal(corr)
    on = ((diag - 1.0) ** 2).sum()
    eye = torch.eye(corr.shape[0], dtype=torch.bool, device=corr.device)
    off = (corr ** 2).masked_fill(eye, 0.0).sum()
    return on + lam * off


def between_cluster_loss(ya, yb, lam: float) -> torch.Tensor:
    return redundancy_loss(cross_correlation(ya, yb), lam)


def loss_terms(ya, yb, config: LossConfig) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Return ``(total, within, between)``."""
    lw = within_cluster_loss(ya, yb, config.tau)
    lb = between_cluster_loss(ya, yb, config.lam)
    return config.between_weight * lb + config.alpha * lw, lw, lb


def total_loss(ya, yb, config: LossConfig) -> torch.Tensor:
    return loss_terms(ya, yb, config)[0]

