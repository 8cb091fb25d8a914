"""Two-positive contrastive loss over the 2N x 2N similarity matrix.

Row/column layout: indices [0, N) are reference embeddings, [N, 2N) are
artificial-mix embeddings. Every row has exactly two positive columns
(its own artificial mix and the circularly adjacent one); out-of-range
positive columns wrap modulo N inside the opposite block. Losses and
gradients are computed in a row-wise log-sum-exp formulation so small
temperatures (tau ~ 0.01) cannot overflow.

A standard single-positive NT-Xent variant is included for the ablation
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SimilarityMatrix",
    "LossValue",
    "similarity_matrix",
    "positive_columns",
    "loss",
    "loss_from_embeddings",
    "loss_gradient_check",
]


@dataclass
class SimilarityMatrix:
    """sigma[i, j] = exp(cos(e_i, e_j) / tau) with e = (refs, arts)."""

    sigma: np.ndarray  # (2N, 2N), positive
    tau: float
    cosines: np.ndarray  # (2N, 2N) raw cosine similarities

    @property
    def n(self) -> int:
        return self.sigma.shape[0] // 2


@dataclass
class LossValue:
    total: float
    per_index: np.ndarray  # (2N,)
    grad_embeddings: np.ndarray  # (2N, m)
    grad_log_tau: float


def similarity_matrix(
    z_refs: np.ndarray, z_arts: np.ndarray, tau: float
) -> SimilarityMatrix:
    """Exponentiated cosine-similarity matrix over (refs, arts)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if z_refs.shape != z_arts.shape:
        raise ValueError("refs and arts must have matching shapes")
    norms = np.linalg.norm(np.vstack([z_refs, z_arts]), axis=1)
    if np.abs(norms - 1.0).max() > 1e-4:
        raise ValueError("embeddings must be unit-norm within 1e-4")
    e = np.vstack([z_refs, z_arts]).astype(np.float64)
    cos = e @ e.T
    return SimilarityMatrix(sigma=np.exp(cos / tau), tau=float(tau), cosines=cos)


def positive_columns(n: int, variant: str = "two_positive") -> np.ndarray:
    """(2N, 2) positive column indices per row (duplicated for NT-Xent)."""
    rows = np.arange(2 * n)
    if variant == "two_positive":
        p1 = np.where(rows < n, rows + n, rows - n)
        p2 = np.where(rows < n, n + (rows + 1) % n, (rows - n - 1) % n)
    elif variant == "ntxent":
        p1 = np.where(rows < n, rows + n, rows - n)
        p2 = p1
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    return np.stack([p1, p2], axis=1)


def _loss_core(cos: np.ndarray, tau: float, variant: str):
    """Shared loss/gradient computation on raw cosines (stable in tau)."""
    two_n = cos.shape[0]
    n = two_n // 2
    s = cos / tau
    # row-wise log-sum-exp over off-diagonal entries
    s_off = s.copy()
    np.fill_diagonal(s_off, -np.inf)
    row_max = s_off.max(axis=1, keepdims=True)
    exp_shift = np.exp(s_off - row_max)
    denom = exp_shift.sum(axis=1)
    log_denom = row_max[:, 0] + np.log(denom)

    pos = positive_columns(n, variant)
    rows = np.arange(two_n)
    n_terms = 1 if variant == "ntxent" else 2
    if variant == "ntxent":
        per_index = log_denom - s[rows, pos[:, 0]]
    else:
        per_index = 2.0 * log_denom - s[rows, pos[:, 0]] - s[rows, pos[:, 1]]
    scale = 1.0 / (2.0 * n_terms * n)
    total = float(per_index.sum() * scale)

    # dL/ds[i, j] for the row-i terms: n_terms * softmax weight - positive hits
    softmax = exp_shift / denom[:, None]
    g_rows = n_terms * softmax
    g_rows[rows, pos[:, 0]] -= 1.0
    if variant != "ntxent":
        g_rows[rows, pos[:, 1]] -= 1.0
    g_rows *= scale
    return per_index, total, s, g_rows


def loss(sim: SimilarityMatrix, variant: str = "two_positive") -> LossValue:
    """Loss and exact gradients from a similarity matrix.

    Gradients are with respect to the 2N stacked embeddings (as free
    vectors; similarities are plain dot products) and with respect to
    log tau. Requires the raw cosines carried by `similarity_matrix`.
    """
    cos = sim.cosines
    per_index, total, s, g_rows = _loss_core(cos, sim.tau, variant)
    # sigma is used symmetrically: s[i, j] appears in rows i and j
    g_pair = g_rows + g_rows.T
    grad_log_tau = float(-(g_pair * s).sum() / 2.0)
    return LossValue(
        total=total,
        per_index=per_index,
        grad_embeddings=None,  # filled by loss_from_embeddings
        grad_log_tau=grad_log_tau,
    )


def loss_from_embeddings(
    z_refs: np.ndarray,
    z_arts: np.ndarray,
    log_tau: float,
    variant: str = "two_positive",
) -> LossValue:
    """Loss plus gradients w.r.t. all embeddings and log tau."""
    tau = float(np.exp(log_tau))
    e = np.vstack([z_refs, z_arts]).astype(np.float64)
    cos = e @ e.T
    per_index, total, s, g_rows = _loss_core(cos, tau, variant)
    g_pair = g_rows + g_rows.T  # total sensitivity to each dot product / tau
    grad_e = (g_pair @ e) / tau
    grad_log_tau = float(-(g_pair * s).sum() / 2.0)
    return LossValue(
        total=total,
        per_index=per_index,
        grad_embeddings=grad_e,
        grad_log_tau=grad_log_tau,
    )


def loss_gradient_check(
    n: int = 4,
    m: int = 8,
    variant: str = "two_positive",
    seed: int = 0,
    eps: float = 1e-6,
) -> dict:
    """Central finite differences vs analytic gradients; returns a report."""
    rng = np.random.default_rng(seed)

    def unit_rows(a):
        return a / np.linalg.norm(a, axis=1, keepdims=True)

    z_refs = unit_rows(rng.standard_normal((n, m)))
    z_arts = unit_rows(rng.standard_normal((n, m)))
    log_tau = float(np.log(rng.uniform(0.05, 1.0)))
    res = loss_from_embeddings(z_refs, z_arts, log_tau, variant)

    e = np.vstack([z_refs, z_arts])
    max_err = 0.0
    for _ in range(min(200, 2 * n * m)):
        i = int(rng.integers(0, 2 * n))
        j = int(rng.integers(0, m))
        ep = e.copy()
        ep[i, j] += eps
        lp = loss_from_embeddings(ep[:n], ep[n:], log_tau, variant).total
        em_ = e.copy()
        em_[i, j] -= eps
        lm = loss_from_embeddings(em_[:n], em_[n:], log_tau, variant).total
        fd = (lp - lm) / (2 * eps)
        an = res.grad_embeddings[i, j]
        max_err = max(max_err, abs(fd - an) / max(abs(fd), abs(an), 1e-10))

    lp = loss_from_embeddings(z_refs, z_arts, log_tau + eps, variant).total
    lm = loss_from_embeddings(z_refs, z_arts, log_tau - eps, variant).total
    fd_tau = (lp - lm) / (2 * eps)
    tau_err = abs(fd_tau - res.grad_log_tau) / max(
        abs(fd_tau), abs(res.grad_log_tau), 1e-10
    )
    return {
        "max_embedding_rel_err": max_err,
        "log_tau_rel_err": tau_err,
        "max_rel_err": max(max_err, tau_err),
        "loss": res.total,
    }
