"""Unsupervised alignment objective over decomposed per-modality features.

Three terms, all computed on one batch of unlabeled samples:

* contrastive consistency of aligned halves across modalities (InfoNCE per anchor),
* HSIC between the aligned and context halves of each modality (Gaussian kernels),
* Jensen-Shannon divergence between context halves of every sample pair and
  modality pair, using the mixture form ``0.5 * (KL(P||M) + KL(M||Q))``.

The JSD form above is not symmetric in P and Q; it is kept as written.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoders import ModalityFeatures

Bandwidth = Union[str, float]


@dataclass(frozen=True)
class AlignConfig:
    tau: float = 0.1
    lambda1: float = 1.0
    lambda2: float = -0.1
    kernel_bandwidth: Bandwidth = "median"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        bw = self.kernel_bandwidth
        if isinstance(bw, str):
            if bw != "median":
                raise ValueError(f"kernel_bandwidth must be 'median' or a positive float, got {bw!r}")
        elif not bw > 0:
            raise ValueError(f"fixed kernel bandwidth must be > 0, got {bw}")


def _normalize_rows(a: Tensor) -> Tensor:
    return dc.div(a, dc.row_norm(a))


def contrastive_loss(features: Sequence[ModalityFeatures], tau: float) -> Tensor:
    """Sum over ordered modality pairs (m, n), m != n, and anchors j of
    ``-log(exp(s_jj / tau) / sum_{k != j} exp(s_jk / tau))`` with cosine ``s``."""
    if len(features) < 2:
        raise ValueError("contrastive_loss: needs at least two modalities")
    B = features[0].aligned.shape[0]
    if B < 2:
        raise ValueError("contrastive_loss: batch size must be >= 2 (negative set is empty)")
    units = [_normalize_rows(f.aligned) for f in features]
    eye = np.eye(B, dtype=bool)
    terms = []
    for m, um in enumerate(units):
        for n, un in enumerate(units):
            if m == n:
                continue
            s = dc.scalar_mul(dc.matmul(um, dc.transpose(un)), 1.0 / tau)
            positive = dc.sum(dc.mul(s, eye.astype(np.float64)), axis=1)
            negatives = dc.logsumexp(s, axis=1, where=~eye)
            terms.append(dc.sum(negatives - positive))
    return _total(terms)


def _total(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _sq_dists(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(x: np.ndarray) -> float:
    """Median of the nonzero pairwise Euclidean distances between rows (1.0 if there are none)."""
    d = np.sqrt(_sq_dists(x)[np.triu_indices(x.shape[0], k=1)])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def gaussian_kernel(x: Tensor, sigma: float) -> Tensor:
    n, width = x.shape
    diff = dc.reshape(x, (n, 1, width)) - dc.reshape(x, (1, n, width))
    return dc.exp(dc.scalar_mul(dc.sum(dc.square(diff), axis=-1), -1.0 / (2.0 * sigma * sigma)))


def _sigma(x: Tensor, bandwidth: Bandwidth) -> float:
    if bandwidth == "median":
        return median_bandwidth(x.data)
    sigma = float(bandwidth)
    if sigma <= 0:
        raise ValueError(f"hsic: bandwidth must be > 0, got {sigma}")
    return sigma


def hsic(p: Tensor, q: Tensor, bandwidth: Bandwidth = "median") -> Tensor:
    """Tr(K_P H K_Q H) / (n - 1)^2 with row-wise Gaussian kernels and H = I - 1/n."""
    n = p.shape[0]
    if q.shape[0] != n:
        raise ValueError(f"hsic: row counts differ, {p.shape} vs {q.shape}")
    if n < 2:
        raise ValueError("hsic: needs at least two samples")
    kp = gaussian_kernel(p, _sigma(p, bandwidth))
    kq = gaussian_kernel(q, _sigma(q, bandwidth))
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    centered = dc.matmul(dc.matmul(Tensor(h), kp), Tensor(h))
    # Tr(A K_Q) = sum(A * K_Q^T) and K_Q is symmetric
    return dc.scalar_mul(dc.sum(dc.mul(centered, kq)), 1.0 / (n - 1) ** 2)


def hsic_loss(features: Sequence[ModalityFeatures], bandwidth: Bandwidth = "median") -> Tensor:
    return _total([hsic(f.aligned, f.context, bandwidth) for f in features])


_LOG2 = math.log(2.0)
_TINY = np.finfo(np.float64).tiny


def _jsd_from_log_probs(lp: Tensor, lq: Tensor) -> Tensor:
    lm = dc.logaddexp(lp, lq) - _LOG2
    kl_pm = dc.sum(dc.mul(dc.exp(lp), lp - lm), axis=-1)
    kl_mq = dc.sum(dc.mul(dc.exp(lm), lm - lq), axis=-1)
    return dc.scalar_mul(kl_pm + kl_mq, 0.5)


def jsd(p_vec: Tensor, q_vec: Tensor) -> Tensor:
    """Divergence between softmax(p_vec) and softmax(q_vec)."""
    if p_vec.shape != q_vec.shape:
        raise ValueError(f"jsd: incompatible shapes {p_vec.shape} and {q_vec.shape}")
    return _jsd_from_log_probs(dc.log_softmax(p_vec, -1), dc.log_softmax(q_vec, -1))


def jsd_matrix(p_rows: Tensor, q_rows: Tensor) -> Tensor:
    """(B, B') matrix of jsd(p_rows[j], q_rows[k])."""
    (b1, width), (b2, _) = p_rows.shape, q_rows.shape
    lp = dc.reshape(dc.log_softmax(p_rows, -1), (b1, 1, width))
    lq = dc.reshape(dc.log_softmax(q_rows, -1), (1, b2, width))
    return _jsd_from_log_probs(lp, lq)


def _pairwise_jsd(logp: Tensor, pairs: np.ndarray) -> Tensor:
    """Fused op: out[r, j, k] = jsd between rows logp[m_r, j] and logp[n_r, k] (log-probabilities).

    Same value as :func:`_jsd_from_log_probs` on broadcast operands.  Terms that
    depend on one side only are computed per row and cross terms as matmuls, so
    only three (P, B, B, d) arrays are built.
    """
    lp, lq = logp.data[pairs[:, 0]], logp.data[pairs[:, 1]]  # (P, B, d) each
    p, q = np.exp(lp), np.exp(lq)
    s = np.maximum(p[:, :, None, :] + q[:, None, :, :], _TINY)  # 2 * mixture
    lm = np.log(s) - _LOG2
    # 2 * jsd = sum p lp - sum q lq / 2 - p . lq / 2 + sum (q - p) lm / 2
    ent_p = np.sum(p * lp, axis=-1)[:, :, None]
    ent_q = np.sum(q * lq, axis=-1)[:, None, :]
    cross = np.matmul(p, np.swapaxes(lq, 1, 2))
    diff = np.einsum("pkd,pjkd->pjk", q, lm) - np.einsum("pjd,pjkd->pjk", p, lm)
    out = 0.5 * (ent_p - 0.5 * ent_q - 0.5 * cross + 0.5 * diff)

    def bw(g):
        g_row = g.sum(axis=2)[..., None]  # (P, B, 1)
        g_col = g.sum(axis=1)[..., None]
        g_inv = g[..., None] / s
        g_lm_k = np.einsum("pjk,pjkd->pjd", g, lm)
        g_lm_j = np.einsum("pjk,pjkd->pkd", g, lm)
        d_lp = 0.5 * p * ((lp + 1.5) * g_row - 0.5 * g_lm_k - 0.5 * np.matmul(g, lq)
                          - p * g_inv.sum(axis=2))
        d_lq = 0.5 * (0.5 * q * g_lm_j - 0.5 * q * lq * g_col
                      - q * np.einsum("pjkd,pjd->pkd", g_inv, p) - 0.5 * np.matmul(np.swapaxes(g, 1, 2), p))
        full = np.zeros_like(logp.data)
        np.add.at(full, pairs[:, 0], d_lp)
        np.add.at(full, pairs[:, 1], d_lq)
        return (full,)

    return dc._make(out, (logp,), "pairwise_jsd", bw)


def modality_pairs(num_modalities: int) -> np.ndarray:
    """Ordered pairs (m, n), m != n, as a (M(M-1), 2) index array."""
    return np.array([(m, n) for m in range(num_modalities) for n in range(num_modalities) if m != n],
                    dtype=np.int64).reshape(-1, 2)


def jsd_terms(features: Sequence[ModalityFeatures]) -> tuple[Tensor, np.ndarray]:
    """Every divergence term of the diversity loss.

    Returns ``(terms, pairs)``: ``terms[r, j, k] = jsd(z_j^{m c}, z_k^{n c})`` for
    ``(m, n) = pairs[r]``, shape (M(M-1), B, B).
    """
    pairs = modality_pairs(len(features))
    logp = dc.log_softmax(dc.stack([f.context for f in features], axis=0), -1)  # (M, B, d)
    return _pairwise_jsd(logp, pairs), pairs


def jsd_loss(features: Sequence[ModalityFeatures]) -> Tensor:
    """Sum of jsd over all sample pairs (j, k) and ordered modality pairs m != n."""
    if len(features) < 2:
        raise ValueError("jsd_loss: needs at least two modalities")
    terms, _ = jsd_terms(features)
    return dc.sum(terms)


def align_loss(features: Sequence[ModalityFeatures], config: AlignConfig) -> Tensor:
    loss = contrastive_loss(features, config.tau)
    # zero-weighted terms are skipped, so degenerate weights reproduce the contrastive value bitwise
    if config.lambda1 != 0:
        loss = loss + dc.scalar_mul(hsic_loss(features, config.kernel_bandwidth), config.lambda1)
    if config.lambda2 != 0:
        loss = loss + dc.scalar_mul(jsd_loss(features), config.lambda2)
    return loss
