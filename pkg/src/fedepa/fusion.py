"""Attention fusion of aligned features, context concatenation, and fusion variants."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoders import ModalityFeatures, Params, classify

FUSION_MODES = ("full", "concat", "aligned_only", "add")


def init_fusion(d: int, rng: np.random.Generator) -> Params:
    s = 1.0 / math.sqrt(d)
    return {name: Tensor(rng.uniform(-s, s, size=(d, d)), requires_grad=True) for name in ("wq", "wk", "wv")}


def qkv_project(aligned: Sequence[Tensor], params: Params) -> list[tuple[Tensor, Tensor, Tensor]]:
    """Shared linear maps q = W_q z, k = W_k z, v = W_v z, applied row-wise per modality."""
    d = params["wq"].shape[0]
    out = []
    for z in aligned:
        if z.ndim != 2 or z.shape[1] != d:
            raise ValueError(f"qkv_project: expected aligned features (B, {d}), got {z.shape}")
        out.append(tuple(dc.matmul(z, dc.transpose(params[k])) for k in ("wq", "wk", "wv")))
    return out


def attention_weights(queries: Sequence[Tensor], keys: Sequence[Tensor]) -> Tensor:
    """(B, M, M) tensor a[j, m, n] = softmax_n(q_j^m . k_j^n / sqrt(d))."""
    B, d = queries[0].shape
    M = len(queries)
    q = dc.stack(queries, axis=1)
    k = dc.stack(keys, axis=1)
    scores = dc.scalar_mul(dc.matmul(q, dc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    assert scores.shape == (B, M, M)
    return dc.softmax(scores, axis=-1)


def attend(features: Sequence[ModalityFeatures], params: Params) -> Tensor:
    """Sum over all ordered pairs (m, n), diagonal included, of a[j, m, n] * v_j^n -> (B, d)."""
    proj = qkv_project([f.aligned for f in features], params)
    a = attention_weights([p[0] for p in proj], [p[1] for p in proj])
    B, M, _ = a.shape
    v = dc.stack([p[2] for p in proj], axis=1)  # (B, M, d)
    mix = dc.reshape(dc.sum(a, axis=1), (B, 1, M))  # total weight landing on each value
    return dc.reshape(dc.matmul(mix, v), (B, v.shape[2]))


def fuse(features: Sequence[ModalityFeatures], params: Params) -> Tensor:
    if not features:
        raise ValueError("fuse: needs at least one modality")
    return dc.concat([attend(features, params)] + [f.context for f in features], axis=1)


def fuse_variant(features: Sequence[ModalityFeatures], params: Params, mode: str = "full") -> Tensor:
    if mode == "full":
        return fuse(features, params)
    if mode == "aligned_only":
        return attend(features, params)
    if mode == "concat":
        return dc.concat([f.full for f in features], axis=1)
    if mode == "add":
        widths = {f.full.shape for f in features}
        if len(widths) != 1:
            raise ValueError(f"fuse_variant[add]: mismatched feature shapes {sorted(widths)}")
        out = features[0].full
        for f in features[1:]:
            out = out + f.full
        return out
    raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


def fused_width(mode: str, d: int, num_modalities: int) -> int:
    widths = {"full": d + num_modalities * d, "concat": 2 * d * num_modalities,
              "aligned_only": d, "add": 2 * d}
    if mode not in widths:
        raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
    return widths[mode]


def classification_loss(fused: Tensor, labels, classifier_params: Params) -> Tensor:
    return dc.cross_entropy(classify(fused, classifier_params), labels)
