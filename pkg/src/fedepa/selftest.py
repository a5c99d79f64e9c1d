"""Gradient checks and loss invariants on tiny random instances.

Every trainable path is checked against central finite differences: the
primitives that carry the network (affine, conv, pooling, LSTM cell), each
encoder, the three alignment losses and their weighted sum, attention fusion
with classification, the FedProx proximal term, and the personal-weight
gradient ``dL/dw = grad(theta_p) * (theta_G - theta_i)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .alignment import (AlignConfig, align_loss, contrastive_loss, hsic, hsic_loss, jsd, jsd_loss, jsd_terms,
                        median_bandwidth)
from .diffcore import Tensor
from .encoders import EncoderSpec, classify, decompose, encode, init_classifier, init_encoder
from .fusion import attention_weights, classification_loss, fuse_variant, fused_width, init_fusion, qkv_project

GRAD_TOL = 1e-4

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def _features(rng, M=3, B=4, d=3):
    zs = [_t(rng, B, 2 * d) for _ in range(M)]
    return zs, lambda: [decompose(z) for z in zs]


def case_affine_ce(rng):
    x, w, b = _t(rng, 5, 4), _t(rng, 4, 3), _t(rng, 3)
    y = rng.integers(0, 3, size=5)
    return lambda: dc.cross_entropy(classify(x, {"w": w, "b": b}), y), [x, w, b]


def case_conv_pool(rng):
    x, w, b = _t(rng, 2, 2, 6, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    return lambda: dc.sum(dc.square(dc.maxpool2d(dc.relu(dc.conv2d(x, w, b))))), [x, w, b]


def _encoder_case(kind, shape, hidden):
    def case(rng):
        spec = EncoderSpec(kind, shape, hidden, 4)
        params = init_encoder(spec, rng)
        x = _t(rng, 3, *shape)
        target = rng.normal(size=(3, 4))
        loss = lambda: dc.sum(dc.square(encode(spec, x, params) - target))  # noqa: E731
        return loss, [x, *params.values()]
    return case


case_mlp = _encoder_case("tabular", (5,), (6,))
case_cnn = _encoder_case("image", (1, 10, 10), (2, 3))
case_lstm = _encoder_case("sequence", (3, 2), (3,))


def case_contrastive(rng):
    zs, feats = _features(rng)
    tau = float(rng.uniform(0.1, 1.0))
    return lambda: contrastive_loss(feats(), tau), zs


def case_hsic(rng):
    p, q = _t(rng, 5, 3), _t(rng, 5, 2)
    sigma = float(rng.uniform(0.8, 2.0))
    return lambda: hsic(p, q, sigma), [p, q]


def case_hsic_median(rng):
    # the median bandwidth is a constant of the graph; finite differences must not move it
    zs, feats = _features(rng, M=2, B=5)
    sigma = float(np.median([median_bandwidth(f.aligned.data) for f in feats()]))
    return lambda: hsic_loss(feats(), sigma), zs


def case_jsd(rng):
    zs, feats = _features(rng)
    return lambda: jsd_loss(feats()), zs


def case_jsd_weighted_terms(rng):
    zs, feats = _features(rng, M=2, B=3)
    weight = rng.normal(size=(2, 3, 3))
    return lambda: dc.sum(dc.mul(jsd_terms(feats())[0], weight)), zs


def case_jsd_single(rng):
    p, q = _t(rng, 4), _t(rng, 4)
    return lambda: jsd(p, q), [p, q]


def case_align_total(rng):
    zs, feats = _features(rng)
    cfg = AlignConfig(tau=0.5, lambda1=float(rng.uniform(0.1, 2)), lambda2=float(rng.uniform(-1, 1)),
                      kernel_bandwidth=1.5)
    return lambda: align_loss(feats(), cfg), zs


def _fusion_case(mode):
    def case(rng):
        d, M, C = 3, 3, 4
        zs, feats = _features(rng, M=M, B=4, d=d)
        fparams = init_fusion(d, rng)
        cls = init_classifier(fused_width(mode, d, M), C, rng)
        y = rng.integers(0, C, size=4)
        loss = lambda: classification_loss(fuse_variant(feats(), fparams, mode), y, cls)  # noqa: E731
        return loss, [*zs, *fparams.values(), *cls.values()]
    return case


case_fusion_full = _fusion_case("full")
case_fusion_concat = _fusion_case("concat")
case_fusion_add = _fusion_case("add")
case_fusion_aligned_only = _fusion_case("aligned_only")


def case_fedprox(rng):
    from .federation import fedprox_term
    from .model import ModelParams
    local = ModelParams({"a": _t(rng, 3, 2)}, {"w": _t(rng, 2)})
    glob = ModelParams({"a": _t(rng, 3, 2)}, {"w": _t(rng, 2)})
    mu = float(rng.uniform(0.01, 1.0))
    return lambda: fedprox_term(local, glob, mu), local.tensors()


def personal_weight_grad(arch, global_params, local, weights, inputs, labels) -> tuple[float, dict[str, np.ndarray]]:
    """Loss of the temporary model and its gradient w.r.t. the personal weights,
    via ``grad(theta_p) * (theta_G - theta_i)``."""
    from .federation import blend_encoder
    from .model import ModelParams, forward
    blended = blend_encoder(local, global_params, weights)
    temp = ModelParams({k: Tensor(v, requires_grad=True) for k, v in blended.items()},
                       {k: Tensor(t.data) for k, t in global_params.classifier.items()})
    loss = dc.cross_entropy(forward(arch, temp, inputs), labels)
    value = loss.item()
    loss.backward()
    return value, {k: temp.encoder[k].grad * (global_params.encoder[k].data - local.encoder[k].data)
                   for k in weights}


def check_personal_weights(rng) -> float:
    """Relative error of the chain-rule personal-weight gradient vs finite differences in w."""
    from .model import Architecture, init_model
    arch = Architecture((("tab", EncoderSpec("tabular", (4,), (5,), 4)),
                         ("seq", EncoderSpec("sequence", (2, 3), (2,), 4))), 3)
    glob, local = init_model(arch, rng), init_model(arch, rng)
    weights = {k: Tensor(rng.uniform(0.2, 0.8, size=t.shape)) for k, t in glob.encoder.items()}
    inputs = {"tab": rng.normal(size=(4, 4)), "seq": rng.normal(size=(4, 2, 3))}
    labels = rng.integers(0, 3, size=4)
    _, analytic = personal_weight_grad(arch, glob, local, weights, inputs, labels)

    worst = 0.0
    for k, w in weights.items():
        with dc.no_grad():
            num = dc.numerical_grad(lambda: personal_weight_grad_value(arch, glob, local, weights, inputs, labels), w)
        a = analytic[k]
        denom = max(np.linalg.norm(a), np.linalg.norm(num), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - num) / denom))
    return worst


def personal_weight_grad_value(arch, glob, local, weights, inputs, labels) -> float:
    from .federation import blend_encoder
    from .model import ModelParams, forward
    blended = blend_encoder(local, glob, weights)
    temp = ModelParams({k: Tensor(v) for k, v in blended.items()}, glob.classifier)
    return dc.cross_entropy(forward(arch, temp, inputs), labels).item()


GRADIENT_CASES: dict[str, Case] = {
    "affine_cross_entropy": case_affine_ce,
    "conv_relu_pool": case_conv_pool,
    "mlp_encoder": case_mlp,
    "cnn_encoder": case_cnn,
    "lstm_encoder": case_lstm,
    "contrastive": case_contrastive,
    "hsic_fixed_bandwidth": case_hsic,
    "hsic_median_bandwidth": case_hsic_median,
    "jsd_single": case_jsd_single,
    "jsd_loss": case_jsd,
    "jsd_terms_weighted": case_jsd_weighted_terms,
    "align_total": case_align_total,
    "fusion_full": case_fusion_full,
    "fusion_concat": case_fusion_concat,
    "fusion_add": case_fusion_add,
    "fusion_aligned_only": case_fusion_aligned_only,
    "fedprox": case_fedprox,
}


@dataclass
class CheckResult:
    name: str
    worst: float
    seeds: int
    ok: bool


def run_gradient_suite(seeds: int = 20, tol: float = GRAD_TOL) -> list[CheckResult]:
    out = []
    for name, case in GRADIENT_CASES.items():
        worst = 0.0
        for s in range(seeds):
            loss, params = case(np.random.default_rng([7, s]))
            worst = max(worst, dc.gradcheck(loss, params))
        out.append(CheckResult(name, worst, seeds, worst < tol))
    worst = max(check_personal_weights(np.random.default_rng([8, s])) for s in range(seeds))
    out.append(CheckResult("personal_weights", worst, seeds, worst < tol))
    return out


def run_invariants(seeds: int = 20) -> list[CheckResult]:
    """Loss invariants; ``worst`` is the largest violation seen."""
    out = []
    row_sum = hs_sym = hs_const = js_self = 0.0
    count_ok = True
    for s in range(seeds):
        rng = np.random.default_rng([9, s])
        M, B, d = int(rng.integers(2, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
        feats = [decompose(Tensor(rng.normal(size=(B, 2 * d)))) for _ in range(M)]
        qkv = qkv_project([f.aligned for f in feats], init_fusion(d, rng))
        a = attention_weights([q for q, _, _ in qkv], [k for _, k, _ in qkv]).data
        row_sum = max(row_sum, float(np.abs(a.sum(axis=-1) - 1).max()))
        p, q = Tensor(rng.normal(size=(B, 3))), Tensor(rng.normal(size=(B, 2)))
        hs_sym = max(hs_sym, abs(hsic(p, q).item() - hsic(q, p).item()))
        const = Tensor(np.tile(rng.normal(size=(1, 3)), (B, 1)))
        hs_const = max(hs_const, abs(hsic(const, q).item()))
        x = Tensor(rng.normal(size=d))
        js_self = max(js_self, abs(jsd(x, x).item()))
        terms, _ = jsd_terms(feats)
        count_ok &= terms.data.size == B * B * M * (M - 1)
    out.append(CheckResult("attention_rows_sum_to_one", row_sum, seeds, row_sum <= 1e-12))
    out.append(CheckResult("hsic_symmetry", hs_sym, seeds, hs_sym <= 1e-10))
    out.append(CheckResult("hsic_constant_rows", hs_const, seeds, hs_const <= 1e-12))
    out.append(CheckResult("jsd_self", js_self, seeds, js_self <= 1e-12))
    out.append(CheckResult("jsd_term_count", 0.0 if count_ok else 1.0, seeds, count_ok))
    return out


def run_selftest(seeds: int = 20, verbose: bool = False) -> list[CheckResult]:
    """Run both suites; returns the failing checks."""
    start = time.perf_counter()
    results = run_gradient_suite(seeds) + run_invariants(seeds)
    if verbose:
        for r in results:
            print(f"{'PASS' if r.ok else 'FAIL'} {r.name:28s} worst={r.worst:.2e} seeds={r.seeds}")
        print(f"{sum(r.ok for r in results)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    return [r for r in results if not r.ok]
