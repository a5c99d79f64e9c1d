import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedepa import diffcore as dc
from fedepa.alignment import (AlignConfig, align_loss, contrastive_loss, gaussian_kernel, hsic, hsic_loss, jsd,
                              jsd_loss, jsd_matrix, jsd_terms, median_bandwidth)
from fedepa.diffcore import Tensor
from fedepa.encoders import decompose

import oracles


def feats_from(aligned, context):
    """aligned[m], context[m]: (B, d) arrays -> list of ModalityFeatures."""
    out = []
    for a, c in zip(aligned, context):
        z = Tensor(np.concatenate([a, c], axis=1), requires_grad=True)
        out.append(decompose(z))
    return out


def random_feats(rng, M, B, d):
    return feats_from([rng.normal(size=(B, d)) for _ in range(M)], [rng.normal(size=(B, d)) for _ in range(M)])


def as_lists(arrs):
    return [a.tolist() for a in arrs]


# ---------------------------------------------------------------- config

def test_align_config_validation():
    with pytest.raises(ValueError):
        AlignConfig(tau=0)
    with pytest.raises(ValueError):
        AlignConfig(kernel_bandwidth="mean")
    with pytest.raises(ValueError):
        AlignConfig(kernel_bandwidth=0.0)
    assert AlignConfig(lambda2=-3.0).lambda2 == -3.0  # sign-free


# ---------------------------------------------------------------- contrastive

@pytest.mark.parametrize("seed", range(10))
def test_contrastive_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    M, B, d = int(rng.integers(2, 4)), int(rng.integers(2, 4)), int(rng.integers(2, 5))
    aligned = [rng.normal(size=(B, d)) for _ in range(M)]
    tau = float(rng.uniform(0.05, 1.0))
    got = contrastive_loss(feats_from(aligned, aligned), tau).item()
    assert got == pytest.approx(oracles.contrastive(as_lists(aligned), tau), rel=0, abs=1e-10)


def test_contrastive_prefers_matched_positives():
    e = np.eye(2)
    matched = contrastive_loss(feats_from([e, e], [e, e]), 0.1).item()
    swapped = contrastive_loss(feats_from([e, e[::-1]], [e, e]), 0.1).item()
    assert matched < swapped


def test_contrastive_scale_invariant():
    rng = np.random.default_rng(1)
    aligned = [rng.normal(size=(3, 4)) for _ in range(3)]
    base = contrastive_loss(feats_from(aligned, aligned), 0.2).item()
    scaled = contrastive_loss(feats_from([7.5 * a for a in aligned], aligned), 0.2).item()
    assert scaled == pytest.approx(base, abs=1e-12)


def test_contrastive_decreases_when_positive_similarity_grows():
    # anchor-positive angle shrinks, negatives untouched
    neg = np.array([[0.0, 1.0]])
    losses = []
    for angle in (1.2, 0.8, 0.4, 0.0):
        pos = np.array([[math.cos(angle), math.sin(angle)]])
        anchors = np.vstack([[1.0, 0.0], neg])
        others = np.vstack([pos, neg])
        losses.append(contrastive_loss(feats_from([anchors, others], [anchors, others]), 0.5).item())
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_contrastive_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="batch size"):
        contrastive_loss(random_feats(rng, 2, 1, 3), 0.1)
    with pytest.raises(ValueError, match="two modalities"):
        contrastive_loss(random_feats(rng, 1, 3, 3), 0.1)


# ---------------------------------------------------------------- hsic

@pytest.mark.parametrize("seed", range(10))
def test_hsic_matches_elementwise_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 4))
    p, q = rng.normal(size=(n, 2)), rng.normal(size=(n, 3))
    sigma = float(rng.uniform(0.5, 2.0))
    got = hsic(Tensor(p), Tensor(q), sigma).item()
    assert got == pytest.approx(oracles.hsic(p.tolist(), q.tolist(), sigma), rel=0, abs=1e-10)


def test_hsic_hand_set_n3():
    p = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    q = np.array([[1.0, 1.0], [0.0, 1.0], [1.0, -1.0]])
    assert hsic(Tensor(p), Tensor(q), 1.0).item() == pytest.approx(oracles.hsic(p.tolist(), q.tolist(), 1.0), abs=1e-12)


def test_gaussian_kernel_entries():
    x = np.array([[0.0, 0.0], [3.0, 4.0]])
    k = gaussian_kernel(Tensor(x), 5.0).data
    np.testing.assert_allclose(k, [[1, math.exp(-0.5)], [math.exp(-0.5), 1]], rtol=1e-15)


def test_hsic_self_nonnegative_symmetric_and_constant_zero():
    for s in range(20):
        rng = np.random.default_rng(s)
        p, q = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 2)))
        assert hsic(p, p).item() >= 0
        assert abs(hsic(p, q).item() - hsic(q, p).item()) <= 1e-10
        const = Tensor(np.tile(rng.normal(size=(1, 3)), (5, 1)))
        assert abs(hsic(const, q).item()) <= 1e-12


def test_median_bandwidth():
    x = np.array([[0.0], [1.0], [3.0]])
    assert median_bandwidth(x) == 2.0  # distances 1, 3, 2
    assert median_bandwidth(np.zeros((3, 2))) == 1.0


def test_hsic_errors():
    with pytest.raises(ValueError):
        hsic(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))
    with pytest.raises(ValueError):
        hsic(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 2))))
    with pytest.raises(ValueError):
        hsic(Tensor(np.eye(3)), Tensor(np.eye(3)), -1.0)


def test_hsic_loss_single_modality_and_row_permutation():
    rng = np.random.default_rng(3)
    a, c = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    f = feats_from([a], [c])
    assert hsic_loss(f, 1.3).item() == hsic(Tensor(a), Tensor(c), 1.3).item()
    perm = rng.permutation(6)
    assert hsic_loss(feats_from([a[perm]], [c[perm]]), 1.3).item() == pytest.approx(hsic_loss(f, 1.3).item(), abs=1e-13)


def test_hsic_loss_larger_for_dependent_halves():
    dep, ind = [], []
    for s in range(20):
        rng = np.random.default_rng(s)
        a = rng.normal(size=(16, 4))
        dep.append(hsic_loss(feats_from([a], [a.copy()])).item())
        ind.append(hsic_loss(feats_from([a], [rng.normal(size=(16, 4))])).item())
    assert np.mean(dep) > np.mean(ind)


# ---------------------------------------------------------------- jsd

def test_jsd_self_is_zero():
    x = Tensor(np.random.default_rng(0).normal(size=5))
    assert abs(jsd(x, x).item()) <= 1e-12


def test_jsd_near_one_hot_matches_formula():
    x, y = np.array([20.0, -20.0]), np.array([-20.0, 20.0])
    assert jsd(Tensor(x), Tensor(y)).item() == pytest.approx(oracles.jsd(x.tolist(), y.tolist()), abs=1e-12)


def test_jsd_written_form_is_asymmetric():
    rng = np.random.default_rng(5)
    p, q = rng.normal(size=4) * 2, rng.normal(size=4) * 2
    forward, backward = jsd(Tensor(p), Tensor(q)).item(), jsd(Tensor(q), Tensor(p)).item()
    assert forward == pytest.approx(oracles.jsd(p.tolist(), q.tolist()), abs=1e-12)
    assert backward == pytest.approx(oracles.jsd(q.tolist(), p.tolist()), abs=1e-12)
    assert abs(forward - backward) > 1e-6


def test_jsd_matrix_entries():
    rng = np.random.default_rng(2)
    p, q = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    got = jsd_matrix(Tensor(p), Tensor(q)).data
    for j in range(3):
        for k in range(2):
            assert got[j, k] == pytest.approx(oracles.jsd(p[j].tolist(), q[k].tolist()), abs=1e-12)


def test_jsd_shape_mismatch():
    with pytest.raises(ValueError):
        jsd(Tensor(np.ones(3)), Tensor(np.ones(4)))


@pytest.mark.parametrize("seed", range(10))
def test_jsd_loss_matches_enumeration_and_counts_terms(seed):
    rng = np.random.default_rng(seed)
    M, B, d = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
    context = [rng.normal(size=(B, d)) for _ in range(M)]
    feats = feats_from(context, context)
    want, count = oracles.jsd_loss(as_lists(context))
    assert jsd_loss(feats).item() == pytest.approx(want, rel=0, abs=1e-10)
    terms, pairs = jsd_terms(feats)
    assert terms.data.size == count == B * B * M * (M - 1)
    assert len(pairs) == M * (M - 1) and all(m != n for m, n in pairs)


def test_jsd_loss_b2_m2_has_eight_terms():
    rng = np.random.default_rng(0)
    context = [rng.normal(size=(2, 3)) for _ in range(2)]
    want, count = oracles.jsd_loss(as_lists(context))
    assert count == 8
    assert jsd_loss(feats_from(context, context)).item() == pytest.approx(want, abs=1e-12)


def test_jsd_loss_fused_equals_composite_and_gradients_agree():
    rng = np.random.default_rng(8)
    data = [rng.normal(size=(4, 6)) * 2 for _ in range(3)]

    def composite(feats):
        total = None
        for m, fm in enumerate(feats):
            for n, fn in enumerate(feats):
                if m != n:
                    term = dc.sum(jsd_matrix(fm.context, fn.context))
                    total = term if total is None else total + term
        return total

    results = []
    for loss_fn in (jsd_loss, composite):
        zs = [Tensor(x.copy(), requires_grad=True) for x in data]
        loss = loss_fn([decompose(z) for z in zs])
        loss.backward()
        results.append((loss.item(), [z.grad for z in zs]))
    (v1, g1), (v2, g2) = results
    assert v1 == pytest.approx(v2, abs=1e-12)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_jsd_loss_identical_context_is_zero():
    c = np.tile(np.random.default_rng(0).normal(size=(1, 4)), (3, 1))
    assert abs(jsd_loss(feats_from([c, c, c], [c, c, c])).item()) <= 1e-12


def test_jsd_loss_single_modality_raises():
    with pytest.raises(ValueError):
        jsd_loss(random_feats(np.random.default_rng(0), 1, 3, 2))


@settings(max_examples=30)
@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.lists(st.floats(-30, 30), min_size=3, max_size=3))
def test_jsd_finite_and_nonnegative(x, y):
    v = jsd(Tensor(np.array(x)), Tensor(np.array(y))).item()
    assert np.isfinite(v) and v >= -1e-12


# ---------------------------------------------------------------- total

def test_align_loss_zero_weights_equals_contrastive_exactly():
    feats = random_feats(np.random.default_rng(0), 3, 4, 3)
    cfg = AlignConfig(tau=0.3, lambda1=0.0, lambda2=0.0)
    assert align_loss(feats, cfg).item() == contrastive_loss(feats, 0.3).item()


def test_align_loss_is_weighted_sum_of_components():
    rng = np.random.default_rng(4)
    feats = random_feats(rng, 2, 3, 2)
    cfg = AlignConfig(tau=0.5, lambda1=1.0, lambda2=0.0, kernel_bandwidth=1.0)
    want = contrastive_loss(feats, 0.5).item() + hsic_loss(feats, 1.0).item()
    assert align_loss(feats, cfg).item() == pytest.approx(want, abs=1e-12)
    cfg = AlignConfig(tau=0.5, lambda1=0.7, lambda2=-0.2, kernel_bandwidth=1.0)
    want = contrastive_loss(feats, 0.5).item() + 0.7 * hsic_loss(feats, 1.0).item() - 0.2 * jsd_loss(feats).item()
    assert align_loss(feats, cfg).item() == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_align_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    zs = [Tensor(rng.normal(size=(4, 6)), requires_grad=True) for _ in range(3)]
    cfg = AlignConfig(tau=0.5, lambda1=1.0, lambda2=-0.1, kernel_bandwidth=1.2)
    assert dc.gradcheck(lambda: align_loss([decompose(z) for z in zs], cfg), zs) < 1e-4


def test_one_small_step_reduces_align_loss():
    rng = np.random.default_rng(0)
    zs = [Tensor(rng.normal(size=(4, 6)), requires_grad=True) for _ in range(3)]
    cfg = AlignConfig(tau=0.5, lambda1=0.0, lambda2=0.0)
    before = align_loss([decompose(z) for z in zs], cfg)
    before.backward()
    dc.sgd_step(zs, 1e-3)
    after = align_loss([decompose(z) for z in zs], cfg)
    assert after.item() < before.item()
