import numpy as np
import pytest

from fedepa import diffcore as dc
from fedepa.diffcore import Tensor
from fedepa.encoders import (EncoderSpec, classify, decompose, encode, encode_image, encode_sequence,
                             encode_tabular, init_classifier, init_encoder)

import oracles


def zeros_like(params):
    return {k: Tensor(np.zeros_like(t.data), requires_grad=True) for k, t in params.items()}


# ---------------------------------------------------------------- spec

def test_spec_rejects_odd_width_and_unknown_kind():
    with pytest.raises(ValueError):
        EncoderSpec("tabular", (4,), (8,), 7)
    with pytest.raises(ValueError):
        EncoderSpec("audio", (4,), (8,), 8)


def test_image_too_small_fails_at_construction():
    with pytest.raises(ValueError):
        EncoderSpec("image", (1, 8, 8), (4, 8), 32)
    assert EncoderSpec("image", (1, 10, 10), (4, 8), 32).image_flat_dim() == 8


@pytest.mark.parametrize("kind,shape,hidden", [
    ("tabular", (10,), (32,)), ("image", (1, 14, 14), (4, 8)), ("sequence", (6, 4), (16,))])
def test_output_is_batch_by_2d(kind, shape, hidden):
    spec = EncoderSpec(kind, shape, hidden, 32)
    params = init_encoder(spec, np.random.default_rng(0))
    out = encode(spec, Tensor(np.random.default_rng(1).normal(size=(32, *shape))), params)
    assert out.shape == (32, 32)


def test_encode_checks_input_shape():
    spec = EncoderSpec("tabular", (4,), (5,), 6)
    with pytest.raises(ValueError, match="expected input"):
        encode(spec, Tensor(np.ones((2, 5))), init_encoder(spec, np.random.default_rng(0)))


# ---------------------------------------------------------------- tabular

def test_tabular_zero_params_give_zero_output():
    spec = EncoderSpec("tabular", (4,), (5,), 6)
    params = zeros_like(init_encoder(spec, np.random.default_rng(0)))
    np.testing.assert_array_equal(encode_tabular(Tensor(np.ones((3, 4))), params).data, 0)


def test_tabular_matches_two_affine_maps():
    rng = np.random.default_rng(2)
    spec = EncoderSpec("tabular", (3,), (4,), 2)
    params = init_encoder(spec, rng)
    x = rng.normal(size=(2, 3))
    w1, b1, w2, b2 = (params[k].data for k in ("w1", "b1", "w2", "b2"))
    want = []
    for row in x:
        h = [max(0.0, oracles.dot(row, w1[:, u]) + b1[u]) for u in range(4)]
        want.append([oracles.dot(h, w2[:, o]) + b2[o] for o in range(2)])
    np.testing.assert_allclose(encode_tabular(Tensor(x), params).data, want, rtol=0, atol=1e-14)


def test_tabular_identity_like_config():
    # identity first layer on nonnegative inputs, second layer truncates to the first two coordinates
    params = {"w1": Tensor(np.eye(3)), "b1": Tensor(np.zeros(3)),
              "w2": Tensor(np.eye(3)[:, :2]), "b2": Tensor(np.zeros(2))}
    x = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(encode_tabular(Tensor(x), params).data, [[1.0, 2.0]])


# ---------------------------------------------------------------- image

def test_image_zero_input_zero_bias_gives_zero():
    spec = EncoderSpec("image", (1, 10, 10), (2, 3), 4)
    params = init_encoder(spec, np.random.default_rng(0))
    for k in ("conv1_b", "conv2_b", "fc_b"):
        params[k] = Tensor(np.zeros_like(params[k].data))
    np.testing.assert_array_equal(encode_image(Tensor(np.zeros((2, 1, 10, 10))), params).data, 0)


def test_image_pipeline_matches_loop_oracle():
    rng = np.random.default_rng(5)
    spec = EncoderSpec("image", (1, 10, 10), (2, 2), 4)
    params = init_encoder(spec, rng)
    x = rng.normal(size=(1, 1, 10, 10))

    def stage(maps, w, b):
        out = []
        for o in range(w.shape[0]):
            acc = np.array(oracles.cross_correlate(maps[0].tolist(), w[o, 0].tolist()))
            for c in range(1, w.shape[1]):
                acc = acc + np.array(oracles.cross_correlate(maps[c].tolist(), w[o, c].tolist()))
            acc = np.maximum(acc + b[o], 0)
            H, W = acc.shape[0] // 2, acc.shape[1] // 2
            out.append(np.array([[acc[2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(W)] for i in range(H)]))
        return out

    h = stage(list(x[0]), params["conv1_w"].data, params["conv1_b"].data)
    h = stage(h, params["conv2_w"].data, params["conv2_b"].data)
    flat = np.concatenate([m.ravel() for m in h])
    want = flat @ params["fc_w"].data + params["fc_b"].data
    np.testing.assert_allclose(encode_image(Tensor(x), params).data[0], want, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- sequence

def test_sequence_zero_input_zero_state_is_affine_of_zero():
    spec = EncoderSpec("sequence", (1, 3), (4,), 6)
    params = init_encoder(spec, np.random.default_rng(0))
    params["b"] = Tensor(np.zeros(16))
    out = encode_sequence(Tensor(np.zeros((2, 1, 3))), params).data
    np.testing.assert_allclose(out, np.tile(params["fc_b"].data, (2, 1)), rtol=0, atol=1e-15)


def test_sequence_matches_unrolled_recurrence():
    rng = np.random.default_rng(6)
    spec = EncoderSpec("sequence", (2, 3), (2,), 4)
    params = init_encoder(spec, rng)
    x = rng.normal(size=(3, 2, 3))
    wx, wh, b = params["wx"].data.T.tolist(), params["wh"].data.T.tolist(), params["b"].data.tolist()
    for row, got in zip(x, encode_sequence(Tensor(x), params).data):
        h = oracles.lstm_last_hidden(row.tolist(), wx, wh, b)
        want = np.array(h) @ params["fc_w"].data + params["fc_b"].data
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


def test_sequence_empty_raises():
    spec = EncoderSpec("sequence", (2, 3), (2,), 4)
    with pytest.raises(ValueError, match="T = 0"):
        encode_sequence(Tensor(np.zeros((1, 0, 3))), init_encoder(spec, np.random.default_rng(0)))


def test_forget_gate_bias_is_one():
    params = init_encoder(EncoderSpec("sequence", (2, 3), (5,), 4), np.random.default_rng(0))
    np.testing.assert_array_equal(params["b"].data[5:10], 1.0)


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("kind,shape,hidden", [
    ("tabular", (5,), (6,)), ("image", (1, 10, 10), (2, 3)), ("sequence", (3, 2), (3,))])
def test_encoder_gradients(seed, kind, shape, hidden):
    rng = np.random.default_rng(seed)
    spec = EncoderSpec(kind, shape, hidden, 4)
    params = init_encoder(spec, rng)
    x = Tensor(rng.normal(size=(2, *shape)), requires_grad=True)
    target = rng.normal(size=(2, 4))
    loss = lambda: dc.sum(dc.square(encode(spec, x, params) - target))  # noqa: E731
    assert dc.gradcheck(loss, [x, *params.values()]) < 1e-4


def test_init_is_seeded_uniform_within_fan_in_bound():
    spec = EncoderSpec("tabular", (16,), (8,), 4)
    a = init_encoder(spec, np.random.default_rng(3))
    b = init_encoder(spec, np.random.default_rng(3))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert np.abs(a["w1"].data).max() <= 0.25


# ---------------------------------------------------------------- decompose and classify

def test_decompose_example_and_round_trip():
    z = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    f = decompose(z)
    np.testing.assert_array_equal(f.aligned.data, [[1, 2]])
    np.testing.assert_array_equal(f.context.data, [[3, 4]])
    assert np.array_equal(dc.concat([f.aligned, f.context], -1).data, z.data)


def test_decompose_odd_width_raises():
    with pytest.raises(ValueError):
        decompose(Tensor(np.ones((2, 3))))


def test_gradient_into_aligned_leaves_context_zero():
    z = Tensor(np.random.default_rng(0).normal(size=(2, 6)), requires_grad=True)
    dc.sum(dc.square(decompose(z).aligned)).backward()
    np.testing.assert_array_equal(z.grad[:, 3:], 0)
    np.testing.assert_array_equal(z.grad[:, :3], 2 * z.data[:, :3])


def test_classify_shape_and_affine_map():
    rng = np.random.default_rng(0)
    params = init_classifier(3, 4, rng)
    f = rng.normal(size=(5, 3))
    logits = classify(Tensor(f), params)
    assert logits.shape == (5, 4)
    np.testing.assert_allclose(logits.data, f @ params["w"].data + params["b"].data, rtol=0, atol=1e-15)
    ident = {"w": Tensor(np.eye(3)), "b": Tensor(np.zeros(3))}
    np.testing.assert_array_equal(classify(Tensor(f[:, :3]), ident).data, f[:, :3])


def test_classify_zero_weights_give_uniform_prediction():
    params = {"w": Tensor(np.zeros((3, 4))), "b": Tensor(np.zeros(4))}
    probs = dc.softmax(classify(Tensor(np.ones((2, 3))), params), -1).data
    np.testing.assert_allclose(probs, 0.25, rtol=0, atol=1e-15)


def test_classify_width_mismatch():
    with pytest.raises(ValueError):
        classify(Tensor(np.ones((2, 5))), init_classifier(3, 4, np.random.default_rng(0)))
