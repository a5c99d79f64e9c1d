"""Modality encoders (MLP / two-stage CNN / LSTM), the aligned-context split, and the linear classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

Params = dict[str, Tensor]

KINDS = ("image", "sequence", "tabular")


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of one modality encoder.

    ``input_shape`` excludes the batch axis: (C, H, W) for images, (T, p) for
    sequences, (p,) for tabular rows.  ``hidden`` is the pair of conv channel
    counts for images, the LSTM state size for sequences, and the MLP hidden
    width for tabular data.
    """

    modality_kind: str
    input_shape: tuple[int, ...]
    hidden: tuple[int, ...]
    output_dim: int = 32

    def __post_init__(self):
        if self.modality_kind not in KINDS:
            raise ValueError(f"unknown modality kind {self.modality_kind!r}; expected one of {KINDS}")
        if self.output_dim <= 0 or self.output_dim % 2:
            raise ValueError(f"output_dim must be positive and even, got {self.output_dim}")
        expected = {"image": 3, "sequence": 2, "tabular": 1}[self.modality_kind]
        if len(self.input_shape) != expected:
            raise ValueError(f"{self.modality_kind} input_shape needs {expected} dims, got {self.input_shape}")
        if self.modality_kind == "image":
            if len(self.hidden) != 2:
                raise ValueError("image encoder needs two conv channel counts")
            self.image_flat_dim()
        elif len(self.hidden) != 1:
            raise ValueError(f"{self.modality_kind} encoder needs one hidden size")

    @property
    def d(self) -> int:
        return self.output_dim // 2

    def image_flat_dim(self) -> int:
        _, H, W = self.input_shape
        for _ in range(2):
            H, W = (H - 2) // 2, (W - 2) // 2
            if H < 1 or W < 1:
                raise ValueError(
                    f"image input {self.input_shape} too small for two conv3x3+pool2 stages")
        return self.hidden[1] * H * W


@dataclass
class ModalityFeatures:
    full: Tensor
    aligned: Tensor
    context: Tensor = field(repr=False)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    s = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


def init_encoder(spec: EncoderSpec, rng: np.random.Generator) -> Params:
    out = spec.output_dim
    if spec.modality_kind == "tabular":
        (p,), (h,) = spec.input_shape, spec.hidden
        return {
            "w1": _uniform(rng, (p, h), p), "b1": _uniform(rng, (h,), p),
            "w2": _uniform(rng, (h, out), h), "b2": _uniform(rng, (out,), h),
        }
    if spec.modality_kind == "image":
        c, _, _ = spec.input_shape
        c1, c2 = spec.hidden
        flat = spec.image_flat_dim()
        return {
            "conv1_w": _uniform(rng, (c1, c, 3, 3), c * 9), "conv1_b": _uniform(rng, (c1,), c * 9),
            "conv2_w": _uniform(rng, (c2, c1, 3, 3), c1 * 9), "conv2_b": _uniform(rng, (c2,), c1 * 9),
            "fc_w": _uniform(rng, (flat, out), flat), "fc_b": _uniform(rng, (out,), flat),
        }
    _, p = spec.input_shape
    (h,) = spec.hidden
    b = rng.uniform(-1 / np.sqrt(h), 1 / np.sqrt(h), size=4 * h)
    b[h:2 * h] = 1.0  # forget gate
    return {
        "wx": _uniform(rng, (p, 4 * h), p), "wh": _uniform(rng, (h, 4 * h), h),
        "b": Tensor(b, requires_grad=True),
        "fc_w": _uniform(rng, (h, out), h), "fc_b": _uniform(rng, (out,), h),
    }


def _check_input(op: str, x: Tensor, shape: tuple[int, ...]) -> None:
    if tuple(x.shape[1:]) != tuple(shape):
        raise ValueError(f"{op}: expected input (B, {', '.join(map(str, shape))}), got {x.shape}")


def encode_tabular(x: Tensor, params: Params) -> Tensor:
    p = params["w1"].shape[0]
    if x.ndim != 2 or x.shape[1] != p:
        raise ValueError(f"encode_tabular: expected input (B, {p}), got {x.shape}")
    h = dc.relu(dc.matmul(x, params["w1"]) + params["b1"])
    return dc.matmul(h, params["w2"]) + params["b2"]


def encode_image(x: Tensor, params: Params) -> Tensor:
    if x.ndim != 4 or x.shape[1] != params["conv1_w"].shape[1]:
        raise ValueError(f"encode_image: expected input (B, {params['conv1_w'].shape[1]}, H, W), got {x.shape}")
    h = dc.maxpool2d(dc.relu(dc.conv2d(x, params["conv1_w"], params["conv1_b"])))
    h = dc.maxpool2d(dc.relu(dc.conv2d(h, params["conv2_w"], params["conv2_b"])))
    h = dc.reshape(h, (h.shape[0], -1))
    return dc.matmul(h, params["fc_w"]) + params["fc_b"]


def encode_sequence(x: Tensor, params: Params) -> Tensor:
    """Single-layer LSTM (gate order i, f, g, o); the last hidden state feeds an affine map."""
    if x.ndim != 3 or x.shape[2] != params["wx"].shape[0]:
        raise ValueError(f"encode_sequence: expected input (B, T, {params['wx'].shape[0]}), got {x.shape}")
    B, T, _ = x.shape
    if T == 0:
        raise ValueError("encode_sequence: empty sequence (T = 0)")
    hdim = params["wh"].shape[0]
    xw = dc.matmul(x, params["wx"])  # (B, T, 4h), input projections for every step at once
    h = Tensor(np.zeros((B, hdim)))
    c = Tensor(np.zeros((B, hdim)))
    for t in range(T):
        z = dc.reshape(dc.slice(xw, 1, t, t + 1), (B, 4 * hdim)) + dc.matmul(h, params["wh"]) + params["b"]
        i = dc.sigmoid(dc.slice(z, 1, 0, hdim))
        f = dc.sigmoid(dc.slice(z, 1, hdim, 2 * hdim))
        g = dc.tanh(dc.slice(z, 1, 2 * hdim, 3 * hdim))
        o = dc.sigmoid(dc.slice(z, 1, 3 * hdim, 4 * hdim))
        c = f * c + i * g
        h = o * dc.tanh(c)
    return dc.matmul(h, params["fc_w"]) + params["fc_b"]


_ENCODERS = {"tabular": encode_tabular, "image": encode_image, "sequence": encode_sequence}


def encode(spec: EncoderSpec, x: Tensor, params: Params) -> Tensor:
    _check_input(f"encode[{spec.modality_kind}]", x, spec.input_shape)
    return _ENCODERS[spec.modality_kind](x, params)


def decompose(z: Tensor) -> ModalityFeatures:
    """Split a (B, 2d) feature block into aligned [0:d] and context [d:2d] halves."""
    width = z.shape[-1]
    if width % 2:
        raise ValueError(f"decompose: feature width must be even, got {width}")
    d = width // 2
    return ModalityFeatures(full=z, aligned=dc.slice(z, -1, 0, d), context=dc.slice(z, -1, d, width))


def init_classifier(in_dim: int, num_classes: int, rng: np.random.Generator) -> Params:
    return {"w": _uniform(rng, (in_dim, num_classes), in_dim), "b": _uniform(rng, (num_classes,), in_dim)}


def classify(f: Tensor, params: Params) -> Tensor:
    width = params["w"].shape[0]
    if f.ndim != 2 or f.shape[1] != width:
        raise ValueError(f"classify: expected features (B, {width}), got {f.shape}")
    return dc.matmul(f, params["w"]) + params["b"]
