"""Full multimodal network: per-modality encoders, fusion, classifier.

Parameters are split into an encoder part (every modality encoder plus the
fusion projections) and a classifier part.  Encoder-part names are
``"<modality>.<param>"`` or ``"fusion.<param>"``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .diffcore import Tensor
from .encoders import EncoderSpec, ModalityFeatures, classify, decompose, encode, init_classifier, init_encoder
from .fusion import FUSION_MODES, fuse_variant, fused_width, init_fusion


@dataclass(frozen=True)
class Architecture:
    modalities: tuple[tuple[str, EncoderSpec], ...]
    num_classes: int
    fusion_mode: str = "full"

    def __post_init__(self):
        if not self.modalities:
            raise ValueError("architecture needs at least one modality")
        ds = {spec.d for _, spec in self.modalities}
        if len(ds) != 1:
            raise ValueError(f"all encoders must share one output width, got d in {sorted(ds)}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def d(self) -> int:
        return self.modalities[0][1].d

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.modalities]

    @property
    def fused_width(self) -> int:
        return fused_width(self.fusion_mode, self.d, len(self.modalities))


@dataclass
class ModelParams:
    encoder: dict[str, Tensor]
    classifier: dict[str, Tensor]

    def copy(self) -> "ModelParams":
        return ModelParams({k: t.copy() for k, t in self.encoder.items()},
                           {k: t.copy() for k, t in self.classifier.items()})

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for k, t in self.encoder.items():
            yield f"encoder/{k}", t
        for k, t in self.classifier.items():
            yield f"classifier/{k}", t

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.items()]

    def modality(self, name: str) -> dict[str, Tensor]:
        prefix = name + "."
        return {k[len(prefix):]: t for k, t in self.encoder.items() if k.startswith(prefix)}

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of names, shapes and values."""
        a, b = dict(self.items()), dict(other.items())
        return a.keys() == b.keys() and all(np.array_equal(a[k].data, b[k].data) for k in a)


def init_model(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    encoder: dict[str, Tensor] = {}
    for name, spec in arch.modalities:
        for k, t in init_encoder(spec, rng).items():
            encoder[f"{name}.{k}"] = t
    for k, t in init_fusion(arch.d, rng).items():
        encoder[f"fusion.{k}"] = t
    return ModelParams(encoder, init_classifier(arch.fused_width, arch.num_classes, rng))


def extract_features(arch: Architecture, params: ModelParams,
                     inputs: Mapping[str, np.ndarray | Tensor]) -> list[ModalityFeatures]:
    feats = []
    for name, spec in arch.modalities:
        x = inputs[name]
        x = x if isinstance(x, Tensor) else Tensor(x)
        feats.append(decompose(encode(spec, x, params.modality(name))))
    return feats


def fused_features(arch: Architecture, params: ModelParams, inputs: Mapping[str, np.ndarray | Tensor]) -> Tensor:
    return fuse_variant(extract_features(arch, params, inputs), params.modality("fusion"), arch.fusion_mode)


def forward(arch: Architecture, params: ModelParams, inputs: Mapping[str, np.ndarray | Tensor]) -> Tensor:
    """Logits (B, C)."""
    return classify(fused_features(arch, params, inputs), params.classifier)
