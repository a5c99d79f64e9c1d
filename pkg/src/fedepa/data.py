"""Synthetic multimodal data, Dirichlet label-skew partitioning, and per-client splits."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModalityConfig:
    name: str
    kind: str  # image | sequence | tabular
    shape: tuple[int, ...]  # (C, H, W) | (T, p) | (p,)

    def __post_init__(self):
        expected = {"image": 3, "sequence": 2, "tabular": 1}
        if self.kind not in expected:
            raise ValueError(f"unknown modality kind {self.kind!r}")
        if len(self.shape) != expected[self.kind] or min(self.shape) < 1:
            raise ValueError(f"bad shape {self.shape} for {self.kind} modality {self.name!r}")


DEFAULT_MODALITIES = (
    ModalityConfig("image", "image", (1, 14, 14)),
    ModalityConfig("sequence", "sequence", (6, 4)),
    ModalityConfig("tabular", "tabular", (10,)),
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator knobs.

    ``rho`` mixes the class latent with a per-sample, per-modality private
    latent: 1 gives every modality the class signal alone, 0 gives
    class-independent inputs.
    """

    num_classes: int = 5
    samples_per_class: int = 200
    modalities: tuple[ModalityConfig, ...] = DEFAULT_MODALITIES
    rho: float = 0.7
    noise: float = 0.5
    latent_dim: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not self.modalities:
            raise ValueError("at least one modality required")
        if len({m.name for m in self.modalities}) != len(self.modalities):
            raise ValueError("modality names must be unique")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [{"name": m.name, "kind": m.kind, "shape": list(m.shape)} for m in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        d = dict(d)
        if "modalities" in d:
            d["modalities"] = tuple(ModalityConfig(m["name"], m["kind"], tuple(m["shape"])) for m in d["modalities"])
        return cls(**d)


@dataclass
class MultimodalSample:
    inputs: dict[str, np.ndarray]
    label: Optional[int] = None


@dataclass
class Dataset:
    """Column-stacked samples: ``inputs[name]`` has a leading sample axis."""

    inputs: dict[str, np.ndarray]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset({k: v[idx] for k, v in self.inputs.items()}, self.labels[idx])

    def samples(self) -> list[MultimodalSample]:
        return [MultimodalSample({k: v[i] for k, v in self.inputs.items()}, int(self.labels[i]))
                for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: Sequence[MultimodalSample]) -> "Dataset":
        if not samples:
            raise ValueError("no samples")
        names = list(samples[0].inputs)
        return cls({k: np.stack([s.inputs[k] for s in samples]) for k in names},
                   np.array([s.label for s in samples], dtype=np.int64))


@dataclass
class UnlabeledSet:
    """Training view of unlabeled data; carries no label field."""

    inputs: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(next(iter(self.inputs.values()))) if self.inputs else 0

    def subset(self, idx) -> "UnlabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return UnlabeledSet({k: v[idx] for k, v in self.inputs.items()})


@dataclass
class ClientSplit:
    labeled: Dataset
    unlabeled: UnlabeledSet
    test: Dataset
    unlabeled_labels: np.ndarray = field(repr=False)  # diagnostics only, never used in training
    indices: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _render(kind: str, shape: tuple[int, ...], latent_dim: int, rng: np.random.Generator):
    """A fixed random linear map from latent vectors (n, L) to modality inputs (n, *shape)."""
    if kind == "tabular":
        (p,) = shape
        A = rng.normal(size=(latent_dim, p)) / np.sqrt(latent_dim)
        return lambda u: u @ A
    if kind == "sequence":
        T, p = shape
        A = rng.normal(size=(latent_dim, p)) / np.sqrt(latent_dim)
        gain = rng.uniform(0.5, 1.5, size=(T, p))
        return lambda u: (u @ A)[:, None, :] * gain[None]
    C, H, W = shape
    rank = min(4, H, W)
    G = rng.normal(size=(latent_dim, C, rank)) / np.sqrt(latent_dim)
    rows = rng.normal(size=(rank, H)) / np.sqrt(H) * 2
    cols = rng.normal(size=(rank, W)) / np.sqrt(W) * 2
    basis = np.einsum("rh,rw->rhw", rows, cols)
    return lambda u: np.einsum("nl,lcr,rhw->nchw", u, G, basis)


def generate_arrays(spec: SyntheticSpec) -> Dataset:
    """Like :func:`generate_synthetic` but returned column-stacked (much faster downstream)."""
    rng = np.random.default_rng(spec.seed)
    C, n_per, L = spec.num_classes, spec.samples_per_class, spec.latent_dim
    class_latent = rng.normal(size=(C, L))
    labels = np.repeat(np.arange(C), n_per)
    n = labels.size
    inputs = {}
    for m in spec.modalities:
        render = _render(m.kind, m.shape, L, rng)
        private = rng.normal(size=(n, L))
        u = spec.rho * class_latent[labels] + (1.0 - spec.rho) * private
        x = render(u)
        inputs[m.name] = x + spec.noise * rng.normal(size=x.shape)
    return Dataset(inputs, labels)


def generate_synthetic(spec: SyntheticSpec) -> list[MultimodalSample]:
    return generate_arrays(spec).samples()


# ---------------------------------------------------------------------------
# partitioning and splitting
# ---------------------------------------------------------------------------


def dirichlet_partition(labels, num_clients: int, beta: float, seed: int,
                        min_samples: int = 1, max_retries: int = 1000) -> list[np.ndarray]:
    """Per class, split its (shuffled) samples across clients with Dirichlet(beta) proportions.

    Counts are drawn multinomially so class totals are preserved exactly.  A
    draw that leaves any client with fewer than ``min_samples`` samples is
    redrawn.
    """
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size < num_clients * min_samples:
        raise ValueError(f"{labels.size} samples cannot give {num_clients} clients {min_samples} each")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for _ in range(max_retries):
        parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            counts = rng.multinomial(idx.size, rng.dirichlet(np.full(num_clients, beta)))
            for i, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                parts[i].append(chunk)
        out = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(p) for p in out) >= min_samples:
            return out
    raise RuntimeError(
        f"dirichlet_partition: no valid draw after {max_retries} tries; "
        f"use a larger beta or fewer clients (beta={beta}, clients={num_clients})")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _allocate(counts: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` across groups proportional to ``counts``."""
    quota = counts * total / counts.sum()
    base = np.floor(quota).astype(np.int64)
    order = np.argsort(-(quota - base), kind="stable")
    base[order[: total - base.sum()]] += 1
    return np.minimum(base, counts)


def _stratified_pick(labels: np.ndarray, n_pick: int, rng: np.random.Generator) -> np.ndarray:
    """Indices (into ``labels``) of a class-stratified subset of size ``n_pick``."""
    classes, counts = np.unique(labels, return_counts=True)
    if n_pick == 0:
        return np.array([], dtype=np.int64)
    if counts.min() < 2:
        logger.warning("class with < 2 samples on client; using an unstratified split")
        return np.sort(rng.permutation(labels.size)[:n_pick])
    quota = _allocate(counts, n_pick)
    # _allocate can only fall short when a class is exhausted; top up from the rest
    picked = [rng.permutation(np.flatnonzero(labels == c))[:q] for c, q in zip(classes, quota)]
    out = np.concatenate(picked)
    if out.size < n_pick:
        rest = np.setdiff1d(np.arange(labels.size), out)
        out = np.concatenate([out, rng.permutation(rest)[: n_pick - out.size]])
    return np.sort(out)


def split_client_data(data: Dataset, label_ratio: float, seed: int, test_fraction: float = 0.2) -> ClientSplit:
    """4:1 train/test split, then ``label_ratio`` of train is labeled; both class-stratified."""
    if not 0.0 <= label_ratio <= 1.0:
        raise ValueError(f"label_ratio must lie in [0, 1], got {label_ratio}")
    n = len(data)
    n_test = _round_half_up(n * test_fraction)
    if n_test < 1 or n - n_test < 1:
        raise ValueError(f"split_client_data: {n} samples too few for nonempty train and test sets")
    rng = np.random.default_rng(seed)
    test_idx = _stratified_pick(data.labels, n_test, rng)
    train_idx = np.setdiff1d(np.arange(n), test_idx)
    n_lab = _round_half_up(train_idx.size * label_ratio)
    if label_ratio > 0:
        n_lab = max(n_lab, 1)
    lab_local = _stratified_pick(data.labels[train_idx], n_lab, rng)
    lab_idx = train_idx[lab_local]
    unl_idx = np.setdiff1d(train_idx, lab_idx)
    unl = data.subset(unl_idx)
    return ClientSplit(
        labeled=data.subset(lab_idx),
        unlabeled=UnlabeledSet(unl.inputs),
        test=data.subset(test_idx),
        unlabeled_labels=unl.labels,
        indices={"labeled": lab_idx, "unlabeled": unl_idx, "test": test_idx},
    )


# ---------------------------------------------------------------------------
# binary container: magic, u64 header length, JSON header, raw little-endian arrays
# ---------------------------------------------------------------------------

_MAGIC = b"FEDEPADS"


def save_dataset(path: str | Path, data: Dataset, spec: SyntheticSpec | None = None) -> None:
    arrays = {f"inputs/{k}": v for k, v in data.inputs.items()}
    arrays["labels"] = data.labels
    entries, offset, blobs = [], 0, []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = {"version": 1, "arrays": entries,
              "spec": spec.to_dict() if spec is not None else None,
              "seed": spec.seed if spec is not None else None}
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_dataset(path: str | Path) -> tuple[Dataset, SyntheticSpec | None]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a dataset container")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        body = fh.read()
    arrays = {}
    for e in header["arrays"]:
        buf = body[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    inputs = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("inputs/")}
    spec = SyntheticSpec.from_dict(header["spec"]) if header.get("spec") else None
    return Dataset(inputs, arrays["labels"].astype(np.int64)), spec
