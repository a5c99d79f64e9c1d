"""Federated protocol: server averaging, personalized weighted local aggregation,
two-phase client training, FedAvg / FedProx baselines, and the round loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .alignment import AlignConfig, align_loss
from .data import ClientSplit, Dataset, UnlabeledSet
from .diffcore import Tensor
from .encoders import EncoderSpec
from .fusion import FUSION_MODES, classification_loss
from .metrics import evaluate
from .model import Architecture, ModelParams, extract_features, forward, fused_features, init_model

logger = logging.getLogger(__name__)

METHODS = ("fedepa", "fedepa_wo_pa", "fedepa_wo_ua", "fedavg", "fedprox")
_PA_METHODS = ("fedepa", "fedepa_wo_ua")
_UA_METHODS = ("fedepa", "fedepa_wo_pa")


class NumericalError(RuntimeError):
    """Non-finite parameter detected during training."""


@dataclass(frozen=True)
class RunConfig:
    method: str = "fedepa"
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 32
    lr: float = 0.0005
    align_lr: Optional[float] = None  # phase-1 step size; None means lr
    lr_w: float = 1.0
    w_passes: int = 1
    w_reinit: bool = False
    w_diff: str = "local"  # local: theta_G - theta_i^{t-1}; temporary: theta_G - theta^p
    fedprox_mu: float = 0.01
    align: AlignConfig = AlignConfig()
    fusion_mode: str = "full"
    feature_dim: int = 32
    image_channels: tuple[int, int] = (4, 8)
    lstm_hidden: int = 16
    mlp_hidden: int = 32
    eval_model: str = "auto"  # auto | global | local
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.rounds < 1 or self.batch_size < 1 or self.local_epochs < 0:
            raise ValueError("rounds and batch_size must be >= 1, local_epochs >= 0")
        if self.lr < 0 or self.lr_w < 0 or (self.align_lr is not None and self.align_lr < 0):
            raise ValueError("learning rates must be >= 0")
        if self.fedprox_mu < 0:
            raise ValueError("fedprox_mu must be >= 0")
        if self.w_diff not in ("local", "temporary"):
            raise ValueError(f"w_diff must be 'local' or 'temporary', got {self.w_diff!r}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.eval_model not in ("auto", "global", "local"):
            raise ValueError(f"eval_model must be auto, global or local, got {self.eval_model!r}")
        if self.w_passes < 0 or self.eval_every < 1:
            raise ValueError("w_passes must be >= 0 and eval_every >= 1")

    @property
    def uses_pa(self) -> bool:
        return self.method in _PA_METHODS

    @property
    def uses_ua(self) -> bool:
        return self.method in _UA_METHODS

    @property
    def evaluates_local(self) -> bool:
        if self.eval_model == "auto":
            return self.method.startswith("fedepa")
        return self.eval_model == "local"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_channels"] = list(self.image_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RunConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "align" in d and not isinstance(d["align"], AlignConfig):
            akeys = {f.name for f in fields(AlignConfig)}
            bad = set(d["align"]) - akeys
            if bad:
                raise ValueError(f"unknown align keys: {sorted(bad)}")
            d["align"] = AlignConfig(**d["align"])
        if "image_channels" in d:
            d["image_channels"] = tuple(d["image_channels"])
        return cls(**d)


def build_architecture(config: RunConfig, modalities, num_classes: int) -> Architecture:
    """``modalities``: iterable of (name, kind, shape) triples or objects with those attributes."""
    specs = []
    for m in modalities:
        name, kind, shape = (m.name, m.kind, m.shape) if hasattr(m, "kind") else m
        hidden = {"image": tuple(config.image_channels), "sequence": (config.lstm_hidden,),
                  "tabular": (config.mlp_hidden,)}[kind]
        specs.append((name, EncoderSpec(kind, tuple(shape), hidden, config.feature_dim)))
    return Architecture(tuple(specs), num_classes, config.fusion_mode)


# ---------------------------------------------------------------------------
# client state
# ---------------------------------------------------------------------------


@dataclass
class ClientState:
    id: int
    params: ModelParams
    labeled: Dataset
    unlabeled: UnlabeledSet
    test: Dataset
    seed: int
    weights: Optional[dict[str, Tensor]] = None  # personal weights over the encoder part

    @classmethod
    def from_split(cls, cid: int, split: ClientSplit, params: ModelParams, seed: int) -> "ClientState":
        return cls(cid, params, split.labeled, split.unlabeled, split.test, seed)


def ones_like_encoder(params: ModelParams) -> dict[str, Tensor]:
    return {k: Tensor(np.ones_like(t.data)) for k, t in params.encoder.items()}


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# server side
# ---------------------------------------------------------------------------


def server_aggregate(client_params: Sequence[ModelParams]) -> ModelParams:
    """Unweighted elementwise mean, summed in the given (client id) order."""
    if not client_params:
        raise ValueError("server_aggregate: no clients")
    ref = client_params[0]

    def mean_of(part: str) -> dict[str, Tensor]:
        out = {}
        for name, t in getattr(ref, part).items():
            stacked = []
            for i, cp in enumerate(client_params):
                other = getattr(cp, part).get(name)
                if other is None or other.shape != t.shape:
                    got = None if other is None else other.shape
                    raise ValueError(f"server_aggregate: tensor {part}/{name} has shape {got} "
                                     f"on client {i}, expected {t.shape}")
                stacked.append(other.data)
            total = stacked[0].copy()
            for s in stacked[1:]:
                total = total + s
            out[name] = Tensor(total / len(stacked), requires_grad=True)
        return out

    return ModelParams(mean_of("encoder"), mean_of("classifier"))


def naive_init(global_params: ModelParams) -> ModelParams:
    return global_params.copy()


# ---------------------------------------------------------------------------
# personalized aggregation
# ---------------------------------------------------------------------------


def blend_encoder(local: ModelParams, global_params: ModelParams, weights: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """theta_i + (theta_G - theta_i) * w per encoder tensor.

    Evaluated as ``w * theta_G + (1 - w) * theta_i`` so that w = 1 and w = 0
    reproduce the global and local tensors bitwise.
    """
    out = {}
    for k, t in local.encoder.items():
        w = weights[k].data
        out[k] = w * global_params.encoder[k].data + (1.0 - w) * t.data
    return out


def personal_aggregation(arch: Architecture, global_params: ModelParams, local: ModelParams,
                         weights: dict[str, Tensor], labeled: Dataset, lr_w: float = 1.0,
                         passes: int = 1, batch_size: int = 32, rng: np.random.Generator | None = None,
                         w_diff: str = "local") -> tuple[ModelParams, dict[str, Tensor]]:
    """Learn elementwise encoder weights on labeled data, then build the initial local model.

    Each batch forms the temporary model ``theta_p = [theta_i + (theta_G - theta_i) * w, theta_G_c]``,
    evaluates cross-entropy, and updates ``w <- clamp01(w - lr_w * grad(theta_p) * diff)``,
    where ``diff`` is ``theta_G - theta_i`` (``w_diff="local"``) or ``theta_G - theta_p``.
    The classifier is frozen at the global value throughout.
    """
    if len(labeled) == 0:
        raise ValueError("personal_aggregation: labeled set is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    weights = {k: Tensor(w.data.copy()) for k, w in weights.items()}
    frozen_cls = {k: Tensor(t.data) for k, t in global_params.classifier.items()}
    for _ in range(passes):
        for idx in _batches(len(labeled), batch_size, rng):
            blended = blend_encoder(local, global_params, weights)
            temp = ModelParams({k: Tensor(v, requires_grad=True) for k, v in blended.items()}, frozen_cls)
            batch = labeled.subset(idx)
            dc.cross_entropy(forward(arch, temp, batch.inputs), batch.labels).backward()
            for k, w in weights.items():
                ref = local.encoder[k].data if w_diff == "local" else blended[k]
                diff = global_params.encoder[k].data - ref
                weights[k] = dc.clamp01(Tensor(w.data - lr_w * temp.encoder[k].grad * diff))
    blended = blend_encoder(local, global_params, weights)
    init = ModelParams({k: Tensor(v, requires_grad=True) for k, v in blended.items()},
                       {k: t.copy() for k, t in global_params.classifier.items()})
    for t in init.tensors():
        t.requires_grad = True
        t.zero_grad()
    return init, weights


# ---------------------------------------------------------------------------
# client training
# ---------------------------------------------------------------------------


def fedprox_term(local: ModelParams, global_params: ModelParams, mu: float) -> Tensor:
    """(mu / 2) * sum of squared differences over every tensor; global is a constant."""
    if mu < 0:
        raise ValueError(f"fedprox_term: mu must be >= 0, got {mu}")
    g = dict(global_params.items())
    total = None
    for name, t in local.items():
        if g[name].shape != t.shape:
            raise ValueError(f"fedprox_term: shape mismatch on {name}: {t.shape} vs {g[name].shape}")
        sq = dc.sum(dc.square(dc.sub(t, g[name].data)))
        total = sq if total is None else total + sq
    return dc.scalar_mul(total, mu / 2.0)


def _modality_params(params: ModelParams) -> list[Tensor]:
    return [t for k, t in params.encoder.items() if not k.startswith("fusion.")]


def alignment_epoch(arch: Architecture, params: ModelParams, unlabeled: UnlabeledSet, config: RunConfig,
                    rng: np.random.Generator) -> None:
    lr = config.lr if config.align_lr is None else config.align_lr
    trainable = _modality_params(params)
    for idx in _batches(len(unlabeled), config.batch_size, rng):
        if idx.size < 2:
            continue  # the contrastive denominator needs a negative
        feats = extract_features(arch, params, unlabeled.subset(idx).inputs)
        align_loss(feats, config.align).backward()
        if lr > 0:
            dc.sgd_step(trainable, lr)
        for t in params.tensors():
            t.zero_grad()


def supervised_epoch(arch: Architecture, params: ModelParams, labeled: Dataset, config: RunConfig,
                     rng: np.random.Generator, global_params: ModelParams | None = None) -> None:
    trainable = params.tensors()
    for idx in _batches(len(labeled), config.batch_size, rng):
        batch = labeled.subset(idx)
        loss = classification_loss(fused_features(arch, params, batch.inputs), batch.labels, params.classifier)
        if config.method == "fedprox" and global_params is not None:
            loss = loss + fedprox_term(params, global_params, config.fedprox_mu)
        loss.backward()
        if config.lr > 0:
            dc.sgd_step(trainable, config.lr)
        else:
            for t in trainable:
                t.zero_grad()


def client_local_training(arch: Architecture, client: ClientState, init: ModelParams, config: RunConfig,
                          rng: np.random.Generator, global_params: ModelParams | None = None) -> ModelParams:
    """Phase 1: alignment on unlabeled data (encoder only); phase 2: supervised on labeled data."""
    params = init.copy()
    for t in params.tensors():
        t.requires_grad = True
        t.zero_grad()
    if config.uses_ua:
        if len(client.unlabeled) < 2:
            logger.warning("client %d: fewer than 2 unlabeled samples, skipping alignment phase", client.id)
        else:
            for _ in range(config.local_epochs):
                alignment_epoch(arch, params, client.unlabeled, config, rng)
    if len(client.labeled):
        for _ in range(config.local_epochs):
            supervised_epoch(arch, params, client.labeled, config, rng, global_params)
    return params


# ---------------------------------------------------------------------------
# evaluation and reporting
# ---------------------------------------------------------------------------


def predict(arch: Architecture, params: ModelParams, data: Dataset) -> np.ndarray:
    with dc.no_grad():
        return forward(arch, params, data.inputs).data.argmax(axis=1)


def embed(arch: Architecture, params: ModelParams, data: Dataset) -> np.ndarray:
    with dc.no_grad():
        return fused_features(arch, params, data.inputs).data


def _mean_metrics(per_client: list[dict]) -> dict[str, float]:
    return {k: float(np.mean([c[k] for c in per_client])) for k in ("oa", "ba", "f1")}


@dataclass
class RunReport:
    config: dict
    seed: int
    rounds: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def body(self) -> dict:
        """Everything except timing; deterministic for a fixed seed."""
        return {"config": self.config, "seed": self.seed, "rounds": self.rounds,
                "final": self.final, "extra": self.extra}

    def body_json(self) -> str:
        return json.dumps(self.body(), sort_keys=True, indent=2)

    def to_json(self) -> str:
        d = self.body()
        d["wall_time"] = self.wall_time
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        return cls(d["config"], d["seed"], d["rounds"], d["final"], d.get("extra", {}), d.get("wall_time", 0.0))


@dataclass
class RunResult:
    report: RunReport
    arch: Architecture
    global_params: ModelParams
    clients: list[ClientState]

    def eval_params(self, client: ClientState, config: RunConfig) -> ModelParams:
        return client.params if config.evaluates_local else self.global_params


def _check_finite(params: ModelParams, round_: int, client: int | str) -> None:
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericalError(f"non-finite values in {name} after round {round_} (client {client})")


def client_seed(run_seed: int, cid: int) -> int:
    return int(np.random.SeedSequence([run_seed, cid]).generate_state(1)[0])


def run_experiment(config: RunConfig, client_splits: Sequence[ClientSplit], modalities,
                   num_classes: int, extra: dict | None = None,
                   client_seeds: Sequence[int] | None = None) -> RunResult:
    """Run ``config.rounds`` rounds of dispatch, client training, and server averaging.

    Each client draws its batches from its own seed; by default that seed is
    derived from ``config.seed`` and the client id.
    """
    if not client_splits:
        raise ValueError("run_experiment: needs at least one client")
    if client_seeds is None:
        client_seeds = [client_seed(config.seed, i) for i in range(len(client_splits))]
    elif len(client_seeds) != len(client_splits):
        raise ValueError("run_experiment: one seed per client required")
    start = time.perf_counter()
    arch = build_architecture(config, modalities, num_classes)
    global_params = init_model(arch, _rng(config.seed, 0))
    clients = [ClientState.from_split(i, s, global_params.copy(), seed=int(cs))
               for i, (s, cs) in enumerate(zip(client_splits, client_seeds))]
    report = RunReport(config=config.to_dict(), seed=config.seed, extra=dict(extra or {}))

    for t in range(1, config.rounds + 1):
        trained = []
        for client in clients:
            rng = _rng(client.seed, t)
            if config.uses_pa and len(client.labeled):
                if client.weights is None or config.w_reinit:
                    client.weights = ones_like_encoder(global_params)
                init, client.weights = personal_aggregation(
                    arch, global_params, client.params, client.weights, client.labeled,
                    lr_w=config.lr_w, passes=config.w_passes, batch_size=config.batch_size,
                    rng=rng, w_diff=config.w_diff)
            else:
                init = naive_init(global_params)
            client.params = client_local_training(arch, client, init, config, rng, global_params)
            _check_finite(client.params, t, client.id)
            trained.append(client.params)
        global_params = server_aggregate(trained)
        _check_finite(global_params, t, "server")

        if t % config.eval_every == 0 or t == config.rounds:
            per_client = []
            for client in clients:
                params = client.params if config.evaluates_local else global_params
                m = evaluate(client.test.labels, predict(arch, params, client.test), num_classes)
                per_client.append({"client": client.id, **m})
            report.rounds.append({"round": t, "clients": per_client, "mean": _mean_metrics(per_client)})

    if report.rounds:
        last = report.rounds[-1]
        report.final = {"round": last["round"], "clients": last["clients"], **last["mean"]}
    report.wall_time = time.perf_counter() - start
    return RunResult(report, arch, global_params, clients)


def dump_embeddings(result: RunResult, config: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fused features and labels of every client's test set, stacked in client order."""
    feats, labels = [], []
    for client in result.clients:
        feats.append(embed(result.arch, result.eval_params(client, config), client.test))
        labels.append(client.test.labels)
    return np.concatenate(feats), np.concatenate(labels)


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **kw)
