"""Experiment files: one document holding the run config, the synthetic data
spec, the federation setup and optional sweep axes, plus helpers that turn it
into client splits, runs and sweep tables.

A document looks like::

    run:        {method: fedepa, rounds: 50, lr: 0.05, align: {lambda2: 0.1}}
    data:       {num_classes: 5, samples_per_class: 200}
    federation: {num_clients: 8, beta: 0.5, label_ratio: 0.2}
    sweep:      {method: [fedavg, fedepa], seed: [0, 1, 2]}

Unknown keys anywhere are rejected.  The run seed drives the data draw
(``data.seed + run.seed``), the partition, the splits, and training.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from .alignment import AlignConfig
from .data import ClientSplit, SyntheticSpec, dirichlet_partition, generate_arrays, split_client_data
from .federation import NumericalError, RunConfig, RunResult, run_experiment

logger = logging.getLogger(__name__)

SWEEP_AXES = ("method", "beta", "label_ratio", "fusion_mode", "seed")
_RUN_AXES = ("method", "fusion_mode", "seed")
_FED_AXES = ("beta", "label_ratio")


class ConfigError(ValueError):
    """Malformed or unknown experiment configuration."""


@dataclass(frozen=True)
class FederationSetup:
    num_clients: int = 8
    beta: float = 0.5
    label_ratio: float = 0.2
    test_fraction: float = 0.2
    min_samples: int = 20  # per client, so every client can be split

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not 0 <= self.label_ratio <= 1:
            raise ValueError(f"label_ratio must be in [0, 1], got {self.label_ratio}")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


def _strict(cls, d: Any, where: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _parse_value(raw: str, item: str) -> Any:
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {item!r}: {e}") from e
    if isinstance(value, str):
        try:
            return float(value)  # YAML 1.1 reads "1e-3" as a string
        except ValueError:
            pass
    return value


@dataclass(frozen=True)
class ExperimentFile:
    run: RunConfig = RunConfig()
    data: SyntheticSpec = SyntheticSpec()
    federation: FederationSetup = FederationSetup()
    sweep: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentFile":
        if not isinstance(d, dict):
            raise ConfigError("experiment file must be a mapping at the top level")
        unknown = set(d) - {"run", "data", "federation", "sweep"}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        sweep = d.get("sweep") or {}
        if not isinstance(sweep, dict):
            raise ConfigError("sweep: expected a mapping of axis -> list")
        bad = set(sweep) - set(SWEEP_AXES)
        if bad:
            raise ConfigError(f"sweep: unknown axes {sorted(bad)}; expected a subset of {SWEEP_AXES}")
        sweep = {k: list(v) if isinstance(v, (list, tuple)) else [v] for k, v in sweep.items()}
        return cls(_strict(RunConfig, d.get("run"), "run"), _strict(SyntheticSpec, d.get("data"), "data"),
                   _strict(FederationSetup, d.get("federation"), "federation"), sweep)

    def to_dict(self) -> dict:
        return {"run": self.run.to_dict(), "data": self.data.to_dict(),
                "federation": asdict(self.federation), "sweep": {k: list(v) for k, v in self.sweep.items()}}

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentFile":
        """Read JSON or YAML (JSON is valid YAML).  Missing or unparsable files raise ConfigError."""
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        return cls.from_dict(doc or {})

    def with_overrides(self, overrides: Iterable[str]) -> "ExperimentFile":
        """Apply ``key=value`` strings.  Keys are dotted paths (``data.rho``,
        ``run.align.lambda2``); a bare key is looked up in run, then federation,
        then data.  Values are parsed as YAML scalars or lists."""
        doc = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {item!r} is not key=value")
            value = _parse_value(raw, item)
            path = key.split(".")
            if path[0] not in doc:
                owner = next((s for s in ("run", "federation", "data") if path[0] in doc[s]), None)
                if owner is None and path[0] == "align":
                    owner = "run"
                if owner is None:
                    raise ConfigError(f"override {item!r}: unknown key {path[0]!r}")
                path = [owner] + path
            node = doc
            for part in path[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(f"override {item!r}: {part!r} is not a section")
            node[path[-1]] = value
        return ExperimentFile.from_dict(doc)

    def cells(self) -> list["ExperimentFile"]:
        """Cartesian product of the sweep axes, in axis order of SWEEP_AXES; no sweep means one cell."""
        for axis, values in self.sweep.items():
            if not values:
                raise ConfigError(f"sweep axis {axis!r} is empty")
        axes = [a for a in SWEEP_AXES if a in self.sweep]
        out = []
        for combo in itertools.product(*(self.sweep[a] for a in axes)):
            run_kw = {a: v for a, v in zip(axes, combo) if a in _RUN_AXES}
            fed_kw = {a: v for a, v in zip(axes, combo) if a in _FED_AXES}
            try:
                out.append(ExperimentFile(replace(self.run, **run_kw), self.data,
                                          replace(self.federation, **fed_kw), {}))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"sweep cell {dict(zip(axes, combo))}: {e}") from e
        return out


# Desk-scale benchmark: 5 classes, image/sequence/tabular views, 8 clients,
# beta 0.5, 20% labels, 50 rounds.  Step sizes and the divergence weight
# differ from the RunConfig defaults; the README lists why.
BENCHMARK = ExperimentFile(
    run=RunConfig(method="fedepa", rounds=50, lr=0.05, align_lr=0.003, lr_w=1.0,
                  align=AlignConfig(lambda2=-0.001), eval_every=50),
    data=SyntheticSpec(num_classes=5, samples_per_class=200),
    federation=FederationSetup(num_clients=8, beta=0.5, label_ratio=0.2),
)


def prepare_clients(data: SyntheticSpec, fed: FederationSetup, seed: int) -> list[ClientSplit]:
    """Generate the dataset, partition it across clients, and split each client."""
    ds = generate_arrays(replace(data, seed=data.seed + seed))
    parts = dirichlet_partition(ds.labels, fed.num_clients, fed.beta, seed=seed, min_samples=fed.min_samples)
    return [split_client_data(ds.subset(idx), fed.label_ratio,
                              seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                              test_fraction=fed.test_fraction)
            for i, idx in enumerate(parts)]


def run_cell(exp: ExperimentFile) -> RunResult:
    splits = prepare_clients(exp.data, exp.federation, exp.run.seed)
    extra = {"data": exp.data.to_dict(), "federation": asdict(exp.federation)}
    return run_experiment(exp.run, splits, exp.data.modalities, exp.data.num_classes, extra=extra)


SUMMARY_FIELDS = ("method", "beta", "label_ratio", "fusion_mode", "seed", "status", "oa", "ba", "f1", "wall_time")


def cell_row(exp: ExperimentFile) -> dict:
    return {"method": exp.run.method, "beta": exp.federation.beta, "label_ratio": exp.federation.label_ratio,
            "fusion_mode": exp.run.fusion_mode, "seed": exp.run.seed}


def _run_cell_safe(exp: ExperimentFile) -> tuple[dict, str | None]:
    """Summary row and report JSON (None on failure).  Failures are recorded, not raised."""
    row = cell_row(exp)
    try:
        result = run_cell(exp)
    except NumericalError as e:
        logger.error("cell %s aborted: %s", row, e)
        return {**row, "status": "nan_abort", "oa": None, "ba": None, "f1": None, "wall_time": None}, None
    except (ValueError, RuntimeError) as e:
        logger.error("cell %s failed: %s", row, e)
        return {**row, "status": f"error: {e}", "oa": None, "ba": None, "f1": None, "wall_time": None}, None
    f = result.report.final
    row.update(status="ok", oa=f["oa"], ba=f["ba"], f1=f["f1"], wall_time=result.report.wall_time)
    return row, result.report.to_json()


def run_sweep(exp: ExperimentFile, workers: int = 1) -> list[tuple[dict, str | None]]:
    """Run every cell; ``workers > 1`` uses a process pool.  Results come back in cell order."""
    cells = exp.cells()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_cell_safe, cells))
    return [_run_cell_safe(c) for c in cells]


def summary_csv(rows: Sequence[dict], with_time: bool = False) -> str:
    cols = [c for c in SUMMARY_FIELDS if with_time or c != "wall_time"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k]) for k in cols})
    return buf.getvalue()


def summary_table(rows: Sequence[dict]) -> list[dict]:
    """Mean and std of OA/BA/F1 over seeds for each (method, beta, label_ratio, fusion_mode)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        key = (r["method"], r["beta"], r["label_ratio"], r["fusion_mode"])
        groups.setdefault(key, []).append(r)
    table = []
    for (method, beta, ratio, mode), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        entry = {"method": method, "beta": beta, "label_ratio": ratio, "fusion_mode": mode,
                 "seeds": [r["seed"] for r in ok], "failed": len(rs) - len(ok)}
        for k in ("oa", "ba", "f1"):
            vals = [r[k] for r in ok]
            entry[k] = float(np.mean(vals)) if vals else None
            entry[k + "_std"] = float(np.std(vals)) if vals else None
        table.append(entry)
    return table


def summary_json(rows: Sequence[dict]) -> str:
    return json.dumps({"cells": [{k: v for k, v in r.items() if k != "wall_time"} for r in rows],
                       "table": summary_table(rows)}, indent=2, sort_keys=True)
