# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Method comparison on the synthetic benchmark
#
# FedAvg against the personalized method and its two ablations.  Set
# `ROUNDS = 50` and `SEEDS = range(5)` for the full benchmark (a few minutes
# per seed on one core); the defaults here finish quickly.

# %%
import os
from dataclasses import replace

import numpy as np

from fedepa.experiment import BENCHMARK, run_cell

ROUNDS = int(os.environ.get("FEDEPA_ROUNDS", 10))
SEEDS = range(int(os.environ.get("FEDEPA_SEEDS", 1)))
METHODS = ("fedavg", "fedepa_wo_ua", "fedepa_wo_pa", "fedepa")

# %%
oa = {m: [] for m in METHODS}
for seed in SEEDS:
    for m in METHODS:
        exp = replace(BENCHMARK, run=replace(BENCHMARK.run, method=m, seed=seed, rounds=ROUNDS, eval_every=ROUNDS))
        oa[m].append(run_cell(exp).report.final["oa"])

# %%
for m in METHODS:
    print(f"{m:14s} mean OA {np.mean(oa[m]):.4f}  per seed {np.round(oa[m], 4).tolist()}")
