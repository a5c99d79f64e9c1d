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
# # Client heterogeneity under Dirichlet partitioning
#
# Smaller beta concentrates each client on fewer classes.  The table below
# shows class histograms per client and the mean total-variation distance
# from uniform.

# %%
import numpy as np

from fedepa.data import SyntheticSpec, dirichlet_partition, generate_arrays, split_client_data

ds = generate_arrays(SyntheticSpec(num_classes=5, samples_per_class=200))
C = 5

# %%
for beta in (0.1, 0.5, 1.0, 10.0):
    parts = dirichlet_partition(ds.labels, 8, beta, seed=0, min_samples=20)
    hist = np.array([np.bincount(ds.labels[p], minlength=C) for p in parts])
    props = hist / hist.sum(axis=1, keepdims=True)
    tv = 0.5 * np.abs(props - 1 / C).sum(axis=1).mean()
    print(f"beta={beta:<5} mean TV from uniform = {tv:.3f}")
    for i, row in enumerate(hist):
        print(f"   client {i}: {row.tolist()}")

# %% [markdown]
# ## Per-client splits
#
# Each client keeps 20% of its data for testing; 20% of the rest is labeled
# and the remainder is visible to training only through its inputs.

# %%
parts = dirichlet_partition(ds.labels, 8, 0.5, seed=0, min_samples=20)
for i, p in enumerate(parts[:3]):
    s = split_client_data(ds.subset(p), 0.2, seed=i)
    print(f"client {i}: labeled {len(s.labeled)}, unlabeled {len(s.unlabeled)}, test {len(s.test)}")
