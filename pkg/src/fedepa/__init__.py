"""Deterministic single-process simulator of multimodal personalized federated learning.

Clients hold image, sequence and tabular views of the same samples.  Each round a
client builds its starting model by blending the global and its previous local
encoder with learned elementwise weights, aligns its modality encoders on
unlabeled data, then trains on its labeled data; the server averages.
"""

from .alignment import AlignConfig, align_loss, contrastive_loss, hsic, hsic_loss, jsd, jsd_loss
from .data import (ClientSplit, Dataset, ModalityConfig, SyntheticSpec, UnlabeledSet, dirichlet_partition,
                   generate_arrays, generate_synthetic, split_client_data)
from .experiment import ConfigError, ExperimentFile, FederationSetup, prepare_clients, run_cell, run_sweep
from .federation import (METHODS, NumericalError, RunConfig, RunReport, personal_aggregation, run_experiment,
                         server_aggregate)
from .metrics import balanced_accuracy, confusion_matrix, evaluate, f1_score, overall_accuracy

__version__ = "0.1.0"
