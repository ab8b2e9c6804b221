"""Distributed adversarial domain adaptation over a two-node wire protocol.

A labeled source model is adapted to a sequence of unlabeled target
domains.  Each arriving target picks the collaborator with the smallest
predicted error bound (selection), then aligns its feature extractor
against that collaborator through an adversarial game whose discriminator
gradients are exchanged lazily every few steps (adaptation).  Distances
between domains are estimated by a Lipschitz-bounded critic trained over
the same protocol.  Everything runs on a small dense-network core with
deterministic, seed-addressed randomness, so distributed runs are exactly
reproducible.
"""
from .domains import DomainDataset, load_csv, make_rotated_blobs, make_rotated_moons, save_csv
from .lazysync import LazySyncConfig, adapt_pair, reference_adapt, run_node
from .leakage import gradient_matching_attack, setup_from_trace, trace_exposure_check
from .losses import ADDA, GRL, LossVariant, wda
from .nets import Mlp, build_mlp, load_mlp, mlp_digest, save_mlp
from .pipeline import ExperimentConfig, emit_report, evaluate, run_sequence, train_source
from .selection import Candidate, CandidateSet, select_collaborator
from .wasserstein import W1Config, estimate_w1, identity_encoder

__version__ = "0.1.0"

__all__ = [
    "ADDA",
    "Candidate",
    "CandidateSet",
    "DomainDataset",
    "ExperimentConfig",
    "GRL",
    "LazySyncConfig",
    "LossVariant",
    "Mlp",
    "W1Config",
    "adapt_pair",
    "build_mlp",
    "emit_report",
    "estimate_w1",
    "evaluate",
    "gradient_matching_attack",
    "identity_encoder",
    "load_csv",
    "load_mlp",
    "make_rotated_blobs",
    "make_rotated_moons",
    "mlp_digest",
    "reference_adapt",
    "run_node",
    "run_sequence",
    "save_csv",
    "save_mlp",
    "select_collaborator",
    "setup_from_trace",
    "trace_exposure_check",
    "train_source",
    "wda",
]
