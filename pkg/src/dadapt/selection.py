"""Collaborator selection by per-candidate cross-entropy error bounds.

Every candidate domain carries a trained hypothesis (extractor plus
classifier head), its in-domain L1 error on a small labeled validation
set, and two Lipschitz numbers: a bound on the hypothesis itself and one
for the cross-entropy loss.  For a new target, each candidate's predicted
target error is

    theta_ce * (eps_l1 + 2 * theta * w1)

where w1 is the distributed distance estimate between the candidate's
and the target's feature distributions under the candidate's encoder.
The collaborator is the argmin of that bound; the full per-candidate
table is kept so the choice can be audited and recomputed exactly.

The hypothesis Lipschitz number is the product of per-layer spectral
norms, which is why training keeps those norms capped.  The loss constant
defaults to the analytic softmax cross-entropy bound: the gradient with
respect to logits is softmax minus one-hot, whose L2 norm never exceeds
sqrt(2).  An empirical per-domain estimate is available as an alternative
for sanity checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .domains import DomainDataset
from .losses import l1_error, one_hot, softmax_probs
from .nets import Mlp, lipschitz_constant, mlp_forward
from .wasserstein import EstimationError, W1Config, estimate_w1

THETA_CE = float(np.sqrt(2.0))


class SelectionError(RuntimeError):
    """No usable collaborator could be determined."""


def hypothesis_logits(extractor: Mlp, classifier: Mlp, features: np.ndarray) -> np.ndarray:
    return mlp_forward(classifier, mlp_forward(extractor, features)[-1])[-1]


def hypothesis_error(extractor: Mlp, classifier: Mlp, dataset: DomainDataset) -> float:
    """Mean L1 distance between predicted distributions and true labels."""
    if dataset.labels is None:
        raise SelectionError("error measurement needs a labeled dataset")
    probs = softmax_probs(hypothesis_logits(extractor, classifier, dataset.features))
    return l1_error(probs, one_hot(dataset.labels, dataset.num_classes))


def hypothesis_lipschitz(extractor: Mlp, classifier: Mlp) -> float:
    return lipschitz_constant(extractor) * lipschitz_constant(classifier)


def empirical_theta_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    """Largest cross-entropy difference quotient over same-label logit pairs.

    A sampled stand-in for the loss Lipschitz constant: within each class,
    the loss difference between two logit vectors divided by their
    distance.  Bounded above by the analytic sqrt(2).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise SelectionError("logits and labels must align")
    # Per-sample losses, stabilized: ce = logsumexp(z) - z[label].
    zc = z - z.max(axis=1, keepdims=True)
    ce = np.log(np.exp(zc).sum(axis=1)) - zc[np.arange(len(y)), y]
    best = 0.0
    seen_pair = False
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        if len(idx) < 2:
            continue
        gaps = np.linalg.norm(z[idx][:, None, :] - z[idx][None, :, :], axis=-1)
        diffs = np.abs(ce[idx][:, None] - ce[idx][None, :])
        usable = gaps > 1e-12
        if usable.any():
            seen_pair = True
            best = max(best, float((diffs[usable] / gaps[usable]).max()))
    if not seen_pair:
        raise SelectionError("need two distinct same-label samples for the estimate")
    return best


@dataclass
class Candidate:
    """A domain whose trained model is available for collaboration."""

    domain_id: int
    extractor: Mlp
    classifier: Mlp
    validation: DomainDataset
    unlabeled: DomainDataset
    theta: float
    theta_ce: float
    eps_l1: float
    address: str | None = None


def make_candidate(
    domain_id: int,
    extractor: Mlp,
    classifier: Mlp,
    validation: DomainDataset,
    unlabeled: DomainDataset,
    theta_ce_mode: str = "analytic",
    address: str | None = None,
) -> Candidate:
    if theta_ce_mode == "analytic":
        theta_ce = THETA_CE
    elif theta_ce_mode == "empirical":
        if validation.labels is None:
            raise SelectionError("empirical loss constant needs labels")
        logits = hypothesis_logits(extractor, classifier, validation.features)
        theta_ce = empirical_theta_ce(logits, validation.labels)
    else:
        raise SelectionError(f"unknown theta_ce_mode {theta_ce_mode!r}")
    return Candidate(
        domain_id=domain_id,
        extractor=extractor,
        classifier=classifier,
        validation=validation,
        unlabeled=unlabeled,
        theta=hypothesis_lipschitz(extractor, classifier),
        theta_ce=theta_ce,
        eps_l1=hypothesis_error(extractor, classifier, validation),
        address=address,
    )


def candidate_error(candidate: Candidate, validation: DomainDataset) -> float:
    return hypothesis_error(candidate.extractor, candidate.classifier, validation)


class CandidateSet:
    """Append-only pool of collaborator candidates, seeded by the source."""

    def __init__(self, source: Candidate):
        self._rows: list[Candidate] = [source]

    def add(self, candidate: Candidate) -> None:
        if candidate.domain_id in self.ids:
            raise SelectionError(f"duplicate candidate id {candidate.domain_id}")
        self._rows.append(candidate)

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(c.domain_id for c in self._rows)

    @property
    def source(self) -> Candidate:
        return self._rows[0]

    def get(self, domain_id: int) -> Candidate:
        for c in self._rows:
            if c.domain_id == domain_id:
                return c
        raise SelectionError(f"no candidate with id {domain_id}")

    def __iter__(self):
        return iter(tuple(self._rows))

    def __len__(self) -> int:
        return len(self._rows)


def collaboration_bound(eps_l1: float, theta: float, theta_ce: float, w1: float) -> float:
    """Predicted target cross-entropy error, in float64 throughout."""
    for name, v in (("eps_l1", eps_l1), ("theta", theta), ("theta_ce", theta_ce), ("w1", w1)):
        if v < 0:
            raise SelectionError(f"{name} must be non-negative, got {v}")
    return float(theta_ce * (eps_l1 + 2.0 * theta * w1))


def candidate_bound(candidate: Candidate, w1: float) -> float:
    return collaboration_bound(candidate.eps_l1, candidate.theta, candidate.theta_ce, w1)


@dataclass
class BoundRow:
    """One candidate's audited bound components."""

    domain_id: int
    eps_l1: float
    theta: float
    theta_ce: float
    w1: float | None
    bound: float | None
    feasible: bool
    note: str = ""


@dataclass
class BoundReport:
    """Everything a selection decision was based on."""

    target_id: int
    rows: list[BoundRow] = field(default_factory=list)
    chosen_id: int | None = None
    tie_break: str = ""

    @property
    def chosen_row(self) -> BoundRow:
        for row in self.rows:
            if row.domain_id == self.chosen_id:
                return row
        raise SelectionError("report has no chosen row")

    def to_json_dict(self) -> dict:
        return {
            "target_id": self.target_id,
            "chosen_id": self.chosen_id,
            "tie_break": self.tie_break,
            "candidates": [
                {
                    "domain_id": r.domain_id,
                    "eps_l1": r.eps_l1,
                    "theta": r.theta,
                    "theta_ce": r.theta_ce,
                    "w1": r.w1,
                    "bound": r.bound,
                    "feasible": r.feasible,
                    "note": r.note,
                }
                for r in self.rows
            ],
        }


def _estimate_candidate_w1(
    candidate: Candidate,
    target_unlabeled: DomainDataset,
    config: W1Config,
    transport: str,
) -> float:
    cfg = replace(
        config,
        encoder_dims=candidate.extractor.dims,
        encoder_activations=candidate.extractor.activations,
    )
    est = estimate_w1(
        candidate.extractor, candidate.unlabeled, target_unlabeled, cfg,
        transport=transport,
    )
    return est.clamped


def select_collaborator(
    candidates: CandidateSet,
    target_unlabeled: DomainDataset,
    w1_config: W1Config,
    transport: str = "loopback",
    w1_runner=None,
) -> tuple[Candidate, BoundReport]:
    """Pick the candidate with the smallest predicted target error.

    Each candidate is measured against the target with its own encoder;
    a failed estimate marks that candidate infeasible instead of aborting
    the selection.  Ties go to the lowest domain id.
    """
    if len(candidates) == 0:
        raise SelectionError("empty candidate set")
    runner = w1_runner or _estimate_candidate_w1
    report = BoundReport(target_id=target_unlabeled.domain_id)
    for cand in candidates:
        try:
            w1 = float(runner(cand, target_unlabeled, w1_config, transport))
        except EstimationError as exc:
            report.rows.append(BoundRow(
                domain_id=cand.domain_id,
                eps_l1=cand.eps_l1,
                theta=cand.theta,
                theta_ce=cand.theta_ce,
                w1=None,
                bound=None,
                feasible=False,
                note=f"distance estimate failed: {exc}",
            ))
            continue
        report.rows.append(BoundRow(
            domain_id=cand.domain_id,
            eps_l1=cand.eps_l1,
            theta=cand.theta,
            theta_ce=cand.theta_ce,
            w1=w1,
            bound=candidate_bound(cand, w1),
            feasible=True,
        ))
    feasible = [r for r in report.rows if r.feasible]
    if not feasible:
        raise SelectionError("every candidate's distance estimate failed")
    best = min(feasible, key=lambda r: (r.bound, r.domain_id))
    if sum(1 for r in feasible if r.bound == best.bound) > 1:
        report.tie_break = "equal bounds; lowest domain id wins"
    report.chosen_id = best.domain_id
    return candidates.get(best.domain_id), report
