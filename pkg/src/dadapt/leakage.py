"""Gradient-leakage audit: inversion attack plus structural trace checks.

The adaptation protocol exchanges discriminator gradient buffers and, once
per run, the collaborator's extractor weights.  This module asks whether
that traffic lets a wire observer reconstruct a node's private inputs by
gradient matching: optimize a dummy input and soft label until the
gradients they induce reproduce the observed ones.  Running the attack
requires both the model weights and gradients that cover the whole chain
from raw input to the loss.  Neither node's traffic contains both halves,
and the harness reports which half is missing instead of running a doomed
optimization.

A full-knowledge baseline (weights plus all gradients handed over) shows
the attack machinery does succeed once the structural gap is closed, so
the negative results above are evidence about the protocol, not about a
broken attacker.

The attack arithmetic runs in float64 with its own forward/backward pass:
the matching-loss gradient is taken by central differences, which would
drown in float32 rounding noise.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .lazysync import LazySyncConfig
from .nets import GradientSet, LEAKY_SLOPE, Mlp, load_mlp_weights, param_count
from .wire import (
    MSG_DISC_GRAD,
    MSG_MODEL_INIT,
    MSG_NAMES,
    MSG_TYPES,
    FrameLog,
    decode_frame,
)

MISSING_WEIGHTS = "weights"
MISSING_EXTRACTOR_GRADIENTS = "extractor_gradients"


class LeakageError(RuntimeError):
    """Audit harness misuse or undecodable trace."""


# ---------------------------------------------------------------------------
# Attack setup and feasibility.

@dataclass(frozen=True)
class AttackConfig:
    """Optimizer settings for the gradient-matching loop."""

    iterations: int = 5000
    lr: float = 0.1
    init_scale: float = 0.8
    fd_step: float = 1e-6
    seed: int = 0


@dataclass
class MissingKnowledge:
    """Names the half of the attack prerequisites the trace lacks."""

    missing: str
    detail: str


@dataclass
class AttackSetup:
    """What an observer holds when attempting gradient inversion.

    weights is the victim model from raw input to logits, when the traffic
    exposed one; gradients are the observed loss gradients, which may belong
    to a different parameter subset than the weights (that mismatch is
    exactly what makes the protocol traces non-invertible).
    """

    weights: Mlp | None
    gradients: GradientSet | None
    gradient_source: str = "model"
    truth: np.ndarray | None = None
    truth_label: int | None = None
    config: AttackConfig = field(default_factory=AttackConfig)


@dataclass
class AttackResult:
    missing: MissingKnowledge | None
    reconstruction: np.ndarray | None = None
    label: int | None = None
    matching_trace: list[float] = field(default_factory=list)
    mse: float | None = None

    @property
    def feasible(self) -> bool:
        return self.missing is None


def _gradients_cover(net: Mlp, grads: GradientSet) -> bool:
    if len(grads.entries) != len(net.layers):
        return False
    return all(
        dw.shape == ly.weights.shape and db.shape == ly.bias.shape
        for (dw, db), ly in zip(grads.entries, net.layers)
    )


def attack_feasibility(setup: AttackSetup) -> MissingKnowledge | None:
    """None when the attack can run; otherwise what is missing and why."""
    if setup.weights is None:
        return MissingKnowledge(
            MISSING_WEIGHTS,
            "no model weights appear in the observed traffic, so dummy "
            "gradients cannot be generated at all",
        )
    if setup.gradients is None or not _gradients_cover(setup.weights, setup.gradients):
        return MissingKnowledge(
            MISSING_EXTRACTOR_GRADIENTS,
            f"observed gradients belong to the {setup.gradient_source} "
            "parameters and do not cover the chain from raw input through "
            "the extractor",
        )
    return None


# ---------------------------------------------------------------------------
# Float64 replica of the dense forward/backward, attacker-side.

def _act64(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0.0, z, float(LEAKY_SLOPE) * z)
    raise LeakageError(f"unsupported activation {name!r}")


def _act64_grad(name: str, out: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(out)
    if name == "relu":
        return (out > 0.0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(out > 0.0, 1.0, float(LEAKY_SLOPE))
    raise LeakageError(f"unsupported activation {name!r}")


def _weights64(net: Mlp) -> list[tuple[np.ndarray, np.ndarray, str]]:
    return [
        (ly.weights.astype(np.float64), ly.bias.astype(np.float64), ly.activation)
        for ly in net.layers
    ]


def _softmax64(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def _sample_gradients(layers, x: np.ndarray, label_probs: np.ndarray) -> np.ndarray:
    """Flat loss gradient for one input under a soft cross-entropy label."""
    a = x
    acts = [a]
    for w, b, name in layers:
        a = _act64(name, w @ a + b)
        acts.append(a)
    delta = _softmax64(acts[-1]) - label_probs
    per_layer: list = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _, _ = layers[i]
        per_layer[i] = (np.outer(delta, acts[i]).ravel(), delta)
        if i:
            delta = (w.T @ delta) * _act64_grad(layers[i - 1][2], acts[i])
    return np.concatenate([np.concatenate([dw, db]) for dw, db in per_layer])


def _flat_observed(grads: GradientSet) -> np.ndarray:
    parts = []
    for dw, db in grads.entries:
        parts.append(dw.astype(np.float64).ravel())
        parts.append(db.astype(np.float64))
    return np.concatenate(parts)


def gradient_matching_attack(setup: AttackSetup) -> AttackResult:
    """Reconstruct the input behind observed gradients, when that is possible.

    Minimizes the squared distance between dummy and observed gradients by
    plain gradient descent with a cosine-annealed step, jointly over the
    dummy input and a soft dummy label.  The label is seeded from the sign
    structure of the last-layer bias gradient (the true class is the only
    negative entry for a one-hot cross-entropy sample).
    """
    missing = attack_feasibility(setup)
    if missing is not None:
        return AttackResult(missing=missing)
    cfg = setup.config
    layers = _weights64(setup.weights)
    observed = _flat_observed(setup.gradients)
    in_dim = setup.weights.layers[0].in_dim
    num_classes = setup.weights.layers[-1].out_dim

    label_hat = int(np.argmin(setup.gradients.entries[-1][1]))
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0xA77AC4])
    v = np.concatenate([
        rng.normal(0.0, cfg.init_scale, in_dim),
        4.0 * np.eye(num_classes)[label_hat],
    ])

    def matching_loss(vec: np.ndarray) -> float:
        dummy = _sample_gradients(
            layers, vec[:in_dim], _softmax64(vec[in_dim:])
        )
        return float(np.sum((dummy - observed) ** 2))

    h = cfg.fd_step
    trace = []
    grad = np.empty_like(v)
    for t in range(cfg.iterations):
        trace.append(matching_loss(v))
        for j in range(v.size):
            vp = v.copy()
            vp[j] += h
            vm = v.copy()
            vm[j] -= h
            grad[j] = (matching_loss(vp) - matching_loss(vm)) / (2.0 * h)
        lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * t / cfg.iterations))
        v = v - lr * grad
    trace.append(matching_loss(v))

    x_hat = v[:in_dim]
    result = AttackResult(
        missing=None,
        reconstruction=x_hat,
        label=int(np.argmax(v[in_dim:])),
        matching_trace=trace,
    )
    if setup.truth is not None:
        truth = np.asarray(setup.truth, dtype=np.float64).ravel()
        if truth.size != in_dim:
            raise LeakageError("truth input does not match the model input width")
        result.mse = float(np.mean((x_hat - truth) ** 2))
    return result


# ---------------------------------------------------------------------------
# Building setups from recorded protocol traffic.

def _sent_frames(log: FrameLog):
    if log.rows and not log.raw:
        raise LeakageError(
            "trace has summary rows but no raw frames; record with keep_bytes"
        )
    if len(log.raw) != len(log.rows):
        raise LeakageError("trace index and raw frames disagree")
    for row, raw in zip(log.rows, log.raw):
        if row["direction"] == "sent":
            yield decode_frame(raw)


def setup_from_trace(
    log: FrameLog,
    config: LazySyncConfig,
    truth: np.ndarray | None = None,
    truth_label: int | None = None,
) -> AttackSetup:
    """Assemble what an observer of one node's transmissions actually holds.

    log must be the victim node's own frame log with raw bytes retained;
    only its sent frames are used.  A collaborator's trace exposes the
    extractor weights (the one ModelInit) and discriminator gradient
    buffers; a target's trace exposes gradient buffers alone.
    """
    weights = None
    grads = None
    n_buffers = 0
    for frame in _sent_frames(log):
        if frame.msg_type == MSG_MODEL_INIT:
            weights = load_mlp_weights(config.build_extractor_shell(), frame.payload)
        elif frame.msg_type == MSG_DISC_GRAD:
            n_buffers += 1
            if grads is None:
                grads = GradientSet.from_bytes(frame.payload, config.build_discriminator())
    return AttackSetup(
        weights=weights,
        gradients=grads,
        gradient_source=f"discriminator ({n_buffers} buffers observed)",
        truth=truth,
        truth_label=truth_label,
    )


# ---------------------------------------------------------------------------
# Structural exposure check.

@dataclass
class ExposureReport:
    frames: int
    model_init_count: int
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.violations


def trace_exposure_check(log: FrameLog, extractor_params: int) -> ExposureReport:
    """Scan a frame log for traffic the protocol must never produce.

    extractor_params is the parameter count of the extractor whose
    gradients must stay private; any non-ModelInit frame whose payload is
    exactly that size is flagged, as is any unknown message type or a
    second ModelInit.  Works from the summary rows alone.
    """
    if extractor_params < 1:
        raise LeakageError("extractor_params must be positive")
    grad_bytes = 4 * extractor_params
    report = ExposureReport(frames=len(log.rows), model_init_count=0)
    if not log.rows:
        report.warnings.append("empty trace: nothing to audit")
        return report
    for i, row in enumerate(log.rows):
        kind = row["msg_type"]
        if kind not in MSG_TYPES:
            report.violations.append(f"frame {i}: unknown msg_type {kind}")
            continue
        if kind == MSG_MODEL_INIT:
            report.model_init_count += 1
            if report.model_init_count > 1:
                report.violations.append(
                    f"frame {i}: ModelInit repeated; weights must cross once per run"
                )
            if row["payload_len"] != grad_bytes:
                report.violations.append(
                    f"frame {i}: ModelInit payload is {row['payload_len']} bytes, "
                    f"collaborator extractor weights are {grad_bytes}"
                )
        elif row["payload_len"] == grad_bytes:
            report.violations.append(
                f"frame {i}: {MSG_NAMES.get(kind, kind)} payload matches the "
                f"extractor gradient size ({grad_bytes} bytes)"
            )
    return report


# ---------------------------------------------------------------------------
# Trace files: raw frames concatenated, plus a JSON index.

def save_trace(log: FrameLog, path) -> None:
    """Write the raw frame bytes back-to-back with a sidecar JSON index."""
    if log.rows and not log.raw:
        raise LeakageError("log has no raw frames; record with keep_bytes")
    offsets = []
    pos = 0
    with open(path, "wb") as fh:
        for raw in log.raw:
            fh.write(raw)
            offsets.append(pos)
            pos += len(raw)
    index = {
        "frames": [
            {**row, "offset": off}
            for row, off in zip(log.rows, offsets)
        ],
    }
    with open(f"{os.fspath(path)}.json", "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2)
        fh.write("\n")


def load_trace(path) -> FrameLog:
    with open(path, "rb") as fh:
        blob = fh.read()
    with open(f"{os.fspath(path)}.json", encoding="utf-8") as fh:
        index = json.load(fh)
    log = FrameLog(keep_bytes=True)
    frames = index["frames"]
    for i, row in enumerate(frames):
        start = row["offset"]
        end = frames[i + 1]["offset"] if i + 1 < len(frames) else len(blob)
        raw = blob[start:end]
        frame = decode_frame(raw)
        if frame.msg_type != row["msg_type"] or len(frame.payload) != row["payload_len"]:
            raise LeakageError(f"trace index disagrees with frame {i}")
        log.record(row["direction"], raw)
    return log
