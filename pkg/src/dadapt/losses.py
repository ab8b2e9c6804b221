"""Losses for adversarial feature alignment.

Three variants share one interface: label-inversion ("adda"), gradient
reversal ("grl") and a Wasserstein critic ("wda").  Besides the joint
two-domain losses there are per-domain pieces, because in the two-node
protocol each side only ever sees its own domain's discriminator outputs.

Gradient conventions: every returned gradient already includes the 1/batch
factor of the mean, so downstream backward passes are pure vector-Jacobian
products.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nets import GradientSet, Mlp, mlp_backward, mlp_forward

F32 = np.float32

VARIANTS = ("adda", "grl", "wda")


class InputError(ValueError):
    """Loss inputs violate the contract (empty batch, bad labels, ...)."""


@dataclass(frozen=True)
class LossVariant:
    """Which adversarial objective to train, plus its knobs.

    gamma is the gradient-penalty weight and only meaningful for "wda".
    """

    kind: str = "adda"
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise InputError(f"unknown loss variant {self.kind!r}")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise InputError("gamma must be finite and >= 0")


ADDA = LossVariant("adda")
GRL = LossVariant("grl")


def wda(gamma: float = 10.0) -> LossVariant:
    return LossVariant("wda", gamma=gamma)


class DiscLoss(NamedTuple):
    loss: float
    grad_src: np.ndarray
    grad_tgt: np.ndarray


class MapLoss(NamedTuple):
    loss: float
    grad_tgt: np.ndarray
    grad_src: np.ndarray | None


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _flat(d: np.ndarray, name: str) -> tuple[np.ndarray, tuple[int, ...]]:
    arr = np.asarray(d, dtype=np.float64)
    if arr.size == 0:
        raise InputError(f"{name} is empty")
    if arr.ndim == 2 and arr.shape[1] == 1:
        return arr[:, 0], arr.shape
    if arr.ndim == 1:
        return arr, arr.shape
    raise InputError(f"{name} must be shape [n] or [n, 1], got {arr.shape}")


def classification_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross entropy; returns (loss, dLoss/dLogits).

    Log-sum-exp stabilized, so saturated logits neither overflow nor lose
    the gradient.  The gradient is (softmax - onehot) / batch.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or z.shape[1] < 2:
        raise InputError(f"logits must be [n, k>=2], got {z.shape}")
    if z.shape[0] == 0:
        raise InputError("empty batch")
    if y.shape != (z.shape[0],):
        raise InputError("labels must be 1-d and match the batch")
    if not np.issubdtype(y.dtype, np.integer):
        raise InputError("labels must be integers")
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise InputError("label out of range")
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    loss = float(np.mean(lse[:, 0] - z[np.arange(z.shape[0]), y]))
    probs = np.exp(z - lse)
    probs[np.arange(z.shape[0]), y] -= 1.0
    grad = (probs / z.shape[0]).astype(F32)
    return loss, grad


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise InputError("logits must be 2-d")
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def discriminator_loss(variant: LossVariant, d_src: np.ndarray, d_tgt: np.ndarray) -> DiscLoss:
    """Joint two-domain discriminator objective (to be minimized).

    adda/grl: average of the two per-domain BCE means, source labeled 1 and
    target labeled 0.  wda: negative critic gap -(mean(d_src) - mean(d_tgt)).
    """
    zs, src_shape = _flat(d_src, "d_src")
    zt, tgt_shape = _flat(d_tgt, "d_tgt")
    ns, nt = zs.shape[0], zt.shape[0]
    if variant.kind in ("adda", "grl"):
        loss = 0.5 * (float(np.mean(_softplus(-zs))) + float(np.mean(_softplus(zt))))
        gs = 0.5 * (_sigmoid(zs) - 1.0) / ns
        gt = 0.5 * _sigmoid(zt) / nt
    else:
        loss = -(float(np.mean(zs)) - float(np.mean(zt)))
        gs = np.full(ns, -1.0 / ns)
        gt = np.full(nt, 1.0 / nt)
    return DiscLoss(loss, gs.astype(F32).reshape(src_shape), gt.astype(F32).reshape(tgt_shape))


def domain_side_loss(variant: LossVariant, d: np.ndarray, side: str) -> tuple[float, np.ndarray]:
    """One node's local share of the discriminator objective.

    The two shares are deliberately unweighted: summing the source and
    target shares and halving reproduces the joint adda/grl loss, and the
    synced gradient divides by the combined buffer count anyway.
    """
    if side not in ("src", "tgt"):
        raise InputError(f"side must be 'src' or 'tgt', got {side!r}")
    z, shape = _flat(d, "d")
    n = z.shape[0]
    if variant.kind in ("adda", "grl"):
        if side == "src":
            loss = float(np.mean(_softplus(-z)))
            grad = (_sigmoid(z) - 1.0) / n
        else:
            loss = float(np.mean(_softplus(z)))
            grad = _sigmoid(z) / n
    else:
        sign = -1.0 if side == "src" else 1.0
        loss = sign * float(np.mean(z))
        grad = np.full(n, sign / n)
    return loss, grad.astype(F32).reshape(shape)


def mapping_loss(variant: LossVariant, d_tgt: np.ndarray, d_src: np.ndarray | None = None) -> MapLoss:
    """Feature-alignment objective driving the target extractor.

    adda: BCE of target outputs against the source label (label inversion).
    grl: exact negation of the joint discriminator loss, gradients included;
    requires d_src.  wda: -mean(d_tgt).
    """
    if variant.kind == "grl":
        if d_src is None:
            raise InputError("grl mapping loss needs d_src")
        dl = discriminator_loss(variant, d_src, d_tgt)
        return MapLoss(-dl.loss, -dl.grad_tgt, -dl.grad_src)
    zt, shape = _flat(d_tgt, "d_tgt")
    n = zt.shape[0]
    if variant.kind == "adda":
        loss = float(np.mean(_softplus(-zt)))
        grad = (_sigmoid(zt) - 1.0) / n
    else:
        loss = -float(np.mean(zt))
        grad = np.full(n, -1.0 / n)
    return MapLoss(loss, grad.astype(F32).reshape(shape), None)


def target_mapping_loss(variant: LossVariant, d_tgt: np.ndarray) -> tuple[float, np.ndarray]:
    """The target node's local mapping piece (no source outputs available).

    For grl this is the negated local share of the discriminator loss; the
    source half would drive the frozen collaborator extractor and never
    materializes.
    """
    if variant.kind == "grl":
        loss, grad = domain_side_loss(variant, d_tgt, "tgt")
        return -loss, -grad
    out = mapping_loss(variant, d_tgt)
    return out.loss, out.grad_tgt


# Step for the symmetric finite difference inside gradient_penalty.
PENALTY_FD_STEP = 1e-3


def gradient_penalty(disc: Mlp, batch: np.ndarray, gamma: float) -> tuple[float, GradientSet]:
    """Two-sided unit-norm gradient penalty gamma * mean((|grad_x D(x)| - 1)^2).

    The penalty value comes from one exact backward pass per batch.  Its
    gradient w.r.t. the discriminator parameters needs second-order terms,
    which are approximated by a symmetric finite difference of parameter
    gradients along each sample's input-gradient direction.  Rows with a
    zero input gradient contribute the constant 1 to the value and use the
    zero subgradient.
    """
    if not np.isfinite(gamma) or gamma < 0:
        raise InputError("gamma must be finite and >= 0")
    x = np.asarray(batch, dtype=F32)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("batch must be a non-empty 2-d array")
    if disc.out_dim != 1:
        raise InputError("gradient penalty needs a scalar-output discriminator")
    acts = mlp_forward(disc, x)
    ones = np.ones_like(acts[-1])
    _, gin = mlp_backward(disc, acts, ones)
    r = np.linalg.norm(gin.astype(np.float64), axis=1)
    n = x.shape[0]
    value = float(gamma * np.mean((r - 1.0) ** 2))
    if gamma == 0.0:
        return value, GradientSet.zeros_for(disc)
    h = PENALTY_FD_STEP
    safe_r = np.where(r > 0, r, 1.0)
    unit = (gin.astype(np.float64) / safe_r[:, None]).astype(F32)
    unit[r == 0] = 0
    coef = gamma * 2.0 * (r - 1.0) / n / (2.0 * h)
    coef[r == 0] = 0.0
    coef_col = coef.astype(F32)[:, None]
    xp = x + F32(h) * unit
    xm = x - F32(h) * unit
    gp, _ = mlp_backward(disc, mlp_forward(disc, xp), coef_col)
    gm, _ = mlp_backward(disc, mlp_forward(disc, xm), coef_col)
    return value, gp.minus(gm)


def l1_error(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean L1 distance between predicted distributions and one-hot labels."""
    p = np.asarray(probs, dtype=np.float64)
    o = np.asarray(onehot, dtype=np.float64)
    if p.shape != o.shape or p.ndim != 2 or p.shape[0] == 0:
        raise InputError("probs and onehot must be matching non-empty 2-d arrays")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-5:
        raise InputError("probability rows must sum to 1 within 1e-5")
    if not np.all((o == 0.0) | (o == 1.0)) or np.abs(o.sum(axis=1) - 1.0).max() > 0:
        raise InputError("onehot rows must be one-hot")
    return float(np.mean(np.abs(p - o).sum(axis=1)))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise InputError("labels must be a 1-d integer array")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InputError("label out of range")
    out = np.zeros((y.shape[0], num_classes), dtype=np.float64)
    out[np.arange(y.shape[0]), y] = 1.0
    return out
