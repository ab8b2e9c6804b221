"""Two-node adversarial adaptation with lazily synchronized discriminators.

One node (the collaborator) holds a frozen, previously trained extractor;
the other (the target) trains its own extractor against a discriminator
that exists as two bitwise-identical replicas, one per node.  Each node
accumulates its local discriminator gradients in a buffer; every
``sync_every`` steps the buffers are exchanged and averaged into
``g_sync``, which both replicas then apply at every step until the next
exchange.  Between exchanges the discriminators therefore move along a
stale but shared direction, which keeps the replicas identical without
per-step communication.

The per-step schedule, in order:

1. draw the local batch (deterministic in (seed, step)),
2. accumulate the local discriminator gradient into the buffer,
3. target only: apply the extractor gradient immediately,
4. at sync steps: exchange buffers, recompute g_sync, clear buffers,
5. apply the current g_sync to the local discriminator replica.

Before the first exchange g_sync is zero, so the discriminators idle
during steps 1..sync_every-1.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .domains import DomainDataset, batch_iter
from .losses import (
    LossVariant,
    domain_side_loss,
    gradient_penalty,
    target_mapping_loss,
)
from .nets import (
    AdamState,
    F32,
    GradientSet,
    Mlp,
    SgdState,
    build_mlp,
    load_mlp_weights,
    mlp_backward,
    mlp_digest,
    mlp_forward,
    mlp_weights_bytes,
    optimizer_step,
    project_mlp_,
    seed_key,
)
from .wire import (
    Endpoint,
    FrameLog,
    MSG_BYE,
    MSG_DISC_GRAD,
    MSG_HELLO,
    MSG_MODEL_INIT,
    ProtocolError,
    SyncFrame,
    loopback_pair,
    tcp_pair,
)

ROLES = ("collaborator", "target")

# Disjoint sub-seed tags: discriminator init is shared by both nodes,
# batch streams are per-node.
_DISC_INIT = 0xD15C
_COLLAB_STREAM = 0xC011AB
_TARGET_STREAM = 0x7A96E7

DEFAULT_EXTRACTOR_DIMS = (2, 32, 16)
DEFAULT_EXTRACTOR_ACTIVATIONS = ("relu", "identity")
DEFAULT_DISC_DIMS = (16, 32, 32, 1)
DEFAULT_DISC_ACTIVATIONS = ("leaky_relu", "leaky_relu", "identity")


class AdaptError(RuntimeError):
    """An adaptation run could not start or finish."""


@dataclass(frozen=True)
class LazySyncConfig:
    """Everything both nodes need to agree on before a run.

    Both processes construct their discriminator from (seed, architecture)
    independently; only the collaborator's extractor weights travel over
    the wire, in the single ModelInit frame of the handshake.
    """

    variant: LossVariant
    steps: int
    sync_every: int = 4
    batch_size: int = 64
    lr_extractor: float = 1e-3
    lr_discriminator: float = 1e-2
    extractor_dims: tuple[int, ...] = DEFAULT_EXTRACTOR_DIMS
    extractor_activations: tuple[str, ...] = DEFAULT_EXTRACTOR_ACTIVATIONS
    disc_dims: tuple[int, ...] = DEFAULT_DISC_DIMS
    disc_activations: tuple[str, ...] = DEFAULT_DISC_ACTIVATIONS
    # Must match the cap the collaborator extractor was trained under, or
    # the first projection clips its weights and throws away the head
    # alignment the target inherits.
    spectral_cap: float | None = 2.5
    # Once the marginals align, the mapping gradient is mostly sampling
    # noise; with the textbook 1e-8 epsilon Adam renormalizes that noise
    # into full-speed drift and walks the extractor away from its init.
    # A larger epsilon makes the step scale with gradient magnitude again.
    adam_eps: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.variant, LossVariant):
            raise AdaptError("variant must be a LossVariant")
        if self.steps < 1:
            raise AdaptError(f"steps must be >= 1, got {self.steps}")
        if not 1 <= self.sync_every <= self.steps:
            raise AdaptError(
                f"sync_every must lie in [1, steps], got {self.sync_every}"
            )
        if self.batch_size < 1:
            raise AdaptError("batch_size must be >= 1")
        if self.lr_extractor <= 0 or self.lr_discriminator <= 0:
            raise AdaptError("learning rates must be positive")
        if self.adam_eps <= 0:
            raise AdaptError("adam_eps must be positive")
        if self.disc_dims[0] != self.extractor_dims[-1]:
            raise AdaptError(
                "discriminator input dim must equal extractor output dim"
            )
        if self.disc_dims[-1] != 1:
            raise AdaptError("discriminator must end in a single output")
        if self.spectral_cap is not None and self.spectral_cap <= 0:
            raise AdaptError("spectral_cap must be positive or None")

    def build_discriminator(self) -> Mlp:
        return build_mlp(
            self.disc_dims,
            self.disc_activations,
            role="discriminator",
            seed=seed_key(self.seed, _DISC_INIT),
        )

    def build_extractor_shell(self) -> Mlp:
        """An extractor of the right shape, weights to be overwritten."""
        return build_mlp(
            self.extractor_dims,
            self.extractor_activations,
            role="extractor",
            seed=seed_key(self.seed, _DISC_INIT + 1),
        )


class GradBuffer:
    """Running sum of per-step discriminator gradients since the last sync."""

    def __init__(self, like: Mlp):
        self._like = like
        self.total = GradientSet.zeros_for(like)
        self.count = 0

    def add(self, grads: GradientSet) -> None:
        self.total.add_(grads)
        self.count += 1

    def drain(self, expected: int) -> GradientSet:
        if self.count != expected:
            raise AdaptError(
                f"buffer holds {self.count} gradients, expected {expected}"
            )
        out = self.total
        self.total = GradientSet.zeros_for(self._like)
        self.count = 0
        return out


@dataclass
class NodeReport:
    """What one node knows after a finished run."""

    role: str
    domain_id: int
    extractor: Mlp
    discriminator: Mlp
    steps: int
    sync_steps: list[int]
    frames_sent: int
    frames_received: int
    bytes_sent: int
    bytes_received: int
    wall_seconds: float
    disc_digests: list[str] | None = None
    extractor_digests: list[str] | None = None
    buffer_zero_after_sync: list[bool] | None = None
    disc_loss_trace: list[float] | None = None

    @property
    def sync_events(self) -> int:
        return len(self.sync_steps)


def _stream_seed(base: int, tag: int) -> int:
    """Deterministic per-node scalar sub-seed for the batch stream."""
    return int(np.random.default_rng([base, tag]).integers(0, 2**63 - 1))


def _local_disc_gradient(
    variant: LossVariant, disc: Mlp, feats: np.ndarray, side: str
) -> tuple[float, GradientSet, list[np.ndarray]]:
    """One node's share of the discriminator gradient on its own features."""
    d_acts = mlp_forward(disc, feats)
    loss, dgrad = domain_side_loss(variant, d_acts[-1], side)
    grads, _ = mlp_backward(disc, d_acts, dgrad)
    if variant.kind == "wda":
        pval, pgrads = gradient_penalty(disc, feats, variant.gamma)
        grads.add_(pgrads)
        loss += pval
    return loss, grads, d_acts


def _extractor_gradient(
    variant: LossVariant, disc: Mlp, d_acts: list[np.ndarray],
    extractor: Mlp, ext_acts: list[np.ndarray],
) -> GradientSet:
    """Mapping gradient for the target extractor, chained through the disc."""
    _, mgrad = target_mapping_loss(variant, d_acts[-1])
    _, feat_grad = mlp_backward(disc, d_acts, mgrad)
    ext_grads, _ = mlp_backward(extractor, ext_acts, feat_grad)
    return ext_grads


def run_node(
    role: str,
    dataset: DomainDataset,
    config: LazySyncConfig,
    endpoint: Endpoint,
    extractor: Mlp | None = None,
    record_trace: bool = False,
) -> NodeReport:
    """Run one side of the two-node adaptation over an open endpoint.

    The collaborator passes its trained extractor (left untouched); the
    target passes None and receives the initial weights in the handshake.
    Both sides build the discriminator from the shared seed, so the
    replicas start identical and the synced updates keep them identical.
    """
    if role not in ROLES:
        raise AdaptError(f"role must be one of {ROLES}, got {role!r}")
    collab = role == "collaborator"
    if collab and extractor is None:
        raise AdaptError("collaborator needs its trained extractor")
    if not collab and extractor is not None:
        raise AdaptError("target receives the extractor over the wire")

    started = time.perf_counter()
    hello = SyncFrame(MSG_HELLO, dataset.domain_id, 0, b"")
    endpoint.exchange(hello)
    if collab:
        init = SyncFrame(
            MSG_MODEL_INIT, dataset.domain_id, 0, mlp_weights_bytes(extractor)
        )
        endpoint.exchange(init)
    else:
        reply = endpoint.exchange(hello)
        if reply.msg_type != MSG_MODEL_INIT:
            raise ProtocolError(
                f"expected extractor weights in handshake, got type {reply.msg_type}"
            )
        extractor = load_mlp_weights(config.build_extractor_shell(), reply.payload)

    disc = config.build_discriminator()
    disc_opt = SgdState(lr=config.lr_discriminator)
    ext_opt = None if collab else AdamState(lr=config.lr_extractor, eps=config.adam_eps)
    buffer = GradBuffer(disc)
    g_sync = GradientSet.zeros_for(disc)
    stream = _stream_seed(config.seed, _COLLAB_STREAM if collab else _TARGET_STREAM)
    side = "src" if collab else "tgt"
    # 1/(2p): buffers jointly hold 2p accumulated per-step gradients.
    scale = 1.0 / (2.0 * config.sync_every)

    sync_steps: list[int] = []
    disc_digests: list[str] | None = [] if record_trace else None
    ext_digests: list[str] | None = [] if record_trace else None
    buffer_zero: list[bool] | None = [] if record_trace else None
    loss_trace: list[float] | None = [] if record_trace else None

    for n in range(1, config.steps + 1):
        feats_in, _ = batch_iter(dataset, config.batch_size, stream, n - 1)
        ext_acts = mlp_forward(extractor, feats_in)
        loss, disc_grads, d_acts = _local_disc_gradient(
            config.variant, disc, ext_acts[-1], side
        )
        buffer.add(disc_grads)
        if not collab:
            ext_grads = _extractor_gradient(
                config.variant, disc, d_acts, extractor, ext_acts
            )
            optimizer_step(extractor, ext_grads, ext_opt)
            if config.spectral_cap is not None:
                project_mlp_(extractor, config.spectral_cap)
        if n % config.sync_every == 0:
            mine = buffer.drain(config.sync_every)
            reply = endpoint.exchange(
                SyncFrame(MSG_DISC_GRAD, dataset.domain_id, n, mine.to_bytes())
            )
            if reply.msg_type != MSG_DISC_GRAD:
                raise ProtocolError(
                    f"expected a gradient buffer at step {n}, got type {reply.msg_type}"
                )
            theirs = GradientSet.from_bytes(reply.payload, disc)
            # Collaborator buffer is always the left addend so both nodes
            # round identically.
            joint = mine.plus(theirs) if collab else theirs.plus(mine)
            g_sync = joint.scaled(scale)
            sync_steps.append(n)
            if buffer_zero is not None:
                buffer_zero.append(buffer.total.is_zero() and buffer.count == 0)
        optimizer_step(disc, g_sync, disc_opt)
        if record_trace:
            disc_digests.append(mlp_digest(disc))
            ext_digests.append(mlp_digest(extractor))
            loss_trace.append(loss)

    endpoint.exchange(SyncFrame(MSG_BYE, dataset.domain_id, config.steps + 1, b""))
    wall = time.perf_counter() - started
    return NodeReport(
        role=role,
        domain_id=dataset.domain_id,
        extractor=extractor,
        discriminator=disc,
        steps=config.steps,
        sync_steps=sync_steps,
        frames_sent=endpoint.frames_sent,
        frames_received=endpoint.frames_received,
        bytes_sent=endpoint.bytes_sent,
        bytes_received=endpoint.bytes_received,
        wall_seconds=wall,
        disc_digests=disc_digests,
        extractor_digests=ext_digests,
        buffer_zero_after_sync=buffer_zero,
        disc_loss_trace=loss_trace,
    )


@dataclass
class PairResult:
    collaborator: NodeReport
    target: NodeReport
    logs: tuple[FrameLog, FrameLog] | None = None


def _spawn(fn, *args, **kwargs):
    box: dict = {}

    def runner():
        try:
            box["value"] = fn(*args, **kwargs)
        except BaseException as exc:  # propagate into the joining thread
            box["error"] = exc

    thread = threading.Thread(target=runner, daemon=True)
    thread.start()
    return thread, box


def adapt_pair(
    collab_extractor: Mlp,
    collab_data: DomainDataset,
    target_data: DomainDataset,
    config: LazySyncConfig,
    transport: str = "loopback",
    record_trace: bool = False,
    keep_logs: bool = False,
    keep_bytes: bool = False,
    timeout: float = 300.0,
) -> PairResult:
    """Drive both nodes of one adaptation inside this process.

    Loopback uses an in-memory queue pair; "tcp" opens a real socket pair
    on localhost so the byte stream is exercised end to end.  The target
    node runs on the calling thread.  keep_bytes additionally retains raw
    frame encodings in the logs for privacy auditing.
    """
    if keep_bytes:
        keep_logs = True
    logs = (FrameLog(keep_bytes=keep_bytes), FrameLog(keep_bytes=keep_bytes)) if keep_logs else (None, None)
    if transport == "loopback":
        end_c, end_t = loopback_pair(timeout=timeout, logs=logs)
    elif transport == "tcp":
        end_c, end_t = tcp_pair()
        end_c.log, end_t.log = logs
    else:
        raise AdaptError(f"unknown transport {transport!r}")

    thread, box = _spawn(
        run_node, "collaborator", collab_data, config, end_c,
        extractor=collab_extractor, record_trace=record_trace,
    )
    try:
        target_report = run_node(
            "target", target_data, config, end_t, record_trace=record_trace
        )
    finally:
        thread.join(timeout=timeout)
        end_c.close()
        end_t.close()
    if thread.is_alive():
        raise AdaptError("collaborator node did not finish")
    if "error" in box:
        raise box["error"]
    return PairResult(
        collaborator=box["value"],
        target=target_report,
        logs=logs if keep_logs else None,
    )


@dataclass
class ReferenceResult:
    """Single-process oracle trajectory for comparing against the pair run."""

    extractor: Mlp
    discriminator: Mlp
    disc_digests: list[str] = field(default_factory=list)
    extractor_digests: list[str] = field(default_factory=list)


def reference_adapt(
    collab_extractor: Mlp,
    collab_data: DomainDataset,
    target_data: DomainDataset,
    config: LazySyncConfig,
) -> ReferenceResult:
    """Both domains in one address space, same arithmetic, no wire.

    Keeps a single discriminator (the replicas never differ) and performs
    the buffer exchange as a local sum.  Used as the ground-truth
    trajectory for the distributed runs.
    """
    e_t = load_mlp_weights(
        config.build_extractor_shell(), mlp_weights_bytes(collab_extractor)
    )
    disc = config.build_discriminator()
    disc_opt = SgdState(lr=config.lr_discriminator)
    ext_opt = AdamState(lr=config.lr_extractor, eps=config.adam_eps)
    buf_c = GradBuffer(disc)
    buf_t = GradBuffer(disc)
    g_sync = GradientSet.zeros_for(disc)
    stream_c = _stream_seed(config.seed, _COLLAB_STREAM)
    stream_t = _stream_seed(config.seed, _TARGET_STREAM)
    scale = 1.0 / (2.0 * config.sync_every)
    out = ReferenceResult(extractor=e_t, discriminator=disc)

    for n in range(1, config.steps + 1):
        feats_c, _ = batch_iter(collab_data, config.batch_size, stream_c, n - 1)
        acts_c = mlp_forward(collab_extractor, feats_c)
        _, grads_c, _ = _local_disc_gradient(
            config.variant, disc, acts_c[-1], "src"
        )
        buf_c.add(grads_c)

        feats_t, _ = batch_iter(target_data, config.batch_size, stream_t, n - 1)
        acts_t = mlp_forward(e_t, feats_t)
        _, grads_t, d_acts = _local_disc_gradient(
            config.variant, disc, acts_t[-1], "tgt"
        )
        buf_t.add(grads_t)

        ext_grads = _extractor_gradient(config.variant, disc, d_acts, e_t, acts_t)
        optimizer_step(e_t, ext_grads, ext_opt)
        if config.spectral_cap is not None:
            project_mlp_(e_t, config.spectral_cap)

        if n % config.sync_every == 0:
            total_c = buf_c.drain(config.sync_every)
            total_t = buf_t.drain(config.sync_every)
            g_sync = total_c.plus(total_t).scaled(scale)
        optimizer_step(disc, g_sync, disc_opt)
        out.disc_digests.append(mlp_digest(disc))
        out.extractor_digests.append(mlp_digest(e_t))
    return out
