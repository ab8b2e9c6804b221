"""Sequential adaptation driver: source training, arrivals, reporting.

An experiment is a list of domain angles.  The first domain is the labeled
source; the rest arrive one at a time.  For each arrival the driver picks
a collaborator (by error bound, by always using the source, or uniformly
at random), runs the two-node adversarial adaptation against it, measures
accuracy before and after, and then promotes the adapted target into the
candidate pool so later arrivals can adapt from it.  Every adapted domain
keeps the source classifier head: adaptation aligns target features with
the collaborator's feature space, and that space is anchored to the head
trained on source labels.

Each target retains a small labeled validation split for its future role
as a collaborator (its in-domain error term).  Labels outside that split
and the test split are never used for adaptation.

All randomness is derived from the single experiment seed; reports are
written so a rerun with the same config is byte-identical (timings go to
a separate sidecar file).  Communication accounting covers the adaptation
exchanges as seen by the target node; selection-time distance estimates
run their own endpoint pairs and are reported in the bound tables, not in
the communication log.
"""
from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .domains import (
    DataError,
    DomainDataset,
    FAMILIES,
    batch_iter,
    save_csv,
    split_dataset,
)
from .lazysync import (
    AdaptError,
    LazySyncConfig,
    NodeReport,
    adapt_pair,
    run_node,
    _stream_seed,
)
from .losses import ADDA, GRL, LossVariant, classification_loss, wda
from .nets import (
    AdamState,
    Mlp,
    NumericError,
    build_mlp,
    mlp_backward,
    mlp_forward,
    optimizer_step,
    project_mlp_,
    save_mlp,
    seed_key,
)
from .selection import (
    BoundReport,
    CandidateSet,
    SelectionError,
    hypothesis_logits,
    make_candidate,
    select_collaborator,
)
from .wasserstein import EstimationError, W1Config
from .wire import MSG_NAMES, FrameLog, ProtocolError, TcpListener

POLICIES = ("ocs", "labeled_source", "random")
DEFAULT_ADAPT_STEPS = 12000

# Stream tags for deriving per-component seeds from the experiment seed.
_TAG_DOMAIN = 0xD0A000
_TAG_SPLIT = 0x590000
_TAG_ADAPT = 0xAD0000
_TAG_W1 = 0xE50000
_TAG_SOURCE = 0x50C000
_TAG_POLICY = 0x9013C7


class PipelineError(RuntimeError):
    """Experiment configuration or driver failure."""


# ---------------------------------------------------------------------------
# Supervised source training.

@dataclass(frozen=True)
class TrainConfig:
    """Schedule for supervised extractor+classifier training.

    The default extractor is a single affine layer; every bit of
    nonlinear capacity lives in the classifier head.  Unsupervised
    alignment can only preserve class identity if nearby inputs stay
    nearby in feature space: with sharp hidden units in the extractor,
    the marginal-matching game on a rotation family happily lands on
    label-permuted alignments (the two moons are congruent under a half
    turn), and which optimum wins becomes a coin flip.  An affine
    feature map keeps rotations looking like rotations, so the closer,
    correctly labeled alignment is the one gradient flow reaches.

    The spectral cap keeps the hypothesis Lipschitz constant moderate
    for the selection bound; 2.5 costs less than a point of source
    accuracy against unconstrained training on the moons task.
    """

    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    spectral_cap: float | None = 2.5
    extractor_dims: tuple[int, ...] = (2, 16)
    extractor_activations: tuple[str, ...] = ("identity",)
    classifier_hidden: tuple[int, ...] = (32, 16)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise PipelineError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise PipelineError("batch_size must be >= 1")
        if self.lr <= 0:
            raise PipelineError("lr must be positive")
        if self.spectral_cap is not None and self.spectral_cap <= 0:
            raise PipelineError("spectral_cap must be positive or None")
        if len(self.extractor_dims) != len(self.extractor_activations) + 1:
            raise PipelineError("extractor dims and activations do not chain")

    @property
    def feature_dim(self) -> int:
        return self.extractor_dims[-1]


@dataclass
class SourceReport:
    accuracy: float
    steps: int
    final_loss: float
    holdout_n: int


def build_classifier(feature_dim: int, num_classes: int, hidden: tuple[int, ...], seed) -> Mlp:
    dims = (feature_dim, *hidden, num_classes)
    activations = ("relu",) * len(hidden) + ("identity",)
    return build_mlp(dims, activations, role="classifier", seed=seed)


def train_source(dataset: DomainDataset, config: TrainConfig) -> tuple[Mlp, Mlp, SourceReport]:
    """Supervised training with the spectral cap active; holds out 10%."""
    if dataset.labels is None:
        raise PipelineError("source training needs a labeled dataset")
    sp = split_dataset(dataset, (0.9, 0.1), seed=_stream_seed(config.seed, 0x501D))
    train = dataset.subset(sp.train, "/train")
    holdout = dataset.subset(sp.validation, "/holdout")
    if config.batch_size > train.n:
        raise PipelineError(f"batch_size {config.batch_size} exceeds training size {train.n}")

    extractor = build_mlp(
        config.extractor_dims, config.extractor_activations,
        role="extractor", seed=seed_key(config.seed, 0x50C0E),
    )
    classifier = build_classifier(
        config.feature_dim, dataset.num_classes, config.classifier_hidden,
        seed=seed_key(config.seed, 0x50C0C),
    )
    ext_opt = AdamState(lr=config.lr)
    cls_opt = AdamState(lr=config.lr)
    stream = _stream_seed(config.seed, 0x50CB)
    loss = float("nan")
    for n in range(config.steps):
        feats, labels = batch_iter(train, config.batch_size, stream, n)
        try:
            e_acts = mlp_forward(extractor, feats)
            c_acts = mlp_forward(classifier, e_acts[-1])
            loss, dlogits = classification_loss(c_acts[-1], labels)
            c_grads, dfeat = mlp_backward(classifier, c_acts, dlogits)
            e_grads, _ = mlp_backward(extractor, e_acts, dfeat)
            optimizer_step(classifier, c_grads, cls_opt)
            optimizer_step(extractor, e_grads, ext_opt)
        except NumericError as exc:
            raise PipelineError(f"source training diverged at step {n + 1}: {exc}") from exc
        if config.spectral_cap is not None:
            project_mlp_(extractor, config.spectral_cap)
            project_mlp_(classifier, config.spectral_cap)
    report = SourceReport(
        accuracy=evaluate(extractor, classifier, holdout),
        steps=config.steps,
        final_loss=float(loss),
        holdout_n=holdout.n,
    )
    return extractor, classifier, report


def evaluate(extractor: Mlp, classifier: Mlp, test_set: DomainDataset) -> float:
    """Fraction of argmax-correct predictions on a labeled set."""
    if test_set.labels is None:
        raise PipelineError("evaluation needs a labeled dataset")
    logits = hypothesis_logits(extractor, classifier, test_set.features)
    return float(np.mean(np.argmax(logits, axis=1) == test_set.labels))


# ---------------------------------------------------------------------------
# Experiment configuration and its JSON form.

@dataclass(frozen=True)
class ExperimentConfig:
    """One sequential-arrival experiment, fully determined by its seed."""

    family: str
    angles: tuple[float, ...]
    policy: str = "ocs"
    n_per_domain: int = 600
    noise_sd: float = 0.12
    seed: int = 0
    transport: str = "loopback"
    out_dir: str | None = None
    source: TrainConfig = TrainConfig()
    dils: LazySyncConfig = None  # filled by __post_init__ when omitted
    w1: W1Config = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise PipelineError(f"unknown family {self.family!r}")
        if len(self.angles) < 2:
            raise PipelineError("need a source angle plus at least one target")
        if len(set(self.angles)) != len(self.angles):
            raise PipelineError("angles must be unique")
        if self.policy not in POLICIES:
            raise PipelineError(f"unknown policy {self.policy!r}")
        if self.transport not in ("loopback", "tcp"):
            raise PipelineError(f"unknown transport {self.transport!r}")
        if self.n_per_domain < 20:
            raise PipelineError("n_per_domain too small to split")
        if self.dils is None:
            object.__setattr__(self, "dils", default_dils_config(self.source))
        if self.w1 is None:
            object.__setattr__(self, "w1", default_w1_config(self.source))
        if self.dils.extractor_dims != self.source.extractor_dims:
            raise PipelineError("adaptation extractor architecture must match the source's")


def default_dils_config(source: TrainConfig, **overrides) -> LazySyncConfig:
    # The extractor crawls (small lr, many steps, enlarged Adam epsilon)
    # while the discriminator tracks it; faster extractor schedules tear
    # up the inherited features before the discriminator can object.
    feat = source.feature_dim
    kw = dict(
        variant=ADDA,
        steps=DEFAULT_ADAPT_STEPS,
        batch_size=256,
        lr_extractor=3e-4,
        lr_discriminator=1e-2,
        extractor_dims=source.extractor_dims,
        extractor_activations=source.extractor_activations,
        disc_dims=(feat, 32, 32, 1),
        disc_activations=("leaky_relu", "leaky_relu", "identity"),
        spectral_cap=source.spectral_cap,
    )
    kw.update(overrides)
    return LazySyncConfig(**kw)


def default_w1_config(source: TrainConfig, **overrides) -> W1Config:
    feat = source.feature_dim
    kw = dict(encoder_dims=(feat, feat), encoder_activations=("identity",))
    kw.update(overrides)
    return W1Config(**kw)


def variant_from_dict(raw: dict) -> LossVariant:
    kw = dict(raw)
    kind = kw.pop("kind", None)
    if kind == "adda":
        variant = ADDA
    elif kind == "grl":
        variant = GRL
    elif kind == "wda":
        variant = wda(**kw) if kw else wda()
        kw = {}
    else:
        raise PipelineError(f"unknown loss variant kind {kind!r}")
    if kw:
        raise PipelineError(f"unexpected loss variant fields {sorted(kw)}")
    return variant


def variant_to_dict(variant: LossVariant) -> dict:
    out = {"kind": variant.kind}
    if variant.kind == "wda":
        out["gamma"] = variant.gamma
    return out


def _tupled(kw: dict, *keys: str) -> dict:
    for key in keys:
        if key in kw and kw[key] is not None:
            kw[key] = tuple(kw[key])
    return kw


def experiment_from_dict(raw: dict) -> ExperimentConfig:
    """Build a validated config from parsed JSON, rejecting unknown keys."""
    kw = dict(raw)
    try:
        source = TrainConfig(**_tupled(
            dict(kw.pop("source", {})),
            "extractor_dims", "extractor_activations", "classifier_hidden",
        ))
        dils_raw = dict(kw.pop("dils", {}))
        if "variant" in dils_raw:
            dils_raw["variant"] = variant_from_dict(dils_raw["variant"])
        dils = default_dils_config(source, **_tupled(
            dils_raw, "extractor_dims", "extractor_activations", "disc_dims", "disc_activations",
        ))
        w1 = default_w1_config(source, **_tupled(
            dict(kw.pop("w1", {})), "encoder_dims", "encoder_activations", "critic_hidden",
        ))
        if "angles" in kw:
            kw["angles"] = tuple(float(a) for a in kw["angles"])
        return ExperimentConfig(source=source, dils=dils, w1=w1, **kw)
    except TypeError as exc:
        raise PipelineError(f"bad experiment config: {exc}") from exc


def load_experiment(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PipelineError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise PipelineError("config root must be a JSON object")
    return experiment_from_dict(raw)


def dils_config_to_dict(config: LazySyncConfig) -> dict:
    return {
        "variant": variant_to_dict(config.variant),
        "steps": config.steps,
        "sync_every": config.sync_every,
        "batch_size": config.batch_size,
        "lr_extractor": config.lr_extractor,
        "lr_discriminator": config.lr_discriminator,
        "extractor_dims": list(config.extractor_dims),
        "extractor_activations": list(config.extractor_activations),
        "disc_dims": list(config.disc_dims),
        "disc_activations": list(config.disc_activations),
        "spectral_cap": config.spectral_cap,
        "adam_eps": config.adam_eps,
        "seed": config.seed,
    }


def dils_config_from_dict(raw: dict) -> LazySyncConfig:
    kw = _tupled(
        dict(raw), "extractor_dims", "extractor_activations", "disc_dims", "disc_activations",
    )
    kw["variant"] = variant_from_dict(kw.get("variant", {"kind": "adda"}))
    try:
        return LazySyncConfig(**kw)
    except TypeError as exc:
        raise PipelineError(f"bad adaptation config: {exc}") from exc


def w1_config_from_dict(raw: dict) -> W1Config:
    kw = _tupled(dict(raw), "encoder_dims", "encoder_activations", "critic_hidden")
    try:
        return W1Config(**kw)
    except TypeError as exc:
        raise PipelineError(f"bad distance config: {exc}") from exc


# ---------------------------------------------------------------------------
# Sequence driver.

@dataclass
class TargetOutcome:
    """Everything recorded about one arriving target."""

    target_id: int
    angle_deg: float
    collaborator_id: int | None = None
    pre_accuracy: float | None = None
    post_accuracy: float | None = None
    bytes_sent: int = 0
    bytes_received: int = 0
    sync_events: int = 0
    wall_seconds: float = 0.0
    error: str = ""
    bound_report: BoundReport | None = None
    comm_rows: list[dict] = field(default_factory=list)


@dataclass
class MetricsRecord:
    """Per-target rows plus the aggregate the experiment is judged by."""

    policy: str
    seed: int
    transport: str
    source_accuracy: float
    outcomes: list[TargetOutcome] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        vals = [o.post_accuracy for o in self.outcomes if not o.error]
        if not vals:
            raise PipelineError("no target finished adaptation")
        return float(np.mean(vals))


@dataclass
class AdaptationRun:
    target: NodeReport
    collaborator: NodeReport | None
    target_log: FrameLog


def make_domain(config: ExperimentConfig, index: int) -> DomainDataset:
    maker = FAMILIES[config.family]
    return maker(
        config.angles[index],
        n=config.n_per_domain,
        noise_sd=config.noise_sd,
        seed=_stream_seed(config.seed, _TAG_DOMAIN + index),
        domain_id=index,
    )


def _adapt_tcp_subprocess(
    collab_extractor: Mlp,
    collab_data: DomainDataset,
    target_data: DomainDataset,
    config: LazySyncConfig,
    timeout: float,
) -> AdaptationRun:
    """Target node in this process, collaborator in a child process."""
    log = FrameLog()
    listener = TcpListener("127.0.0.1", 0, timeout=timeout)
    with tempfile.TemporaryDirectory(prefix="dadapt-adapt-") as tmp:
        ext_path = os.path.join(tmp, "extractor.npz")
        data_path = os.path.join(tmp, "collab.csv")
        cfg_path = os.path.join(tmp, "dils.json")
        save_mlp(collab_extractor, ext_path)
        save_csv(collab_data, data_path)
        with open(cfg_path, "w", encoding="utf-8") as fh:
            json.dump(dils_config_to_dict(config), fh)
        child = subprocess.Popen(
            [
                sys.executable, "-m", "dadapt", "adapt",
                "--role", "collaborator",
                "--connect", f"127.0.0.1:{listener.port}",
                "--extractor", ext_path,
                "--data", data_path,
                "--config", cfg_path,
                "--domain-id", str(collab_data.domain_id),
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        endpoint = None
        try:
            endpoint = listener.accept(log=log)
            report = run_node("target", target_data, config, endpoint)
        except BaseException:
            child.kill()
            child.wait()
            raise
        finally:
            if endpoint is not None:
                endpoint.close()
            listener.close()
        try:
            _, err = child.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            child.kill()
            child.communicate()
            raise AdaptError("collaborator process did not exit")
        if child.returncode != 0:
            raise AdaptError(f"collaborator process failed: {err.strip()[-500:]}")
    return AdaptationRun(target=report, collaborator=None, target_log=log)


def _run_adaptation(
    collab_extractor: Mlp,
    collab_data: DomainDataset,
    target_data: DomainDataset,
    config: LazySyncConfig,
    transport: str,
    timeout: float,
) -> AdaptationRun:
    if transport == "tcp":
        return _adapt_tcp_subprocess(collab_extractor, collab_data, target_data, config, timeout)
    result = adapt_pair(
        collab_extractor, collab_data, target_data, config,
        transport=transport, keep_logs=True, timeout=timeout,
    )
    return AdaptationRun(
        target=result.target, collaborator=result.collaborator, target_log=result.logs[1]
    )


def _choose(
    config: ExperimentConfig,
    pool: CandidateSet,
    target_unlabeled: DomainDataset,
    index: int,
):
    if config.policy == "labeled_source":
        return pool.source, None
    if config.policy == "random":
        rng = np.random.default_rng([config.seed & 0xFFFFFFFF, _TAG_POLICY, index])
        return pool.get(int(rng.choice(pool.ids))), None
    w1_cfg = replace(config.w1, seed=_stream_seed(config.seed, _TAG_W1 + index))
    return select_collaborator(
        pool, target_unlabeled, w1_cfg, transport=config.transport
    )


def run_sequence(config: ExperimentConfig, timeout: float = 600.0) -> MetricsRecord:
    """Run the whole arrival sequence; per-target failures are recorded."""
    source_data = make_domain(config, 0)
    sp = split_dataset(source_data, (0.8, 0.1, 0.1), seed=_stream_seed(config.seed, _TAG_SPLIT))
    source_train = source_data.subset(sp.train, "/train")
    source_val = source_data.subset(sp.validation, "/val")
    src_cfg = replace(config.source, seed=_stream_seed(config.seed, _TAG_SOURCE))
    extractor, classifier, src_report = train_source(source_train, src_cfg)

    pool = CandidateSet(make_candidate(
        0, extractor, classifier, source_val, source_train.without_labels(),
    ))
    record = MetricsRecord(
        policy=config.policy,
        seed=config.seed,
        transport=config.transport,
        source_accuracy=src_report.accuracy,
    )
    for index in range(1, len(config.angles)):
        outcome = TargetOutcome(target_id=index, angle_deg=float(config.angles[index]))
        record.outcomes.append(outcome)
        started = time.perf_counter()
        try:
            target_data = make_domain(config, index)
            tsp = split_dataset(
                target_data, (0.8, 0.1, 0.1), seed=_stream_seed(config.seed, _TAG_SPLIT + index)
            )
            target_train = target_data.subset(tsp.train, "/train").without_labels()
            target_val = target_data.subset(tsp.validation, "/val")
            target_test = target_data.subset(tsp.test, "/test")

            collab, outcome.bound_report = _choose(config, pool, target_train, index)
            outcome.collaborator_id = collab.domain_id
            outcome.pre_accuracy = evaluate(collab.extractor, collab.classifier, target_test)

            dils_cfg = replace(config.dils, seed=_stream_seed(config.seed, _TAG_ADAPT + index))
            run = _run_adaptation(
                collab.extractor, collab.unlabeled, target_train, dils_cfg,
                config.transport, timeout,
            )
            adapted = run.target.extractor
            outcome.post_accuracy = evaluate(adapted, collab.classifier, target_test)
            outcome.bytes_sent = run.target.bytes_sent
            outcome.bytes_received = run.target.bytes_received
            outcome.sync_events = len(run.target.sync_steps)
            outcome.comm_rows = [
                {
                    "target_id": index,
                    "frame_index": i,
                    "direction": row["direction"],
                    "msg_type": MSG_NAMES.get(row["msg_type"], str(row["msg_type"])),
                    "step": row["step"],
                    "bytes": row["frame_len"],
                }
                for i, row in enumerate(run.target_log.rows)
            ]
            pool.add(make_candidate(
                index, adapted, collab.classifier, target_val, target_train,
            ))
        except (
            AdaptError, DataError, EstimationError, PipelineError,
            ProtocolError, SelectionError, ConnectionError, TimeoutError,
        ) as exc:
            outcome.error = f"{type(exc).__name__}: {exc}"
        outcome.wall_seconds = time.perf_counter() - started
    return record


# ---------------------------------------------------------------------------
# Report files.

_METRIC_COLUMNS = (
    "target_id", "angle_deg", "collaborator_id", "pre_accuracy",
    "post_accuracy", "bytes_sent", "bytes_received", "sync_events", "error",
)
_COMM_COLUMNS = ("target_id", "frame_index", "direction", "msg_type", "step", "bytes")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(record: MetricsRecord, out_dir) -> list[str]:
    """Write metrics.csv, comm.csv, bounds/*.json, summary and timings."""
    os.makedirs(out_dir, exist_ok=True)
    bounds_dir = os.path.join(out_dir, "bounds")
    os.makedirs(bounds_dir, exist_ok=True)
    written = []

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_METRIC_COLUMNS) + "\n")
        for o in record.outcomes:
            row = (
                o.target_id, o.angle_deg, o.collaborator_id, o.pre_accuracy,
                o.post_accuracy, o.bytes_sent, o.bytes_received, o.sync_events,
                o.error.replace(",", ";").replace("\n", " "),
            )
            fh.write(",".join(_cell(v) for v in row) + "\n")
    written.append(metrics_path)

    comm_path = os.path.join(out_dir, "comm.csv")
    with open(comm_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_COMM_COLUMNS) + "\n")
        for o in record.outcomes:
            for row in o.comm_rows:
                fh.write(",".join(_cell(row[c]) for c in _COMM_COLUMNS) + "\n")
    written.append(comm_path)

    for o in record.outcomes:
        if o.bound_report is None:
            continue
        path = os.path.join(bounds_dir, f"{o.target_id}.json")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(o.bound_report.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)

    finished = [o for o in record.outcomes if not o.error]
    summary = {
        "policy": record.policy,
        "seed": record.seed,
        "transport": record.transport,
        "source_accuracy": record.source_accuracy,
        "targets": len(record.outcomes),
        "finished": len(finished),
        "mean_accuracy": record.mean_accuracy if finished else None,
        "pre_accuracy_definition": (
            "chosen collaborator's extractor and classifier applied"
            " directly to the target test split, before adaptation"
        ),
    }
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(summary_path)

    timing_path = os.path.join(out_dir, "timing.json")
    with open(timing_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(
            {
                "per_target": {str(o.target_id): o.wall_seconds for o in record.outcomes},
                "total": sum(o.wall_seconds for o in record.outcomes),
            },
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    written.append(timing_path)
    return written
