"""Command-line surface over the library.

Subcommands mirror the workflow: `train-source` fits the labeled source
model, `wdist` estimates the distance between two datasets over the wire
protocol, `ocs` ranks candidate collaborators for a target, `adapt` runs
one two-node adaptation, `run` drives a full sequential experiment, and
`audit` exercises the gradient-leakage harness against recorded traffic.

Everything is file-driven: datasets as CSV, weights as npz, configs as
JSON.  `wdist` and `adapt` also run as one half of a real TCP pair via
--role with --listen or --connect, so the two nodes can live in separate
processes or machines; --listen prints the bound port for drivers that
asked for an ephemeral one.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .domains import DataError, FAMILIES, ParseError, load_csv, make_rotated_moons
from .lazysync import AdaptError, adapt_pair, run_node
from .leakage import (
    AttackConfig,
    AttackSetup,
    LeakageError,
    attack_feasibility,
    gradient_matching_attack,
    load_trace,
    save_trace,
    setup_from_trace,
    trace_exposure_check,
)
from .losses import classification_loss
from .nets import (
    NumericError,
    ShapeError,
    build_mlp,
    load_mlp,
    mlp_backward,
    mlp_forward,
    param_count,
    save_mlp,
)
from .pipeline import (
    PipelineError,
    TrainConfig,
    default_dils_config,
    dils_config_from_dict,
    emit_report,
    load_experiment,
    run_sequence,
    train_source,
    w1_config_from_dict,
)
from .selection import SelectionError, make_candidate, CandidateSet, select_collaborator
from .wasserstein import (
    EstimationError,
    estimate_w1,
    identity_encoder,
    identity_encoder_config,
    run_w1_node,
)
from .wire import ProtocolError, TcpListener, tcp_connect

_ERRORS = (
    AdaptError, DataError, EstimationError, LeakageError, NumericError,
    ParseError, PipelineError, ProtocolError, SelectionError, ShapeError,
    ConnectionError, OSError, json.JSONDecodeError, KeyError,
)


def _write_json(obj, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise PipelineError(f"{path}: config root must be a JSON object")
    return raw


def _hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise PipelineError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _load_data(args, flag: str, path, domain_id: int, labeled: bool | None = None):
    data = load_csv(path, domain_id=domain_id, name=os.path.basename(str(path)))
    if labeled is True and data.labels is None:
        raise DataError(f"{flag} {path}: needs a label column")
    if labeled is False:
        data = data.without_labels()
    return data


# ---------------------------------------------------------------------------
# train-source

def _cmd_train_source(args) -> int:
    if args.data is not None:
        dataset = _load_data(args, "--data", args.data, 0, labeled=True)
    else:
        dataset = FAMILIES[args.family](
            args.angle, n=args.n, noise_sd=args.noise, seed=args.seed, domain_id=0
        )
    overrides = {
        k: v
        for k, v in (("steps", args.steps), ("batch_size", args.batch_size), ("lr", args.lr))
        if v is not None
    }
    config = TrainConfig(seed=args.seed, **overrides)
    extractor, classifier, report = train_source(dataset, config)
    os.makedirs(args.out, exist_ok=True)
    save_mlp(extractor, os.path.join(args.out, "extractor.npz"))
    save_mlp(classifier, os.path.join(args.out, "classifier.npz"))
    _write_json(
        {
            "accuracy": report.accuracy,
            "steps": report.steps,
            "final_loss": report.final_loss,
            "holdout_n": report.holdout_n,
            "seed": args.seed,
        },
        os.path.join(args.out, "source.json"),
    )
    print(f"holdout accuracy {report.accuracy:.4f} over {report.holdout_n} samples")
    print(f"models written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# wdist

def _wdist_config(args, feature_dim: int):
    if args.config is not None:
        raw = _read_json(args.config)
        raw.setdefault("encoder_dims", [feature_dim, feature_dim])
        raw.setdefault("encoder_activations", ["identity"])
        raw.setdefault("seed", args.seed)
        return w1_config_from_dict(raw)
    return identity_encoder_config(feature_dim, seed=args.seed)


def _cmd_wdist(args) -> int:
    if args.role is not None:
        return _wdist_split(args)
    if args.collab is None or args.target is None:
        raise PipelineError("pair mode needs --collab and --target")
    collab = _load_data(args, "--collab", args.collab, 0, labeled=False)
    target = _load_data(args, "--target", args.target, 1, labeled=False)
    config = _wdist_config(args, collab.dim)
    if args.encoder is not None:
        encoder = load_mlp(args.encoder)
        config = dataclasses.replace(
            config, encoder_dims=encoder.dims, encoder_activations=encoder.activations
        )
    else:
        encoder = identity_encoder(config.encoder_dims[0])
    est = estimate_w1(encoder, collab, target, config, transport=args.transport)
    print(f"w1 estimate {est.clamped:.6f} (raw {est.value:.6f})")
    if args.out:
        _write_json(
            {
                "value": est.value,
                "clamped": est.clamped,
                "loss_collab": est.loss_collab,
                "loss_target": est.loss_target,
                "steps": config.steps,
                "seed": config.seed,
            },
            args.out,
        )
        print(f"estimate written to {args.out}")
    return 0


def _wdist_split(args) -> int:
    if args.data is None:
        raise PipelineError("--role needs --data")
    dataset = _load_data(args, "--data", args.data, args.domain_id, labeled=False)
    config = _wdist_config(args, dataset.dim)
    if args.role == "collaborator":
        if args.connect is None:
            raise PipelineError("--role collaborator needs --connect")
        if args.encoder is not None:
            encoder = load_mlp(args.encoder)
            config = dataclasses.replace(
                config, encoder_dims=encoder.dims, encoder_activations=encoder.activations
            )
        else:
            encoder = identity_encoder(config.encoder_dims[0])
        host, port = _hostport(args.connect)
        endpoint = tcp_connect(host, port, timeout=args.timeout)
        try:
            report = run_w1_node("collaborator", dataset, config, endpoint, encoder=encoder)
        finally:
            endpoint.close()
    else:
        if args.listen is None:
            raise PipelineError("--role target needs --listen")
        host, port = _hostport(args.listen)
        listener = TcpListener(host, port, timeout=args.timeout)
        print(f"listening on {host}:{listener.port}", flush=True)
        endpoint = listener.accept()
        try:
            report = run_w1_node("target", dataset, config, endpoint)
        finally:
            endpoint.close()
            listener.close()
    print(f"w1 estimate {max(report.value, 0.0):.6f} (raw {report.value:.6f})")
    if args.out:
        _write_json(
            {"value": report.value, "clamped": report.clamped, "role": args.role},
            args.out,
        )
    return 0


# ---------------------------------------------------------------------------
# ocs

def _cmd_ocs(args) -> int:
    raw = _read_json(args.config)
    spec = raw.get("candidates")
    if not spec:
        raise PipelineError("config needs a non-empty candidates list")
    if "target" not in raw:
        raise PipelineError("config needs a target dataset path")
    target = _load_data(args, "target", raw["target"], len(spec), labeled=False)
    candidates = None
    for entry in spec:
        cand = make_candidate(
            int(entry["domain_id"]),
            load_mlp(entry["extractor"]),
            load_mlp(entry["classifier"]),
            _load_data(args, "validation", entry["validation"], int(entry["domain_id"]), labeled=True),
            _load_data(args, "unlabeled", entry["unlabeled"], int(entry["domain_id"]), labeled=False),
        )
        if candidates is None:
            candidates = CandidateSet(cand)
        else:
            candidates.add(cand)
    w1_raw = dict(raw.get("w1", {}))
    w1_raw.setdefault("encoder_dims", list(candidates.source.extractor.dims))
    w1_raw.setdefault(
        "encoder_activations", list(candidates.source.extractor.activations)
    )
    w1_raw.setdefault("seed", args.seed)
    chosen, report = select_collaborator(
        candidates, target, w1_config_from_dict(w1_raw), transport=args.transport
    )
    for row in report.rows:
        mark = "*" if row.domain_id == chosen.domain_id else " "
        bound = f"{row.bound:.6f}" if row.feasible else f"infeasible ({row.note})"
        print(f"{mark} candidate {row.domain_id}: bound {bound}")
    print(f"selected collaborator {chosen.domain_id}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(report.to_json_dict(), os.path.join(args.out, "bounds.json"))
        print(f"bound report written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# adapt

def _adapt_config(args):
    if args.config is not None:
        return dils_config_from_dict({"seed": args.seed, **_read_json(args.config)})
    return default_dils_config(TrainConfig(), seed=args.seed)


def _cmd_adapt(args) -> int:
    if args.role is not None:
        return _adapt_split(args)
    if args.extractor is None or args.collab_data is None or args.target_data is None:
        raise PipelineError("pair mode needs --extractor, --collab-data and --target-data")
    extractor = load_mlp(args.extractor)
    collab = _load_data(args, "--collab-data", args.collab_data, args.domain_id, labeled=False)
    target = _load_data(args, "--target-data", args.target_data, args.domain_id + 1, labeled=False)
    config = _adapt_config(args)
    result = adapt_pair(extractor, collab, target, config, transport=args.transport)
    _print_adapt_summary(result.target)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_mlp(result.target.extractor, os.path.join(args.out, "adapted_extractor.npz"))
        _write_json(_node_stats(result.target), os.path.join(args.out, "adapt.json"))
        print(f"adapted extractor written to {args.out}")
    return 0


def _adapt_split(args) -> int:
    if args.config is None or args.data is None:
        raise PipelineError("--role needs --config and --data")
    config = dils_config_from_dict(_read_json(args.config))
    dataset = _load_data(args, "--data", args.data, args.domain_id, labeled=False)
    if args.role == "collaborator":
        if args.connect is None or args.extractor is None:
            raise PipelineError("--role collaborator needs --connect and --extractor")
        host, port = _hostport(args.connect)
        endpoint = tcp_connect(host, port, timeout=args.timeout)
        try:
            report = run_node(
                "collaborator", dataset, config, endpoint, extractor=load_mlp(args.extractor)
            )
        finally:
            endpoint.close()
    else:
        if args.listen is None:
            raise PipelineError("--role target needs --listen")
        host, port = _hostport(args.listen)
        listener = TcpListener(host, port, timeout=args.timeout)
        print(f"listening on {host}:{listener.port}", flush=True)
        endpoint = listener.accept()
        try:
            report = run_node("target", dataset, config, endpoint)
        finally:
            endpoint.close()
            listener.close()
    _print_adapt_summary(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_mlp(report.extractor, os.path.join(args.out, "adapted_extractor.npz"))
        _write_json(_node_stats(report), os.path.join(args.out, "adapt.json"))
    return 0


def _node_stats(report) -> dict:
    return {
        "role": report.role,
        "steps": report.steps,
        "sync_events": len(report.sync_steps),
        "frames_sent": report.frames_sent,
        "frames_received": report.frames_received,
        "bytes_sent": report.bytes_sent,
        "bytes_received": report.bytes_received,
    }


def _print_adapt_summary(report) -> None:
    print(
        f"{report.role}: {report.steps} steps, {len(report.sync_steps)} sync events, "
        f"{report.bytes_sent} bytes sent / {report.bytes_received} received"
    )


# ---------------------------------------------------------------------------
# run

def _cmd_run(args) -> int:
    config = load_experiment(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.transport is not None:
        config = dataclasses.replace(config, transport=args.transport)
    out_dir = args.out or config.out_dir
    record = run_sequence(config)
    print(f"policy {record.policy}, seed {record.seed}, transport {record.transport}")
    print(f"source holdout accuracy {record.source_accuracy:.4f}")
    for o in record.outcomes:
        if o.error:
            print(f"target {o.target_id} ({o.angle_deg:g} deg): skipped, {o.error}")
        else:
            print(
                f"target {o.target_id} ({o.angle_deg:g} deg): collaborator "
                f"{o.collaborator_id}, accuracy {o.pre_accuracy:.4f} -> {o.post_accuracy:.4f}"
            )
    finished = [o for o in record.outcomes if not o.error]
    if finished:
        print(f"mean adaptation accuracy {record.mean_accuracy:.4f}")
    if out_dir:
        emit_report(record, out_dir)
        print(f"reports written to {out_dir}")
    return 0 if finished and len(finished) == len(record.outcomes) else 3


# ---------------------------------------------------------------------------
# audit

def _audit_fresh_traces(args):
    """A short adaptation run recorded with raw bytes, for self-contained audits."""
    collab = make_rotated_moons(0.0, n=256, seed=args.seed, domain_id=0).without_labels()
    target = make_rotated_moons(60.0, n=256, seed=args.seed + 1, domain_id=1).without_labels()
    config = default_dils_config(
        TrainConfig(), steps=args.steps, batch_size=64, seed=args.seed
    )
    extractor = build_mlp(
        config.extractor_dims, config.extractor_activations,
        role="extractor", seed=[args.seed, 0xA0D17],
    )
    pair = adapt_pair(extractor, collab, target, config, keep_bytes=True)
    return config, pair.logs


def _attack_baseline(args) -> dict:
    net = build_mlp(
        (2, 4, 2), ("leaky_relu", "identity"), role="classifier", seed=[args.seed, 1]
    )
    rng = np.random.default_rng(args.seed)
    x = rng.normal(0.0, 0.8, 2).astype(np.float32)
    label = int(rng.integers(2))
    acts = mlp_forward(net, x[None, :])
    _, dlogits = classification_loss(acts[-1], np.array([label], dtype=np.int64))
    grads, _ = mlp_backward(net, acts, dlogits)
    result = gradient_matching_attack(AttackSetup(
        weights=net, gradients=grads, truth=x, truth_label=label,
        config=AttackConfig(iterations=args.attack_iterations, seed=args.seed),
    ))
    return {
        "mse": result.mse,
        "label_recovered": result.label == label,
        "matching_loss_final": result.matching_trace[-1],
    }


def _cmd_audit(args) -> int:
    if args.trace is not None:
        if args.dils_config is None:
            raise PipelineError("--trace needs --dils-config to size the networks")
        config = dils_config_from_dict(_read_json(args.dils_config))
        logs = {os.path.basename(str(args.trace)): load_trace(args.trace)}
    else:
        config, (clog, tlog) = _audit_fresh_traces(args)
        logs = {"collaborator": clog, "target": tlog}

    extractor_params = param_count(config.build_extractor_shell())
    report: dict = {"traces": {}, "violations": 0}
    for name, log in logs.items():
        exposure = trace_exposure_check(log, extractor_params)
        setup = setup_from_trace(log, config)
        outcome = attack_feasibility(setup)
        report["traces"][name] = {
            "frames": exposure.frames,
            "model_init_count": exposure.model_init_count,
            "violations": exposure.violations,
            "warnings": exposure.warnings,
            "attack": outcome.missing if outcome else "instantiable",
            "attack_detail": outcome.detail if outcome else "",
        }
        report["violations"] += len(exposure.violations)
        flag = "clean" if exposure.clean else f"{len(exposure.violations)} violations"
        blocked = f"missing {outcome.missing}" if outcome else "INSTANTIABLE"
        print(f"{name}: {exposure.frames} frames, {flag}; inversion {blocked}")
        if args.out and args.trace is None:
            os.makedirs(args.out, exist_ok=True)
            save_trace(log, os.path.join(args.out, f"{name}.trace"))

    if args.baseline:
        base = _attack_baseline(args)
        report["baseline"] = base
        print(
            f"full-knowledge baseline: reconstruction mse {base['mse']:.2e}, "
            f"label {'recovered' if base['label_recovered'] else 'NOT recovered'}"
        )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(report, os.path.join(args.out, "audit.json"))
        print(f"audit report written to {args.out}")
    return 0 if report["violations"] == 0 else 3


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dadapt",
        description="distributed adversarial domain adaptation over a two-node protocol",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-source", help="fit the labeled source extractor+classifier")
    p.add_argument("--data", help="labeled CSV; alternative to --family/--angle")
    p.add_argument("--family", choices=sorted(FAMILIES), default="moons")
    p.add_argument("--angle", type=float, default=0.0)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--noise", type=float, default=0.12)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for models and report")
    p.set_defaults(fn=_cmd_train_source)

    p = sub.add_parser("wdist", help="estimate the distance between two datasets")
    p.add_argument("--collab", help="collaborator-side CSV (pair mode)")
    p.add_argument("--target", help="target-side CSV (pair mode)")
    p.add_argument("--data", help="this node's CSV (split mode)")
    p.add_argument("--encoder", help="npz encoder applied before the critic")
    p.add_argument("--config", help="JSON critic schedule")
    p.add_argument("--role", choices=("collaborator", "target"))
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--transport", choices=("loopback", "tcp"), default="loopback")
    p.add_argument("--domain-id", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=300.0)
    p.add_argument("--out", help="JSON file for the estimate")
    p.set_defaults(fn=_cmd_wdist)

    p = sub.add_parser("ocs", help="rank candidate collaborators for a target")
    p.add_argument("--config", required=True, help="JSON: candidates, target, w1 schedule")
    p.add_argument("--transport", choices=("loopback", "tcp"), default="loopback")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for bounds.json")
    p.set_defaults(fn=_cmd_ocs)

    p = sub.add_parser("adapt", help="run one two-node adaptation")
    p.add_argument("--extractor", help="npz collaborator extractor")
    p.add_argument("--collab-data", help="collaborator CSV (pair mode)")
    p.add_argument("--target-data", help="target CSV (pair mode)")
    p.add_argument("--data", help="this node's CSV (split mode)")
    p.add_argument("--config", help="JSON adaptation schedule")
    p.add_argument("--role", choices=("collaborator", "target"))
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--transport", choices=("loopback", "tcp"), default="loopback")
    p.add_argument("--domain-id", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timeout", type=float, default=300.0)
    p.add_argument("--out", help="directory for the adapted extractor")
    p.set_defaults(fn=_cmd_adapt)

    p = sub.add_parser("run", help="run a full sequential experiment")
    p.add_argument("--config", required=True, help="JSON experiment description")
    p.add_argument("--seed", type=int)
    p.add_argument("--transport", choices=("loopback", "tcp"))
    p.add_argument("--out", help="report directory (overrides config)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("audit", help="gradient-leakage checks on protocol traffic")
    p.add_argument("--trace", help="recorded trace file; default runs a fresh adaptation")
    p.add_argument("--dils-config", help="JSON schedule that produced --trace")
    p.add_argument("--steps", type=int, default=60, help="steps for the fresh adaptation")
    p.add_argument("--baseline", action="store_true",
                   help="also run the full-knowledge reconstruction baseline")
    p.add_argument("--attack-iterations", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for audit.json and traces")
    p.set_defaults(fn=_cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
