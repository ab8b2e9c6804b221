"""Gradient-inversion harness: baseline success, structural failures, trace audit."""
import numpy as np
import pytest

from dadapt.domains import make_rotated_moons
from dadapt.lazysync import LazySyncConfig, adapt_pair
from dadapt.leakage import (
    MISSING_EXTRACTOR_GRADIENTS,
    MISSING_WEIGHTS,
    AttackConfig,
    AttackSetup,
    LeakageError,
    _flat_observed,
    _sample_gradients,
    _weights64,
    attack_feasibility,
    gradient_matching_attack,
    load_trace,
    save_trace,
    setup_from_trace,
    trace_exposure_check,
)
from dadapt.losses import ADDA, classification_loss
from dadapt.nets import (
    GradientSet,
    build_mlp,
    mlp_backward,
    mlp_digest,
    mlp_forward,
    param_count,
)
from dadapt.wasserstein import W1Config, estimate_w1
from dadapt.wire import MSG_DISC_GRAD, MSG_MODEL_INIT, FrameLog, SyncFrame, encode_frame


def victim_sample(seed, activation="leaky_relu"):
    """A tiny trained-shape net, one private sample, and its true gradients."""
    net = build_mlp((2, 4, 2), (activation, "identity"), role="classifier", seed=[seed, 1])
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 0.8, 2).astype(np.float32)
    y = np.array([seed % 2], dtype=np.int64)
    acts = mlp_forward(net, x[None, :])
    _, dlogits = classification_loss(acts[-1], y)
    grads, _ = mlp_backward(net, acts, dlogits)
    return net, x, int(y[0]), grads


# The attacker reimplements the backward pass in float64; it must agree with
# the production float32 pass on the same weights and sample, else every
# conclusion drawn from the matching loss would be about the wrong function.
def test_attacker_gradients_match_production_backprop():
    for seed in range(6):
        dims = (3, 5, 4) if seed % 2 else (2, 4, 2)
        act = "relu" if seed % 3 == 0 else "leaky_relu"
        net = build_mlp(dims, (act, "identity"), role="classifier", seed=[seed, 9])
        rng = np.random.default_rng([seed, 77])
        x = rng.normal(0.0, 1.0, dims[0]).astype(np.float32)
        label = int(rng.integers(dims[-1]))
        acts = mlp_forward(net, x[None, :])
        _, dlogits = classification_loss(acts[-1], np.array([label], dtype=np.int64))
        grads, _ = mlp_backward(net, acts, dlogits)
        onehot = np.eye(dims[-1])[label]
        replica = _sample_gradients(_weights64(net), x.astype(np.float64), onehot)
        np.testing.assert_allclose(replica, _flat_observed(grads), atol=2e-6)


def test_full_knowledge_attack_reconstructs_input():
    net, x, label, grads = victim_sample(0)
    setup = AttackSetup(weights=net, gradients=grads, truth=x, truth_label=label)
    result = gradient_matching_attack(setup)
    assert result.feasible
    assert result.mse < 1e-2
    assert result.label == label
    assert len(result.matching_trace) == setup.config.iterations + 1
    assert result.matching_trace[-1] < result.matching_trace[0] * 1e-2


def test_attack_succeeds_across_seeds():
    for seed in range(1, 4):
        net, x, label, grads = victim_sample(seed)
        result = gradient_matching_attack(
            AttackSetup(weights=net, gradients=grads, truth=x, truth_label=label)
        )
        assert result.mse < 1e-2, f"seed {seed}: mse {result.mse}"
        assert result.label == label


def test_attack_deterministic_per_seed():
    net, x, label, grads = victim_sample(2)
    cfg = AttackConfig(iterations=200, seed=5)
    a = gradient_matching_attack(AttackSetup(weights=net, gradients=grads, config=cfg))
    b = gradient_matching_attack(AttackSetup(weights=net, gradients=grads, config=cfg))
    assert a.reconstruction.tobytes() == b.reconstruction.tobytes()
    assert a.matching_trace == b.matching_trace
    c = gradient_matching_attack(
        AttackSetup(weights=net, gradients=grads, config=AttackConfig(iterations=200, seed=6))
    )
    assert a.matching_trace[0] != c.matching_trace[0]


def test_label_sits_in_bias_gradient_sign():
    # For one-hot cross entropy the last bias gradient is softmax - onehot:
    # the true class is the only negative entry, which seeds the dummy label.
    for seed in range(8):
        _, _, label, grads = victim_sample(seed)
        last_bias = grads.entries[-1][1]
        assert int(np.argmin(last_bias)) == label
        assert np.sum(last_bias < 0) == 1


def test_missing_weights_is_not_instantiable():
    _, _, _, grads = victim_sample(0)
    setup = AttackSetup(weights=None, gradients=grads)
    assert attack_feasibility(setup).missing == MISSING_WEIGHTS
    result = gradient_matching_attack(setup)
    assert not result.feasible
    assert result.missing.missing == MISSING_WEIGHTS
    assert result.reconstruction is None
    assert result.matching_trace == []


def test_gradient_subset_mismatch_is_not_instantiable():
    net, _, _, _ = victim_sample(0)
    other = build_mlp((16, 8, 1), ("leaky_relu", "identity"), role="discriminator", seed=3)
    disc_grads = GradientSet.zeros_for(other)
    setup = AttackSetup(weights=net, gradients=disc_grads, gradient_source="discriminator")
    outcome = attack_feasibility(setup)
    assert outcome.missing == MISSING_EXTRACTOR_GRADIENTS
    assert "discriminator" in outcome.detail
    assert gradient_matching_attack(setup).missing.missing == MISSING_EXTRACTOR_GRADIENTS


def test_no_gradients_is_not_instantiable():
    net, _, _, _ = victim_sample(0)
    setup = AttackSetup(weights=net, gradients=None)
    assert attack_feasibility(setup).missing == MISSING_EXTRACTOR_GRADIENTS


def test_truth_width_mismatch_raises():
    net, _, label, grads = victim_sample(0)
    setup = AttackSetup(
        weights=net, gradients=grads, truth=np.zeros(5), truth_label=label,
        config=AttackConfig(iterations=1),
    )
    with pytest.raises(LeakageError):
        gradient_matching_attack(setup)


# ---------------------------------------------------------------------------
# Setups built from real protocol traffic.

@pytest.fixture(scope="module")
def short_run():
    collab = make_rotated_moons(0.0, n=128, seed=1, domain_id=0).without_labels()
    target = make_rotated_moons(60.0, n=128, seed=2, domain_id=1).without_labels()
    extractor = build_mlp((2, 32, 16), ("relu", "identity"), role="extractor", seed=7)
    config = LazySyncConfig(variant=ADDA, steps=12, sync_every=4, batch_size=32, seed=3)
    pair = adapt_pair(extractor, collab, target, config, keep_bytes=True)
    return extractor, config, pair


def test_target_trace_lacks_weights(short_run):
    _, config, pair = short_run
    setup = setup_from_trace(pair.logs[1], config)
    assert setup.weights is None
    assert setup.gradients is not None
    outcome = gradient_matching_attack(setup)
    assert outcome.missing.missing == MISSING_WEIGHTS


def test_collaborator_trace_lacks_extractor_gradients(short_run):
    extractor, config, pair = short_run
    setup = setup_from_trace(pair.logs[0], config)
    # the one ModelInit hands over the (frozen) collaborator extractor ...
    assert mlp_digest(setup.weights) == mlp_digest(extractor)
    # ... but every gradient on the wire is a discriminator buffer
    assert "discriminator" in setup.gradient_source
    outcome = gradient_matching_attack(setup)
    assert outcome.missing.missing == MISSING_EXTRACTOR_GRADIENTS


def test_trace_without_raw_bytes_rejected(short_run):
    _, config, pair = short_run
    stripped = FrameLog(rows=list(pair.logs[0].rows), raw=[])
    with pytest.raises(LeakageError, match="keep_bytes"):
        setup_from_trace(stripped, config)


# ---------------------------------------------------------------------------
# Structural exposure check.

def test_clean_adaptation_logs_pass(short_run):
    extractor, _, pair = short_run
    for log in pair.logs:
        report = trace_exposure_check(log, param_count(extractor))
        assert report.clean, report.violations
        assert report.model_init_count == 1
        assert report.frames == len(log.rows)
        assert report.warnings == []


def test_clean_wdist_logs_pass():
    encoder = build_mlp((2, 2), ("identity",), role="extractor", seed=0)
    a = make_rotated_moons(0.0, n=96, seed=4, domain_id=0).without_labels()
    b = make_rotated_moons(90.0, n=96, seed=5, domain_id=1).without_labels()
    cfg = W1Config(encoder_dims=(2, 2), encoder_activations=("identity",),
                   steps=16, sync_every=4, batch_size=32)
    est = estimate_w1(encoder, a, b, cfg, keep_logs=True)
    for log in est.logs:
        report = trace_exposure_check(log, param_count(encoder))
        assert report.clean, report.violations


def test_injected_gradient_sized_frame_is_flagged():
    extractor = build_mlp((2, 32, 16), ("relu", "identity"), role="extractor", seed=0)
    leak = np.zeros(param_count(extractor), dtype=np.float32)
    log = FrameLog(keep_bytes=True)
    log.record("sent", encode_frame(SyncFrame(MSG_DISC_GRAD, 0, 1, leak.tobytes())))
    report = trace_exposure_check(log, param_count(extractor))
    assert len(report.violations) == 1
    assert "extractor gradient size" in report.violations[0]


def test_second_model_init_is_flagged():
    extractor = build_mlp((2, 32, 16), ("relu", "identity"), role="extractor", seed=0)
    payload = np.zeros(param_count(extractor), dtype=np.float32).tobytes()
    log = FrameLog(keep_bytes=True)
    log.record("sent", encode_frame(SyncFrame(MSG_MODEL_INIT, 0, 0, payload)))
    log.record("sent", encode_frame(SyncFrame(MSG_MODEL_INIT, 0, 5, payload)))
    report = trace_exposure_check(log, param_count(extractor))
    assert len(report.violations) == 1
    assert "once per run" in report.violations[0]


def test_model_init_wrong_size_is_flagged():
    extractor = build_mlp((2, 32, 16), ("relu", "identity"), role="extractor", seed=0)
    log = FrameLog(keep_bytes=True)
    log.record("sent", encode_frame(SyncFrame(MSG_MODEL_INIT, 0, 0, b"\0" * 64)))
    report = trace_exposure_check(log, param_count(extractor))
    assert len(report.violations) == 1
    assert "weights" in report.violations[0]


def test_unknown_msg_type_is_flagged():
    log = FrameLog()
    log.rows.append({
        "direction": "sent", "msg_type": 99, "domain_id": 0,
        "step": 1, "payload_len": 8, "frame_len": 28,
    })
    report = trace_exposure_check(log, 10)
    assert len(report.violations) == 1
    assert "unknown msg_type" in report.violations[0]


def test_empty_log_warns_but_is_clean():
    report = trace_exposure_check(FrameLog(), 10)
    assert report.clean
    assert report.frames == 0
    assert any("empty" in w for w in report.warnings)


def test_exposure_rejects_bad_param_count():
    with pytest.raises(LeakageError):
        trace_exposure_check(FrameLog(), 0)


# ---------------------------------------------------------------------------
# Trace persistence.

def test_trace_roundtrip(short_run, tmp_path):
    _, _, pair = short_run
    path = tmp_path / "collab.trace"
    save_trace(pair.logs[0], path)
    back = load_trace(path)
    assert back.rows == pair.logs[0].rows
    assert back.raw == pair.logs[0].raw
    import json
    index = json.loads((tmp_path / "collab.trace.json").read_text())
    assert len(index["frames"]) == len(pair.logs[0].rows)
    assert index["frames"][0]["offset"] == 0


def test_save_trace_requires_raw(tmp_path):
    log = FrameLog()
    log.rows.append({"direction": "sent", "msg_type": 0, "domain_id": 0,
                     "step": 0, "payload_len": 0, "frame_len": 20})
    with pytest.raises(LeakageError):
        save_trace(log, tmp_path / "x.trace")
