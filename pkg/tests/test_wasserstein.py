"""Distance estimator tests, checked against exact transport-plan oracles."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linear_sum_assignment

from dadapt.domains import DomainDataset, batch_iter, make_rotated_moons
from dadapt.losses import domain_side_loss, gradient_penalty, wda
from dadapt.nets import (
    F32,
    GradientSet,
    SgdState,
    build_mlp,
    mlp_backward,
    mlp_digest,
    mlp_forward,
    optimizer_step,
    param_count,
    project_mlp_,
)
from dadapt.wasserstein import (
    EstimationError,
    W1Config,
    aggregate_critic_grads,
    critic_mean_output,
    estimate_w1,
    identity_encoder,
    identity_encoder_config,
    run_w1_node,
)
from dadapt.wire import MSG_BYE, MSG_DISC_GRAD, MSG_HELLO, MSG_MODEL_INIT, MSG_W1_STATS


# ---------------------------------------------------------------------------
# Exact oracles.  Equal-size empirical distributions admit a closed-form
# first Wasserstein distance: in 1-d it is the mean gap between sorted
# samples, in general it is the optimal assignment over the pairwise
# Euclidean cost matrix.

def sorted_w1(a, b) -> float:
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.shape != b.shape:
        raise ValueError("sorted oracle needs equal sample counts")
    return float(np.mean(np.abs(a - b)))


def matching_w1(xa: np.ndarray, xb: np.ndarray) -> float:
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    cost = np.sqrt(((xa[:, None, :] - xb[None, :, :]) ** 2).sum(-1))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@given(st.data())
def test_oracles_agree_on_1d_samples(data):
    n = data.draw(st.integers(2, 12))
    fl = st.floats(min_value=-50, max_value=50, allow_nan=False)
    a = data.draw(st.lists(fl, min_size=n, max_size=n))
    b = data.draw(st.lists(fl, min_size=n, max_size=n))
    xa = np.array(a, dtype=np.float64).reshape(-1, 1)
    xb = np.array(b, dtype=np.float64).reshape(-1, 1)
    exact = sorted_w1(a, b)
    assert abs(matching_w1(xa, xb) - exact) <= 1e-8 * max(1.0, exact)


def cloud_1d(mu: float, sd: float, n: int, seed: int, domain_id: int) -> DomainDataset:
    rng = np.random.default_rng([seed, 0xC10D])
    feats = rng.normal(mu, sd, size=(n, 1)).astype(np.float32)
    return DomainDataset(feats, None, domain_id)


# ---------------------------------------------------------------------------
# Single-process oracle for the two-node estimate.  Reimplements the update
# rule directly: one critic, one lazy buffer per side, stale averaged sync.
# The stream tags and seed derivation are duplicated on purpose; they are
# part of the wire-visible schedule, and silent drift should fail here.

def reference_estimate(encoder, collab_data, target_data, config):
    def stream(tag):
        return int(np.random.default_rng([config.seed, tag]).integers(0, 2**63 - 1))

    def side_grads(variant, critic, feats, side):
        acts = mlp_forward(critic, feats)
        _, dgrad = domain_side_loss(variant, acts[-1], side)
        grads, _ = mlp_backward(critic, acts, dgrad)
        _, pgrads = gradient_penalty(critic, feats, variant.gamma)
        grads.add_(pgrads)
        return grads

    variant = wda(gamma=config.gamma)
    critic = config.build_critic()
    opt = SgdState(lr=config.lr)
    acc_c = GradientSet.zeros_for(critic)
    acc_t = GradientSet.zeros_for(critic)
    g_sync = GradientSet.zeros_for(critic)
    stream_c, stream_t = stream(0x37C011), stream(0x37A967)
    scale = 1.0 / (2.0 * config.sync_every)
    for n in range(1, config.steps + 1):
        xc, _ = batch_iter(collab_data, config.batch_size, stream_c, n - 1)
        xt, _ = batch_iter(target_data, config.batch_size, stream_t, n - 1)
        acc_c.add_(side_grads(variant, critic, mlp_forward(encoder, xc)[-1], "src"))
        acc_t.add_(side_grads(variant, critic, mlp_forward(encoder, xt)[-1], "tgt"))
        if n % config.sync_every == 0:
            g_sync = acc_c.plus(acc_t).scaled(scale)
            acc_c = GradientSet.zeros_for(critic)
            acc_t = GradientSet.zeros_for(critic)
        optimizer_step(critic, g_sync, opt)
        if config.critic_cap is not None:
            project_mlp_(critic, config.critic_cap)
    mean_c = F32(critic_mean_output(critic, encoder, collab_data.features))
    mean_t = F32(critic_mean_output(critic, encoder, target_data.features))
    return float(mean_c) - float(mean_t), mlp_digest(critic)


# ---------------------------------------------------------------------------
# Shared slow fixtures: one full 1-d estimate reused by several tests.

GAUSS_STEPS = 600


@pytest.fixture(scope="module")
def gauss_pair():
    return cloud_1d(0.0, 0.5, 256, seed=1, domain_id=3), cloud_1d(
        2.0, 0.5, 256, seed=2, domain_id=9
    )


@pytest.fixture(scope="module")
def gauss_est(gauss_pair):
    a, b = gauss_pair
    cfg = identity_encoder_config(1, steps=GAUSS_STEPS)
    return estimate_w1(identity_encoder(1), a, b, cfg, keep_logs=True, record_trace=True)


def test_gaussian_estimate_within_ten_percent(gauss_pair, gauss_est):
    a, b = gauss_pair
    exact = sorted_w1(a.features, b.features)
    assert abs(gauss_est.value - exact) <= 0.10 * exact


def test_replicas_and_reports_agree(gauss_est):
    collab, target = gauss_est.collaborator, gauss_est.target
    assert mlp_digest(collab.critic) == mlp_digest(target.critic)
    assert collab.critic_digests == target.critic_digests
    assert collab.value == target.value == gauss_est.value
    assert gauss_est.value == gauss_est.loss_collab - gauss_est.loss_target
    assert collab.sync_steps == list(range(4, GAUSS_STEPS + 1, 4))
    assert len(gauss_est.trace) == GAUSS_STEPS


def test_estimate_is_symmetric_enough(gauss_pair, gauss_est):
    a, b = gauss_pair
    cfg = identity_encoder_config(1, steps=GAUSS_STEPS)
    reverse = estimate_w1(identity_encoder(1), b, a, cfg)
    assert abs(reverse.value - gauss_est.value) <= 0.05 * gauss_est.value


def test_frame_sequence_and_payload_sizes(gauss_est):
    syncs = GAUSS_STEPS // 4
    clog, tlog = gauss_est.logs
    collab_sent = [r["msg_type"] for r in clog.rows if r["direction"] == "sent"]
    target_sent = [r["msg_type"] for r in tlog.rows if r["direction"] == "sent"]
    tail = [MSG_DISC_GRAD] * syncs + [MSG_W1_STATS, MSG_BYE]
    assert collab_sent == [MSG_HELLO, MSG_MODEL_INIT] + tail
    assert target_sent == [MSG_HELLO, MSG_HELLO] + tail

    by_type = {r["msg_type"]: r for r in clog.rows if r["direction"] == "sent"}
    assert by_type[MSG_MODEL_INIT]["payload_len"] == 4 * param_count(identity_encoder(1))
    assert by_type[MSG_W1_STATS]["payload_len"] == 4
    assert by_type[MSG_W1_STATS]["step"] == GAUSS_STEPS + 1
    assert by_type[MSG_BYE]["step"] == GAUSS_STEPS + 2
    critic_bytes = 4 * param_count(gauss_est.collaborator.critic)
    grad_rows = [r for r in clog.rows if r["msg_type"] == MSG_DISC_GRAD]
    assert all(r["payload_len"] == critic_bytes for r in grad_rows)
    assert gauss_est.collaborator.frames_sent == 2 + syncs + 2
    assert gauss_est.collaborator.frames_received == 2 + syncs + 2


@pytest.mark.parametrize("sync_every,steps,gamma", [(4, 48, 2.0), (3, 18, 0.0)])
def test_matches_single_process_oracle(sync_every, steps, gamma):
    base = make_rotated_moons(0.0, n=96, noise_sd=0.12, seed=4, domain_id=0)
    rot = make_rotated_moons(60.0, n=96, noise_sd=0.12, seed=5, domain_id=1)
    cfg = identity_encoder_config(
        2, steps=steps, sync_every=sync_every, batch_size=32, gamma=gamma, seed=6
    )
    want_value, want_digest = reference_estimate(identity_encoder(2), base, rot, cfg)
    est = estimate_w1(identity_encoder(2), base, rot, cfg)
    assert est.value == want_value
    assert mlp_digest(est.collaborator.critic) == want_digest
    assert mlp_digest(est.target.critic) == want_digest


def test_identical_datasets_give_exactly_zero():
    a = cloud_1d(1.0, 0.3, 200, seed=21, domain_id=0)
    b = cloud_1d(1.0, 0.3, 200, seed=21, domain_id=1)
    est = estimate_w1(identity_encoder(1), a, b, identity_encoder_config(1, steps=200))
    assert est.value == 0.0
    assert est.clamped == 0.0


def test_near_equal_distributions_stay_near_zero():
    a = cloud_1d(0.0, 0.5, 200, seed=7, domain_id=0)
    b = cloud_1d(0.0, 0.5, 200, seed=8, domain_id=1)
    est = estimate_w1(identity_encoder(1), a, b, identity_encoder_config(1, steps=400))
    assert -0.05 < est.value < 0.05
    assert est.clamped == max(0.0, est.value)


def test_rotation_ordering_smoke():
    base = make_rotated_moons(0.0, n=256, noise_sd=0.12, seed=0, domain_id=0)
    cfg = identity_encoder_config(2, steps=1000)
    near = estimate_w1(
        identity_encoder(2), base,
        make_rotated_moons(30.0, n=256, noise_sd=0.12, seed=11, domain_id=1), cfg,
    )
    far = estimate_w1(
        identity_encoder(2), base,
        make_rotated_moons(90.0, n=256, noise_sd=0.12, seed=12, domain_id=1), cfg,
    )
    assert 0.0 < near.value < far.value


def test_tcp_matches_loopback():
    a = cloud_1d(0.0, 0.4, 96, seed=31, domain_id=0)
    b = cloud_1d(1.0, 0.4, 96, seed=32, domain_id=1)
    cfg = identity_encoder_config(1, steps=40, batch_size=32)
    loop = estimate_w1(identity_encoder(1), a, b, cfg, transport="loopback")
    tcp = estimate_w1(identity_encoder(1), a, b, cfg, transport="tcp")
    assert tcp.value == loop.value
    assert mlp_digest(tcp.target.critic) == mlp_digest(loop.target.critic)
    assert tcp.collaborator.bytes_sent == loop.collaborator.bytes_sent
    assert tcp.target.frames_received == loop.target.frames_received


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_raises_with_trace():
    base = make_rotated_moons(0.0, n=128, noise_sd=0.12, seed=0, domain_id=0)
    rot = make_rotated_moons(60.0, n=128, noise_sd=0.12, seed=3, domain_id=1)
    cfg = identity_encoder_config(2, steps=200, lr=5.0, gamma=50.0, critic_cap=None)
    with pytest.raises(EstimationError) as err:
        estimate_w1(identity_encoder(2), base, rot, cfg)
    assert len(err.value.trace) > 0


def test_penalty_term_changes_training():
    base = make_rotated_moons(0.0, n=96, noise_sd=0.12, seed=4, domain_id=0)
    rot = make_rotated_moons(60.0, n=96, noise_sd=0.12, seed=5, domain_id=1)
    plain = identity_encoder_config(2, steps=24, batch_size=32)
    with_pen = identity_encoder_config(2, steps=24, batch_size=32, gamma=4.0)
    est0 = estimate_w1(identity_encoder(2), base, rot, plain)
    est4 = estimate_w1(identity_encoder(2), base, rot, with_pen)
    assert mlp_digest(est0.target.critic) != mlp_digest(est4.target.critic)
    assert np.isfinite(est4.value)


# ---------------------------------------------------------------------------
# Small pieces.

def test_critic_mean_matches_naive_loop():
    critic = build_mlp((2, 8, 1), ("leaky_relu", "identity"), role="critic", seed=3)
    enc = identity_encoder(2)
    feats = np.random.default_rng(9).normal(size=(17, 2)).astype(np.float32)
    per_row = [float(mlp_forward(critic, feats[i : i + 1])[-1][0, 0]) for i in range(17)]
    assert critic_mean_output(critic, enc, feats) == pytest.approx(
        float(np.mean(per_row)), abs=1e-9
    )


def test_constant_critic_mean_is_its_bias():
    critic = build_mlp((2, 1), ("identity",), role="critic", seed=0)
    critic.layers[0].weights[...] = 0.0
    critic.layers[0].bias[...] = 1.5
    feats = np.random.default_rng(10).normal(size=(33, 2)).astype(np.float32)
    assert critic_mean_output(critic, identity_encoder(2), feats) == 1.5


def test_critic_mean_rejects_empty_input():
    critic = build_mlp((2, 1), ("identity",), role="critic", seed=0)
    with pytest.raises(EstimationError):
        critic_mean_output(critic, identity_encoder(2), np.zeros((0, 2), dtype=np.float32))


def test_aggregate_examples_and_antisymmetry():
    net = build_mlp((1, 1), ("identity",), role="critic", seed=0)

    def const(value):
        g = GradientSet.zeros_for(net)
        g.entries[0][0][...] = value
        return g

    assert aggregate_critic_grads(const(1.0), const(0.25)).entries[0][0][0, 0] == F32(0.75)
    assert aggregate_critic_grads(const(0.5), const(0.5)).is_zero()
    rng = np.random.default_rng(11)
    a, b = const(0.0), const(0.0)
    a.entries[0][0][...] = rng.normal(size=(1, 1))
    b.entries[0][0][...] = rng.normal(size=(1, 1))
    fwd = aggregate_critic_grads(a, b)
    rev = aggregate_critic_grads(b, a)
    assert np.array_equal(fwd.entries[0][0], -rev.entries[0][0])


def test_fresh_critic_starts_flat():
    cfg = identity_encoder_config(3)
    critic = cfg.build_critic()
    assert not critic.layers[-1].weights.any()
    assert not critic.layers[-1].bias.any()
    assert critic.layers[0].weights.any()
    assert mlp_digest(cfg.build_critic()) == mlp_digest(critic)
    other = identity_encoder_config(3, seed=1).build_critic()
    assert mlp_digest(other) != mlp_digest(critic)
    feats = np.random.default_rng(12).normal(size=(5, 3)).astype(np.float32)
    assert critic_mean_output(critic, identity_encoder(3), feats) == 0.0


def test_identity_encoder_passes_through():
    enc = identity_encoder(4)
    x = np.random.default_rng(13).normal(size=(7, 4)).astype(np.float32)
    assert np.array_equal(mlp_forward(enc, x)[-1], x)


def test_config_validation():
    good = dict(encoder_dims=(2, 2), encoder_activations=("identity",))
    for bad in (
        dict(steps=0),
        dict(sync_every=0),
        dict(steps=4, sync_every=5),
        dict(batch_size=0),
        dict(lr=0.0),
        dict(gamma=-1.0),
        dict(critic_hidden=()),
        dict(critic_cap=0.0),
    ):
        with pytest.raises(EstimationError):
            W1Config(**{**good, **bad})


def test_node_role_validation():
    data = cloud_1d(0.0, 0.5, 16, seed=1, domain_id=0)
    cfg = identity_encoder_config(1, steps=4)
    with pytest.raises(EstimationError, match="needs the candidate encoder"):
        run_w1_node("collaborator", data, cfg, endpoint=None)
    with pytest.raises(EstimationError, match="over the wire"):
        run_w1_node("target", data, cfg, endpoint=None, encoder=identity_encoder(1))
    with pytest.raises(EstimationError, match="unknown role"):
        run_w1_node("judge", data, cfg, endpoint=None)
    with pytest.raises(EstimationError, match="unknown transport"):
        estimate_w1(identity_encoder(1), data, data, cfg, transport="carrier-pigeon")
