import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowcal import autodiff as ad
from flowcal.correction import (
    CorrectionConfig,
    CorrectionDiverged,
    CorrectionError,
    LatentCorrection,
    Observation,
    correction_loss,
    correction_loss_and_grad,
    correction_loss_via_density,
    latent_log_posterior,
    meanfield_vi,
    train_correction,
)
from flowcal.flows import IdentityFlow, build_flow, flow_inverse
from flowcal.oracle import DenseGaussianProblem, analytic_posterior, reverse_kl_diag_fit
from flowcal.physics import BornLiteSurvey, DenseOperator, NoiseModel, rtm, simulate_observation

SMALL = BornLiteSurvey(nz=6, nx=8, n_sources=3, half_width=3)


def random_flow(seed=0):
    flow = build_flow(SMALL.size, n_layers=2, hidden=6, features=4, seed=seed)
    rng = np.random.default_rng(seed + 50)
    for k, v in flow.params.items():
        flow.params[k] = 0.1 * rng.standard_normal(v.shape)
    return flow


def small_observation(seed=0, flow=None):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(SMALL.shape)
    data = simulate_observation(x, SMALL, NoiseModel(0.1), seed)
    return Observation(data, rtm(SMALL, data))


def dense_problem(seed=0, d=16, n_blocks=4):
    rng = np.random.default_rng(seed)
    J = 1.5 * rng.standard_normal((2 * d, d)) / np.sqrt(d)
    prob = DenseGaussianProblem.standard(J, 0.5)
    _, y = prob.simulate(rng, 1)
    return prob, DenseOperator.split(J, n_blocks), Observation(np.split(y[0], n_blocks))


def test_consistent_latent_has_only_prior_term(rng):
    flow = random_flow()
    z = rng.standard_normal(SMALL.size)
    x = flow_inverse(flow, z, np.zeros(SMALL.size)).reshape(SMALL.shape)
    obs = Observation(SMALL.forward_all(x), np.zeros(SMALL.size))
    assert latent_log_posterior(z, obs, flow, SMALL, 0.1) == pytest.approx(-0.5 * z @ z, abs=1e-9)


def test_doubling_sigma_quarters_misfit(rng):
    flow, obs = random_flow(), small_observation()
    z = rng.standard_normal(SMALL.size)
    prior = -0.5 * z @ z
    m1 = latent_log_posterior(z, obs, flow, SMALL, 0.1) - prior
    m2 = latent_log_posterior(z, obs, flow, SMALL, 0.2) - prior
    assert m2 == pytest.approx(m1 / 4, rel=1e-12)


def test_identity_flow_matches_oracle_log_posterior(rng):
    prob, op, obs = dense_problem()
    y = np.concatenate(obs.rows)
    z1, z2 = rng.standard_normal((2, prob.dim))
    ours = latent_log_posterior(z1, obs, IdentityFlow(prob.dim), op, 0.5) - latent_log_posterior(
        z2, obs, IdentityFlow(prob.dim), op, 0.5
    )
    ref = prob.neg_log_posterior(z2, y) - prob.neg_log_posterior(z1, y)
    assert abs(ours - ref) < 1e-9


def test_subset_rescaling_is_unbiased(rng):
    flow, obs = random_flow(), small_observation()
    z = rng.standard_normal((2, SMALL.size))
    full = latent_log_posterior(z, obs, flow, SMALL, 0.1)
    parts = np.mean([latent_log_posterior(z, obs, flow, SMALL, 0.1, indices=[i]) for i in range(SMALL.n_sources)], axis=0)
    assert np.allclose(parts, full, rtol=1e-12)


def test_subset_index_validation(rng):
    flow, obs = random_flow(), small_observation()
    with pytest.raises(IndexError):
        latent_log_posterior(np.zeros(SMALL.size), obs, flow, SMALL, 0.1, indices=[3])
    with pytest.raises(ValueError):
        latent_log_posterior(np.zeros(SMALL.size), obs, flow, SMALL, 0.0)
    with pytest.raises(ValueError):
        latent_log_posterior(np.zeros(SMALL.size), Observation(obs.data[:2], obs.cond), flow, SMALL, 0.1)


def test_unit_correction_loss_is_negative_log_posterior(rng):
    flow, obs = random_flow(), small_observation()
    z = rng.standard_normal((3, SMALL.size))
    d = SMALL.size
    loss = correction_loss(np.zeros(d), np.zeros(d), z, obs, flow, SMALL, 0.1)
    assert loss == pytest.approx(-np.mean(latent_log_posterior(z, obs, flow, SMALL, 0.1)), rel=1e-12)


def test_entropy_term_is_minus_sum_log_s():
    # identity flow and a zero operator isolate the prior and entropy terms
    op = DenseOperator([np.zeros((1, 2))])
    obs = Observation([np.zeros(1)])
    z = np.zeros((1, 2))
    log_s = np.log([2.0, 2.0])
    loss = correction_loss(np.zeros(2), log_s, z, obs, IdentityFlow(2), op, 1.0)
    assert loss == pytest.approx(-2 * np.log(2.0), abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_property_entropy_term(log_s):
    op = DenseOperator([np.zeros((1, 3))])
    obs = Observation([np.zeros(1)])
    log_s = np.array(log_s)
    loss = correction_loss(np.zeros(3), log_s, np.zeros((1, 3)), obs, IdentityFlow(3), op, 1.0)
    assert loss == pytest.approx(-log_s.sum(), abs=1e-12)


def test_dual_path_differences_agree():
    flow, obs = random_flow(1), small_observation(1)
    rng = np.random.default_rng(7)
    d = SMALL.size
    for _ in range(10):
        z = rng.standard_normal((4, d))
        a = (0.3 * rng.standard_normal(d), 0.2 * rng.standard_normal(d))
        b = (0.3 * rng.standard_normal(d), 0.2 * rng.standard_normal(d))
        direct = correction_loss(*a, z, obs, flow, SMALL, 0.1) - correction_loss(*b, z, obs, flow, SMALL, 0.1)
        dual = correction_loss_via_density(*a, z, obs, flow, SMALL, 0.1) - correction_loss_via_density(
            *b, z, obs, flow, SMALL, 0.1
        )
        assert abs(direct - dual) < 1e-8 * max(1.0, abs(direct))


def test_correction_gradient_matches_fd():
    flow, obs = random_flow(2), small_observation(2)
    rng = np.random.default_rng(3)
    d = SMALL.size
    z = rng.standard_normal((2, d))
    start = {"mu": np.zeros(d), "log_s": np.zeros(d)}
    _, grads = correction_loss_and_grad(start["mu"], start["log_s"], z, obs, flow, SMALL, 0.1, indices=[0, 2])
    fd = ad.fd_gradient(lambda p: correction_loss(p["mu"], p["log_s"], z, obs, flow, SMALL, 0.1, indices=[0, 2]), start)
    for k in start:
        assert np.linalg.norm(grads[k] - fd[k]) / np.linalg.norm(fd[k]) < 1e-5


def test_zero_epochs_gives_identity():
    corr, history = train_correction(random_flow(), small_observation(), SMALL, 0.1, CorrectionConfig(epochs=0))
    assert np.array_equal(corr.mu, np.zeros(SMALL.size)) and np.array_equal(corr.s, np.ones(SMALL.size))
    assert history == []


def test_training_history_length_and_determinism():
    flow, obs = random_flow(), small_observation()
    cfg = CorrectionConfig(epochs=3, seed=4)
    c1, h1 = train_correction(flow, obs, SMALL, 0.1, cfg)
    c2, h2 = train_correction(flow, obs, SMALL, 0.1, cfg)
    assert len(h1) == 3 * SMALL.n_sources
    assert h1 == h2 and c1.to_bytes() == c2.to_bytes()


def test_indices_visited_without_replacement(monkeypatch):
    import flowcal.correction as mod

    seen = []
    real = mod._loss_graph

    def spy(mu, log_s, z, idx, *a, **k):
        seen.append(tuple(int(i) for i in idx))
        return real(mu, log_s, z, idx, *a, **k)

    monkeypatch.setattr(mod, "_loss_graph", spy)
    train_correction(random_flow(), small_observation(), SMALL, 0.1, CorrectionConfig(epochs=2))
    for epoch in (seen[:3], seen[3:]):
        assert sorted(i for t in epoch for i in t) == [0, 1, 2]


def test_stepsize_decay_schedule():
    cfg = CorrectionConfig()
    assert [cfg.stepsize(e) for e in range(5)] == pytest.approx([0.1, 0.1, 0.09, 0.09, 0.081])


def test_config_validation():
    for bad in (dict(epochs=-1), dict(lr=0.0), dict(decay=1.5), dict(z_batch=0), dict(prior_var=0.0)):
        with pytest.raises(ValueError):
            CorrectionConfig(**bad)


def test_divergence_reports_last_finite_iterate():
    op = DenseOperator([np.array([[1e200, 0.0]])])
    obs = Observation([np.array([1.0])])
    with pytest.raises(CorrectionDiverged) as info, np.errstate(over="ignore", invalid="ignore"):
        train_correction(IdentityFlow(2), obs, op, 1.0, CorrectionConfig(epochs=3, lr=10.0))
    assert np.all(np.isfinite(info.value.last.mu))


def test_recovers_reverse_kl_diagonal_fit():
    prob, op, obs = dense_problem()
    mu_ref, s_ref = reverse_kl_diag_fit(analytic_posterior(prob, np.concatenate(obs.rows)))
    cfg = CorrectionConfig(epochs=2000, lr=0.05, decay=0.7, decay_every=100, z_batch=32, indices_per_iter=4)
    corr, history = train_correction(IdentityFlow(prob.dim), obs, op, 0.5, cfg)
    assert np.max(np.abs(corr.mu - mu_ref)) < 1e-2
    assert np.max(np.abs(corr.s / s_ref - 1)) < 0.05


def test_meanfield_scalar_conjugate():
    op = DenseOperator([np.array([[2.0]])])
    y = 1.3
    cfg = CorrectionConfig(epochs=3000, lr=0.05, decay=0.7, decay_every=300, z_batch=32)
    mean, std = meanfield_vi([np.array([y])], op, 1.0, [0.0], [1.0], cfg)
    assert abs(mean[0] - 2 * y / 5) < 0.02
    assert abs(std[0] * np.sqrt(5) - 1) < 0.05


def test_meanfield_zero_data_is_centered():
    op = DenseOperator([np.eye(3)])
    cfg = CorrectionConfig(epochs=1000, lr=0.05, decay=0.7, decay_every=100, z_batch=32)
    mean, _ = meanfield_vi([np.zeros(3)], op, 1.0, np.zeros(3), np.ones(3), cfg)
    assert np.max(np.abs(mean)) < 0.02


def test_meanfield_equals_identity_flow_correction():
    prob, op, obs = dense_problem(1)
    cfg = CorrectionConfig(epochs=20, z_batch=4)
    mean, std = meanfield_vi(obs.data, op, 0.5, np.zeros(prob.dim), np.ones(prob.dim), cfg)
    corr, _ = train_correction(IdentityFlow(prob.dim), obs, op, 0.5, cfg)
    assert mean.tobytes() == corr.mu.tobytes() and std.tobytes() == corr.s.tobytes()


def test_lcor_round_trip_and_errors(tmp_path, rng):
    corr = LatentCorrection(rng.standard_normal(5), rng.standard_normal(5))
    digest = corr.save(tmp_path / "c.lcor")
    back = LatentCorrection.load(tmp_path / "c.lcor")
    assert back.to_bytes() == corr.to_bytes() and back.fingerprint() == digest
    blob = corr.to_bytes()
    for bad in (b"XXXX" + blob[4:], blob[:-3], blob[:4] + b"\x02" + blob[5:]):
        with pytest.raises(CorrectionError):
            LatentCorrection.from_bytes(bad)
    with pytest.raises(CorrectionError):
        LatentCorrection(np.zeros(2), np.zeros(3))


def test_underflowing_sigma_rejected():
    flow, obs = random_flow(), small_observation()
    with pytest.raises(ValueError):
        latent_log_posterior(np.zeros(SMALL.size), obs, flow, SMALL, 1e-170)
