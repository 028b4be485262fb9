import math
import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from card.covariance import (CovarianceModel, cholesky_whitener,
                             make_patch_grid)
from card.operators import (PatchWhitener, build_operator, parse_task,
                            whiten_operator)
from card.sampler import (DenoiserProtocolError, DiffusionSchedule,
                          ExternalDenoiser, GaussianPriorDenoiser,
                          SamplerConfig, default_schedule, init_state,
                          init_xT, make_schedule, p_transition, parse_denoiser,
                          prepare_measurement, q_transition, run_sampler,
                          subsample_schedule, trajectory_rng,
                          transition_moments)
from card.tensorio import PlanarImage

PEER = [sys.executable, os.path.join(os.path.dirname(__file__), "peers.py")]


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


def test_make_schedule_linear():
    sched = make_schedule(4, 1.0)
    assert np.array_equal(sched.sigmas, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert sched.sigmas[0] == 0.0
    assert np.all(np.diff(sched.sigmas) > 0)


def test_make_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(0, 1.0)
    with pytest.raises(ValueError):
        make_schedule(10, -1.0)
    with pytest.raises(ValueError):
        make_schedule(10, 1.0, profile="cosine")


def test_subsample_paper_configuration():
    sched = subsample_schedule(make_schedule(1000, 1.0), 20)
    assert sched.selected.tolist() == [50 * (j + 1) for j in range(20)]


def test_subsample_edge_cases():
    full = make_schedule(7, 1.0)
    assert subsample_schedule(full, 7).selected.tolist() == [1, 2, 3, 4, 5, 6, 7]
    assert subsample_schedule(full, 1).selected.tolist() == [7]
    with pytest.raises(ValueError):
        subsample_schedule(full, 0)
    with pytest.raises(ValueError):
        subsample_schedule(full, 8)


def test_subsample_dedupes_upward():
    sched = subsample_schedule(make_schedule(4, 1.0), 3)
    sel = sched.selected.tolist()
    assert sel[-1] == 4 and len(set(sel)) == 3
    assert all(b > a for a, b in zip(sel, sel[1:]))


def test_schedule_invariants_enforced():
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.1, 0.2]), np.array([1]))
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.0, 0.2, 0.2]), np.array([1, 2]))
    with pytest.raises(ValueError):
        DiffusionSchedule(np.array([0.0, 0.1, 0.2]), np.array([1]))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(sigma_y=0.1, eta=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(sigma_y=0.1, eta_b=1.5)
    with pytest.raises(ValueError):
        SamplerConfig(sigma_y=-0.1)
    with pytest.raises(ValueError):
        SamplerConfig(sigma_y=0.1, mode="fast")


# ---------------------------------------------------------------------------
# Transition formulas (closed-form unit checks)
# ---------------------------------------------------------------------------


def _moments(xi_next, xi_hat, ups, observed, delta, sigma_t, sigma_next,
             eta=0.8, eta_b=1.0):
    mean, var = transition_moments(
        np.array([xi_next]), np.array([xi_hat]), np.array([ups]),
        np.array([observed]), np.array([delta]), sigma_t, sigma_next,
        eta, eta_b)
    return float(mean[0]), float(var[0])


def test_unobserved_regime_example():
    mean, var = _moments(1.0, 0.0, 0.0, False, 0.0, 1.0, 2.0, eta=0.8)
    assert abs(mean - 0.3) <= 1e-12
    assert abs(var - 0.64) <= 1e-12


def test_measurement_dominated_example():
    mean, var = _moments(0.0, 5.0, 3.0, True, 1.0, 2.0, 4.0, eta=0.8, eta_b=1.0)
    assert abs(mean - 3.0) <= 1e-12
    assert abs(var - 3.0) <= 1e-12


def test_diffusion_dominated_example():
    mean, var = _moments(0.0, 0.0, 2.0, True, 1.0, 0.5, 1.0, eta=0.8)
    assert abs(mean - 0.6) <= 1e-12
    assert abs(var - 0.16) <= 1e-12


def test_eta_one_collapses_to_clean_estimate():
    mean, var = _moments(7.0, 1.5, 9.0, True, 2.0, 0.5, 1.0, eta=1.0)
    assert mean == pytest.approx(1.5, abs=1e-15)
    assert var == pytest.approx(0.25, abs=1e-15)


def test_regime_boundary_coincidence():
    eta = 0.8
    sigma_t = delta = 0.7
    eta_b_star = math.sqrt(1 - eta**2)
    xi_hat, ups = 1.3, -0.4
    mean_c, var_c = _moments(0.0, xi_hat, ups, True, delta, sigma_t, 1.4,
                             eta=eta, eta_b=eta_b_star)
    # regime (b) formulas evaluated by hand at the boundary
    alpha = math.sqrt(1 - eta**2) * sigma_t
    mean_b = xi_hat + (alpha / delta) * (ups - xi_hat)
    var_b = (eta * sigma_t) ** 2
    assert abs(mean_c - mean_b) <= 1e-12
    assert abs(var_c - var_b) <= 1e-12
    # implementation takes the measurement-dominated branch at equality
    _, var_generic = _moments(0.0, xi_hat, ups, True, delta, sigma_t, 1.4,
                              eta=eta, eta_b=1.0)
    assert var_generic == pytest.approx(sigma_t**2 - delta**2, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(
    eta=st.floats(min_value=1e-6, max_value=1.0),
    eta_b=st.floats(min_value=0.0, max_value=1.0),
    sigma_t=st.floats(min_value=0.0, max_value=10.0),
    gap=st.floats(min_value=1e-6, max_value=5.0),
    delta=st.floats(min_value=0.0, max_value=20.0),
    observed=st.booleans(),
)
def test_variance_never_negative(eta, eta_b, sigma_t, gap, delta, observed):
    if observed and delta == 0.0:
        delta = 1e-3
    _, var = _moments(0.3, -0.2, 0.9, observed, delta if observed else 0.0,
                      sigma_t, sigma_t + gap, eta=eta, eta_b=eta_b)
    assert var >= 0.0


def test_p_transition_requires_decreasing_sigma():
    cfg = SamplerConfig(sigma_y=0.1)
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        p_transition(np.zeros(4), np.zeros(4), np.zeros(4),
                     np.zeros(4, bool), np.zeros(4), 2.0, 1.0, cfg, rng)


def test_unobserved_coordinates_never_read_ups():
    cfg = SamplerConfig(sigma_y=0.1)
    observed = np.array([True, False, False, True])
    delta = np.where(observed, 0.05, 0.0)
    xi_next = np.array([0.1, 0.2, 0.3, 0.4])
    xi_hat = np.array([0.0, 0.1, 0.2, 0.3])
    ups_a = np.array([1.0, 0.0, 0.0, 2.0])
    ups_b = np.array([1.0, 999.0, -999.0, 2.0])
    out_a = p_transition(xi_next, xi_hat, ups_a, observed, delta, 0.3, 0.6,
                         cfg, np.random.default_rng(5))
    out_b = p_transition(xi_next, xi_hat, ups_b, observed, delta, 0.3, 0.6,
                         cfg, np.random.default_rng(5))
    assert np.array_equal(out_a, out_b)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def test_init_unobserved_statistics():
    rng = np.random.default_rng(7)
    n = 200_000
    ups = np.zeros((n, 1))
    observed = np.array([False])
    delta = np.array([0.0])
    xi = init_state(ups, observed, delta, 0.9, rng)
    assert abs(xi.mean()) < 4 * 0.9 / math.sqrt(n)
    assert abs(xi.var() - 0.81) < 4 * 0.81 * math.sqrt(2 / (n - 1))


def test_init_observed_statistics():
    rng = np.random.default_rng(8)
    n = 200_000
    ups = np.full((n, 1), 1.7)
    observed = np.array([True])
    delta = np.array([0.4])
    sigma_T = 1.0
    xi = init_state(ups, observed, delta, sigma_T, rng)
    var = sigma_T**2 - 0.4**2
    assert abs(xi.mean() - 1.7) < 4 * math.sqrt(var / n)
    assert abs(xi.var() - var) < 4 * var * math.sqrt(2 / (n - 1))


def test_init_sigma_y_zero_pins_mean_at_measurement():
    op = build_operator(parse_task("denoise"), 4, 4)
    y = np.arange(16.0)[None, :]
    meas = op.measurement_to_spectral(y)
    cfg = SamplerConfig(sigma_y=0.0)
    xi, ups, observed, delta = init_xT(op, meas, 1.0, cfg,
                                       np.random.default_rng(0))
    assert np.all(observed)
    assert np.array_equal(ups, y)
    assert np.array_equal(delta, np.zeros(16))


def test_demotion_of_overwhelmed_coordinates():
    op = build_operator(parse_task("deblur-uniform"), 16, 16)
    meas = op.measurement_to_spectral(np.ones((1, 256)))
    cfg = SamplerConfig(sigma_y=0.5)
    _, ups, observed, delta = init_xT(op, meas, 1.0, cfg,
                                      np.random.default_rng(0))
    s = op.spectral_s
    # observed exactly where s > 0 and sigma_y / s <= sigma_T
    assert np.array_equal(observed, (s > 0) & (0.5 / np.maximum(s, 1e-300) <= 1.0))
    assert np.all(delta[~observed] == 0)
    assert np.all(ups[:, ~observed] == 0)


# ---------------------------------------------------------------------------
# Marginal consistency of the q-chain (module-scale version)
# ---------------------------------------------------------------------------


def test_q_chain_marginals_match_diffusion_marginals():
    T, n = 20, 20_000
    s_tilde = np.array([0.0, 0.0, 2.0, 1.0, 0.8, 0.5, 0.4, 0.25])
    d = s_tilde.size
    sigma_y = 0.2
    sched = make_schedule(T, 1.0)
    cfg = SamplerConfig(sigma_y=sigma_y, eta=0.8, eta_b=1.0)
    rng = np.random.default_rng(42)

    observed = s_tilde > 0
    delta = np.where(observed, sigma_y / np.where(observed, s_tilde, 1.0), 0.0)
    xi0 = rng.standard_normal(d)
    z = rng.standard_normal((n, d))
    ups = np.where(observed, xi0 + delta * z, 0.0)

    sigma_T = sched.sigmas[-1]
    # reference-chain initializer: unobserved coordinates start at xi0
    xi = init_state(np.where(observed, ups, xi0), observed, delta, sigma_T, rng)
    checked_regimes = set()
    for t in range(T - 1, 0, -1):
        sigma_next = float(sched.sigmas[t + 1])
        sigma_t = float(sched.sigmas[t])
        xi = q_transition(xi, xi0, ups, observed, delta, sigma_t, sigma_next,
                          cfg, rng)
        mean_tol = 4 * sigma_t / math.sqrt(n)
        var_tol = 4 * sigma_t**2 * math.sqrt(2 / (n - 1))
        assert np.abs(xi.mean(axis=0) - xi0).max() < mean_tol
        assert np.abs(xi.var(axis=0) - sigma_t**2).max() < var_tol
        checked_regimes.update(
            "a" if not o else ("c" if sigma_t >= dl else "b")
            for o, dl in zip(observed, delta))
    assert checked_regimes == {"a", "b", "c"}


# ---------------------------------------------------------------------------
# End-to-end sampler contracts
# ---------------------------------------------------------------------------


def _identity_setup(height=16, width=16, channels=1):
    op = build_operator(parse_task("denoise"), height, width, channels)
    sched = default_schedule(5, T=100, sigma_max=1.0)
    den = GaussianPriorDenoiser(0.5, 0.3)
    return op, sched, den


def test_noiseless_identity_returns_measurement(rng):
    op, sched, den = _identity_setup()
    y = PlanarImage(rng.random((1, 16, 16)))
    cfg = SamplerConfig(sigma_y=0.0, nfe=5, seed=3)
    out = run_sampler(op, y, den, cfg, sched)
    assert np.array_equal(out.data, y.data)


def test_sampler_deterministic(rng):
    op, sched, den = _identity_setup()
    y = PlanarImage(rng.random((1, 16, 16)))
    cfg = SamplerConfig(sigma_y=0.4, nfe=5, seed=11)
    a = run_sampler(op, y, den, cfg, sched)
    b = run_sampler(op, y, den, cfg, sched)
    assert np.array_equal(a.data, b.data)


def test_whitened_identity_cov_bit_matches_plain(rng):
    cov = CovarianceModel(8, 8, np.eye(64), {}, 1.0)
    wt = cholesky_whitener(cov)
    grid = make_patch_grid(16, 16, 8, 8)
    op, sched, den = _identity_setup()
    wop = whiten_operator(op, wt, grid)
    y = PlanarImage(np.clip(rng.random((1, 16, 16)), 0, 1))
    cfg = SamplerConfig(sigma_y=0.3, nfe=5, seed=21)
    whitened = run_sampler(wop, y, den, cfg, sched, PatchWhitener(wt, grid))
    plain = run_sampler(op, y, den, cfg, sched, None)
    assert np.array_equal(whitened.data, plain.data)


def test_sampler_multichannel(rng):
    op, sched, den = _identity_setup(channels=3)
    y = PlanarImage(rng.random((3, 16, 16)))
    cfg = SamplerConfig(sigma_y=0.2, nfe=3, seed=2)
    out = run_sampler(op, y, den, cfg, sched)
    assert out.data.shape == (3, 16, 16)
    assert out.data.min() >= 0 and out.data.max() <= 1


def test_trajectory_rng_keyed_by_image_id():
    a = trajectory_rng(5, 0).standard_normal(4)
    b = trajectory_rng(5, 1).standard_normal(4)
    c = trajectory_rng(5, 0).standard_normal(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, c)


def test_sampler_dimension_mismatch(rng):
    op, sched, den = _identity_setup()
    y = PlanarImage(rng.random((1, 8, 8)))
    with pytest.raises(ValueError, match="does not match"):
        run_sampler(op, y, den, SamplerConfig(sigma_y=0.1, nfe=5, seed=0),
                    sched)


# ---------------------------------------------------------------------------
# Denoisers
# ---------------------------------------------------------------------------


def test_gaussian_prior_denoiser_formula(rng):
    den = GaussianPriorDenoiser(prior_mean=0.4, prior_std=0.5)
    x = rng.standard_normal((1, 4, 4))
    out = den.predict(x, 1.5)
    expected = (0.25 * x + 2.25 * 0.4) / 2.5
    assert np.allclose(out, expected, atol=1e-15)
    assert np.array_equal(den.predict(x, 0.0), x)


def test_parse_denoiser():
    den = parse_denoiser("gaussian:tau=0.2,mu=0.7")
    assert den.prior_std == 0.2 and den.prior_mean == 0.7
    ext = parse_denoiser("external:python3 peer.py echo")
    assert ext.command == ["python3", "peer.py", "echo"]
    with pytest.raises(ValueError):
        parse_denoiser("vgg:whatever")


def test_external_echo_peer(rng):
    with ExternalDenoiser(PEER + ["echo"], timeout=20) as den:
        x = rng.random((1, 6, 6))
        out = den.predict(x, 0.5)
        assert np.abs(out - x).max() < 1e-7  # float32 wire
        out2 = den.predict(x * 2 - 1, 0.1)
        assert np.abs(out2 - (x * 2 - 1)).max() < 1e-6


def test_external_gaussian_matches_in_process(rng):
    in_proc = GaussianPriorDenoiser(0.5, 0.3)
    with ExternalDenoiser(PEER + ["gauss", "0.3", "0.5"], timeout=20) as den:
        x = rng.random((1, 8, 8))
        for sigma in (0.05, 0.3, 1.0):
            mine = in_proc.predict(x, sigma)
            theirs = den.predict(x, sigma)
            assert np.abs(mine - theirs).max() / np.abs(mine).max() <= 1e-6


def test_external_gaussian_full_sampler_equivalence(rng):
    op, sched, _ = _identity_setup(8, 8)
    y = PlanarImage(rng.random((1, 8, 8)))
    cfg = SamplerConfig(sigma_y=0.3, nfe=3, seed=17)
    ref = run_sampler(op, y, GaussianPriorDenoiser(0.5, 0.3), cfg, sched)
    with ExternalDenoiser(PEER + ["gauss", "0.3", "0.5"], timeout=20) as den:
        ext = run_sampler(op, y, den, cfg, sched)
    assert np.abs(ref.data - ext.data).max() <= 1e-6


def test_external_wrong_dims_rejected(rng):
    with ExternalDenoiser(PEER + ["wrongdims"], timeout=20) as den:
        with pytest.raises(DenoiserProtocolError, match="dims mismatch"):
            den.predict(rng.random((1, 4, 4)), 0.5)


def test_external_bad_magic_rejected(rng):
    with ExternalDenoiser(PEER + ["badmagic"], timeout=20) as den:
        with pytest.raises(DenoiserProtocolError, match="malformed"):
            den.predict(rng.random((1, 4, 4)), 0.5)


def test_external_timeout(rng):
    with ExternalDenoiser(PEER + ["sleep"], timeout=0.4) as den:
        with pytest.raises(DenoiserProtocolError, match="timed out"):
            den.predict(rng.random((1, 4, 4)), 0.5)
