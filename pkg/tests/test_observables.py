"""Observable estimators against exact traces, plus the exponential
extrapolation fit."""

import numpy as np
import pytest

from nessrbm import exact, ndo, observables, sampler
from nessrbm.errors import FitDiverged
from nessrbm.model import ChainSpec, DriveSpec, LindbladMap, SparseOperator, model_a, model_b
from nessrbm.observables import fit_exponential


def identity_op(n):
    states = np.arange(1 << n, dtype=np.int64)
    return SparseOperator.from_entries(n, states, states, np.ones(len(states)))


def test_identity_observable_is_exactly_one():
    n = 3
    params = ndo.init_params(n, 1, 1, seed=5, stddev=0.3)
    for batch in (sampler.enumerate_diagonal(params),
                  sampler.sample_diagonal(params, sampler.SamplerConfig(n_samples=200, seed=7))):
        est = observables.estimate_observable(params, identity_op(n), batch)
        assert est.value == 1.0
        assert est.n_samples == len(batch)
    assert observables.estimate_observable(
        params, identity_op(n), sampler.enumerate_diagonal(params)).std_error == 0.0


def test_magnetization_op_entries():
    op = observables.magnetization_op(2, 1)
    dense = op.to_dense()
    assert np.allclose(dense, np.diag([-1.0, 1.0, -1.0, 1.0]))
    op2 = observables.magnetization_op(2, 2)
    assert np.allclose(op2.to_dense(), np.diag([-1.0, -1.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        observables.magnetization_op(2, 3)


def test_strong_field_magnetization_close_to_down():
    # diagonal distribution concentrated on the all-down configuration
    n = 1
    params = ndo.unflatten(np.zeros(ndo.param_count(n, 1, 1)), n, 1, 1)
    params.b_amp[:] = -10.0
    batch = sampler.enumerate_diagonal(params)
    est = observables.estimate_observable(
        params, observables.magnetization_op(n, 1), batch)
    assert est.value == pytest.approx(-1.0, abs=1e-6)


def test_current_operator_antisymmetry_and_hermiticity():
    chain = ChainSpec(3, coupling=1.0, anisotropy=0.5)
    forward = observables.spin_current_op(chain, 1, 2).to_dense()
    backward = observables.spin_current_op(chain, 2, 1).to_dense()
    assert np.allclose(forward, -backward)
    assert np.allclose(forward, forward.conj().T)
    with pytest.raises(ValueError):
        observables.spin_current_op(chain, 1, 1)


def test_current_vanishes_on_real_diagonal_state():
    chain = ChainSpec(3)
    rng = np.random.default_rng(4)
    probs = rng.random(8)
    probs /= probs.sum()
    rho = np.diag(probs).astype(np.complex128)
    op = observables.spin_current_op(chain, 1, 2)
    assert abs(exact.exact_expectation(rho, op)) < 1e-14


def test_bond_currents_agree_on_exact_steady_state():
    for n in (3, 4):
        chain, drive = model_b(n)
        rho = exact.steady_state_ed(LindbladMap(chain, drive))
        values = [exact.exact_expectation(rho, observables.spin_current_op(chain, k, k + 1))
                  for k in range(1, n)]
        for a in values:
            assert abs(a.imag) < 1e-10
            for b in values:
                assert abs(a - b) < 1e-10


def test_current_site_independence_at_half_anisotropy():
    chain, drive = model_b(4, gamma=0.2, anisotropy=0.5)
    rho = exact.steady_state_ed(LindbladMap(chain, drive))
    i12 = exact.exact_expectation(rho, observables.spin_current_op(chain, 1, 2))
    i23 = exact.exact_expectation(rho, observables.spin_current_op(chain, 2, 3))
    assert abs(i12 - i23) < 1e-10
    assert abs(i12) > 1e-3  # the driven chain actually carries current


def test_no_current_without_drive_bias():
    chain, drive = model_a(4, bias=0.0)
    rho = exact.steady_state_ed(LindbladMap(chain, drive))
    op = observables.summed_bond_current_op(chain)
    assert abs(exact.exact_expectation(rho, op)) < 1e-10


def test_enumerated_estimate_matches_exact_trace():
    n = 4
    chain, _ = model_b(n, anisotropy=0.5)
    params = ndo.init_params(n, 1, 1, seed=12, stddev=0.25)
    batch = sampler.enumerate_diagonal(params)
    rho = exact.materialize_density(params)
    for op in (observables.magnetization_op(n, 2),
               observables.spin_current_op(chain, 2, 3),
               observables.summed_bond_current_op(chain)):
        est = observables.estimate_observable(params, op, batch)
        reference = exact.exact_expectation(rho, op)
        assert est.value == pytest.approx(float(reference.real), abs=1e-10)
        assert est.std_error == 0.0


def test_imaginary_residual_small_for_hermitian_operator():
    n = 3
    chain, _ = model_b(n)
    params = ndo.init_params(n, 1, 1, seed=3, stddev=0.3)
    batch = sampler.enumerate_diagonal(params)
    local = observables.local_observable_values(
        params, observables.spin_current_op(chain, 1, 2), batch.configs)
    mean = (batch.weights * local).sum() / batch.weights.sum()
    assert abs(mean.imag) < 1e-10


def test_mc_estimate_within_error_bars():
    n = 3
    params = ndo.init_params(n, 1, 1, seed=21, stddev=0.3)
    op = observables.magnetization_op(n, 2)
    truth = observables.estimate_observable(
        params, op, sampler.enumerate_diagonal(params)).value
    cfg = sampler.SamplerConfig(n_samples=8000, thinning=6, seed=17)
    batch = sampler.sample_diagonal(params, cfg)
    est = observables.estimate_observable(params, op, batch)
    assert est.std_error > 0
    assert abs(est.value - truth) < 4.0 * est.std_error


def test_mean_current_is_bond_average_on_shared_batch():
    n = 4
    chain, _ = model_b(n)
    params = ndo.init_params(n, 1, 1, seed=8, stddev=0.2)
    batch = sampler.enumerate_diagonal(params)
    mean = observables.mean_current(params, chain, batch)
    bonds = [observables.estimate_observable(
        params, observables.spin_current_op(chain, k, k + 1), batch).value
        for k in range(1, n)]
    assert mean.value == pytest.approx(float(np.mean(bonds)), abs=1e-12)


def synthetic_series(limit, amplitude, rate, n=200, noise=0.0, seed=0):
    t = np.arange(n, dtype=np.float64)
    v = limit + amplitude * rate ** t
    if noise:
        v = v + np.random.default_rng(seed).normal(0.0, noise, size=n)
    return np.column_stack([t, v])


def test_fit_recovers_noiseless_parameters():
    fit = fit_exponential(synthetic_series(0.3, 0.5, 0.99))
    assert fit.limit == pytest.approx(0.3, rel=1e-8)
    assert fit.amplitude == pytest.approx(0.5, rel=1e-8)
    assert fit.rate == pytest.approx(0.99, rel=1e-8)
    assert fit.residual_rms < 1e-10
    assert not fit.degenerate


def test_fit_noisy_limit_within_three_stderr():
    fit = fit_exponential(synthetic_series(0.3, 0.5, 0.99, noise=0.01, seed=5))
    assert fit.limit_stderr > 0
    assert abs(fit.limit - 0.3) < 3.0 * fit.limit_stderr
    assert 0.0 < fit.rate < 1.0


def test_fit_constant_series_is_degenerate():
    t = np.arange(25, dtype=np.float64)
    fit = fit_exponential(np.column_stack([t, np.full(25, 0.7)]))
    assert fit.degenerate
    assert fit.limit == pytest.approx(0.7)
    assert fit.amplitude == 0.0
    assert fit.rate == 0.5
    assert np.all(fit.residuals == 0.0)


def test_fit_input_validation():
    with pytest.raises(ValueError):
        fit_exponential(synthetic_series(0.3, 0.5, 0.9, n=9))
    with pytest.raises(ValueError):
        fit_exponential(np.zeros((12, 3)))
    bad = synthetic_series(0.3, 0.5, 0.9, n=20)
    bad[5, 1] = np.nan
    with pytest.raises(FitDiverged):
        fit_exponential(bad)


def test_fit_residuals_definition():
    series = synthetic_series(0.1, -0.4, 0.95, noise=0.005, seed=9)
    fit = fit_exponential(series)
    t, v = series[:, 0], series[:, 1]
    reconstructed = fit.limit + fit.amplitude * fit.rate ** t
    assert np.allclose(fit.residuals, v - reconstructed)
    assert fit.residual_rms == pytest.approx(
        float(np.sqrt((fit.residuals ** 2).mean())))
