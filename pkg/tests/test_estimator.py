"""Estimator identities against the exact module and finite differences."""

import numpy as np
import pytest

import oracles
from nessrbm import estimator, exact, ndo, sampler
from nessrbm.errors import ZeroWeightSum
from nessrbm.model import ChainSpec, ConfigurationPair, DriveSpec, LindbladMap, model_b


def make_map(n):
    chain, drive = model_b(n)
    return LindbladMap(chain, drive)


def test_local_cost_decay_example():
    # N=1 decay model: the (up,up) row holds only its loss diagonal -1,
    # so the local cost is 1 for any state with nonzero (up,up) weight
    lmap = LindbladMap(ChainSpec(1), DriveSpec(gamma_plus=(0.0,), gamma_minus=(1.0,)))
    params = ndo.unflatten(np.zeros(ndo.param_count(1, 1, 1)), 1, 1, 1)
    assert estimator.local_cost(params, lmap, ConfigurationPair(1, 1, 1)) == pytest.approx(1.0)


def test_local_costs_match_scalar_path():
    n = 3
    lmap = make_map(n)
    params = ndo.init_params(n, 1, 1, seed=3, stddev=0.3)
    rng = np.random.default_rng(0)
    rows = rng.integers(0, 8, size=20).astype(np.int64)
    cols = rng.integers(0, 8, size=20).astype(np.int64)
    many = estimator.local_costs(params, lmap, rows, cols)
    for r, c, val in zip(rows, cols, many):
        scalar = estimator.local_cost(params, lmap, ConfigurationPair(n, int(r), int(c)))
        assert val == pytest.approx(scalar, rel=1e-12)


def test_full_enumeration_cost_equals_exact_cost():
    n = 4
    lmap = make_map(n)
    for seed in range(3):
        params = ndo.init_params(n, 1, 1, seed=seed, stddev=0.2)
        batch = sampler.enumerate_pairs(params)
        from_batch = estimator.estimate_cost(params, lmap, batch)
        table = ndo.log_rho_many(params, batch.rows, batch.cols)
        shift = table.real.max()
        dense = np.exp(table - shift).reshape(1 << n, 1 << n)
        reference = exact.exact_cost(lmap, lambda x: dense[x.row, x.col])
        assert abs(from_batch - reference) < 1e-12 * max(1.0, reference)


def test_reweighting_invariance_under_full_sums():
    # sampling density q ~ |rho|^(2 beta) times batch weight
    # w = |rho|^(2-2 beta) must reproduce the beta-independent average
    n = 4
    lmap = make_map(n)
    params = ndo.init_params(n, 1, 1, seed=5, stddev=0.2)
    dim = 1 << n
    rows = np.repeat(np.arange(dim, dtype=np.int64), dim)
    cols = np.tile(np.arange(dim, dtype=np.int64), dim)
    logs = ndo.log_rho_many(params, rows, cols).real
    costs = estimator.local_costs(params, lmap, rows, cols)
    values = []
    for beta in (0.15, 0.5, 1.0):
        q = np.exp(2 * beta * (logs - logs.max()))
        w = np.exp((2 - 2 * beta) * (logs - logs.max()))
        values.append(float((q * w * costs).sum() / (q * w).sum()))
    assert abs(values[0] - values[1]) < 1e-12 * max(1.0, abs(values[0]))
    assert abs(values[0] - values[2]) < 1e-12 * max(1.0, abs(values[0]))


def test_beta_one_reduces_to_plain_mean():
    n = 3
    lmap = make_map(n)
    params = ndo.init_params(n, 1, 1, seed=9, stddev=0.3)
    cfg = sampler.SamplerConfig(n_samples=200, beta_rw=1.0, seed=4)
    batch = sampler.sample_pairs(params, cfg)
    assert np.allclose(batch.weights, 1.0)
    est = estimator.estimate_cost(params, lmap, batch)
    plain = estimator.local_costs(params, lmap, batch.rows, batch.cols).mean()
    assert est == pytest.approx(plain, rel=1e-12)


def test_enumerated_gradient_equals_exact_gradient():
    n = 4
    lmap = make_map(n)
    params = ndo.init_params(n, 1, 1, seed=7, stddev=0.2)
    batch = sampler.enumerate_pairs(params)
    from_batch = estimator.estimate_gradient(params, lmap, batch)
    direct = estimator.exact_gradient(params, lmap)
    assert from_batch.cost == pytest.approx(direct.cost, rel=1e-12)
    scale = max(1.0, np.abs(direct.grad).max())
    assert np.abs(from_batch.grad - direct.grad).max() < 1e-12 * scale


@pytest.mark.parametrize("seed", [0, 1])
def test_exact_gradient_matches_finite_differences(seed):
    n, alpha, beta_anc = 3, 1, 1
    lmap = make_map(n)
    params = ndo.init_params(n, alpha, beta_anc, seed=seed, stddev=0.2)
    flat0 = ndo.flatten(params)
    dim = 1 << n
    rows = np.repeat(np.arange(dim, dtype=np.int64), dim)
    cols = np.tile(np.arange(dim, dtype=np.int64), dim)

    def cost_of(flat):
        p = ndo.unflatten(flat, n, alpha, beta_anc)
        table = ndo.log_rho_many(p, rows, cols)
        dense = np.exp(table - table.real.max()).reshape(dim, dim)
        return exact.exact_cost(lmap, lambda x: dense[x.row, x.col])

    grad = estimator.exact_gradient(params, lmap).grad
    numeric = oracles.finite_difference(cost_of, flat0, h=1e-6)
    scale = max(1.0, np.abs(grad).max())
    assert np.abs(grad - numeric).max() < 1e-5 * scale


def sector_enumeration(params, n):
    """Enumerated batch restricted to the delta-Sz = 0 sector.

    This is the population the pair sampler actually draws from, so it is
    the right reference for the MC estimator's mean.
    """
    from nessrbm.model import delta_sz_many, pair_indices

    full = sampler.enumerate_pairs(params)
    keep = delta_sz_many(pair_indices(full.rows, full.cols, n), n) == 0
    return sampler.SampleBatch(
        n_sites=n,
        rows=full.rows[keep],
        cols=full.cols[keep],
        log_rho_values=full.log_rho_values[keep],
        weights=full.weights[keep],
        beta_rw=0.0,
        enumerated=True,
    )


def test_gradient_estimator_is_unbiased():
    n = 4
    lmap = make_map(n)
    params = ndo.init_params(n, 1, 1, seed=11, stddev=0.2)
    truth = estimator.estimate_gradient(
        params, lmap, sector_enumeration(params, n)).grad
    draws = []
    for k in range(200):
        cfg = sampler.SamplerConfig(n_samples=400, thinning=4, n_chains=8,
                                    seed=1000 + k)
        batch = sampler.sample_pairs(params, cfg)
        draws.append(estimator.estimate_gradient(params, lmap, batch).grad)
    draws = np.array(draws)
    mean = draws.mean(axis=0)
    stderr = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    # guard against zero-variance components
    stderr = np.maximum(stderr, 1e-12)
    assert np.all(np.abs(mean - truth) < 3.0 * stderr + 1e-12)


def test_estimate_cost_nonnegative_and_self_consistent():
    n = 3
    lmap = make_map(n)
    params = ndo.init_params(n, 1, 1, seed=15, stddev=0.3)
    cfg = sampler.SamplerConfig(n_samples=300, seed=2)
    batch = sampler.sample_pairs(params, cfg)
    cost = estimator.estimate_cost(params, lmap, batch)
    est = estimator.estimate_gradient(params, lmap, batch)
    assert cost >= 0.0
    assert est.cost == pytest.approx(cost, rel=1e-12)
    assert est.variance_of_cost >= 0.0
    assert 0 < est.n_effective <= len(batch)


def test_reevaluation_at_other_parameters_is_exact_for_enumeration():
    # frozen enumerated batch: estimates at any parameter point equal
    # the full-sum values there
    n = 3
    lmap = make_map(n)
    params = ndo.init_params(n, 1, 1, seed=19, stddev=0.2)
    batch = sampler.enumerate_pairs(params)
    other = ndo.init_params(n, 1, 1, seed=77, stddev=0.2)
    moved = estimator.estimate_cost(other, lmap, batch)
    direct = estimator.exact_gradient(other, lmap)
    assert moved == pytest.approx(direct.cost, rel=1e-12)
    est = estimator.estimate_gradient(other, lmap, batch)
    scale = max(1.0, np.abs(direct.grad).max())
    assert np.abs(est.grad - direct.grad).max() < 1e-12 * scale


def test_s_matrix_properties():
    n = 3
    params = ndo.init_params(n, 1, 1, seed=23, stddev=0.3)
    cfg = sampler.SamplerConfig(n_samples=250, seed=6)
    batch = sampler.sample_pairs(params, cfg)
    s = estimator.estimate_s_matrix(params, batch)
    p = params.size
    assert s.shape == (p, p)
    assert np.max(np.abs(s - s.conj().T)) < 1e-10
    assert np.all(s.diagonal().real > -1e-12)
    assert np.max(np.abs(s.diagonal().imag)) < 1e-12

    # diagonal equals the weighted population variance of each D_k
    derivs = ndo.log_derivatives_many(params, batch.rows, batch.cols)
    w = batch.weights / batch.weights.sum()
    mean = w @ derivs
    var = w @ (np.abs(derivs - mean) ** 2)
    assert np.allclose(s.diagonal().real, var, rtol=1e-10, atol=1e-12)


def test_s_matrix_zero_for_constant_derivatives():
    n = 2
    params = ndo.init_params(n, 1, 1, seed=1)
    rows = np.full(10, 2, dtype=np.int64)
    cols = np.full(10, 1, dtype=np.int64)
    logs = ndo.log_rho_many(params, rows, cols)
    batch = sampler.SampleBatch(n_sites=n, rows=rows, cols=cols,
                                log_rho_values=logs,
                                weights=np.ones(10), beta_rw=1.0)
    s = estimator.estimate_s_matrix(params, batch)
    assert np.max(np.abs(s)) < 1e-14


def test_empty_batch_raises():
    n = 2
    lmap = make_map(n)
    params = ndo.init_params(n, 1, 1, seed=1)
    empty = sampler.SampleBatch(n_sites=n, rows=np.array([], dtype=np.int64),
                                cols=np.array([], dtype=np.int64),
                                log_rho_values=np.array([], dtype=complex),
                                weights=np.array([]), beta_rw=0.15)
    with pytest.raises(ZeroWeightSum):
        estimator.estimate_cost(params, lmap, empty)
    with pytest.raises(ZeroWeightSum):
        estimator.estimate_gradient(params, lmap, empty)
    with pytest.raises(ZeroWeightSum):
        estimator.estimate_s_matrix(params, empty)
