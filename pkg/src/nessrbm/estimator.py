"""Cost, gradient, and covariance estimators.

Monte-Carlo estimates reweight a frozen batch, so every quantity can be
re-evaluated at parameter points other than the one the batch was drawn
at (the backtracking line search depends on this).  With a batch drawn
from |rho_s|^{2 beta} the importance weight at theta is

    w(x) = exp(2 Re log rho_theta(x) - 2 beta Re log rho_s(x) - shift)

which reduces to the stored |rho|^{2-2 beta} weights at theta = theta_s
and, for enumerated batches (beta = 0, every pair once), makes all
estimates exact at every theta.

To keep products like w * |L_loc|^2 finite when w underflows, sums are
accumulated over the scaled local values a = sqrt(w) * L_loc, whose
exponents stay bounded for enumerated batches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndo
from .errors import NonFiniteAmplitude, ZeroWeightSum
from .model import ConfigurationPair, LindbladMap, pair_indices, split_pair_indices
from .sampler import SampleBatch

log = logging.getLogger("nessrbm.estimator")

DERIVATIVE_CHUNK = 8192


@dataclass
class GradientEstimate:
    cost: float
    grad: np.ndarray
    variance_of_cost: float
    n_effective: float


def _require_finite(arr, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteAmplitude(f"{what} evaluated non-finite")


def _weight_exponents(params: ndo.NdoParameters, batch: SampleBatch):
    """(log rho at params, weight exponents before the shared shift)."""
    logs = ndo.log_rho_many(params, batch.rows, batch.cols)
    _require_finite(logs, "log rho")
    expo = 2.0 * logs.real - 2.0 * batch.beta_rw * batch.log_rho_values.real
    return logs, expo


def _complex_bincount(ids, weights, size):
    re = np.bincount(ids, weights=weights.real, minlength=size)
    im = np.bincount(ids, weights=weights.imag, minlength=size)
    return re + 1j * im


def _scaled_local_values(params, lmap, n_sites, rows, cols, logs, expo, shift):
    """a_s = sqrt(w_s) L_loc(x_s) plus the per-entry coefficients
    coeff_e = L_{x_s x'} exp(log rho(x') - log rho(x_s) + (expo_s - shift)/2)
    needed again for the gradient contraction."""
    pairs = pair_indices(rows, cols, n_sites)
    indptr, col_pairs, values = lmap.rows_for(pairs)
    seg = np.repeat(np.arange(len(pairs)), np.diff(indptr))
    uniq, inv = np.unique(col_pairs, return_inverse=True)
    ur, uc = split_pair_indices(uniq, n_sites)
    log_conn = ndo.log_rho_many(params, ur, uc)
    _require_finite(log_conn, "log rho")
    with np.errstate(over="ignore", under="ignore"):
        coeff = values * np.exp(log_conn[inv] - logs[seg]
                                + 0.5 * (expo[seg] - shift))
    scaled = _complex_bincount(seg, coeff, len(pairs))
    return scaled, coeff, seg, uniq, inv


def local_costs(params: ndo.NdoParameters, lmap: LindbladMap,
                rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Per-pair local cost |L_loc(x)|^2, vectorized over a pair list."""
    logs = ndo.log_rho_many(params, rows, cols)
    _require_finite(logs, "log rho")
    zeros = np.zeros(len(rows))
    scaled, *_ = _scaled_local_values(params, lmap, params.n_sites,
                                      rows, cols, logs, zeros, 0.0)
    return np.abs(scaled) ** 2


def local_cost(params: ndo.NdoParameters, lmap: LindbladMap,
               x: ConfigurationPair) -> float:
    """|sum_x' L_xx' rho(x')/rho(x)|^2 with the row sum exact."""
    log_x = ndo.log_rho(params, x)
    _require_finite(np.array([log_x]), "log rho")
    total = 0.0 + 0.0j
    for x_conn, value in lmap.row(x):
        total += value * np.exp(ndo.log_rho(params, x_conn) - log_x)
    _require_finite(np.array([total]), "local cost")
    return float(abs(total) ** 2)


def estimate_cost(params: ndo.NdoParameters, lmap: LindbladMap,
                  batch: SampleBatch) -> float:
    """Weighted mean of the local cost over the batch."""
    if len(batch) == 0:
        raise ZeroWeightSum("empty batch")
    logs, expo = _weight_exponents(params, batch)
    shift = expo.max()
    weights = np.exp(expo - shift)
    weight_sum = weights.sum()
    if weight_sum <= 0.0 or not np.isfinite(weight_sum):
        raise ZeroWeightSum("batch weights sum to zero")
    scaled, *_ = _scaled_local_values(params, lmap, batch.n_sites,
                                      batch.rows, batch.cols, logs, expo, shift)
    return float((np.abs(scaled) ** 2).sum() / weight_sum)


def _effective_samples(weights: np.ndarray) -> float:
    return float(weights.sum() ** 2 / (weights ** 2).sum())


def estimate_gradient(params: ndo.NdoParameters, lmap: LindbladMap,
                      batch: SampleBatch) -> GradientEstimate:
    """Cost, gradient, cost variance, and effective sample size from one
    batch.  grad_k = 2 Re[<w L*_loc Lam_k>/<w> - C <w D_k>/<w>]."""
    if len(batch) == 0:
        raise ZeroWeightSum("empty batch")
    logs, expo = _weight_exponents(params, batch)
    shift = expo.max()
    weights = np.exp(expo - shift)
    weight_sum = weights.sum()
    if weight_sum <= 0.0 or not np.isfinite(weight_sum):
        raise ZeroWeightSum("batch weights sum to zero")

    scaled, coeff, seg, conn_pairs, conn_inv = _scaled_local_values(
        params, lmap, batch.n_sites, batch.rows, batch.cols, logs, expo, shift)
    cost = float((np.abs(scaled) ** 2).sum() / weight_sum)

    # accumulate per-pair coefficients so every derivative row is needed
    # exactly once, then contract in chunks:
    #   term1_k = sum_e conj(a[seg_e]) coeff_e D_k(conn_e)
    #   term2_k = sum_s w_s D_k(x_s)
    sample_pairs_idx = pair_indices(batch.rows, batch.cols, batch.n_sites)
    all_pairs = np.concatenate([conn_pairs, sample_pairs_idx])
    uniq, inv = np.unique(all_pairs, return_inverse=True)
    conn_u = inv[:len(conn_pairs)]
    samp_u = inv[len(conn_pairs):]
    gamma = _complex_bincount(conn_u[conn_inv], np.conj(scaled)[seg] * coeff, len(uniq))
    delta = np.bincount(samp_u, weights=weights, minlength=len(uniq))

    term1 = np.zeros(params.size, dtype=np.complex128)
    term2 = np.zeros(params.size, dtype=np.complex128)
    ur, uc = split_pair_indices(uniq, batch.n_sites)
    for start in range(0, len(uniq), DERIVATIVE_CHUNK):
        stop = start + DERIVATIVE_CHUNK
        d_chunk = ndo.log_derivatives_many(params, ur[start:stop], uc[start:stop])
        term1 += gamma[start:stop] @ d_chunk
        term2 += delta[start:stop] @ d_chunk

    grad = 2.0 * np.real(term1 / weight_sum - cost * term2 / weight_sum)
    _require_finite(grad, "gradient")

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        local = np.abs(scaled) ** 2 / np.maximum(weights, 1e-300)
        dev = weights * (local - cost) ** 2
    dev = np.where(weights > 0.0, dev, 0.0)
    variance = float(dev.sum() / weight_sum)

    n_eff = _effective_samples(weights)
    if not batch.enumerated and n_eff < 0.1 * len(batch):
        log.warning("effective sample size %.1f is below 10%% of the batch (%d)",
                    n_eff, len(batch))
    return GradientEstimate(cost=cost, grad=grad,
                            variance_of_cost=variance, n_effective=n_eff)


def exact_gradient(params: ndo.NdoParameters, lmap: LindbladMap) -> GradientEstimate:
    """Full-sum cost and gradient over all 4^N pairs.

    Written against the assembled pair matrix rather than the batch
    machinery so the two paths check each other.  No amplitude ratios
    appear: with v = rho (max-shifted) and M the generator,

        C       = ||M v||^2 / ||v||^2
        term1_k = sum_x' (M^T u)_x' v_x' D_k(x'),  u = conj(M v) / ||v||^2
        term2_k = sum_x |v_x|^2 D_k(x) / ||v||^2
    """
    n = lmap.n_sites
    dim = 1 << n
    rows = np.repeat(np.arange(dim, dtype=np.int64), dim)
    cols = np.tile(np.arange(dim, dtype=np.int64), dim)
    logs = ndo.log_rho_many(params, rows, cols)
    _require_finite(logs, "log rho")
    vec = np.exp(logs - logs.real.max())
    norm2 = np.vdot(vec, vec).real
    matrix = lmap.pair_matrix()
    image = matrix @ vec
    cost = float(np.vdot(image, image).real / norm2)

    u = np.conj(image) / norm2
    front = (matrix.T @ u) * vec
    probs = (np.abs(vec) ** 2) / norm2

    term1 = np.zeros(params.size, dtype=np.complex128)
    term2 = np.zeros(params.size, dtype=np.complex128)
    for start in range(0, dim * dim, DERIVATIVE_CHUNK):
        stop = start + DERIVATIVE_CHUNK
        d_chunk = ndo.log_derivatives_many(params, rows[start:stop], cols[start:stop])
        term1 += front[start:stop] @ d_chunk
        term2 += probs[start:stop] @ d_chunk
    grad = 2.0 * np.real(term1 - cost * term2)
    _require_finite(grad, "gradient")

    q = np.abs(image) ** 2
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        variance = float((q / norm2 * (q / np.maximum(np.abs(vec) ** 2, 1e-300))).sum()
                         - cost ** 2)
    n_eff = _effective_samples(np.abs(vec) ** 2)
    return GradientEstimate(cost=cost, grad=grad,
                            variance_of_cost=variance, n_effective=n_eff)


def estimate_s_matrix(params: ndo.NdoParameters, batch: SampleBatch) -> np.ndarray:
    """Weighted covariance S_kk' = <w D*_k D_k'>/<w> - <w D*_k><w D_k'>/<w>^2."""
    if len(batch) == 0:
        raise ZeroWeightSum("empty batch")
    _, expo = _weight_exponents(params, batch)
    weights = np.exp(expo - expo.max())
    weight_sum = weights.sum()
    if weight_sum <= 0.0 or not np.isfinite(weight_sum):
        raise ZeroWeightSum("batch weights sum to zero")

    pairs = pair_indices(batch.rows, batch.cols, batch.n_sites)
    uniq, inv = np.unique(pairs, return_inverse=True)
    agg = np.bincount(inv, weights=weights, minlength=len(uniq))
    ur, uc = split_pair_indices(uniq, batch.n_sites)
    derivs = ndo.log_derivatives_many(params, ur, uc)
    second = (derivs.conj().T * agg) @ derivs / weight_sum
    mean = (agg @ derivs) / weight_sum
    return second - np.outer(np.conj(mean), mean)
