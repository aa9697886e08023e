"""Physical observables from diagonal samples and the exponential
extrapolation of observable convergence series."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import ndo
from .errors import FitDiverged
from .model import ChainSpec, SparseOperator
from .sampler import DiagonalBatch

logger = logging.getLogger("nessrbm.observables")

BLOCK_SAMPLES = 10  # recorded samples per block for the blocked standard error


@dataclass(frozen=True)
class ObservableEstimate:
    value: float
    std_error: float
    n_samples: int


@dataclass(frozen=True)
class FitResult:
    limit: float
    amplitude: float
    rate: float
    residual_rms: float
    limit_stderr: float
    degenerate: bool
    residuals: np.ndarray


# ---------------------------------------------------------------------------
# operators


def magnetization_op(n_sites: int, site: int) -> SparseOperator:
    """sigma^z on a single site, 1-based index."""
    if not 1 <= site <= n_sites:
        raise ValueError(f"site {site} outside 1..{n_sites}")
    states = np.arange(1 << n_sites, dtype=np.int64)
    values = 2.0 * ((states >> (site - 1)) & 1) - 1.0
    return SparseOperator.from_entries(n_sites, states, states, values)


def spin_current_op(chain: ChainSpec, j: int, k: int) -> SparseOperator:
    """Hermitian current operator i(sigma+_j sigma-_k - sigma-_j sigma+_k);
    the exchange coupling J is left out. Sites are 1-based."""
    n = chain.n_sites
    if not (1 <= j <= n and 1 <= k <= n):
        raise ValueError(f"sites ({j},{k}) outside 1..{n}")
    if j == k:
        raise ValueError("current needs two distinct sites")
    states = np.arange(1 << n, dtype=np.int64)
    bj, bk = np.int64(1) << (j - 1), np.int64(1) << (k - 1)

    # i sigma+_j sigma-_k: lowers site k, raises site j
    src = states[((states & bk) != 0) & ((states & bj) == 0)]
    rows = [src ^ bk ^ bj]
    cols = [src]
    vals = [np.full(len(src), 1j)]
    # -i sigma-_j sigma+_k
    src = states[((states & bj) != 0) & ((states & bk) == 0)]
    rows.append(src ^ bk ^ bj)
    cols.append(src)
    vals.append(np.full(len(src), -1j))
    return SparseOperator.from_entries(
        n, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def summed_bond_current_op(chain: ChainSpec) -> SparseOperator:
    """Average of the nearest-neighbour current operators."""
    n = chain.n_sites
    if n < 2:
        raise ValueError("need at least two sites for a bond current")
    total = sum(spin_current_op(chain, k, k + 1).matrix for k in range(1, n))
    return SparseOperator(n, total / (n - 1))


# ---------------------------------------------------------------------------
# estimation


def _concat_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of arange(start, start+count) blocks."""
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    block = np.repeat(np.arange(len(counts)), counts)
    offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return starts[block] + offsets


def local_observable_values(params, obs: SparseOperator,
                            configs: np.ndarray) -> np.ndarray:
    """Per-configuration inner sums sum_tau O[sigma,tau] rho(tau,sigma) /
    rho(sigma,sigma), evaluated exactly over the sparse rows."""
    configs = np.asarray(configs, dtype=np.int64)
    uniq, inv = np.unique(configs, return_inverse=True)
    indptr = obs.matrix.indptr
    counts = (indptr[uniq + 1] - indptr[uniq]).astype(np.int64)
    gather = _concat_ranges(indptr[uniq].astype(np.int64), counts)
    taus = obs.matrix.indices[gather].astype(np.int64)
    amps = obs.matrix.data[gather]
    seg = np.repeat(np.arange(len(uniq)), counts)

    # rho(tau, sigma): tau is the row index of the density amplitude
    log_num = ndo.log_rho_many(params, taus, uniq[seg])
    log_den = ndo.log_rho_many(params, uniq, uniq)
    ratio = np.exp(log_num - log_den[seg])

    term = amps * ratio
    per_uniq = np.zeros(len(uniq), dtype=np.complex128)
    np.add.at(per_uniq.real, seg, term.real)
    np.add.at(per_uniq.imag, seg, term.imag)
    return per_uniq[inv]


def _blocked_std_error(values: np.ndarray, chain_ids: np.ndarray | None) -> float:
    """Standard error from means of consecutive sample blocks per chain;
    plain i.i.d. error when there are not enough blocks."""
    if chain_ids is None:
        chain_ids = np.zeros(len(values), dtype=np.int64)
    block_means = []
    for chain in np.unique(chain_ids):
        series = values[chain_ids == chain]
        n_blocks = len(series) // BLOCK_SAMPLES
        for b in range(n_blocks):
            block_means.append(series[b * BLOCK_SAMPLES:(b + 1) * BLOCK_SAMPLES].mean())
    if len(block_means) >= 2:
        block_means = np.asarray(block_means)
        return float(block_means.std(ddof=1) / np.sqrt(len(block_means)))
    if len(values) >= 2:
        return float(values.std(ddof=1) / np.sqrt(len(values)))
    return 0.0


def estimate_observable(params, obs: SparseOperator,
                        batch: DiagonalBatch) -> ObservableEstimate:
    """Sample mean of the locally evaluated observable over diagonal
    configurations. The real part is the estimate; the imaginary residual
    is logged as a Hermiticity diagnostic."""
    if len(batch) == 0:
        raise ValueError("empty diagonal batch")
    local = local_observable_values(params, obs, batch.configs)
    if batch.weights is not None:
        wsum = batch.weights.sum()
        mean = complex((batch.weights * local).sum() / wsum)
    else:
        mean = complex(local.mean())
    logger.debug("imaginary residual of observable estimate: %.3e", abs(mean.imag))

    if batch.enumerated:
        std_error = 0.0
    elif batch.weights is not None:
        wsum = batch.weights.sum()
        var = float((batch.weights * np.abs(local - mean) ** 2).sum() / wsum)
        std_error = float(np.sqrt(var / len(batch)))
    else:
        std_error = _blocked_std_error(local.real, batch.chain_ids)
    return ObservableEstimate(value=float(mean.real), std_error=std_error,
                              n_samples=len(batch))


def mean_current(params, chain: ChainSpec, batch: DiagonalBatch) -> ObservableEstimate:
    """Bond-averaged spin current on one shared diagonal batch."""
    return estimate_observable(params, summed_bond_current_op(chain), batch)


# ---------------------------------------------------------------------------
# exponential extrapolation of convergence series


def _rate_grid() -> np.ndarray:
    low = np.geomspace(1e-3, 0.9, 20)
    high = 1.0 - np.geomspace(1e-4, 0.5, 20)
    return np.unique(np.clip(np.concatenate([low, high]), 1e-6, 1.0 - 1e-6))


def _linear_fit_at_rate(t, v, rate):
    """Best (limit, amplitude) for a fixed rate, plus the residual SS."""
    design = np.column_stack([np.ones_like(t), rate ** t])
    coef, *_ = np.linalg.lstsq(design, v, rcond=None)
    resid = design @ coef - v
    return coef, float(resid @ resid)


def fit_exponential(series) -> FitResult:
    """Least-squares fit of value(t) = limit + amplitude * rate**t.

    The rate is seeded on a log-spaced grid over (0,1) with the linear
    parameters solved exactly per seed; the best seed is refined by damped
    Gauss-Newton iterations.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("series must be (iteration, value) pairs")
    if len(arr) < 10:
        raise ValueError("need at least 10 points to extrapolate")
    t, v = arr[:, 0], arr[:, 1]

    if np.ptp(v) == 0.0:
        # constant series: the rate is unidentifiable
        return FitResult(limit=float(v[0]), amplitude=0.0, rate=0.5,
                         residual_rms=0.0, limit_stderr=0.0, degenerate=True,
                         residuals=np.zeros(len(v)))

    best = None
    with np.errstate(over="ignore", invalid="ignore"):
        for rate in _rate_grid():
            coef, ss = _linear_fit_at_rate(t, v, rate)
            if np.isfinite(ss) and np.all(np.isfinite(coef)):
                if best is None or ss < best[2]:
                    best = (coef, rate, ss)
    if best is None:
        raise FitDiverged("no rate seed produced a finite linear fit")

    (limit, amplitude), rate, ss = best
    params = np.array([limit, amplitude, rate])
    for _ in range(100):
        limit, amplitude, rate = params
        powers = rate ** t
        resid = limit + amplitude * powers - v
        jac = np.column_stack([np.ones_like(t), powers,
                               amplitude * t * rate ** (t - 1.0)])
        try:
            step, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        improved = False
        for _ in range(25):
            trial = params - step
            trial[2] = np.clip(trial[2], 1e-9, 1.0 - 1e-9)
            trial_resid = trial[0] + trial[1] * trial[2] ** t - v
            trial_ss = float(trial_resid @ trial_resid)
            if np.isfinite(trial_ss) and trial_ss <= ss:
                improved = trial_ss < ss * (1.0 - 1e-15)
                params, ss = trial, trial_ss
                break
            step = step / 2.0
        if not improved:
            break

    limit, amplitude, rate = params
    powers = rate ** t
    fit = limit + amplitude * powers
    residuals = v - fit
    ss = float(residuals @ residuals)
    jac = np.column_stack([np.ones_like(t), powers,
                           amplitude * t * rate ** (t - 1.0)])
    dof = len(v) - 3
    degenerate = False
    if dof > 0:
        sigma2 = ss / dof
        gram = jac.T @ jac
        if np.linalg.cond(gram) < 1e12:
            cov = np.linalg.inv(gram) * sigma2
            limit_stderr = float(np.sqrt(max(cov[0, 0], 0.0)))
        else:
            limit_stderr = float("inf")
            degenerate = True
    else:
        limit_stderr = float("inf")
        degenerate = True
    return FitResult(limit=float(limit), amplitude=float(amplitude),
                     rate=float(rate), residual_rms=float(np.sqrt(ss / len(v))),
                     limit_stderr=limit_stderr, degenerate=degenerate,
                     residuals=residuals)
