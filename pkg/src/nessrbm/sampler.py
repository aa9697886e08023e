"""Metropolis sampling of configuration pairs and diagonal configurations.

Pair chains move inside the delta_sz = 0 sector under a two-step
symmetric proposal and target the reweighted density |rho|^{2 beta_rw}.
Diagonal chains target p(sigma) = rho(sigma, sigma) / Z with ordinary
single-flip / pair-swap moves and no sector constraint.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import ndo
from .errors import ConfigError, NonFiniteAmplitude
from .model import ConfigurationPair, delta_sz_many, pair_indices

BATCH_MAGIC = b"NDOBATCH"


@dataclass(frozen=True)
class SamplerConfig:
    n_samples: int
    beta_rw: float = 0.15
    n_burn_in: int | None = None   # default 10 N^2, resolved at run time
    thinning: int | None = None    # default N
    n_chains: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta_rw <= 1.0:
            raise ValueError("beta_rw must lie in (0, 1]")
        if self.n_samples < 1:
            raise ValueError("need at least one sample")
        if self.n_chains < 1:
            raise ValueError("need at least one chain")
        if self.n_burn_in is not None and self.n_burn_in < 0:
            raise ValueError("burn-in cannot be negative")
        if self.thinning is not None and self.thinning < 1:
            raise ValueError("thinning stride must be at least 1")

    def resolved_burn_in(self, n_sites: int) -> int:
        return 10 * n_sites * n_sites if self.n_burn_in is None else self.n_burn_in

    def resolved_thinning(self, n_sites: int) -> int:
        return n_sites if self.thinning is None else self.thinning


@dataclass
class SampleBatch:
    """Recorded pair states with cached amplitudes and batch weights.

    ``weights`` hold |rho|^{2-2 beta_rw} up to one shared max-log shift;
    enumerated batches cover every pair exactly once and carry
    beta_rw = 0 so the same reweighting algebra makes them exact.
    """

    n_sites: int
    rows: np.ndarray
    cols: np.ndarray
    log_rho_values: np.ndarray
    weights: np.ndarray
    beta_rw: float
    enumerated: bool = False
    chain_ids: np.ndarray | None = None

    def __len__(self):
        return len(self.rows)

    @property
    def pairs(self):
        return [ConfigurationPair(self.n_sites, int(r), int(c))
                for r, c in zip(self.rows, self.cols)]


@dataclass
class DiagonalBatch:
    """Diagonal configurations for observable estimation.

    ``weights`` is None for Markov-chain samples (each config counts
    once) and holds exact probabilities p(sigma) for enumerated batches.
    """

    n_sites: int
    configs: np.ndarray
    log_diag: np.ndarray
    chain_ids: np.ndarray | None = None
    weights: np.ndarray | None = None
    enumerated: bool = False

    def __len__(self):
        return len(self.configs)


# ---------------------------------------------------------------------------
# proposals

def _site_pair_table(n_sites: int):
    i_idx, j_idx = np.triu_indices(n_sites, k=1)
    return i_idx.astype(np.int64), j_idx.astype(np.int64)


def _propose_many(rows, cols, n_sites, rng):
    """Vectorized two-step proposal; returns new (rows, cols) arrays."""
    rows = rows.copy()
    cols = cols.copy()
    count = len(rows)
    if n_sites >= 2:
        # step 1: swap one uniformly chosen unordered site pair on one side
        pi, pj = _site_pair_table(n_sites)
        side = rng.integers(0, 2, size=count)
        pick = rng.integers(0, len(pi), size=count)
        i, j = pi[pick], pj[pick]
        mask = (1 << i) | (1 << j)
        chosen = np.where(side == 0, rows, cols)
        differ = ((chosen >> i) & 1) != ((chosen >> j) & 1)
        toggles = np.where(differ, mask, 0)
        rows ^= np.where(side == 0, toggles, 0)
        cols ^= np.where(side == 1, toggles, 0)
    # step 2: correlated flip at an ordered index pair (k on the row
    # side, l on the column side, k = l allowed), only if the spins match
    k = rng.integers(0, n_sites, size=count)
    l = rng.integers(0, n_sites, size=count)
    equal = ((rows >> k) & 1) == ((cols >> l) & 1)
    rows ^= np.where(equal, np.int64(1) << k, 0)
    cols ^= np.where(equal, np.int64(1) << l, 0)
    return rows, cols


def propose(x: ConfigurationPair, rng) -> ConfigurationPair:
    """One symmetric sector-preserving move from x."""
    rows = np.array([x.row], dtype=np.int64)
    cols = np.array([x.col], dtype=np.int64)
    rows, cols = _propose_many(rows, cols, x.n_sites, rng)
    return ConfigurationPair(x.n_sites, int(rows[0]), int(cols[0]))


def accept(x: ConfigurationPair, x_new: ConfigurationPair,
           params: ndo.NdoParameters, beta_rw: float, rng) -> bool:
    """Metropolis rule for the target |rho|^{2 beta_rw}."""
    log_old = ndo.log_rho(params, x).real
    log_new = ndo.log_rho(params, x_new).real
    log_ratio = 2.0 * beta_rw * (log_new - log_old)
    if log_ratio >= 0.0:
        return True
    return np.log(1.0 - rng.random()) < log_ratio


def _check_finite(logs: np.ndarray):
    if not np.all(np.isfinite(logs.real)) or not np.all(np.isfinite(logs.imag)):
        raise NonFiniteAmplitude("log rho evaluated non-finite during sampling")


# ---------------------------------------------------------------------------
# chain drivers

def sample_pairs(params: ndo.NdoParameters, config: SamplerConfig) -> SampleBatch:
    """Run n_chains Metropolis chains over sector-0 pairs and collect a
    reweighted batch of n_samples states (chain-major order)."""
    n = params.n_sites
    rng = np.random.default_rng(config.seed)
    chains = config.n_chains
    burn_in = config.resolved_burn_in(n)
    stride = config.resolved_thinning(n)
    per_chain = -(-config.n_samples // chains)  # ceil

    diag = rng.integers(0, 1 << n, size=chains).astype(np.int64)
    rows, cols = diag.copy(), diag.copy()
    log_cur = ndo.log_rho_many(params, rows, cols).real
    _check_finite(log_cur)

    rec_rows, rec_cols = [], []
    total_steps = burn_in + stride * per_chain
    for step in range(1, total_steps + 1):
        cand_rows, cand_cols = _propose_many(rows, cols, n, rng)
        log_cand = ndo.log_rho_many(params, cand_rows, cand_cols).real
        _check_finite(log_cand)
        log_ratio = 2.0 * config.beta_rw * (log_cand - log_cur)
        u = 1.0 - rng.random(chains)
        moved = np.log(u) < log_ratio
        rows = np.where(moved, cand_rows, rows)
        cols = np.where(moved, cand_cols, cols)
        log_cur = np.where(moved, log_cand, log_cur)
        if __debug__:
            assert np.all(delta_sz_many(pair_indices(rows, cols, n), n) == 0)
        if step > burn_in and (step - burn_in) % stride == 0:
            rec_rows.append(rows.copy())
            rec_cols.append(cols.copy())

    # chain-major concatenation, trimmed to the requested size
    all_rows = np.stack(rec_rows, axis=1).reshape(-1)
    all_cols = np.stack(rec_cols, axis=1).reshape(-1)
    chain_ids = np.repeat(np.arange(chains), per_chain)
    all_rows = all_rows[:config.n_samples]
    all_cols = all_cols[:config.n_samples]
    chain_ids = chain_ids[:config.n_samples]

    logs = ndo.log_rho_many(params, all_rows, all_cols)
    _check_finite(logs)
    exponents = (2.0 - 2.0 * config.beta_rw) * logs.real
    weights = np.exp(exponents - exponents.max())
    return SampleBatch(n_sites=n, rows=all_rows, cols=all_cols,
                       log_rho_values=logs, weights=weights,
                       beta_rw=config.beta_rw, chain_ids=chain_ids)


def sample_diagonal(params: ndo.NdoParameters, config: SamplerConfig) -> DiagonalBatch:
    """Metropolis chains over diagonal configurations, stationary
    density proportional to rho(sigma, sigma)."""
    n = params.n_sites
    rng = np.random.default_rng(config.seed)
    chains = config.n_chains
    burn_in = config.resolved_burn_in(n)
    stride = config.resolved_thinning(n)
    per_chain = -(-config.n_samples // chains)

    state = rng.integers(0, 1 << n, size=chains).astype(np.int64)
    log_cur = ndo.log_rho_many(params, state, state).real
    _check_finite(log_cur)

    records = []
    total_steps = burn_in + stride * per_chain
    for step in range(1, total_steps + 1):
        cand = state.copy()
        use_swap = rng.random(chains) < 0.5
        if n >= 2:
            pi, pj = _site_pair_table(n)
            pick = rng.integers(0, len(pi), size=chains)
            i, j = pi[pick], pj[pick]
            differ = ((cand >> i) & 1) != ((cand >> j) & 1)
            swap_mask = np.where(use_swap & differ, (1 << i) | (1 << j), 0)
        else:
            swap_mask = np.zeros(chains, dtype=np.int64)
        flip_site = rng.integers(0, n, size=chains)
        flip_mask = np.where(~use_swap, np.int64(1) << flip_site, 0)
        cand ^= swap_mask | flip_mask

        log_cand = ndo.log_rho_many(params, cand, cand).real
        _check_finite(log_cand)
        u = 1.0 - rng.random(chains)
        moved = np.log(u) < (log_cand - log_cur)
        state = np.where(moved, cand, state)
        log_cur = np.where(moved, log_cand, log_cur)
        if step > burn_in and (step - burn_in) % stride == 0:
            records.append(state.copy())

    configs = np.stack(records, axis=1).reshape(-1)[:config.n_samples]
    chain_ids = np.repeat(np.arange(chains), per_chain)[:config.n_samples]
    log_diag = ndo.log_rho_many(params, configs, configs).real
    return DiagonalBatch(n_sites=n, configs=configs, log_diag=log_diag,
                         chain_ids=chain_ids)


# ---------------------------------------------------------------------------
# full enumerations (exact-sums mode)

def enumerate_pairs(params: ndo.NdoParameters) -> SampleBatch:
    """Every pair exactly once with weight |rho|^2 (max-log shifted).

    Setting beta_rw = 0 makes the estimator's reweighting algebra exact
    for this batch at any parameter point.
    """
    n = params.n_sites
    dim = 1 << n
    rows = np.repeat(np.arange(dim, dtype=np.int64), dim)
    cols = np.tile(np.arange(dim, dtype=np.int64), dim)
    logs = ndo.log_rho_many(params, rows, cols)
    _check_finite(logs)
    exponents = 2.0 * logs.real
    weights = np.exp(exponents - exponents.max())
    return SampleBatch(n_sites=n, rows=rows, cols=cols, log_rho_values=logs,
                       weights=weights, beta_rw=0.0, enumerated=True)


def enumerate_diagonal(params: ndo.NdoParameters) -> DiagonalBatch:
    """Every diagonal configuration once, with exact probabilities."""
    n = params.n_sites
    configs = np.arange(1 << n, dtype=np.int64)
    log_diag = ndo.log_rho_many(params, configs, configs).real
    _check_finite(log_diag)
    probs = np.exp(log_diag - log_diag.max())
    probs /= probs.sum()
    return DiagonalBatch(n_sites=n, configs=configs, log_diag=log_diag,
                         weights=probs, enumerated=True)


# ---------------------------------------------------------------------------
# batch dump (debugging aid)
#
# layout: 8-byte magic, little-endian int64 (n_sites, n_samples,
# enumerated flag), float64 beta_rw, then n_samples each of rows int64,
# cols int64, Re log rho, Im log rho, weights (all little-endian).

def save_batch(path, batch: SampleBatch):
    header = struct.pack("<8sqqqd", BATCH_MAGIC, batch.n_sites, len(batch),
                         int(batch.enumerated), batch.beta_rw)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(batch.rows.astype("<i8").tobytes())
        fh.write(batch.cols.astype("<i8").tobytes())
        fh.write(batch.log_rho_values.real.astype("<f8").tobytes())
        fh.write(batch.log_rho_values.imag.astype("<f8").tobytes())
        fh.write(batch.weights.astype("<f8").tobytes())


def load_batch(path) -> SampleBatch:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<8sqqqd")
    if len(blob) < head:
        raise ConfigError(f"{path} is not a sample batch dump")
    magic, n_sites, count, enumerated, beta_rw = struct.unpack_from("<8sqqqd", blob)
    if magic != BATCH_MAGIC:
        raise ConfigError(f"{path} is not a sample batch dump")
    expected = head + count * 8 * 5
    if len(blob) != expected:
        raise ConfigError(f"batch dump {path} has wrong size")
    off = head
    fields = []
    for dtype in ("<i8", "<i8", "<f8", "<f8", "<f8"):
        fields.append(np.frombuffer(blob, dtype=dtype, count=count, offset=off).copy())
        off += count * 8
    rows, cols, log_re, log_im, weights = fields
    return SampleBatch(n_sites=int(n_sites), rows=rows, cols=cols,
                       log_rho_values=log_re + 1j * log_im, weights=weights,
                       beta_rw=float(beta_rw), enumerated=bool(enumerated))
