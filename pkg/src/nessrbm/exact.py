"""Exact steady states, fidelities, and full-sum reference quantities.

The steady state is the nullspace of the generator over configuration
pairs.  Up to N = 6 the full 4^N pair space is diagonalized densely via
SVD; for N = 7 and 8 the solve is restricted to the delta_sz = 0 sector
(which contains every density operator the generator can hold fixed),
densely at N = 7 and through a sparse LU inverse iteration at N = 8
where the sector still has 12870 states but a dense factorization would
not fit in memory.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import ndo
from .errors import DegenerateNess, NonFiniteAmplitude, NotADensityMatrix, TooLarge, ZeroState
from .model import ConfigurationPair, LindbladMap, SparseOperator, pair_indices

NULLSPACE_TOL = 1e-8
MAX_ED_SITES = 8

_ed_cache: dict = {}


def _map_key(lmap: LindbladMap):
    return (lmap.n_sites, lmap.chain.coupling, lmap.chain.anisotropy,
            lmap.drive.gamma_plus, lmap.drive.gamma_minus)


def sector_zero_pairs(n_sites: int) -> np.ndarray:
    """Sorted pair indices (row << N | col) with equal magnetization."""
    states = np.arange(1 << n_sites, dtype=np.int64)
    pop = np.zeros_like(states)
    v = states.copy()
    while np.any(v):
        pop += v & 1
        v >>= 1
    pairs = []
    for m in range(n_sites + 1):
        block = states[pop == m]
        pairs.append(pair_indices(np.repeat(block, len(block)),
                                  np.tile(block, len(block)), n_sites))
    return np.sort(np.concatenate(pairs))


def _normalize_null_vector(vec: np.ndarray, dim: int) -> np.ndarray:
    rho = vec.reshape(dim, dim)
    tr = np.trace(rho)
    if abs(tr) < 1e-10 * np.linalg.norm(vec):
        # a traceless null vector cannot be a steady state
        raise DegenerateNess("nullspace vector has (numerically) vanishing trace")
    rho = rho / tr
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def _steady_state_dense(lmap: LindbladMap) -> np.ndarray:
    dim = 1 << lmap.n_sites
    dense = lmap.pair_matrix().toarray()
    _, svals, vh = np.linalg.svd(dense)
    if int((svals < NULLSPACE_TOL).sum()) > 1:
        raise DegenerateNess("generator nullspace has dimension > 1")
    return _normalize_null_vector(vh[-1].conj(), dim)


def _sector_matrix(lmap: LindbladMap, pairs: np.ndarray) -> sp.csr_matrix:
    indptr, cols, vals = lmap.rows_for(pairs)
    local = np.searchsorted(pairs, cols)
    if not np.array_equal(pairs[local], cols):
        raise AssertionError("generator row left the delta_sz = 0 sector")
    return sp.csr_matrix((vals, local, indptr), shape=(len(pairs), len(pairs)))


def _embed_sector_vector(vec: np.ndarray, pairs: np.ndarray, n_sites: int) -> np.ndarray:
    dim = 1 << n_sites
    full = np.zeros(dim * dim, dtype=np.complex128)
    full[pairs] = vec
    return _normalize_null_vector(full, dim)


def _steady_state_sector_dense(lmap: LindbladMap) -> np.ndarray:
    pairs = sector_zero_pairs(lmap.n_sites)
    block = _sector_matrix(lmap, pairs).toarray()
    _, svals, vh = np.linalg.svd(block)
    if int((svals < NULLSPACE_TOL).sum()) > 1:
        raise DegenerateNess("generator nullspace has dimension > 1")
    return _embed_sector_vector(vh[-1].conj(), pairs, lmap.n_sites)


def _steady_state_sector_sparse(lmap: LindbladMap) -> np.ndarray:
    """Two-vector inverse iteration on the sector block.

    The second vector only serves the degeneracy check: after the
    subspace collapses onto the slowest modes, a second eigenvalue of
    the projected 2x2 block below tolerance flags a multi-dimensional
    nullspace.
    """
    pairs = sector_zero_pairs(lmap.n_sites)
    block = _sector_matrix(lmap, pairs).tocsc()
    size = block.shape[0]
    shift = 1e-9
    lu = spla.splu(block - shift * sp.identity(size, dtype=np.complex128, format="csc"))
    rng = np.random.default_rng(1905)
    basis = rng.normal(size=(size, 2)) + 1j * rng.normal(size=(size, 2))
    for _ in range(6):
        basis = lu.solve(basis)
        basis, _ = np.linalg.qr(basis)
    small = basis.conj().T @ (block @ basis)
    evals, evecs = np.linalg.eig(small)
    order = np.argsort(np.abs(evals))
    if abs(evals[order[1]]) < NULLSPACE_TOL:
        raise DegenerateNess("generator nullspace has dimension > 1")
    null_vec = basis @ evecs[:, order[0]]
    for _ in range(2):  # polish the residual
        null_vec = lu.solve(null_vec)
        null_vec /= np.linalg.norm(null_vec)
    return _embed_sector_vector(null_vec, pairs, lmap.n_sites)


def steady_state_ed(lmap: LindbladMap) -> np.ndarray:
    """Exact steady state as a trace-one Hermitian 2^N x 2^N matrix."""
    n = lmap.n_sites
    if n > MAX_ED_SITES:
        raise TooLarge(f"exact diagonalization supports N <= {MAX_ED_SITES}, got {n}")
    key = _map_key(lmap)
    if key in _ed_cache:
        return _ed_cache[key]
    if n <= 6:
        rho = _steady_state_dense(lmap)
    elif n == 7:
        rho = _steady_state_sector_dense(lmap)
    else:
        rho = _steady_state_sector_sparse(lmap)
    _validate_density_matrix(rho, tol=1e-10, eig_floor=-1e-10)
    _ed_cache[key] = rho
    return rho


def _validate_density_matrix(rho: np.ndarray, tol: float, eig_floor: float):
    if not np.all(np.isfinite(rho)):
        raise NotADensityMatrix("non-finite entries")
    if np.max(np.abs(rho - rho.conj().T)) > tol:
        raise NotADensityMatrix(f"not Hermitian within {tol}")
    if abs(np.trace(rho) - 1.0) > tol:
        raise NotADensityMatrix(f"trace differs from 1 beyond {tol}")
    if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < eig_floor:
        raise NotADensityMatrix(f"negative eigenvalue below {eig_floor}")


def fidelity(rho: np.ndarray, rho_ref: np.ndarray) -> float:
    """Uhlmann fidelity Tr sqrt(sqrt(rho) rho_ref sqrt(rho)).

    Both inputs must be Hermitian with unit trace (1e-8 tolerance).
    Tiny negative eigenvalues from roundoff are clamped to zero and the
    result is clamped into [0, 1].
    """
    for m in (rho, rho_ref):
        if np.max(np.abs(m - m.conj().T)) > 1e-8:
            raise NotADensityMatrix("fidelity input is not Hermitian within 1e-8")
        if abs(np.trace(m) - 1.0) > 1e-8:
            raise NotADensityMatrix("fidelity input trace differs from 1 beyond 1e-8")
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    sqrt_rho = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.conj().T
    inner = sqrt_rho @ rho_ref @ sqrt_rho
    evals = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    value = float(np.sqrt(np.clip(evals, 0.0, None)).sum())
    return min(max(value, 0.0), 1.0)


def exact_expectation(rho: np.ndarray, obs: SparseOperator) -> complex:
    """Tr(O rho); real up to roundoff when O is Hermitian."""
    return complex(obs.matrix.multiply(rho.T).sum())


def exact_cost(lmap: LindbladMap, rho_of_pair) -> float:
    """||L rho||^2 / ||rho||^2 with both sums taken over all 4^N pairs.

    ``rho_of_pair`` maps a ConfigurationPair to a complex amplitude.
    """
    n = lmap.n_sites
    if n > 6:
        raise TooLarge("the full pair enumeration is limited to N <= 6")
    dim = 1 << n
    vec = np.empty(dim * dim, dtype=np.complex128)
    for r in range(dim):
        for c in range(dim):
            vec[(r << n) | c] = rho_of_pair(ConfigurationPair(n, r, c))
    norm2 = np.vdot(vec, vec).real
    if norm2 == 0.0:
        raise ZeroState("rho vanishes on every pair")
    image = lmap.pair_matrix() @ vec
    return float(np.vdot(image, image).real / norm2)


def materialize_density(params: ndo.NdoParameters, trace_normalize: bool = True) -> np.ndarray:
    """Evaluate the ansatz on every pair and assemble the dense matrix."""
    n = params.n_sites
    if n > MAX_ED_SITES:
        raise TooLarge(f"materializing the ansatz is limited to N <= {MAX_ED_SITES}")
    dim = 1 << n
    rows = np.repeat(np.arange(dim, dtype=np.int64), dim)
    cols = np.tile(np.arange(dim, dtype=np.int64), dim)
    logs = ndo.log_rho_many(params, rows, cols)
    if not np.all(np.isfinite(logs)):
        raise NonFiniteAmplitude("ansatz produced a non-finite log amplitude")
    rho = np.exp(logs - logs.real.max()).reshape(dim, dim)
    rho = 0.5 * (rho + rho.conj().T)
    if trace_normalize:
        rho = rho / np.trace(rho).real
    return rho


def state_fidelity(params: ndo.NdoParameters, rho_ref: np.ndarray) -> float:
    """Fidelity between the materialized ansatz state and a reference."""
    return fidelity(materialize_density(params), rho_ref)
