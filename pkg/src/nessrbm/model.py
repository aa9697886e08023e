"""Boundary-driven XXZ chains and their Lindblad superoperator.

Spin configurations of an N-site chain live in the S^z product basis and
are encoded as integers: site i (1-based) occupies bit i-1, a set bit
meaning spin up (+1).  A bra/ket configuration pair (sigma, sigma') is
encoded as ``(row << N) | col``, which coincides with the row-major
flattening of a density matrix indexed by these integers.

The Hamiltonian is the open-boundary XXZ exchange

    H = J sum_k [ sx_k sx_{k+1} + sy_k sy_{k+1} + Delta sz_k sz_{k+1} ]

and the dissipation consists of local raising/lowering jump operators
sqrt(gamma^+_i) s^+_i and sqrt(gamma^-_i) s^-_i.  The generator

    L rho = -i[H, rho] + sum_k ( L_k rho L_k^+ - {L_k^+ L_k, rho}/2 )

acts on configuration pairs; each of its rows has O(N) entries and rows
are materialized lazily.  hbar = 1 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import TooLarge

# Beyond ~20 sites the per-configuration diagonal tables (2^N floats)
# stop being a rounding error; the variational modules never need more.
MAX_SITES = 20


# ---------------------------------------------------------------------------
# configuration encoding


def spins_to_index(spins) -> int:
    """Encode a sequence of +-1 spins as a basis integer (site 1 = LSB)."""
    index = 0
    for i, s in enumerate(spins):
        if s == 1:
            index |= 1 << i
        elif s != -1:
            raise ValueError(f"spin values must be +-1, got {s!r}")
    return index


def index_to_spins(index: int, n_sites: int) -> np.ndarray:
    """Decode a basis integer into an array of +-1 spins."""
    bits = (index >> np.arange(n_sites)) & 1
    return (2 * bits - 1).astype(np.int8)


def spin_matrix(indices: np.ndarray, n_sites: int) -> np.ndarray:
    """Vectorized decode: (B,) integer array -> (B, N) float matrix of +-1."""
    idx = np.asarray(indices, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(n_sites)) & 1
    return 2.0 * bits - 1.0


@dataclass(frozen=True)
class ConfigurationPair:
    """A bra/ket pair (sigma, sigma') of basis configurations."""

    n_sites: int
    row: int
    col: int

    def __post_init__(self):
        dim = 1 << self.n_sites
        if not (0 <= self.row < dim and 0 <= self.col < dim):
            raise ValueError("configuration index out of range")

    @classmethod
    def from_spins(cls, row_spins, col_spins) -> "ConfigurationPair":
        if len(row_spins) != len(col_spins):
            raise ValueError("bra and ket must have the same length")
        return cls(len(row_spins), spins_to_index(row_spins), spins_to_index(col_spins))

    @property
    def row_spins(self) -> np.ndarray:
        return index_to_spins(self.row, self.n_sites)

    @property
    def col_spins(self) -> np.ndarray:
        return index_to_spins(self.col, self.n_sites)

    @property
    def pair_index(self) -> int:
        return (self.row << self.n_sites) | self.col


def pair_indices(rows, cols, n_sites: int) -> np.ndarray:
    """Combine row/col configuration integers into flat pair indices."""
    return (np.asarray(rows, dtype=np.int64) << n_sites) | np.asarray(cols, dtype=np.int64)


def split_pair_indices(pairs, n_sites: int):
    """Inverse of :func:`pair_indices`."""
    p = np.asarray(pairs, dtype=np.int64)
    return p >> n_sites, p & ((1 << n_sites) - 1)


def delta_sz(x: ConfigurationPair) -> int:
    """Total S^z imbalance sum_i sigma_i - sum_i sigma'_i of a pair.

    The generator never connects pairs with different imbalance, so the
    steady state lives entirely in the delta_sz = 0 sector.
    """
    return 2 * (bin(x.row).count("1") - bin(x.col).count("1"))


def delta_sz_many(pairs, n_sites: int) -> np.ndarray:
    rows, cols = split_pair_indices(pairs, n_sites)
    return 2 * (_popcount(rows) - _popcount(cols))


def _popcount(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    out = np.zeros_like(v)
    while np.any(v):
        out += v & 1
        v >>= 1
    return out


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class ChainSpec:
    """Coherent part of the model: N sites, exchange J, anisotropy Delta."""

    n_sites: int
    coupling: float = 1.0
    anisotropy: float = 1.0

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError("n_sites must be at least 1")
        if self.n_sites > MAX_SITES:
            raise TooLarge(f"n_sites = {self.n_sites} exceeds the supported maximum {MAX_SITES}")


@dataclass(frozen=True)
class DriveSpec:
    """Per-site raising (gamma_plus) and lowering (gamma_minus) rates."""

    gamma_plus: tuple
    gamma_minus: tuple

    def __post_init__(self):
        object.__setattr__(self, "gamma_plus", tuple(float(g) for g in self.gamma_plus))
        object.__setattr__(self, "gamma_minus", tuple(float(g) for g in self.gamma_minus))
        if len(self.gamma_plus) != len(self.gamma_minus):
            raise ValueError("rate lists must have equal length")
        if any(g < 0 for g in self.gamma_plus + self.gamma_minus):
            raise ValueError("rates must be non-negative")

    @property
    def n_sites(self) -> int:
        return len(self.gamma_plus)


def model_a(n_sites: int, gamma: float = 0.2, bias: float = 0.05,
            coupling: float = 0.105, anisotropy: float = 1.0):
    """Weakly biased chain: bulk rates gamma on every site, a raising
    surplus (1 + bias) * gamma on site 1 and the mirrored surplus on the
    lowering rate of site N."""
    if n_sites < 2:
        raise ValueError("the biased chain needs at least 2 sites")
    gp = [gamma] * n_sites
    gm = [gamma] * n_sites
    gp[0] = (1.0 + bias) * gamma
    # mirror symmetry: the rate of type a on site 1 equals type -a on site N
    gm[-1] = gp[0]
    gp[-1] = gm[0]
    return ChainSpec(n_sites, coupling, anisotropy), DriveSpec(tuple(gp), tuple(gm))


def model_b(n_sites: int, gamma: float = 0.2, coupling: float = 1.0,
            anisotropy: float = 1.0):
    """Extreme boundary drive: a single raising operator on site 1 and a
    single lowering operator on site N, both with rate gamma."""
    if n_sites < 2:
        raise ValueError("the boundary-driven chain needs at least 2 sites")
    gp = [0.0] * n_sites
    gm = [0.0] * n_sites
    gp[0] = gamma
    gm[-1] = gamma
    return ChainSpec(n_sites, coupling, anisotropy), DriveSpec(tuple(gp), tuple(gm))


# ---------------------------------------------------------------------------
# sparse operators on the 2^N spin basis


class SparseOperator:
    """CSR-backed operator on the 2**n_sites configuration basis."""

    def __init__(self, n_sites: int, matrix: sp.spmatrix):
        self.n_sites = n_sites
        m = sp.csr_matrix(matrix, dtype=np.complex128, copy=False)
        m.sum_duplicates()
        m.eliminate_zeros()
        if m.shape != (1 << n_sites, 1 << n_sites):
            raise ValueError("matrix shape does not match n_sites")
        self.matrix = m

    @classmethod
    def from_entries(cls, n_sites, rows, cols, values) -> "SparseOperator":
        dim = 1 << n_sites
        coo = sp.coo_matrix((values, (rows, cols)), shape=(dim, dim), dtype=np.complex128)
        return cls(n_sites, coo.tocsr())

    @property
    def dimension(self) -> int:
        return 1 << self.n_sites

    def row(self, i: int):
        """Nonzero entries of row i as (columns, amplitudes)."""
        lo, hi = self.matrix.indptr[i], self.matrix.indptr[i + 1]
        return self.matrix.indices[lo:hi], self.matrix.data[lo:hi]

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def adjoint(self) -> "SparseOperator":
        return SparseOperator(self.n_sites, self.matrix.conj().T.tocsr())


def _all_spin_columns(n_sites: int) -> np.ndarray:
    states = np.arange(1 << n_sites, dtype=np.int64)
    return spin_matrix(states, n_sites)


def build_hamiltonian(chain: ChainSpec) -> SparseOperator:
    """Open-boundary XXZ Hamiltonian in the S^z product basis.

    Diagonal entries are J * Delta * sum_k s_k s_{k+1}; every bond with
    antiparallel neighbours contributes an off-diagonal exchange 2J that
    swaps the two spins.
    """
    n = chain.n_sites
    j, delta = chain.coupling, chain.anisotropy
    states = np.arange(1 << n, dtype=np.int64)
    spins = _all_spin_columns(n)

    rows = [states]
    cols = [states]
    if n > 1:
        diag = j * delta * np.einsum("bk,bk->b", spins[:, :-1], spins[:, 1:])
    else:
        diag = np.zeros(len(states))
    vals = [diag.astype(np.complex128)]

    for k in range(n - 1):
        mask = spins[:, k] * spins[:, k + 1] < 0
        flip = states[mask] ^ ((1 << k) | (1 << (k + 1)))
        rows.append(flip)
        cols.append(states[mask])
        vals.append(np.full(mask.sum(), 2.0 * j, dtype=np.complex128))

    return SparseOperator.from_entries(n, np.concatenate(rows), np.concatenate(cols),
                                       np.concatenate(vals))


def build_jump_operators(drive: DriveSpec) -> list:
    """Jump operators sqrt(gamma^-_i) s^-_i and sqrt(gamma^+_i) s^+_i.

    Zero-rate operators are omitted, so the boundary-driven preset yields
    exactly two entries.
    """
    n = drive.n_sites
    states = np.arange(1 << n, dtype=np.int64)
    ops = []
    for i in range(n):
        bit = 1 << i
        up = (states & bit) != 0
        if drive.gamma_minus[i] > 0.0:
            src = states[up]
            ops.append(SparseOperator.from_entries(
                n, src ^ bit, src,
                np.full(len(src), np.sqrt(drive.gamma_minus[i]), dtype=np.complex128)))
        if drive.gamma_plus[i] > 0.0:
            src = states[~up]
            ops.append(SparseOperator.from_entries(
                n, src ^ bit, src,
                np.full(len(src), np.sqrt(drive.gamma_plus[i]), dtype=np.complex128)))
    return ops


# ---------------------------------------------------------------------------
# the Lindblad map on configuration pairs


class LindbladMap:
    """Action of the generator on configuration pairs, one row at a time.

    For a pair x = (sigma, sigma') the row {L_{x x'}} holds:

    * the diagonal entry -i (H_ss - H_s's') - (G_s + G_s') / 2 with
      G_s = sum_k (L_k^+ L_k)_ss,
    * one entry -2iJ per antiparallel bond of sigma (bra hop) and +2iJ
      per antiparallel bond of sigma' (ket hop),
    * one gain entry per site where both configurations point the same
      way: rate gamma^-_i maps (down,down) -> (up,up) read as
      "row (up,up) receives gamma^-_i times rho(down,down)", and
      gamma^+_i the reverse.

    All entries preserve delta_sz, so the map is block diagonal in the
    S^z imbalance.  Rows are built on demand and memoized.
    """

    def __init__(self, chain: ChainSpec, drive: DriveSpec):
        if drive.n_sites != chain.n_sites:
            raise ValueError("chain and drive disagree on n_sites")
        self.chain = chain
        self.drive = drive
        self.n_sites = chain.n_sites
        n = chain.n_sites

        spins = _all_spin_columns(n)
        if n > 1:
            self._h_diag = chain.coupling * chain.anisotropy * np.einsum(
                "bk,bk->b", spins[:, :-1], spins[:, 1:])
        else:
            self._h_diag = np.zeros(1 << n)
        # losses: gamma^- acts on up spins, gamma^+ on down spins
        bits = (spins + 1.0) / 2.0
        gm = np.asarray(drive.gamma_minus)
        gp = np.asarray(drive.gamma_plus)
        self._loss_diag = bits @ gm + (1.0 - bits) @ gp

        self._row_cache: dict = {}
        self._cache_cap = 1 << 21
        self._pair_matrix = None

    # -- vectorized row construction ----------------------------------

    def rows_for(self, pairs: np.ndarray):
        """Rows for a batch of pair indices.

        Returns (indptr, columns, values) in CSR layout: the row of
        ``pairs[i]`` occupies ``columns[indptr[i]:indptr[i+1]]``.
        """
        pairs = np.asarray(pairs, dtype=np.int64)
        n = self.n_sites
        rows, cols = split_pair_indices(pairs, n)
        b = len(pairs)
        n_bonds = n - 1
        slots = 1 + 2 * n_bonds + n

        col_buf = np.zeros((b, slots), dtype=np.int64)
        val_buf = np.zeros((b, slots), dtype=np.complex128)
        keep = np.zeros((b, slots), dtype=bool)

        # slot 0: the diagonal entry (dropped when it vanishes exactly)
        col_buf[:, 0] = pairs
        val_buf[:, 0] = (-1j * (self._h_diag[rows] - self._h_diag[cols])
                         - 0.5 * (self._loss_diag[rows] + self._loss_diag[cols]))
        keep[:, 0] = val_buf[:, 0] != 0

        two_j = 2.0 * self.chain.coupling
        for k in range(n_bonds):
            mask = (1 << k) | (1 << (k + 1))
            anti_r = ((rows >> k) & 1) != ((rows >> (k + 1)) & 1)
            anti_c = ((cols >> k) & 1) != ((cols >> (k + 1)) & 1)
            s = 1 + 2 * k
            col_buf[:, s] = ((rows ^ mask) << n) | cols
            val_buf[:, s] = -1j * two_j
            keep[:, s] = anti_r
            col_buf[:, s + 1] = (rows << n) | (cols ^ mask)
            val_buf[:, s + 1] = 1j * two_j
            keep[:, s + 1] = anti_c

        base = 1 + 2 * n_bonds
        for i in range(n):
            bit = 1 << i
            r_up = (rows & bit) != 0
            c_up = (cols & bit) != 0
            flipped = ((rows ^ bit) << n) | (cols ^ bit)
            s = base + i
            col_buf[:, s] = flipped
            # both down: the raised pair feeds this row through gamma^-;
            # both up: the lowered pair feeds it through gamma^+
            both_down = ~r_up & ~c_up
            both_up = r_up & c_up
            val_buf[both_down, s] = self.drive.gamma_minus[i]
            val_buf[both_up, s] = self.drive.gamma_plus[i]
            keep[:, s] = (both_down & (self.drive.gamma_minus[i] > 0.0)) | \
                         (both_up & (self.drive.gamma_plus[i] > 0.0))

        counts = keep.sum(axis=1)
        indptr = np.zeros(b + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return indptr, col_buf[keep], val_buf[keep]

    def row_arrays(self, pair_index: int):
        """Memoized single-row access: (columns, values) arrays."""
        cached = self._row_cache.get(pair_index)
        if cached is not None:
            return cached
        _, cols, vals = self.rows_for(np.array([pair_index], dtype=np.int64))
        if len(self._row_cache) >= self._cache_cap:
            self._row_cache.clear()
        entry = (cols, vals)
        self._row_cache[pair_index] = entry
        return entry


    def row(self, x: ConfigurationPair):
        """Row of the generator at pair x as [(pair, amplitude), ...]."""
        if x.n_sites != self.n_sites:
            raise ValueError("pair size does not match the map")
        cols, vals = self.row_arrays(x.pair_index)
        n = self.n_sites
        mask = (1 << n) - 1
        return [(ConfigurationPair(n, int(p) >> n, int(p) & mask), complex(v))
                for p, v in zip(cols, vals)]

    def pair_matrix(self) -> sp.csr_matrix:
        """Full sparse matrix over all 4^N pairs (cached; N <= 8 only)."""
        if self.n_sites > 8:
            raise TooLarge("the full pair-space matrix is only built for N <= 8")
        if self._pair_matrix is None:
            dim = 1 << (2 * self.n_sites)
            indptr, cols, vals = self.rows_for(np.arange(dim, dtype=np.int64))
            self._pair_matrix = sp.csr_matrix((vals, cols, indptr), shape=(dim, dim))
        return self._pair_matrix


def build_lindblad_map(chain: ChainSpec, drive: DriveSpec) -> LindbladMap:
    return LindbladMap(chain, drive)
