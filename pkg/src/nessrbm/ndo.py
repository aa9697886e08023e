"""Purified two-network RBM density operator.

Two real-parameter restricted Boltzmann machines share the visible
layer (the physical spins): an amplitude net and a phase net.  Tracing
out the hidden units of each and the shared ancillary units yields a
closed form for log rho(sigma, sigma'):

    log rho = Gamma+_amp + i Gamma-_ph + Pi

    Gamma+-_X = 1/2 ( sum_j [log G(y_j^X(s)) +- log G(y_j^X(s'))]
                      + sum_i b_i^X (s_i +- s'_i) )
    y_j^X(s) = sum_i W_ij^X s_i + c_j^X
    Pi       = sum_k log G(z_k)
    z_k      = 1/2 sum_l U_lk^amp (s_l + s'_l) + d_k
               + i/2 sum_l U_lk^ph (s_l - s'_l)
    G(z)     = 2 cosh z

The phase net carries no ancillary bias: it would cancel between
psi(s, a) and conj(psi(s', a)) and never reach rho.  The form is
Hermitian by construction and strictly positive on the diagonal.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import ConfigurationPair, spin_matrix

CHECKPOINT_MAGIC = b"NDOPARM1"
_HEADER = "<8sqqqqq"  # magic, n_sites, alpha, beta_anc, seed, iteration
_HEADER_BYTES = struct.calcsize(_HEADER)


def param_count(n_sites: int, alpha: int, beta_anc: int) -> int:
    """Total number of real parameters P."""
    m = alpha * n_sites
    k = beta_anc * n_sites
    return 2 * (n_sites + m + n_sites * m + n_sites * k) + k


def _layout(n: int, m: int, k: int) -> dict:
    sizes = (("b_amp", n), ("c_amp", m), ("w_amp", n * m), ("d_anc", k),
             ("u_amp", n * k), ("b_ph", n), ("c_ph", m), ("w_ph", n * m),
             ("u_ph", n * k))
    slices = {}
    start = 0
    for name, size in sizes:
        slices[name] = slice(start, start + size)
        start += size
    return slices


@dataclass
class NdoParameters:
    """All weights and biases of the two nets, real-valued.

    Flat ordering: b_amp, c_amp, w_amp (row-major by site), d_anc,
    u_amp, b_ph, c_ph, w_ph, u_ph.
    """

    n_sites: int
    alpha: int
    beta_anc: int
    b_amp: np.ndarray
    c_amp: np.ndarray
    w_amp: np.ndarray
    d_anc: np.ndarray
    u_amp: np.ndarray
    b_ph: np.ndarray
    c_ph: np.ndarray
    w_ph: np.ndarray
    u_ph: np.ndarray

    def __post_init__(self):
        n = self.n_sites
        if n < 1:
            raise ValueError("need at least one site")
        if self.alpha < 1 or self.beta_anc < 1:
            raise ValueError("hidden and ancillary densities must be positive integers")
        m, k = self.alpha * n, self.beta_anc * n
        expected = {"b_amp": (n,), "c_amp": (m,), "w_amp": (n, m), "d_anc": (k,),
                    "u_amp": (n, k), "b_ph": (n,), "c_ph": (m,), "w_ph": (n, m),
                    "u_ph": (n, k)}
        for name, shape in expected.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)

    @property
    def n_hidden(self) -> int:
        return self.alpha * self.n_sites

    @property
    def n_ancillary(self) -> int:
        return self.beta_anc * self.n_sites

    @property
    def size(self) -> int:
        return param_count(self.n_sites, self.alpha, self.beta_anc)


def flatten(params: NdoParameters) -> np.ndarray:
    return np.concatenate([
        params.b_amp, params.c_amp, params.w_amp.ravel(), params.d_anc,
        params.u_amp.ravel(), params.b_ph, params.c_ph, params.w_ph.ravel(),
        params.u_ph.ravel(),
    ])


def unflatten(flat: np.ndarray, n_sites: int, alpha: int, beta_anc: int) -> NdoParameters:
    flat = np.asarray(flat, dtype=np.float64)
    p = param_count(n_sites, alpha, beta_anc)
    if flat.shape != (p,):
        raise ValueError(f"expected a flat vector of length {p}, got shape {flat.shape}")
    n, m, k = n_sites, alpha * n_sites, beta_anc * n_sites
    sl = _layout(n, m, k)
    pick = lambda name: flat[sl[name]].copy()
    return NdoParameters(
        n_sites=n_sites, alpha=alpha, beta_anc=beta_anc,
        b_amp=pick("b_amp"), c_amp=pick("c_amp"),
        w_amp=pick("w_amp").reshape(n, m), d_anc=pick("d_anc"),
        u_amp=pick("u_amp").reshape(n, k), b_ph=pick("b_ph"),
        c_ph=pick("c_ph"), w_ph=pick("w_ph").reshape(n, m),
        u_ph=pick("u_ph").reshape(n, k))


def init_params(n_sites: int, alpha: int, beta_anc: int, seed,
                stddev: float = 0.1) -> NdoParameters:
    """Draw every parameter i.i.d. normal(0, stddev^2)."""
    if stddev <= 0:
        raise ValueError("stddev must be positive")
    rng = np.random.default_rng(seed)
    flat = rng.normal(0.0, stddev, param_count(n_sites, alpha, beta_anc))
    return unflatten(flat, n_sites, alpha, beta_anc)


# ---------------------------------------------------------------------------
# evaluation

def _log_2cosh_real(y: np.ndarray) -> np.ndarray:
    a = np.abs(y)
    return a + np.log1p(np.exp(-2.0 * a))


def _log_2cosh_complex(z: np.ndarray) -> np.ndarray:
    # principal branch, shifted by |Re z| so neither exponential overflows
    a = np.abs(z.real)
    return a + np.log(np.exp(z - a) + np.exp(-z - a))


def _ancillary_input(params: NdoParameters, s_row: np.ndarray, s_col: np.ndarray) -> np.ndarray:
    return (0.5 * ((s_row + s_col) @ params.u_amp) + params.d_anc
            + 0.5j * ((s_row - s_col) @ params.u_ph))


def _log_rho_from_spins(params: NdoParameters, s_row: np.ndarray, s_col: np.ndarray) -> np.ndarray:
    y_row = s_row @ params.w_amp + params.c_amp
    y_col = s_col @ params.w_amp + params.c_amp
    gamma_amp = 0.5 * (_log_2cosh_real(y_row).sum(axis=1)
                       + _log_2cosh_real(y_col).sum(axis=1)
                       + (s_row + s_col) @ params.b_amp)
    yp_row = s_row @ params.w_ph + params.c_ph
    yp_col = s_col @ params.w_ph + params.c_ph
    gamma_ph = 0.5 * (_log_2cosh_real(yp_row).sum(axis=1)
                      - _log_2cosh_real(yp_col).sum(axis=1)
                      + (s_row - s_col) @ params.b_ph)
    pi = _log_2cosh_complex(_ancillary_input(params, s_row, s_col)).sum(axis=1)
    return gamma_amp + 1j * gamma_ph + pi


def log_rho_many(params: NdoParameters, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """log rho for a batch of pairs given as basis-index arrays."""
    s_row = spin_matrix(rows, params.n_sites)
    s_col = spin_matrix(cols, params.n_sites)
    return _log_rho_from_spins(params, s_row, s_col)


def log_rho(params: NdoParameters, x: ConfigurationPair) -> complex:
    if x.n_sites != params.n_sites:
        raise ValueError("configuration length does not match the parameters")
    rows = np.array([x.row], dtype=np.int64)
    cols = np.array([x.col], dtype=np.int64)
    return complex(log_rho_many(params, rows, cols)[0])


def log_derivatives_many(params: NdoParameters, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """(batch, P) matrix of d log rho / d theta_k, complex-valued."""
    s_row = spin_matrix(rows, params.n_sites)
    s_col = spin_matrix(cols, params.n_sites)
    n, m, k = params.n_sites, params.n_hidden, params.n_ancillary
    batch = s_row.shape[0]
    sl = _layout(n, m, k)

    t_row = np.tanh(s_row @ params.w_amp + params.c_amp)
    t_col = np.tanh(s_col @ params.w_amp + params.c_amp)
    tp_row = np.tanh(s_row @ params.w_ph + params.c_ph)
    tp_col = np.tanh(s_col @ params.w_ph + params.c_ph)
    t_anc = np.tanh(_ancillary_input(params, s_row, s_col))

    out = np.empty((batch, params.size), dtype=np.complex128)
    out[:, sl["b_amp"]] = 0.5 * (s_row + s_col)
    out[:, sl["c_amp"]] = 0.5 * (t_row + t_col)
    out[:, sl["w_amp"]] = 0.5 * (s_row[:, :, None] * t_row[:, None, :]
                                 + s_col[:, :, None] * t_col[:, None, :]).reshape(batch, -1)
    out[:, sl["d_anc"]] = t_anc
    out[:, sl["u_amp"]] = ((0.5 * (s_row + s_col))[:, :, None]
                           * t_anc[:, None, :]).reshape(batch, -1)
    out[:, sl["b_ph"]] = 0.5j * (s_row - s_col)
    out[:, sl["c_ph"]] = 0.5j * (tp_row - tp_col)
    out[:, sl["w_ph"]] = 0.5j * (s_row[:, :, None] * tp_row[:, None, :]
                                 - s_col[:, :, None] * tp_col[:, None, :]).reshape(batch, -1)
    out[:, sl["u_ph"]] = (0.5j * (s_row - s_col)[:, :, None]
                          * t_anc[:, None, :]).reshape(batch, -1)
    return out


def log_derivatives(params: NdoParameters, x: ConfigurationPair) -> np.ndarray:
    if x.n_sites != params.n_sites:
        raise ValueError("configuration length does not match the parameters")
    rows = np.array([x.row], dtype=np.int64)
    cols = np.array([x.col], dtype=np.int64)
    return log_derivatives_many(params, rows, cols)[0]


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: NdoParameters, seed: int, iteration: int):
    """Binary dump: 8-byte magic, five little-endian int64 header fields
    (n_sites, alpha, beta_anc, seed, iteration), then P little-endian
    float64 parameters in flat order.  Round-trips bit-exactly.
    """
    header = struct.pack(_HEADER, CHECKPOINT_MAGIC, params.n_sites,
                         params.alpha, params.beta_anc, int(seed), int(iteration))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flatten(params).astype("<f8").tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint: (params, seed, iteration)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER_BYTES:
        raise ConfigError(f"checkpoint {path} is truncated")
    magic, n, alpha, beta_anc, seed, iteration = struct.unpack_from(_HEADER, blob)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a parameter checkpoint")
    flat = np.frombuffer(blob, dtype="<f8", offset=_HEADER_BYTES)
    if flat.size != param_count(n, alpha, beta_anc):
        raise ConfigError(f"checkpoint {path} holds {flat.size} parameters, "
                          f"expected {param_count(n, alpha, beta_anc)}")
    return unflatten(flat, n, alpha, beta_anc), seed, iteration
