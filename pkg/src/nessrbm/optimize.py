"""Parameter updates: SGD, stochastic reconfiguration, and accelerated
backtracked descent with belief preconditioning, plus the MSE warm start
and additive noise injection."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from . import ndo
from .errors import BacktrackOverflow, SingularS

LIPSCHITZ_CEILING = 1e12
LIPSCHITZ_FLOOR = 1e-20


@dataclass
class OptimizerState:
    """Mutable bookkeeping carried across accelerated-descent iterations."""

    x: np.ndarray
    x_prev: np.ndarray
    lipschitz: float = 1.0
    m_ema: np.ndarray = None
    s_ema: np.ndarray = None
    iteration: int = 0
    gamma_mode: str = "fixed"   # "fixed" or "dynamic" t/(t+3)
    gamma: float = 0.9
    precondition: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.x_prev = np.asarray(self.x_prev, dtype=np.float64)
        if self.x.shape != self.x_prev.shape:
            raise ValueError("x and x_prev must have the same shape")
        if self.m_ema is None:
            self.m_ema = np.zeros_like(self.x)
        if self.s_ema is None:
            self.s_ema = np.zeros_like(self.x)
        if self.lipschitz <= 0:
            raise ValueError("lipschitz must be positive")
        if self.gamma_mode not in ("fixed", "dynamic"):
            raise ValueError(f"unknown gamma_mode {self.gamma_mode!r}")


@dataclass
class StepDiagnostics:
    cost_reference: float     # cost at the extrapolated point
    cost_accepted: float      # cost at the accepted candidate
    lipschitz_used: float     # the value that produced the accepted step
    n_backtracks: int
    step_norm: float
    gamma: float
    first_try: bool


def initial_state(x0, **kwargs) -> OptimizerState:
    x0 = np.asarray(x0, dtype=np.float64)
    return OptimizerState(x=x0.copy(), x_prev=x0.copy(), **kwargs)


def sgd_step(state: OptimizerState, grad: np.ndarray, eta: float) -> np.ndarray:
    if eta <= 0:
        raise ValueError("eta must be positive")
    return state.x - eta * np.asarray(grad, dtype=np.float64)


def sr_step(state: OptimizerState, grad: np.ndarray, s_matrix: np.ndarray,
            eta: float, diag_shift: float) -> np.ndarray:
    """Natural-gradient update through the parameter covariance matrix."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if diag_shift < 0:
        raise ValueError("diag_shift must be nonnegative")
    grad = np.asarray(grad, dtype=np.float64)
    system = np.real(np.asarray(s_matrix)).astype(np.float64, copy=True)
    if not np.all(np.isfinite(system)):
        raise SingularS("covariance matrix contains non-finite entries")
    system[np.diag_indices_from(system)] += diag_shift
    try:
        delta = sla.cho_solve(sla.cho_factor(system), grad)
    except (np.linalg.LinAlgError, sla.LinAlgError, ValueError):
        try:
            delta, *_ = np.linalg.lstsq(system, grad, rcond=None)
        except np.linalg.LinAlgError as err:
            raise SingularS("covariance system could not be solved") from err
    if not np.all(np.isfinite(delta)):
        raise SingularS("covariance solve produced non-finite update")
    return state.x - eta * delta


def _gamma_at(state: OptimizerState) -> float:
    if state.gamma_mode == "dynamic":
        return state.iteration / (state.iteration + 3.0)
    return state.gamma


def nagd_plus_step(state: OptimizerState, cost_fn, grad_fn):
    """One accelerated step with backtracked step size on a frozen batch.

    cost_fn and grad_fn must evaluate the same objective; candidates are
    tested against the local descent inequality
        f(x+) <= f(y) + <g, x+ - y> + (L/2) ||x+ - y||_D^2
    doubling L until it holds, where ||.||_D is the norm induced by the
    preconditioner (the metric the scaled step descends in; the identity
    when preconditioning is off). A first-try success halves L for the
    next iteration.
    """
    t = state.iteration
    gamma_t = _gamma_at(state)
    y = state.x + gamma_t * (state.x - state.x_prev)
    g = np.asarray(grad_fn(y), dtype=np.float64)

    m = state.beta1 * state.m_ema + (1.0 - state.beta1) * g
    s = state.beta2 * state.s_ema + (1.0 - state.beta2) * (g - m) ** 2
    if state.precondition:
        s_hat = s / (1.0 - state.beta2 ** (t + 1))
        metric = np.sqrt(s_hat) + state.eps
        direction = g / metric
    else:
        metric = None
        direction = g

    f_y = float(cost_fn(y))
    lip = state.lipschitz
    n_backtracks = 0
    while True:
        if lip > LIPSCHITZ_CEILING:
            raise BacktrackOverflow(
                f"no acceptable step below lipschitz {LIPSCHITZ_CEILING:g}; "
                "objective is likely non-finite or inconsistent")
        x_new = y - direction / lip
        delta = x_new - y
        quad = delta @ delta if metric is None else delta @ (metric * delta)
        bound = f_y + g @ delta + 0.5 * lip * quad
        # slack absorbs roundoff when the inequality is tight
        bound += 1e-12 * max(1.0, abs(f_y))
        f_new = float(cost_fn(x_new))
        if np.isfinite(f_new) and f_new <= bound:
            break
        lip *= 2.0
        n_backtracks += 1

    first_try = n_backtracks == 0
    next_lip = max(lip / 2.0, LIPSCHITZ_FLOOR) if first_try else lip
    new_state = replace(
        state,
        x=x_new,
        x_prev=state.x,
        lipschitz=next_lip,
        m_ema=m,
        s_ema=s,
        iteration=t + 1,
    )
    diag = StepDiagnostics(
        cost_reference=f_y,
        cost_accepted=f_new,
        lipschitz_used=lip,
        n_backtracks=n_backtracks,
        step_norm=float(np.linalg.norm(delta)),
        gamma=gamma_t,
        first_try=first_try,
    )
    return new_state, diag


def _mse_terms(params, rows, cols, target):
    logs = ndo.log_rho_many(params, rows, cols)
    # raw amplitudes: the loss is on the unnormalized state; overflowing
    # candidates produce an infinite loss and are rejected by backtracking
    with np.errstate(over="ignore"):
        rho = np.exp(logs)
    if target is None:
        t_vals = (rows == cols).astype(np.complex128)
    else:
        t_vals = np.asarray(target, dtype=np.complex128)[rows, cols]
    return rho, t_vals


def _mse_loss_and_grad(params, rows, cols, target, scale):
    rho, t_vals = _mse_terms(params, rows, cols, target)
    diff = rho - t_vals
    loss = float(np.real(np.vdot(diff, diff))) * scale
    derivs = ndo.log_derivatives_many(params, rows, cols)
    grad = 2.0 * scale * np.real((np.conj(diff) * rho) @ derivs)
    return loss, grad


def _mse_loss(params, rows, cols, target, scale):
    rho, t_vals = _mse_terms(params, rows, cols, target)
    diff = rho - t_vals
    return float(np.real(np.vdot(diff, diff))) * scale


def mse_pretrain(params, n_steps: int = 10, target: np.ndarray | None = None,
                 subsample_size: int | None = None, seed: int = 0):
    """Warm start: backtracked descent on the squared distance between the
    unnormalized density amplitudes and a target matrix (identity when
    target is None). Full pair enumeration up to 6 sites, uniform random
    pair subsets beyond that."""
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if n_steps == 0:
        return params
    n = params.n_sites
    dim = 1 << n
    rng = np.random.default_rng(seed)
    full_enum = n <= 6
    if full_enum:
        pairs = np.arange(dim * dim, dtype=np.int64)
        rows = pairs // dim
        cols = pairs % dim
        scale = 1.0 / (dim * dim)
    elif subsample_size is None:
        subsample_size = 4096

    x = ndo.flatten(params)
    lip = 1.0
    for _ in range(n_steps):
        if not full_enum:
            rows = rng.integers(0, dim, size=subsample_size, dtype=np.int64)
            cols = rng.integers(0, dim, size=subsample_size, dtype=np.int64)
            scale = 1.0 / subsample_size
        current = ndo.unflatten(x, n, params.alpha, params.beta_anc)
        loss, grad = _mse_loss_and_grad(current, rows, cols, target, scale)
        n_backtracks = 0
        while True:
            if lip > LIPSCHITZ_CEILING:
                raise BacktrackOverflow("warm-start step size collapsed")
            x_new = x - grad / lip
            candidate = ndo.unflatten(x_new, n, params.alpha, params.beta_anc)
            loss_new = _mse_loss(candidate, rows, cols, target, scale)
            if np.isfinite(loss_new) and loss_new <= loss + 1e-12 * max(1.0, loss):
                break
            lip *= 2.0
            n_backtracks += 1
        if n_backtracks == 0:
            lip = max(lip / 2.0, LIPSCHITZ_FLOOR)
        x = x_new
    return ndo.unflatten(x, n, params.alpha, params.beta_anc)


def inject_noise(params, scale: float, rng: np.random.Generator):
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    if scale == 0:
        return params
    flat = ndo.flatten(params)
    flat += rng.normal(0.0, scale, size=flat.shape)
    return ndo.unflatten(flat, params.n_sites, params.alpha, params.beta_anc)


def noise_trigger(cost_window, best_cost, rel_tol: float = 1e-4,
                  factor: float = 10.0) -> bool:
    """True when the cost has stagnated over the window while sitting far
    above the best value ever seen."""
    window = np.asarray(cost_window, dtype=np.float64)
    if window.size < 2:
        return False
    spread = window.max() - window.min()
    level = max(abs(window.max()), 1e-300)
    current = window[-1]
    return bool(spread / level < rel_tol and current > factor * best_cost)
