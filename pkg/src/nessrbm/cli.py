"""Run harness: configuration files, the optimization loop with logging
and checkpoints, the exact-oracle command, and run comparison."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import estimator, exact, ndo, observables, optimize, sampler
from .errors import ConfigError, IncompatibleRuns, NessRbmError
from .model import ChainSpec, DriveSpec, LindbladMap, model_a, model_b
from .optimize import OptimizerState

logger = logging.getLogger("nessrbm.cli")

FIDELITY_MAX_SITES = 7   # fidelity needs the materialized 4^N state
ORACLE_MAX_SITES = 8
EXACT_SUMS_MAX_SITES = 6

# tags for per-purpose random streams derived from (seed, iteration, tag)
_STREAM_INIT = 1
_STREAM_PRETRAIN = 2
_STREAM_PAIRS = 3
_STREAM_DIAGONAL = 4
_STREAM_NOISE = 5
_STREAM_FINAL = 6

CHECKPOINT_FILE = "checkpoint.bin"
OPTIMIZER_FILE = "optimizer_state.npz"
PROGRESS_FILE = "progress.csv"
OBSERVABLES_FILE = "observables.csv"
FINAL_FILE = "final.json"
ED_FILE = "ed_reference.json"
CONFIG_FILE = "config.txt"

PROGRESS_HEADER = "iteration,cost,lipschitz,step_norm,n_effective,wall_time"


@dataclass
class RunConfig:
    """Flat run description; every field has a serializable value."""

    model: str = "a"                # a | b | custom
    n_sites: int = 6
    coupling: float | None = None   # None: preset default
    anisotropy: float | None = None
    gamma: float = 0.2
    bias: float = 0.05              # drive asymmetry, preset a only
    gamma_plus: tuple | None = None   # custom preset: per-site raising rates
    gamma_minus: tuple | None = None
    alpha: int = 1
    beta_anc: int = 1
    init_stddev: float = 0.1
    pretrain_steps: int = 10
    optimizer: str = "nagd"         # sgd | sr | nagd
    eta: float = 0.05
    diag_shift: float = 0.1
    momentum: float = 0.9
    gamma_mode: str = "fixed"       # fixed | dynamic
    precondition: bool = True
    lipschitz_init: float = 1.0
    max_iter: int = 3000
    beta_rw: float = 0.15
    n_samples: int = 2000
    n_burn_in: int | None = None    # None: 10 N^2
    thinning: int | None = None     # None: N
    n_chains: int = 16
    obs_samples: int = 10000
    final_obs_samples: int = 100000
    cadence: int = 100
    checkpoint_every: int = 500
    exact_sums: bool = False
    oracle: bool = True
    noise_scale: float = 1e-3
    noise_window: int = 100
    noise_rel_tol: float = 1e-4
    noise_factor: float = 10.0
    seed: int = 0
    output_dir: str = "runs/latest"


_MODEL_KEYS = ("model", "n_sites", "coupling", "anisotropy", "gamma", "bias",
               "gamma_plus", "gamma_minus")


# ---------------------------------------------------------------------------
# configuration serialization: flat "key = value" lines


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_optional_int(raw: str, key: str):
    if raw.lower() in ("auto", "none"):
        return None
    return _parse_int(raw, key)


def _parse_optional_float(raw: str, key: str):
    if raw.lower() in ("auto", "none"):
        return None
    return _parse_float(raw, key)


def _parse_int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError as err:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from err


def _parse_float(raw: str, key: str) -> float:
    try:
        return float(raw)
    except ValueError as err:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from err


def _parse_rate_list(raw: str, key: str):
    if raw.lower() in ("auto", "none"):
        return None
    try:
        return tuple(float(part) for part in raw.split(","))
    except ValueError as err:
        raise ConfigError(f"{key}: expected comma-separated numbers") from err


def _parse_choice(options):
    def convert(raw, key):
        low = raw.lower()
        if low not in options:
            raise ConfigError(f"{key}: expected one of {options}, got {raw!r}")
        return low
    return convert


_PARSERS = {
    "model": _parse_choice(("a", "b", "custom")),
    "n_sites": _parse_int,
    "coupling": _parse_optional_float,
    "anisotropy": _parse_optional_float,
    "gamma": _parse_float,
    "bias": _parse_float,
    "gamma_plus": _parse_rate_list,
    "gamma_minus": _parse_rate_list,
    "alpha": _parse_int,
    "beta_anc": _parse_int,
    "init_stddev": _parse_float,
    "pretrain_steps": _parse_int,
    "optimizer": _parse_choice(("sgd", "sr", "nagd")),
    "eta": _parse_float,
    "diag_shift": _parse_float,
    "momentum": _parse_float,
    "gamma_mode": _parse_choice(("fixed", "dynamic")),
    "precondition": _parse_bool,
    "lipschitz_init": _parse_float,
    "max_iter": _parse_int,
    "beta_rw": _parse_float,
    "n_samples": _parse_int,
    "n_burn_in": _parse_optional_int,
    "thinning": _parse_optional_int,
    "n_chains": _parse_int,
    "obs_samples": _parse_int,
    "final_obs_samples": _parse_int,
    "cadence": _parse_int,
    "checkpoint_every": _parse_int,
    "exact_sums": _parse_bool,
    "oracle": _parse_bool,
    "noise_scale": _parse_float,
    "noise_window": _parse_int,
    "noise_rel_tol": _parse_float,
    "noise_factor": _parse_float,
    "seed": _parse_int,
    "output_dir": lambda raw, key: raw,
}


def parse_config(text: str) -> RunConfig:
    """Parse a flat key = value document. '#' starts a comment; unknown
    keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _PARSERS[key](raw, key)
    config = RunConfig(**values)
    validate_config(config)
    return config


def _format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, tuple):
        return ",".join(format(float(v), ".17g") for v in value)
    return str(value)


def format_config(config: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}"
             for f in fields(config)]
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"configuration file not found: {path}")
    return parse_config(path.read_text())


def validate_config(config: RunConfig):
    if config.n_sites < 1:
        raise ConfigError("n_sites must be at least 1")
    if config.model == "custom":
        for key, rates in (("gamma_plus", config.gamma_plus),
                           ("gamma_minus", config.gamma_minus)):
            if rates is None:
                raise ConfigError(f"custom model requires {key}")
            if len(rates) != config.n_sites:
                raise ConfigError(f"{key} must list {config.n_sites} rates")
    if config.alpha < 1 or config.beta_anc < 1:
        raise ConfigError("alpha and beta_anc must be at least 1")
    if not 0.0 < config.beta_rw <= 1.0:
        raise ConfigError("beta_rw must be in (0, 1]")
    if config.max_iter < 0:
        raise ConfigError("max_iter must be nonnegative")
    if config.exact_sums and config.n_sites > EXACT_SUMS_MAX_SITES:
        raise ConfigError(
            f"exact sums enumerate 4^N pairs and are limited to "
            f"N <= {EXACT_SUMS_MAX_SITES}")
    if config.eta <= 0:
        raise ConfigError("eta must be positive")
    if config.cadence < 1 or config.checkpoint_every < 1:
        raise ConfigError("cadence and checkpoint_every must be positive")


def build_model(config: RunConfig):
    kwargs = {}
    if config.coupling is not None:
        kwargs["coupling"] = config.coupling
    if config.anisotropy is not None:
        kwargs["anisotropy"] = config.anisotropy
    if config.model == "a":
        return model_a(config.n_sites, gamma=config.gamma, bias=config.bias,
                       **kwargs)
    if config.model == "b":
        return model_b(config.n_sites, gamma=config.gamma, **kwargs)
    chain = ChainSpec(config.n_sites,
                      coupling=config.coupling if config.coupling is not None else 1.0,
                      anisotropy=config.anisotropy if config.anisotropy is not None else 1.0)
    drive = DriveSpec(tuple(config.gamma_plus), tuple(config.gamma_minus))
    return chain, drive


# ---------------------------------------------------------------------------
# deterministic stream derivation


def stream_seed(master: int, iteration: int, tag: int) -> int:
    ss = np.random.SeedSequence([int(master), int(iteration), int(tag)])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def stream_rng(master: int, iteration: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(master), int(iteration), int(tag)]))


# ---------------------------------------------------------------------------
# numeric output helpers: 17 significant digits everywhere


def _g17(value) -> str:
    return format(float(value), ".17g")


def _json_text(obj, indent=0) -> str:
    pad = " " * indent
    inner = " " * (indent + 2)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}"{key}": {_json_text(val, indent + 2)}'
                 for key, val in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            return "[]"
        items = [f"{inner}{_json_text(val, indent + 2)}" for val in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if np.isnan(value):
            return "NaN"
        if np.isinf(value):
            return "Infinity" if value > 0 else "-Infinity"
        return _g17(value)
    return json.dumps(obj)


def write_json(path, obj):
    Path(path).write_text(_json_text(obj) + "\n")


# ---------------------------------------------------------------------------
# the optimization loop


def _sampler_config(config: RunConfig, n_samples: int, seed: int) -> sampler.SamplerConfig:
    return sampler.SamplerConfig(
        n_samples=n_samples,
        beta_rw=config.beta_rw,
        n_burn_in=config.n_burn_in,
        thinning=config.thinning,
        n_chains=config.n_chains,
        seed=seed,
    )


def _draw_pair_batch(params, config: RunConfig, iteration: int):
    if config.exact_sums:
        return sampler.enumerate_pairs(params)
    seed = stream_seed(config.seed, iteration, _STREAM_PAIRS)
    return sampler.sample_pairs(params, _sampler_config(config, config.n_samples, seed))


def _draw_diagonal_batch(params, config: RunConfig, iteration: int, n_samples: int,
                         tag: int = _STREAM_DIAGONAL):
    if config.exact_sums:
        return sampler.enumerate_diagonal(params)
    seed = stream_seed(config.seed, iteration, tag)
    return sampler.sample_diagonal(params, _sampler_config(config, n_samples, seed))


def _ed_reference(config: RunConfig, chain, drive):
    """Exact steady-state observables, or None when out of oracle reach."""
    if not config.oracle or config.n_sites > ORACLE_MAX_SITES:
        return None, None
    lmap = LindbladMap(chain, drive)
    rho = exact.steady_state_ed(lmap)
    n = config.n_sites
    mags = [float(exact.exact_expectation(rho, observables.magnetization_op(n, i)).real)
            for i in range(1, n + 1)]
    currents = [float(exact.exact_expectation(
        rho, observables.spin_current_op(chain, k, k + 1)).real)
        for k in range(1, n)]
    reference = {
        "magnetizations": mags,
        "bond_currents": currents,
        "mean_current": float(np.mean(currents)) if currents else 0.0,
    }
    return rho, reference


def _observable_row(params, config: RunConfig, chain, iteration: int, cost: float,
                    rho_ed, n_samples: int, tag: int = _STREAM_DIAGONAL):
    n = config.n_sites
    batch = _draw_diagonal_batch(params, config, iteration, n_samples, tag)
    mags = [observables.estimate_observable(
        params, observables.magnetization_op(n, i), batch) for i in range(1, n + 1)]
    currents = [observables.estimate_observable(
        params, observables.spin_current_op(chain, k, k + 1), batch)
        for k in range(1, n)]
    mean_cur = observables.mean_current(params, chain, batch)
    fid = float("nan")
    if rho_ed is not None and n <= FIDELITY_MAX_SITES:
        fid = exact.state_fidelity(params, rho_ed)
    return mags, currents, mean_cur, fid


def _observables_header(n: int) -> str:
    cols = ["iteration"]
    cols += [f"mag_{i}" for i in range(1, n + 1)]
    cols += [f"current_{k}{k + 1}" for k in range(1, n)]
    cols += ["mean_current", "mean_current_error", "cost", "fidelity"]
    return ",".join(cols)


def _observables_line(iteration, mags, currents, mean_cur, cost, fid) -> str:
    parts = [str(iteration)]
    parts += [_g17(m.value) for m in mags]
    parts += [_g17(c.value) for c in currents]
    parts += [_g17(mean_cur.value), _g17(mean_cur.std_error), _g17(cost), _g17(fid)]
    return ",".join(parts)


def _save_optimizer_state(path, state: OptimizerState, cost_window, best_cost):
    np.savez(path,
             x=state.x, x_prev=state.x_prev,
             lipschitz=np.float64(state.lipschitz),
             m_ema=state.m_ema, s_ema=state.s_ema,
             iteration=np.int64(state.iteration),
             cost_window=np.asarray(cost_window, dtype=np.float64),
             best_cost=np.float64(best_cost))


def _load_optimizer_state(path, config: RunConfig):
    data = np.load(path)
    state = OptimizerState(
        x=data["x"], x_prev=data["x_prev"],
        lipschitz=float(data["lipschitz"]),
        m_ema=data["m_ema"], s_ema=data["s_ema"],
        iteration=int(data["iteration"]),
        gamma_mode=config.gamma_mode, gamma=config.momentum,
        precondition=config.precondition,
    )
    return state, list(data["cost_window"]), float(data["best_cost"])


def _truncate_csv(path: Path, header: str, keep):
    """Keep only data rows whose iteration (first column) satisfies keep."""
    if not path.is_file():
        path.write_text(header + "\n")
        return
    lines = path.read_text().splitlines()
    kept = [header]
    for line in lines[1:]:
        if not line.strip():
            continue
        iteration = int(line.split(",", 1)[0])
        if keep(iteration):
            kept.append(line)
    path.write_text("\n".join(kept) + "\n")


def run(config: RunConfig, resume: bool = False) -> dict:
    """Execute one optimization run; returns the final summary dict."""
    start_time = time.perf_counter()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(format_config(config))

    chain, drive = build_model(config)
    lmap = LindbladMap(chain, drive)
    n = config.n_sites
    rho_ed, ed_reference = _ed_reference(config, chain, drive)
    if ed_reference is not None:
        write_json(out / ED_FILE, ed_reference)

    progress_path = out / PROGRESS_FILE
    observables_path = out / OBSERVABLES_FILE

    if resume:
        checkpoint_path = out / CHECKPOINT_FILE
        if not checkpoint_path.is_file():
            raise ConfigError(f"no checkpoint to resume from in {out}")
        params, _, start_iter = ndo.load_checkpoint(checkpoint_path)
        if (params.n_sites, params.alpha, params.beta_anc) != (n, config.alpha, config.beta_anc):
            raise ConfigError("checkpoint geometry does not match the configuration")
        state, cost_window, best_cost = _load_optimizer_state(out / OPTIMIZER_FILE, config)
        if state.iteration != start_iter:
            raise ConfigError("optimizer state and checkpoint disagree on the iteration")
        _truncate_csv(progress_path, PROGRESS_HEADER,
                      lambda it: it <= start_iter)
        # off-cadence rows can only be the final row of the interrupted
        # run; they are not part of the uninterrupted trajectory
        _truncate_csv(observables_path, _observables_header(n),
                      lambda it: it <= start_iter and it % config.cadence == 0)
    else:
        params = ndo.init_params(n, config.alpha, config.beta_anc,
                                 seed=stream_seed(config.seed, 0, _STREAM_INIT),
                                 stddev=config.init_stddev)
        if config.pretrain_steps > 0:
            params = optimize.mse_pretrain(
                params, n_steps=config.pretrain_steps,
                seed=stream_seed(config.seed, 0, _STREAM_PRETRAIN))
        state = optimize.initial_state(
            ndo.flatten(params), lipschitz=config.lipschitz_init,
            gamma_mode=config.gamma_mode, gamma=config.momentum,
            precondition=config.precondition)
        cost_window, best_cost = [], float("inf")
        start_iter = 0
        progress_path.write_text(PROGRESS_HEADER + "\n")
        observables_path.write_text(_observables_header(n) + "\n")

    progress_fh = open(progress_path, "a")
    observables_fh = open(observables_path, "a")
    last_cost = float("nan")
    last_estimate = {"n_effective": float("nan")}

    def cost_and_grad_closures(batch):
        def cost_fn(x):
            p = ndo.unflatten(x, n, config.alpha, config.beta_anc)
            return estimator.estimate_cost(p, lmap, batch)

        def grad_fn(x):
            p = ndo.unflatten(x, n, config.alpha, config.beta_anc)
            est = estimator.estimate_gradient(p, lmap, batch)
            last_estimate["n_effective"] = est.n_effective
            return est.grad

        return cost_fn, grad_fn

    try:
        for iteration in range(start_iter, config.max_iter):
            params = ndo.unflatten(state.x, n, config.alpha, config.beta_anc)
            batch = _draw_pair_batch(params, config, iteration)
            cost_fn, grad_fn = cost_and_grad_closures(batch)

            if config.optimizer == "nagd":
                state, diag = optimize.nagd_plus_step(state, cost_fn, grad_fn)
                cost = diag.cost_accepted
                lipschitz = diag.lipschitz_used
                step_norm = diag.step_norm
            else:
                est = estimator.estimate_gradient(params, lmap, batch)
                last_estimate["n_effective"] = est.n_effective
                if config.optimizer == "sgd":
                    new_x = optimize.sgd_step(state, est.grad, config.eta)
                else:
                    s_matrix = estimator.estimate_s_matrix(params, batch)
                    new_x = optimize.sr_step(state, est.grad, s_matrix,
                                             config.eta, config.diag_shift)
                step_norm = float(np.linalg.norm(new_x - state.x))
                state = replace(state, x=new_x, x_prev=state.x,
                                iteration=state.iteration + 1)
                cost = cost_fn(state.x)
                lipschitz = float("nan")

            last_cost = cost
            best_cost = min(best_cost, cost)
            cost_window.append(cost)
            if len(cost_window) > config.noise_window:
                cost_window.pop(0)

            wall = time.perf_counter() - start_time
            progress_fh.write(",".join([
                str(iteration + 1), _g17(cost), _g17(lipschitz),
                _g17(step_norm), _g17(last_estimate["n_effective"]), _g17(wall),
            ]) + "\n")
            progress_fh.flush()

            params = ndo.unflatten(state.x, n, config.alpha, config.beta_anc)

            if (len(cost_window) == config.noise_window
                    and config.noise_scale > 0
                    and optimize.noise_trigger(cost_window, best_cost,
                                               config.noise_rel_tol,
                                               config.noise_factor)):
                logger.info("iteration %d: cost stalled at %.3e, injecting noise",
                            iteration + 1, cost)
                rng = stream_rng(config.seed, iteration, _STREAM_NOISE)
                params = optimize.inject_noise(params, config.noise_scale, rng)
                flat = ndo.flatten(params)
                state = replace(state, x=flat, x_prev=flat.copy())
                cost_window.clear()

            done = iteration + 1 == config.max_iter
            if (iteration + 1) % config.cadence == 0 or done:
                mags, currents, mean_cur, fid = _observable_row(
                    params, config, chain, iteration + 1, cost, rho_ed,
                    config.obs_samples)
                observables_fh.write(_observables_line(
                    iteration + 1, mags, currents, mean_cur, cost, fid) + "\n")
                observables_fh.flush()
                logger.info("iteration %d: cost %.6e fidelity %s",
                            iteration + 1, cost,
                            "n/a" if np.isnan(fid) else f"{fid:.8f}")

            if (iteration + 1) % config.checkpoint_every == 0 or done:
                ndo.save_checkpoint(out / CHECKPOINT_FILE, params,
                                    seed=config.seed, iteration=iteration + 1)
                _save_optimizer_state(out / OPTIMIZER_FILE, state,
                                      cost_window, best_cost)
    finally:
        progress_fh.close()
        observables_fh.close()

    params = ndo.unflatten(state.x, n, config.alpha, config.beta_anc)
    if config.max_iter == 0:
        ndo.save_checkpoint(out / CHECKPOINT_FILE, params,
                            seed=config.seed, iteration=0)
        _save_optimizer_state(out / OPTIMIZER_FILE, state, cost_window, best_cost)

    # final evaluation on a dedicated (larger) diagonal batch
    mags, currents, mean_cur, fid = _observable_row(
        params, config, chain, config.max_iter, last_cost, rho_ed,
        config.final_obs_samples, tag=_STREAM_FINAL)

    extrapolation = None
    series = _mean_current_series(observables_path)
    if len(series) >= 10:
        try:
            fit = observables.fit_exponential(series)
            extrapolation = {
                "limit": fit.limit,
                "amplitude": fit.amplitude,
                "rate": fit.rate,
                "residual_rms": fit.residual_rms,
                "limit_stderr": fit.limit_stderr,
                "degenerate": fit.degenerate,
            }
        except NessRbmError as err:
            logger.info("extrapolation skipped: %s", err)

    summary = {
        "config": {f.name: getattr(config, f.name) for f in fields(config)},
        "iterations": config.max_iter,
        "final_cost": float(last_cost),
        "wall_time": time.perf_counter() - start_time,
        "magnetizations": [m.value for m in mags],
        "magnetization_errors": [m.std_error for m in mags],
        "bond_currents": [c.value for c in currents],
        "bond_current_errors": [c.std_error for c in currents],
        "mean_current": mean_cur.value,
        "mean_current_error": mean_cur.std_error,
        "i12": currents[0].value if currents else 0.0,
        "fidelity": None if np.isnan(fid) else fid,
        "extrapolated_current": extrapolation,
        "ed_reference": ed_reference,
    }
    write_json(out / FINAL_FILE, summary)
    return summary


def _mean_current_series(observables_path: Path):
    if not Path(observables_path).is_file():
        return []
    lines = Path(observables_path).read_text().splitlines()
    if len(lines) < 2:
        return []
    header = lines[0].split(",")
    it_col = header.index("iteration")
    cur_col = header.index("mean_current")
    series = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        series.append((float(parts[it_col]), float(parts[cur_col])))
    return series


# ---------------------------------------------------------------------------
# exact-oracle command


def run_exact(config: RunConfig, checkpoint: str | None = None) -> dict:
    chain, drive = build_model(config)
    lmap = LindbladMap(chain, drive)
    rho = exact.steady_state_ed(lmap)
    n = config.n_sites
    mags = [float(exact.exact_expectation(rho, observables.magnetization_op(n, i)).real)
            for i in range(1, n + 1)]
    currents = [float(exact.exact_expectation(
        rho, observables.spin_current_op(chain, k, k + 1)).real)
        for k in range(1, n)]
    result = {
        "n_sites": n,
        "magnetizations": mags,
        "bond_currents": currents,
        "mean_current": float(np.mean(currents)) if currents else 0.0,
        "cost_of_ness": exact.exact_cost(lmap, _rho_lookup(rho, n)) if n <= 6 else None,
    }
    if checkpoint is not None:
        params, _, iteration = ndo.load_checkpoint(checkpoint)
        if params.n_sites != n:
            raise ConfigError("checkpoint size does not match the configuration")
        result["checkpoint_iteration"] = iteration
        result["checkpoint_fidelity"] = exact.state_fidelity(params, rho)
    return result


def _rho_lookup(rho: np.ndarray, n: int):
    def provider(pair):
        return complex(rho[pair.row, pair.col])
    return provider


# ---------------------------------------------------------------------------
# run comparison


def compare(run_dirs) -> str:
    """CSV summary of completed runs; all runs must share the model."""
    rows = []
    reference_model = None
    for run_dir in run_dirs:
        final_path = Path(run_dir) / FINAL_FILE
        if not final_path.is_file():
            raise ConfigError(f"{run_dir} has no {FINAL_FILE} (incomplete run)")
        summary = json.loads(final_path.read_text())
        model_part = {key: summary["config"].get(key) for key in _MODEL_KEYS}
        if reference_model is None:
            reference_model = model_part
        elif model_part != reference_model:
            raise IncompatibleRuns(
                f"{run_dir} was run on a different model: "
                f"{model_part} vs {reference_model}")
        rows.append((str(run_dir), summary))

    header = ("run,optimizer,iterations,final_cost,fidelity,i12,"
              "mean_current,wall_time")
    lines = [header]
    for name, summary in rows:
        fid = summary.get("fidelity")
        lines.append(",".join([
            name,
            summary["config"].get("optimizer", "?"),
            str(summary["iterations"]),
            _g17(summary["final_cost"]),
            "" if fid is None else _g17(fid),
            _g17(summary["i12"]),
            _g17(summary["mean_current"]),
            _g17(summary["wall_time"]),
        ]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="nessrbm",
                     description="Variational steady states of driven spin chains")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute an optimization run")
    run_p.add_argument("config", help="path to a key = value configuration file")
    run_p.add_argument("--exact-sums", action="store_true",
                       help="replace Monte-Carlo batches by full enumeration")
    run_p.add_argument("--seed", type=int, default=None, help="override the master seed")
    run_p.add_argument("--max-iter", type=int, default=None, help="override max_iter")
    run_p.add_argument("--output", default=None, help="override the output directory")
    run_p.add_argument("--resume", action="store_true",
                       help="continue from the checkpoint in the output directory")

    cmp_p = sub.add_parser("compare", help="summarize completed runs")
    cmp_p.add_argument("dirs", nargs="+", help="run output directories")

    exact_p = sub.add_parser("exact", help="exact-diagonalization oracle only")
    exact_p.add_argument("config", help="path to a configuration file")
    exact_p.add_argument("--checkpoint", default=None,
                         help="parameter checkpoint to score against the exact state")
    exact_p.add_argument("--seed", type=int, default=None, help="ignored; accepted for parity")
    exact_p.add_argument("--output", default=None,
                         help="write the oracle JSON here instead of stdout")
    return parser


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    updates = {}
    if getattr(args, "exact_sums", False):
        updates["exact_sums"] = True
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "max_iter", None) is not None:
        updates["max_iter"] = args.max_iter
    if getattr(args, "output", None) is not None:
        updates["output_dir"] = args.output
    if not updates:
        return config
    config = replace(config, **updates)
    validate_config(config)
    return config


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "run":
            config = _apply_overrides(load_config(args.config), args)
            summary = run(config, resume=args.resume)
            print(_json_text({
                "final_cost": summary["final_cost"],
                "fidelity": summary["fidelity"],
                "mean_current": summary["mean_current"],
                "output_dir": config.output_dir,
            }))
            return 0
        if args.command == "compare":
            sys.stdout.write(compare(args.dirs))
            return 0
        if args.command == "exact":
            config = _apply_overrides(load_config(args.config), args)
            result = run_exact(config, checkpoint=args.checkpoint)
            text = _json_text(result) + "\n"
            if args.output is not None:
                Path(args.output).write_text(text)
            else:
                sys.stdout.write(text)
            return 0
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, IncompatibleRuns) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 1
    except NessRbmError as err:
        print(f"numerical failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
