"""Photon-count traces: preprocessing, synthetic data and the global power-series fit."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import jsonschema
import numpy as np
from scipy import optimize

from .contrast import optimize_window
from .core import (
    PLTrace,
    SpinInit,
    _spin,
    build_rate_matrix,
    charge_split,
    pl_trace,
    pl_weights,
    propagate,
    readout_state,
)
from .errors import (
    ConvergenceError,
    InvalidParameterError,
    NoThresholdCrossingError,
    OnsetNotFoundError,
    PreprocessError,
    SchemaError,
)
from .params import NVParams, PowerScaling, lifetimes

log = logging.getLogger(__name__)

DEFAULT_BIN_WIDTH = 0.128  # ns, 128 ps TCSPC bins


@dataclass(frozen=True)
class RawTrace:
    """Photon counts per TCSPC bin.

    Counts are normally integers; noiseless synthetic traces hold expected
    values instead. ``onset_index`` is the bin where the model readout starts,
    known only for synthetic data.
    """

    counts: np.ndarray
    power: float
    spin_init: SpinInit
    bin_width: float = DEFAULT_BIN_WIDTH
    onset_index: int | None = field(default=None, compare=False)

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1:
            raise InvalidParameterError("counts must be one-dimensional")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise InvalidParameterError("counts must be finite and non-negative")
        if not self.bin_width > 0:
            raise InvalidParameterError(f"bin_width must be positive, got {self.bin_width}")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "spin_init", _spin(self.spin_init))
        object.__setattr__(self, "power", float(self.power))

    def scaled(self, factor: float) -> "RawTrace":
        return replace(self, counts=self.counts * factor)


# --- configuration -----------------------------------------------------------

FREE_PARAMS = (
    "beta_532",
    "beta_ion",
    "beta_ion2",
    "beta_rec",
    "beta_rec2",
    "gamma_es",
    "gamma_es_nv0",
    "gamma_es1_to_a1",
    "gamma_es0_to_a1",
    "gamma_a1",
    "p_a1_to_gs1",
)
NO_CHARGE_FREE = ("beta_532", "gamma_es", "gamma_es1_to_a1", "gamma_es0_to_a1", "gamma_a1", "p_a1_to_gs1")

DEFAULT_INITIAL = {
    "beta_532": 0.03,
    "beta_ion": 0.01,
    "beta_ion2": 0.0,
    "beta_rec": 0.03,
    "beta_rec2": 0.0,
    "gamma_es": 65.0,
    "gamma_es_nv0": 25.0,
    "gamma_es1_to_a1": 50.0,
    "gamma_es0_to_a1": 10.0,
    "gamma_a1": 8.0,
    "p_a1_to_gs1": 0.3,
}

# beta_ion2 is bounded through gamma_ion(p_max) >= 0 rather than a box
DEFAULT_BOUNDS = {
    "beta_532": (1e-4, 1.0),
    "beta_ion": (0.0, 2.0),
    "beta_rec": (0.0, 2.0),
    "beta_rec2": (0.0, 1e-2),
    "gamma_es": (1.0, 75.0),
    "gamma_es_nv0": (1.0, 500.0),
    "gamma_es1_to_a1": (0.0, 1000.0),
    "gamma_es0_to_a1": (0.0, 1000.0),
    "gamma_a1": (0.1, 1000.0),
    "p_a1_to_gs1": (0.0, 1.0),
}


def default_multistart_grid():
    return tuple(np.geomspace(1e-3, 1.0, 8).tolist())


@dataclass(frozen=True)
class FitConfig:
    power_list: tuple
    smoothing_block: int = 100
    t0_threshold: float = 0.5
    tail_fraction: float = 0.2
    initial: dict = field(default_factory=lambda: dict(DEFAULT_INITIAL))
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    multistart_grid: tuple = field(default_factory=default_multistart_grid)
    # also start the full fit from the charge-free optimum, so the full
    # model can never end above the nested one
    nested_start: bool = True
    # "tail": model curves normalized like the data (tail mean = 1);
    # "steady_state": normalized by the analytic steady-state PL
    model_normalization: str = "tail"
    max_nfev: int = 3000
    ftol: float = 1e-14
    xtol: float = 1e-14
    gtol: float = 1e-14
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "power_list", tuple(float(p) for p in self.power_list))
        object.__setattr__(self, "multistart_grid", tuple(float(b) for b in self.multistart_grid))
        if not self.power_list or any(not p > 0 for p in self.power_list):
            raise InvalidParameterError("power_list must be non-empty with positive powers")
        if not self.multistart_grid or any(b < 0 for b in self.multistart_grid):
            raise InvalidParameterError("multistart_grid must be non-empty and non-negative")
        if int(self.smoothing_block) < 1:
            raise InvalidParameterError("smoothing_block must be >= 1")
        if not 0 < self.t0_threshold < 1:
            raise InvalidParameterError("t0_threshold must lie in (0, 1)")
        if not 0 < self.tail_fraction <= 1:
            raise InvalidParameterError("tail_fraction must lie in (0, 1]")
        if self.model_normalization not in ("tail", "steady_state"):
            raise InvalidParameterError(f"unknown model_normalization {self.model_normalization!r}")
        bounds = dict(DEFAULT_BOUNDS)
        bounds.update({k: tuple(v) for k, v in self.bounds.items()})
        initial = dict(DEFAULT_INITIAL)
        initial.update(self.initial)
        unknown = (set(bounds) | set(initial)) - set(FREE_PARAMS)
        if unknown:
            raise InvalidParameterError(f"unknown fit parameters: {sorted(unknown)}")
        for k, (lo, hi) in bounds.items():
            if not lo <= hi:
                raise InvalidParameterError(f"inconsistent bounds for {k}: {lo} > {hi}")
        if bounds["beta_ion"][0] < 0 or bounds["beta_rec2"][0] < 0:
            raise InvalidParameterError("beta_ion and beta_rec2 must be bounded below by 0")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "initial", initial)

    @property
    def p_max(self) -> float:
        return max(self.power_list)


# --- preprocessing -----------------------------------------------------------

def block_average(values: np.ndarray, block: int) -> np.ndarray:
    n = values.size // block
    return values[: n * block].reshape(n, block).mean(axis=1)


def _tail(values, fraction):
    n = max(1, int(round(fraction * values.size)))
    return float(values[-n:].mean())


def find_onset(smoothed: np.ndarray, threshold: float, tail_fraction: float = 0.2) -> int:
    """Index of the first PL maximum after the trace rises past ``threshold`` x tail.

    A flat trace carries no pulse edge and counts as never crossing.
    """
    tail = _tail(smoothed, tail_fraction)
    if not tail > 0 or np.ptp(smoothed) <= 1e-12 * abs(tail):
        raise NoThresholdCrossingError("trace never rises above the onset threshold")
    above = np.flatnonzero(smoothed > threshold * tail)
    if above.size == 0:
        raise NoThresholdCrossingError("trace never rises above the onset threshold")
    d = np.diff(smoothed)
    k = int(above[0])
    while k < d.size and d[k] >= 0:
        k += 1
    if k >= d.size:
        raise OnsetNotFoundError("no positive-to-negative derivative change after the threshold (AOM rise not found)")
    return k


def preprocess(raw, cfg: FitConfig) -> PLTrace:
    """Smooth, locate t = 0, crop and normalize one trace.

    ``raw`` is a :class:`RawTrace`, or an already smoothed :class:`PLTrace`
    (then no further averaging is applied).
    """
    if isinstance(raw, PLTrace):
        smoothed = raw.values
        dt = float(raw.times[1] - raw.times[0]) if len(raw) > 1 else 1.0
        power, spin = raw.power, raw.spin_init
    else:
        block = int(cfg.smoothing_block)
        smoothed = block_average(raw.counts.astype(float), block)
        dt = block * raw.bin_width
        power, spin = raw.power, raw.spin_init
    if smoothed.size < 3:
        raise PreprocessError("trace shorter than three smoothed samples")
    k0 = find_onset(smoothed, cfg.t0_threshold, cfg.tail_fraction)
    kept = smoothed[k0:]
    if kept.size < 2:
        raise PreprocessError("fewer than two samples remain after the onset")
    tail = _tail(kept, cfg.tail_fraction)
    if not tail > 0:
        raise PreprocessError("tail level is zero; cannot normalize")
    times = np.arange(kept.size) * dt
    return PLTrace(times, kept / tail, power=power, spin_init=spin)


# --- synthetic data ----------------------------------------------------------

def _resolve(model, power) -> NVParams:
    if isinstance(model, NVParams):
        return model
    scaling, intrinsic = model
    return scaling.params_at(power, intrinsic)


def synthesize(
    model,
    power: float,
    spin_init,
    duration: float,
    photon_scale: float | None = None,
    seed=None,
    *,
    lead: float = 64.0,
    background: float = 0.0,
    bin_width: float = DEFAULT_BIN_WIDTH,
) -> RawTrace:
    """TCSPC-style trace of the model readout PL.

    ``model`` is either :class:`NVParams` or a ``(PowerScaling, NVParams)``
    pair evaluated at ``power``. The readout starts after ``lead`` ns of dark
    counts. ``photon_scale`` is the detected count rate (per ns) at PL = 1;
    ``None`` returns the noiseless expectation in units of normalized PL.
    """
    params = _resolve(model, power)
    if photon_scale is not None and not photon_scale > 0:
        raise InvalidParameterError("photon_scale must be positive")
    n_lead = int(round(lead / bin_width))
    n = int(round(duration / bin_width))
    t = np.arange(n) * bin_width
    # eigen-path round-off can leave -1e-17 at t = 0
    pl = np.clip(pl_trace(params, readout_state(params, spin_init), t).values, 0.0, None)
    if photon_scale is None:
        mean = np.concatenate([np.full(n_lead, background), pl])
        counts = mean
    else:
        rate = np.concatenate([np.zeros(n_lead), photon_scale * pl]) + background
        rng = np.random.default_rng(seed)
        counts = rng.poisson(np.clip(rate, 0, None) * bin_width)
    return RawTrace(counts, power, spin_init, bin_width, onset_index=n_lead)


def synthesize_bundle(
    scaling: PowerScaling,
    intrinsic: NVParams,
    powers,
    duration: float = 4000.0,
    dt: float = 12.8,
    photon_scale: float | None = None,
    seed=None,
    tail_fraction: float = 0.2,
) -> list[PLTrace]:
    """Preprocessed-form traces (ms0 and ms1 per power) on a ``dt`` grid.

    Each trace is the model PL sampled from the readout origin, optionally
    with Poisson noise of ``photon_scale`` counts/ns at PL = 1 per ``dt`` bin,
    then normalized to a unit tail mean.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(duration / dt))) * dt
    out = []
    for p in powers:
        params = scaling.params_at(p, intrinsic)
        for spin in (SpinInit.MS0, SpinInit.MS1):
            y = pl_trace(params, readout_state(params, spin), t).values
            if photon_scale is not None:
                expected = photon_scale * dt * np.clip(y, 0.0, None)
                y = rng.poisson(expected) / (photon_scale * dt)
            out.append(PLTrace(t, y / _tail(y, tail_fraction), power=p, spin_init=spin))
    return out


# --- raw trace IO ------------------------------------------------------------

SIDECAR_SCHEMA = {
    "type": "object",
    "properties": {
        "bin_width_ps": {"type": "number", "exclusiveMinimum": 0},
        "power_uW": {"type": "number", "exclusiveMinimum": 0},
        "spin_init": {"enum": ["ms0", "ms1"]},
        "onset_index": {"type": "integer", "minimum": 0},
    },
    "required": ["bin_width_ps", "power_uW", "spin_init"],
    "additionalProperties": False,
}


def _schema_error(exc: jsonschema.ValidationError, where) -> SchemaError:
    path = ".".join(str(p) for p in exc.absolute_path)
    if exc.validator == "required":
        missing = [r for r in exc.validator_value if r not in exc.instance]
        path = ".".join(filter(None, [path, missing[0] if missing else ""]))
    elif exc.validator == "additionalProperties":
        extra = sorted(set(exc.instance) - set(exc.schema.get("properties", {})))
        path = ".".join(filter(None, [path] + extra[:1]))
    return SchemaError(f"{where}: field '{path or '<root>'}': {exc.message}")


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def write_raw(raw: RawTrace, csv_path) -> tuple[Path, Path]:
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_index", "count"])
        integral = np.all(np.mod(raw.counts, 1) == 0)
        for i, c in enumerate(raw.counts):
            w.writerow([i, int(c) if integral else repr(float(c))])
    side = {"bin_width_ps": raw.bin_width * 1e3, "power_uW": raw.power, "spin_init": raw.spin_init.value}
    if raw.onset_index is not None:
        side["onset_index"] = int(raw.onset_index)
    sidecar_path(csv_path).write_text(json.dumps(side, indent=2) + "\n", encoding="utf-8")
    return csv_path, sidecar_path(csv_path)


def read_raw(csv_path, sidecar=None) -> RawTrace:
    csv_path = Path(csv_path)
    side_path = Path(sidecar) if sidecar else sidecar_path(csv_path)
    try:
        meta = json.loads(side_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{side_path}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(meta, SIDECAR_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise _schema_error(exc, side_path) from None
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["bin_index", "count"]:
            raise SchemaError(f"{csv_path}: expected header bin_index,count, got {','.join(header)}")
        counts = [float(row[1]) for row in reader if row]
    counts = np.array(counts)
    if np.all(np.mod(counts, 1) == 0):
        counts = counts.astype(np.int64)
    return RawTrace(
        counts,
        meta["power_uW"],
        meta["spin_init"],
        meta["bin_width_ps"] * 1e-3,
        onset_index=meta.get("onset_index"),
    )


# --- global fit --------------------------------------------------------------

class _Problem:
    """Maps an internal parameter vector to model curves and residuals.

    Internally beta_ion2 is carried as the fraction u in [0, 1] with
    beta_ion2 = -u beta_ion / p_max, which keeps gamma_ion(p) >= 0 over the
    measured power range with box bounds only.
    """

    def __init__(self, traces, cfg: FitConfig, free, fixed):
        self.traces = list(traces)
        self.cfg = cfg
        self.free = tuple(free)
        self.fixed = dict(fixed)
        self.powers = sorted({t.power for t in self.traces})
        self.data = [t.values for t in self.traces]
        self.evals = []

    # parameter mapping

    def full_from_x(self, x) -> dict:
        vals = dict(self.fixed)
        vals.update(zip(self.free, map(float, x)))
        if "beta_ion2" in self.free:
            vals["beta_ion2"] = -vals["beta_ion2"] * vals["beta_ion"] / self.cfg.p_max
        return vals

    def x_from_full(self, vals) -> np.ndarray:
        x = []
        for k in self.free:
            v = vals[k]
            if k == "beta_ion2":
                b = vals["beta_ion"]
                v = 0.0 if b <= 0 else min(max(-v * self.cfg.p_max / b, 0.0), 1.0)
            x.append(v)
        return np.array(x, dtype=float)

    def bounds(self):
        lo, hi = [], []
        for k in self.free:
            a, b = (0.0, 1.0) if k == "beta_ion2" else self.cfg.bounds[k]
            lo.append(a)
            hi.append(b)
        return np.array(lo), np.array(hi)

    # model

    def curves(self, vals: dict) -> list[np.ndarray]:
        intrinsic, scaling = split_params(vals)
        by_power = {}
        for p in self.powers:
            params = _params_at_unchecked(scaling, p, intrinsic)
            a = build_rate_matrix(params).per_ns
            p_minus, p_zero = charge_split(params)
            by_power[p] = (params, a, p_minus, p_zero)
        out = []
        for tr in self.traces:
            params, a, p_minus, p_zero = by_power[tr.power]
            rho0 = np.zeros(7)
            rho0[4 if tr.spin_init is SpinInit.MS0 else 3] = p_minus
            rho0[6] = p_zero
            c = pl_weights(params)
            y = propagate(a, rho0, tr.times) @ c
            if self.cfg.model_normalization == "tail":
                norm = _tail(y, self.cfg.tail_fraction)
            else:
                norm = float(c @ _steady(params, p_minus, p_zero))
            out.append(y / norm)
        return out

    def residuals(self, x) -> np.ndarray:
        vals = self.full_from_x(x)
        r = np.concatenate([m - d for m, d in zip(self.curves(vals), self.data)])
        self.evals.append(float(r @ r))
        return r


def _steady(params, p_minus, p_zero):
    from .core import limit_state

    rho0 = np.zeros(7)
    rho0[4], rho0[6] = p_minus, p_zero
    return limit_state(build_rate_matrix(params), rho0)


def _params_at_unchecked(scaling: dict, p: float, intrinsic: dict) -> NVParams:
    g532 = scaling["beta_532"] * p
    gion = scaling["beta_ion"] * p + scaling["beta_ion2"] * p * p
    grec = scaling["beta_rec"] * p + scaling["beta_rec2"] * p * p
    return NVParams(
        gamma_532=g532,
        gamma_532_nv0=g532 / 3.0,
        gamma_ion=max(gion, 0.0),
        gamma_rec=max(grec, 0.0),
        **intrinsic,
    )


_INTRINSIC = ("gamma_es", "gamma_es_nv0", "gamma_es1_to_a1", "gamma_es0_to_a1", "gamma_a1", "p_a1_to_gs1")
_SCALING = ("beta_532", "beta_ion", "beta_ion2", "beta_rec", "beta_rec2")


def split_params(vals: dict) -> tuple[dict, dict]:
    return {k: vals[k] for k in _INTRINSIC}, {k: vals[k] for k in _SCALING}


@dataclass
class StartRecord:
    beta_ion_guess: float | None
    cost: float
    nfev: int
    status: int
    message: str
    history: list = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status > 0

    def as_dict(self) -> dict:
        return {
            "beta_ion_guess": self.beta_ion_guess,
            "cost": self.cost,
            "nfev": self.nfev,
            "status": self.status,
            "converged": self.converged,
            "message": self.message,
        }


@dataclass(frozen=True)
class FitResult:
    """Outcome of a power-series fit.

    ``params`` always holds all eleven model parameters; ``free`` names the
    ones that were optimized. Derived per-power quantities are recomputed
    from ``params`` on every call.
    """

    model: str
    params: dict
    free: tuple
    cost: float
    curve_costs: tuple
    residuals: tuple = field(repr=False)
    curve_labels: tuple = field(repr=False)
    active: dict = field(default_factory=dict)
    powers: tuple = ()
    starts: tuple = field(default=(), repr=False)
    history: tuple = field(default=(), repr=False)

    def scaling(self) -> PowerScaling:
        return PowerScaling(**{k: self.params[k] for k in _SCALING})

    def intrinsic(self) -> dict:
        return {k: self.params[k] for k in _INTRINSIC}

    def params_at(self, power: float) -> NVParams:
        intrinsic, scaling = split_params(self.params)
        return _params_at_unchecked(scaling, power, intrinsic)

    def derived(self, window_grid=None) -> list[dict]:
        rows = []
        for p in self.powers:
            params = self.params_at(p)
            rep = optimize_window(params, window_grid)
            rows.append(
                {
                    "power": p,
                    "gamma_532": params.gamma_532,
                    "gamma_ion": params.gamma_ion,
                    "gamma_rec": params.gamma_rec,
                    "p_nv0": rep.p_nv0,
                    "c_esr": rep.c_esr,
                    "window_end": rep.window.end,
                }
            )
        return rows

    def summary_row(self, window_grid=None) -> dict:
        """Summary row at the power of maximum contrast."""
        derived = self.derived(window_grid)
        best = max(derived, key=lambda r: r["c_esr"])
        es0, es1, a1 = lifetimes(self.params_at(best["power"]))
        row = {
            "model": self.model,
            "power": best["power"],
            "c_esr": best["c_esr"],
            "p_nv0": best["p_nv0"],
            "gamma_532": best["gamma_532"],
            "gamma_ion": best["gamma_ion"],
            "gamma_rec": best["gamma_rec"],
            "gamma_es": self.params["gamma_es"],
            "gamma_es_nv0": self.params["gamma_es_nv0"],
            "es0_tau": es0,
            "es1_tau": es1,
            "a1_tau": a1,
            "p_a1_to_gs1": self.params["p_a1_to_gs1"],
            "cost": self.cost,
        }
        if self.model == "no_charge":
            for k in ("p_nv0", "gamma_ion", "gamma_rec", "gamma_es_nv0"):
                row.pop(k)
        return row

    def as_dict(self, with_derived: bool = True) -> dict:
        d = {
            "model": self.model,
            "params": dict(self.params),
            "free": list(self.free),
            "cost": self.cost,
            "curve_costs": dict(zip(self.curve_labels, self.curve_costs)),
            "active_constraints": dict(self.active),
            "powers": list(self.powers),
            "starts": [s.as_dict() for s in self.starts],
        }
        if with_derived:
            d["derived"] = self.derived()
        return d


def _label(tr: PLTrace) -> str:
    return f"{tr.power:g}uW_{tr.spin_init.value}"


def _check_traces(traces, cfg):
    traces = list(traces)
    if not traces:
        raise InvalidParameterError("no traces to fit")
    for tr in traces:
        if tr.power is None or tr.spin_init is None:
            raise InvalidParameterError("every trace needs power and spin_init")
    have = {(t.power, t.spin_init) for t in traces}
    want = {(p, s) for p in cfg.power_list for s in SpinInit}
    missing = sorted(want - have, key=lambda k: (k[0], k[1].value))
    extra = sorted(have - want, key=lambda k: (k[0], k[1].value))
    if missing:
        raise InvalidParameterError(
            "missing traces: " + ", ".join(f"{p:g}uW/{s.value}" for p, s in missing)
        )
    if extra:
        raise InvalidParameterError(
            "traces at powers not in power_list: " + ", ".join(f"{p:g}uW/{s.value}" for p, s in extra)
        )
    if len(traces) != len(have):
        raise InvalidParameterError("duplicate (power, spin_init) traces")
    return sorted(traces, key=lambda t: (t.power, t.spin_init.value))


def _active_flags(problem: _Problem, x, rtol=1e-6) -> dict:
    lo, hi = problem.bounds()
    flags = {}
    for k, v, a, b in zip(problem.free, x, lo, hi):
        span = max(b - a, 1e-300)
        name = "gamma_ion_nonneg" if k == "beta_ion2" else k
        if v - a <= rtol * span and k != "beta_ion2":
            flags[name] = "lower"
        elif b - v <= rtol * span:
            flags[name] = "upper"
    return flags


def _run_start(problem: _Problem, x0, guess) -> tuple[StartRecord, np.ndarray]:
    cfg = problem.cfg
    lo, hi = problem.bounds()
    x0 = np.clip(x0, lo, hi)
    problem.evals = []
    try:
        res = optimize.least_squares(
            problem.residuals,
            x0,
            bounds=(lo, hi),
            method="trf",
            x_scale="jac",
            ftol=cfg.ftol,
            xtol=cfg.xtol,
            gtol=cfg.gtol,
            max_nfev=cfg.max_nfev,
        )
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.warning("start beta_ion=%s failed: %s", guess, exc)
        return StartRecord(guess, math.inf, len(problem.evals), -1, str(exc)), x0
    history = np.minimum.accumulate(problem.evals).tolist() if problem.evals else []
    cost = float(2.0 * res.cost)
    rec = StartRecord(guess, cost, int(res.nfev), int(res.status), str(res.message), history)
    log.info("start beta_ion=%s: cost=%.6g nfev=%d status=%d", guess, cost, res.nfev, res.status)
    return rec, res.x


def _finish(model, problem: _Problem, x, starts, history, traces) -> FitResult:
    vals = problem.full_from_x(x)
    curves = problem.curves(vals)
    resid = tuple(m - t.values for m, t in zip(curves, traces))
    costs = tuple(float(r @ r) for r in resid)
    return FitResult(
        model=model,
        params=vals,
        free=problem.free,
        cost=float(sum(costs)),
        curve_costs=costs,
        residuals=resid,
        curve_labels=tuple(_label(t) for t in traces),
        active=_active_flags(problem, x),
        powers=tuple(sorted(problem.powers)),
        starts=tuple(starts),
        history=tuple(history),
    )


def _pick(records):
    """Lowest cost among converged starts; ties go to the earlier start."""
    best = None
    for i, (rec, x) in enumerate(records):
        if not rec.converged or not math.isfinite(rec.cost):
            continue
        if best is None or rec.cost < records[best][0].cost:
            best = i
    if best is None:
        raise ConvergenceError(
            "optimizer did not converge from any start: "
            + "; ".join(f"{r.beta_ion_guess}: {r.message}" for r, _ in records)
        )
    return best


def fit_no_charge(traces, cfg: FitConfig) -> FitResult:
    """Fit without NV0: gamma_ion = gamma_rec = 0 and the NV0 levels stay empty."""
    traces = _check_traces(traces, cfg)
    fixed = {k: 0.0 for k in _SCALING}
    fixed["gamma_es_nv0"] = cfg.initial["gamma_es_nv0"]
    problem = _Problem(traces, cfg, NO_CHARGE_FREE, fixed)
    x0 = problem.x_from_full(cfg.initial)
    rec, x = _run_start(problem, x0, None)
    _pick([(rec, x)])
    return _finish("no_charge", problem, x, [rec], rec.history, traces)


def fit_global(traces, cfg: FitConfig, *, nested: FitResult | None = None) -> FitResult:
    """Simultaneous fit of all traces with one set of eleven free parameters.

    One local optimization runs per ``cfg.multistart_grid`` guess of
    beta_ion; with ``cfg.nested_start`` an extra start begins at the
    charge-free optimum (``nested`` if given, otherwise fitted here).
    """
    traces = _check_traces(traces, cfg)
    starts = []
    for g in cfg.multistart_grid:
        init = dict(cfg.initial, beta_ion=g)
        starts.append((g, init))
    if cfg.nested_start:
        nc = nested if nested is not None else fit_no_charge(traces, cfg)
        init = dict(cfg.initial)
        init.update({k: nc.params[k] for k in NO_CHARGE_FREE})
        # gamma_ion = 0 keeps the whole NV0 manifold empty, reproducing nc exactly
        init.update(beta_ion=0.0, beta_ion2=0.0, beta_rec2=0.0)
        starts.append((None, init))

    def run(item):
        guess, init = item
        problem = _Problem(traces, cfg, FREE_PARAMS, {})
        return _run_start(problem, problem.x_from_full(init), guess)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            records = list(pool.map(run, starts))
    else:
        records = [run(s) for s in starts]
    best = _pick(records)
    rec, x = records[best]
    problem = _Problem(traces, cfg, FREE_PARAMS, {})
    return _finish("full", problem, x, [r for r, _ in records], rec.history, traces)


def model_curves(result: FitResult, traces, cfg: FitConfig) -> list[np.ndarray]:
    traces = _check_traces(traces, cfg)
    problem = _Problem(traces, cfg, FREE_PARAMS, {})
    return problem.curves(result.params)


def write_curves_csv(path, result: FitResult, traces, cfg: FitConfig) -> None:
    traces = _check_traces(traces, cfg)
    curves = model_curves(result, traces, cfg)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["power_uW", "spin_init", "time_ns", "data", "model"])
        for tr, m in zip(traces, curves):
            for t, d, y in zip(tr.times, tr.values, m):
                w.writerow([tr.power, tr.spin_init.value, repr(float(t)), repr(float(d)), repr(float(y))])
