"""Two-level charge-state kinetics and the reduced four-level picture.

Charge conversion rates here are in 1/s and times in s, the natural units for
dark-decay and power-series measurements. The four-level model takes rates in
MHz like the rest of the package.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from .errors import InvalidParameterError, InvalidStateError, NonFiniteError

MHZ = 1e6  # 1/s per MHz


@dataclass(frozen=True)
class ChargeState:
    rho_minus: float
    rho_zero: float

    def __post_init__(self):
        a, b = float(self.rho_minus), float(self.rho_zero)
        if not (0 <= a <= 1 and 0 <= b <= 1) or abs(a + b - 1) > 1e-12:
            raise InvalidStateError(f"invalid charge populations ({a}, {b})")
        object.__setattr__(self, "rho_minus", a)
        object.__setattr__(self, "rho_zero", b)

    @classmethod
    def from_minus(cls, rho_minus: float) -> "ChargeState":
        return cls(rho_minus, 1.0 - rho_minus)


@dataclass(frozen=True)
class ChargeRates:
    r_ion: float
    r_rec: float

    def __post_init__(self):
        for name in ("r_ion", "r_rec"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise InvalidParameterError(f"{name} must be finite and >= 0, got {v!r}")
            object.__setattr__(self, name, v)

    @property
    def r_tot(self) -> float:
        return total_rate(self)

    @property
    def rho_minus_equilibrium(self) -> float:
        if self.r_tot == 0:
            raise InvalidParameterError("no equilibrium without charge conversion")
        return self.r_rec / self.r_tot


def total_rate(rates: ChargeRates) -> float:
    return rates.r_ion + rates.r_rec


def split_rates(r_tot: float, rho_minus_equilibrium: float) -> ChargeRates:
    """Invert r_tot and the equilibrium NV- fraction into (r_ion, r_rec)."""
    if not math.isfinite(r_tot) or r_tot < 0:
        raise InvalidParameterError(f"r_tot must be >= 0, got {r_tot!r}")
    if not 0 <= rho_minus_equilibrium <= 1:
        raise InvalidParameterError(
            f"rho_minus_equilibrium must lie in [0, 1], got {rho_minus_equilibrium!r}"
        )
    r_rec = r_tot * rho_minus_equilibrium
    return ChargeRates(max(r_tot - r_rec, 0.0), r_rec)


def evolve_charge(rates: ChargeRates, init: ChargeState, t: float) -> ChargeState:
    if t < 0:
        raise InvalidParameterError(f"t must be >= 0, got {t}")
    r = rates.r_tot
    if r == 0:
        return init
    eq = rates.r_rec / r
    rho = eq + (init.rho_minus - eq) * math.exp(-r * t)
    rho = min(max(rho, 0.0), 1.0)
    return ChargeState(rho, 1.0 - rho)


# --- fitting ----------------------------------------------------------------

@dataclass(frozen=True)
class ExpDecayFit:
    amplitude: float
    rate: float
    offset: float
    residual: float

    def as_dict(self) -> dict:
        return asdict(self)


def _as_series(samples, min_points):
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidParameterError("samples must be a sequence of (time, value) pairs")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("samples contain non-finite values")
    if arr.shape[0] < min_points:
        raise InvalidParameterError(f"need at least {min_points} samples, got {arr.shape[0]}")
    return arr[:, 0], arr[:, 1]


def _projected(rate, t, y):
    """Best (amplitude, offset) for a fixed rate and the residual norm."""
    basis = np.column_stack([np.exp(-rate * t), np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return coef, float(np.linalg.norm(basis @ coef - y))


def fit_exponential_decay(samples, model: str = "decay_to_offset") -> ExpDecayFit:
    """Least-squares fit of ``A exp(-r t) + C`` with ``r >= 0``.

    A and C enter linearly and are eliminated; only the rate is searched,
    first on a log grid spanning the sampled time scales, then by bounded
    Brent refinement around the best grid point.
    """
    if model != "decay_to_offset":
        raise InvalidParameterError(f"unknown decay model {model!r}")
    t, y = _as_series(samples, 4)
    if np.any(np.diff(t) <= 0):
        raise InvalidParameterError("sample times must be strictly ascending")

    scale = max(float(np.abs(y).max()), 1e-300)
    if np.ptp(y) <= 1e-12 * scale:
        c = float(y.mean())
        return ExpDecayFit(0.0, 0.0, c, float(np.linalg.norm(y - c)))

    t0 = t[0]
    ts = t - t0
    span = ts[-1]
    dt = float(np.diff(ts).min())
    lo, hi = math.log(1e-3 / span), math.log(1e3 / dt)
    grid = np.linspace(lo, hi, 400)
    res = np.array([_projected(math.exp(g), ts, y)[1] for g in grid])
    k = int(np.argmin(res))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    opt = optimize.minimize_scalar(
        lambda g: _projected(math.exp(g), ts, y)[1] ** 2,
        bounds=(a, b),
        method="bounded",
        options={"xatol": 1e-13, "maxiter": 500},
    )
    g = opt.x if opt.fun <= res[k] ** 2 else grid[k]
    rate = math.exp(g)
    (amp, off), resid = _projected(rate, ts, y)
    # amplitude referred to t = 0 rather than the first sample
    amp = amp * math.exp(rate * t0)
    return ExpDecayFit(float(amp), rate, float(off), resid)


@dataclass(frozen=True)
class PowerLawFit:
    a: float  # quadratic coefficient
    b: float  # linear coefficient
    residual: float

    def __call__(self, p):
        p = np.asarray(p, dtype=float)
        return self.a * p**2 + self.b * p

    def as_dict(self) -> dict:
        return asdict(self)


def fit_power_law(points, form: str = "quadratic") -> PowerLawFit:
    """Fit rate(p) = a p^2 + b p with a, b >= 0 (no intercept)."""
    if form != "quadratic":
        raise InvalidParameterError(f"unknown power-law form {form!r}")
    p, r = _as_series(points, 3)
    if np.any(p <= 0):
        raise InvalidParameterError("powers must be positive")
    design = np.column_stack([p**2, p])
    if np.linalg.matrix_rank(design) < 2:
        raise InvalidParameterError("design is rank deficient (need at least two distinct powers)")
    # column scaling keeps nnls well conditioned across uW..mW ranges
    norms = np.linalg.norm(design, axis=0)
    coef, resid = optimize.nnls(design / norms, r)
    a, b = coef / norms
    return PowerLawFit(float(a), float(b), float(resid))


def loglog_slope(powers, rates) -> float:
    """Least-squares slope of log(rate) against log(power)."""
    lp, lr = np.log(np.asarray(powers, float)), np.log(np.asarray(rates, float))
    return float(np.polyfit(lp, lr, 1)[0])


# --- four-level reduction ---------------------------------------------------

@dataclass(frozen=True)
class FourLevelParams:
    """Rates (MHz) between GS_NV- (1), ES_NV- (2), GS_NV0 (3), ES_NV0 (4)."""

    g12: float
    g21: float
    g23: float
    g34: float
    g43: float
    g41: float

    def __post_init__(self):
        for name in ("g12", "g21", "g23", "g34", "g43", "g41"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise InvalidParameterError(f"{name} must be finite and >= 0, got {v!r}")
            object.__setattr__(self, name, v)


def four_level_generator(p: FourLevelParams) -> np.ndarray:
    return np.array(
        [
            [-p.g12, p.g21, 0.0, p.g41],
            [p.g12, -p.g21 - p.g23, 0.0, 0.0],
            [0.0, p.g23, -p.g34, p.g43],
            [0.0, 0.0, p.g34, -p.g43 - p.g41],
        ]
    )


@dataclass(frozen=True)
class Reduction:
    rates: ChargeRates  # 1/s
    valid: bool  # charge conversion much slower than intra-manifold dynamics


# validity: max(g23, g41) < SEPARATION * min(g12 + g21, g34 + g43)
SEPARATION = 0.01


def reduce_four_level(p: FourLevelParams) -> Reduction:
    """Effective charge rates when each manifold equilibrates internally."""
    d_minus = p.g12 + p.g21
    d_zero = p.g34 + p.g43
    if d_minus <= 0 or d_zero <= 0:
        raise InvalidParameterError("g12 + g21 and g34 + g43 must both be positive")
    r_ion = p.g23 * p.g12 / d_minus
    r_rec = p.g41 * p.g34 / d_zero
    valid = max(p.g23, p.g41) < SEPARATION * min(d_minus, d_zero)
    return Reduction(ChargeRates(r_ion * MHZ, r_rec * MHZ), valid)


# --- CSV io -----------------------------------------------------------------

def read_two_column_csv(path, columns: tuple[str, str]) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if tuple(header) != columns:
            raise InvalidParameterError(
                f"{path}: expected header {','.join(columns)}, got {','.join(header)}"
            )
        rows = [(float(a), float(b)) for a, b in reader]
    return np.array(rows, dtype=float).reshape(-1, 2)


def read_decay_csv(path) -> np.ndarray:
    return read_two_column_csv(path, ("time_s", "normalized_pl"))


def read_power_csv(path) -> np.ndarray:
    return read_two_column_csv(path, ("power_uW", "rate_per_s"))


def write_two_column_csv(path, columns, rows) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for a, b in rows:
            w.writerow([repr(float(a)), repr(float(b))])
