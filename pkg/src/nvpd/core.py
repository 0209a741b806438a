"""Seven-level rate-equation model of the NV-/NV0 system.

State ordering is ``(ES1, ES0, A1, GS1, GS0, ES_NV0, GS_NV0)``. GS1/ES1
aggregate the m_s = +1 and -1 sublevels.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from .errors import (
    AmbiguousSteadyStateError,
    InvalidParameterError,
    InvalidStateError,
    NonFiniteError,
    NormalizationError,
)
from .params import MHZ_NS, NVParams

LABELS = ("ES1", "ES0", "A1", "GS1", "GS0", "ES_NV0", "GS_NV0")
ES1, ES0, A1, GS1, GS0, ES_NV0, GS_NV0 = range(7)
NV_MINUS = slice(0, 5)
NV_ZERO = slice(5, 7)

# eigendecomposition is only trusted below this eigenvector condition number
EIG_COND_MAX = 1e6


class SpinInit(str, enum.Enum):
    MS0 = "ms0"
    MS1 = "ms1"


def _spin(value) -> SpinInit:
    try:
        return SpinInit(value)
    except ValueError:
        raise InvalidParameterError(f"spin_init must be 'ms0' or 'ms1', got {value!r}") from None


@dataclass(frozen=True)
class StateVector:
    populations: np.ndarray

    def __post_init__(self):
        p = np.array(self.populations, dtype=float).reshape(-1)
        if p.shape != (7,):
            raise InvalidStateError(f"state vector needs 7 entries, got {p.size}")
        if not np.all(np.isfinite(p)):
            raise InvalidStateError("state vector has non-finite entries")
        if np.any(p < -1e-9) or np.any(p > 1 + 1e-9):
            raise InvalidStateError(f"populations outside [0, 1]: {p}")
        if abs(p.sum() - 1.0) > 1e-9:
            raise InvalidStateError(f"populations sum to {p.sum():.12g}, not 1")
        p = np.clip(p, 0.0, 1.0)
        p.flags.writeable = False
        object.__setattr__(self, "populations", p)

    def __array__(self, dtype=None, copy=None):
        return self.populations if dtype is None else self.populations.astype(dtype)

    def __getitem__(self, key):
        if isinstance(key, str):
            key = LABELS.index(key)
        return self.populations[key]

    @property
    def p_nv0(self) -> float:
        return float(self.populations[NV_ZERO].sum())

    @property
    def p_nv_minus(self) -> float:
        return float(self.populations[NV_MINUS].sum())

    def as_dict(self) -> dict:
        return dict(zip(LABELS, map(float, self.populations)))


@dataclass(frozen=True)
class RateMatrix:
    """Generator ``R`` of d(rho)/dt = R rho, entries in MHz."""

    m: np.ndarray
    params: NVParams | None = field(default=None, compare=False)

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        if m.shape != (7, 7):
            raise InvalidParameterError(f"rate matrix must be 7x7, got {m.shape}")
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @property
    def per_ns(self) -> np.ndarray:
        """Generator in 1/ns, the form used for time evolution."""
        return self.m * MHZ_NS

    def check_generator(self, atol=1e-12) -> None:
        m = self.m
        if not np.all(np.isfinite(m)):
            raise NonFiniteError("rate matrix has non-finite entries")
        scale = max(1.0, float(np.abs(m).max()))
        if np.any(np.abs(m.sum(axis=0)) > atol * scale):
            raise InvalidParameterError("rate matrix columns do not sum to zero")
        off = m - np.diag(np.diag(m))
        if np.any(off < 0) or np.any(np.diag(m) > 0):
            raise InvalidParameterError("rate matrix has negative off-diagonal or positive diagonal entries")


def build_rate_matrix(params: NVParams) -> RateMatrix:
    params.validate()
    g532, ges = params.gamma_532, params.gamma_es
    gion, grec = params.gamma_ion, params.gamma_rec
    ga1, p = params.gamma_a1, params.p_a1_to_gs1
    g1, g0 = params.gamma_es1_to_a1, params.gamma_es0_to_a1
    gn, g532n = params.gamma_es_nv0, params.gamma_532_nv0
    m = np.array(
        [
            [-(ges + g1 + gion), 0, 0, g532, 0, 0, 0],
            [0, -(ges + g0 + gion), 0, 0, g532, 0, 0],
            [g1, g0, -ga1, 0, 0, 0, 0],
            [ges, 0, p * ga1, -g532, 0, 2 * grec / 3, 0],
            [0, ges, (1 - p) * ga1, 0, -g532, grec / 3, 0],
            [0, 0, 0, 0, 0, -grec - gn, g532n],
            [gion, gion, 0, 0, 0, gn, -g532n],
        ],
        dtype=float,
    )
    return RateMatrix(m, params)


def _closed_blocks(m: np.ndarray) -> list[list[str]]:
    """Closed communicating classes of the level graph (one per stationary vector)."""
    adj = (np.abs(m.T) > 0).astype(int)  # edge j -> i when m[i, j] != 0
    np.fill_diagonal(adj, 0)
    n, labels = connected_components(adj, directed=True, connection="strong")
    blocks = []
    for c in range(n):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(7), members)
        if not adj[np.ix_(members, outside)].any():
            blocks.append([LABELS[i] for i in members])
    return blocks


def _null_space(m: np.ndarray, rtol=1e-10) -> np.ndarray:
    u, s, vh = linalg.svd(m)
    scale = s[0] if s[0] > 0 else 1.0
    rank = int(np.sum(s > rtol * scale))
    return vh[rank:].T


def steady_state(rm: RateMatrix) -> StateVector:
    """Unique stationary distribution: the zero eigenvector of the generator."""
    rm.check_generator()
    ns = _null_space(rm.m)
    if ns.shape[1] != 1:
        raise AmbiguousSteadyStateError(_closed_blocks(rm.m))
    v = ns[:, 0]
    v = v * np.sign(v.sum())
    # levels outside the single closed class are transient: exactly empty
    (closed,) = _closed_blocks(rm.m)
    v[[i for i, k in enumerate(LABELS) if k not in closed]] = 0.0
    v[np.abs(v) < 1e-15 * np.abs(v).max()] = 0.0
    v = np.clip(v, 0.0, None)
    return StateVector(v / v.sum())


def limit_state(rm: RateMatrix, init) -> np.ndarray:
    """t -> infinity limit of ``init`` (spectral projector onto the null space).

    Unlike :func:`steady_state` this is defined for decoupled generators, where
    the limit depends on how ``init`` is distributed over the closed blocks.
    """
    rho0 = np.asarray(init, dtype=float)
    right = _null_space(rm.m)
    left = _null_space(rm.m.T)
    proj = right @ np.linalg.solve(left.T @ right, left.T)
    return proj @ rho0


def _validate_times(times) -> np.ndarray:
    t = np.asarray(times, dtype=float).reshape(-1)
    if t.size and (not np.all(np.isfinite(t)) or t[0] < 0 or np.any(np.diff(t) < 0)):
        raise InvalidParameterError("times must be finite, non-negative and ascending")
    return t


def propagate(a: np.ndarray, rho0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """exp(a t) rho0 for each t; ``a`` in 1/ns, times in ns.

    ``rho0`` may hold several initial vectors as columns. Returns an array of
    shape ``(len(times),) + rho0.shape``.
    """
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("rate matrix has non-finite entries")
    rho0 = np.asarray(rho0, dtype=float)
    t = np.asarray(times, dtype=float)
    if t.size == 0:
        return np.zeros((0,) + rho0.shape)
    w, v = np.linalg.eig(a)
    # round-off in the stationary eigenvalues would decay or blow up the
    # null modes at very long times
    scale = np.abs(w).max() if w.size else 0.0
    w = np.where(np.abs(w) <= 1e-12 * scale, 0.0, w)
    if np.linalg.cond(v) < EIG_COND_MAX:
        c = np.linalg.solve(v, rho0.astype(complex))
        e = np.exp(np.multiply.outer(t, w))  # (nt, n)
        if rho0.ndim == 1:
            out = (e * c) @ v.T
        else:
            out = np.einsum("ij,tj,jk->tik", v, e, c)
        return out.real
    return _propagate_expm(a, rho0, t)


def _propagate_expm(a, rho0, t):
    out = np.empty((t.size,) + rho0.shape)
    steps = np.diff(t, prepend=0.0)
    uniform = t.size > 2 and np.allclose(steps[1:], steps[1], rtol=1e-12, atol=0)
    cur = linalg.expm(a * t[0]) @ rho0
    out[0] = cur
    step = linalg.expm(a * steps[1]) if uniform else None
    for k in range(1, t.size):
        if uniform:
            cur = step @ cur
        else:
            cur = linalg.expm(a * t[k]) @ rho0
        out[k] = cur
    return out


def evolve(rm: RateMatrix, init: StateVector, times) -> list[StateVector]:
    """Populations exp(R t) rho(0) at each of ``times`` (ns)."""
    t = _validate_times(times)
    rho = propagate(rm.per_ns, np.asarray(init, dtype=float), t)
    return [StateVector(r) for r in rho]


def build_initial_state(spin_init, p_nv_minus: float, p_nv0: float) -> StateVector:
    """Readout initial state: NV- weight in one ground spin level, NV0 in its ground state."""
    spin = _spin(spin_init)
    for name, p in (("p_nv_minus", p_nv_minus), ("p_nv0", p_nv0)):
        if not (np.isfinite(p) and 0.0 <= p <= 1.0):
            raise InvalidParameterError(f"{name} must lie in [0, 1], got {p!r}")
    if abs(p_nv_minus + p_nv0 - 1.0) > 1e-9:
        raise InvalidParameterError(f"p_nv_minus + p_nv0 = {p_nv_minus + p_nv0}, expected 1")
    rho = np.zeros(7)
    rho[GS0 if spin is SpinInit.MS0 else GS1] = p_nv_minus
    rho[GS_NV0] = p_nv0
    return StateVector(rho)


def charge_split(params: NVParams) -> tuple[float, float]:
    """Steady-state (P_NV-, P_NV0) under illumination.

    Without any charge conversion the manifolds decouple; the NV is then taken
    to be entirely NV-.
    """
    if params.gamma_ion == 0 and params.gamma_rec == 0:
        return 1.0, 0.0
    ss = steady_state(build_rate_matrix(params))
    return ss.p_nv_minus, ss.p_nv0


def readout_state(params: NVParams, spin_init) -> StateVector:
    p_minus, p_zero = charge_split(params)
    return build_initial_state(spin_init, p_minus, p_zero)


def pl_weights(params: NVParams) -> np.ndarray:
    """Row vector mapping populations to emitted PL (MHz)."""
    c = np.zeros(7)
    c[ES1] = c[ES0] = params.gamma_es
    c[ES_NV0] = params.gamma_es_nv0
    return c


@dataclass(frozen=True)
class PLTrace:
    """Time-resolved PL. ``values`` are normalized; ``raw`` is in MHz when known."""

    times: np.ndarray
    values: np.ndarray
    power: float | None = None
    spin_init: SpinInit | None = None
    raw: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        y = np.asarray(self.values, dtype=float).reshape(-1)
        if t.shape != y.shape:
            raise InvalidParameterError("times and values must have the same length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise InvalidParameterError("trace times must be strictly ascending")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)
        if self.spin_init is not None:
            object.__setattr__(self, "spin_init", _spin(self.spin_init))

    def __len__(self):
        return self.times.size

    def tail_mean(self, fraction=0.2) -> float:
        n = max(1, int(round(fraction * len(self))))
        return float(self.values[-n:].mean())


def pl_trace(params: NVParams, init: StateVector, times, *, power=None, spin_init=None) -> PLTrace:
    """Model PL, normalized so that the steady-state PL equals 1."""
    rm = build_rate_matrix(params)
    t = _validate_times(times)
    rho0 = np.asarray(init, dtype=float)
    c = pl_weights(params)
    raw = propagate(rm.per_ns, rho0, t) @ c
    ss = float(c @ limit_state(rm, rho0))
    if not ss > 1e-300:
        raise NormalizationError("steady-state PL is zero (no optical pumping); cannot normalize")
    return PLTrace(t, raw / ss, power=power, spin_init=spin_init, raw=raw)
