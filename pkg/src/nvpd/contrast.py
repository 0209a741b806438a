"""OD-ESR contrast and SNR from the seven-level model.

Photon integrals ``alpha_i`` are expected photon numbers emitted during the
readout window (time-integrated PL, MHz x ns x 1e-3), multiplied by a
declared collection efficiency. Contrast is independent of that factor; SNR
is not.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .core import build_rate_matrix, pl_weights, readout_state
from .errors import EmptyBandError, InvalidParameterError, NormalizationError
from .params import MHZ_NS, NVParams, to_dict


def default_window_grid() -> np.ndarray:
    return np.geomspace(50.0, 5000.0, 50)


def default_rate_grid() -> np.ndarray:
    return np.geomspace(1e-3, 1e2, 40)


@dataclass(frozen=True)
class ReadoutWindow:
    end: float
    start: float = 0.0

    def __post_init__(self):
        if self.start != 0.0:
            raise InvalidParameterError("readout windows start at the pulse onset (t = 0)")
        if not (math.isfinite(self.end) and self.end > self.start):
            raise InvalidParameterError(f"window end must be > 0, got {self.end!r}")


@dataclass(frozen=True)
class ContrastReport:
    alpha_0: float
    alpha_1: float
    c_esr: float
    snr: float
    window: ReadoutWindow
    p_nv0: float

    def as_dict(self) -> dict:
        d = asdict(self)
        d["window"] = {"start": self.window.start, "end": self.window.end}
        return d


def window_integrals(params: NVParams, inits: np.ndarray, ends) -> np.ndarray:
    """Emitted photons in [0, end] for each end (ascending) and each initial state.

    ``inits`` holds initial populations as columns (7 x k). Integrals come from
    the exponential of the generator augmented with a PL accumulator row, so
    they are exact up to the matrix exponential.
    """
    ends = np.asarray(ends, dtype=float)
    if ends.size == 0 or ends[0] <= 0 or np.any(np.diff(ends) <= 0):
        raise InvalidParameterError("window ends must be positive and strictly ascending")
    a = np.zeros((8, 8))
    a[:7, :7] = build_rate_matrix(params).per_ns
    a[7, :7] = pl_weights(params) * MHZ_NS
    x = np.zeros((8, inits.shape[1]))
    x[:7] = inits
    out = np.empty((ends.size, inits.shape[1]))
    t = 0.0
    for k, end in enumerate(ends):
        x = linalg.expm(a * (end - t)) @ x
        t = end
        out[k] = x[7]
    return out


def _inits(params, inits):
    if inits is None:
        inits = (readout_state(params, "ms0"), readout_state(params, "ms1"))
    return np.column_stack([np.asarray(i, dtype=float) for i in inits])


def _report(a0, a1, window, p_nv0, efficiency):
    a0, a1 = a0 * efficiency, a1 * efficiency
    if not a0 > 0:
        raise NormalizationError("alpha_0 is zero; contrast undefined")
    snr = (a0 - a1) / math.sqrt(a0 + a1)
    return ContrastReport(float(a0), float(a1), float((a0 - a1) / a0), float(snr), window, p_nv0)


def compute_contrast(
    params: NVParams,
    window: ReadoutWindow,
    *,
    collection_efficiency: float = 1.0,
    inits=None,
) -> ContrastReport:
    """C_ESR = (alpha_0 - alpha_1) / alpha_0 for one readout window.

    ``inits`` overrides the (m_s = 0, m_s = 1) readout states, which by default
    carry the steady-state charge split of ``params``.
    """
    if not collection_efficiency > 0:
        raise InvalidParameterError("collection_efficiency must be positive")
    x = _inits(params, inits)
    alpha = window_integrals(params, x, [window.end])[0]
    p_nv0 = float(x[5:, 0].sum())
    return _report(alpha[0], alpha[1], window, p_nv0, collection_efficiency)


def optimize_window(
    params: NVParams,
    end_grid=None,
    *,
    collection_efficiency: float = 1.0,
    inits=None,
) -> ContrastReport:
    """Contrast at the window end maximizing C_ESR (earliest end on ties)."""
    ends = default_window_grid() if end_grid is None else np.asarray(end_grid, dtype=float)
    if not collection_efficiency > 0:
        raise InvalidParameterError("collection_efficiency must be positive")
    x = _inits(params, inits)
    alpha = window_integrals(params, x, ends)
    if not np.all(alpha[:, 0] > 0):
        raise NormalizationError("alpha_0 is zero; contrast undefined")
    c = (alpha[:, 0] - alpha[:, 1]) / alpha[:, 0]
    k = int(np.argmax(c))
    p_nv0 = float(x[5:, 0].sum())
    return _report(alpha[k, 0], alpha[k, 1], ReadoutWindow(float(ends[k])), p_nv0, collection_efficiency)


# --- grid sweeps -------------------------------------------------------------

def _check_grid(name, g):
    g = np.asarray(g, dtype=float).reshape(-1)
    if g.size == 0 or np.any(g < 0) or np.any(np.diff(g) <= 0) or not np.all(np.isfinite(g)):
        raise InvalidParameterError(f"{name} must be non-empty, non-negative and ascending")
    return g


@dataclass(frozen=True)
class SweepResult:
    """Window-optimized contrast over (gamma_ion, gamma_rec); rows follow ion_grid."""

    base: NVParams
    ion_grid: np.ndarray
    rec_grid: np.ndarray
    window_grid: np.ndarray
    c_esr: np.ndarray
    snr: np.ndarray
    p_nv0: np.ndarray
    window_end: np.ndarray
    collection_efficiency: float = 1.0

    def at(self, i, j) -> dict:
        return {
            "gamma_ion": float(self.ion_grid[i]),
            "gamma_rec": float(self.rec_grid[j]),
            "c_esr": float(self.c_esr[i, j]),
            "snr": float(self.snr[i, j]),
            "p_nv0": float(self.p_nv0[i, j]),
            "window_end": float(self.window_end[i, j]),
        }

    def manifest(self) -> dict:
        return {
            "base": to_dict(self.base),
            "ion_grid": self.ion_grid.tolist(),
            "rec_grid": self.rec_grid.tolist(),
            "window_grid": self.window_grid.tolist(),
            "collection_efficiency": self.collection_efficiency,
            "layout": "rows follow ion_grid, columns follow rec_grid",
            "quantities": ["c_esr", "snr", "p_nv0", "window_end"],
        }

    def write(self, out_dir, extra_manifest: dict | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for name in ("c_esr", "snr", "p_nv0", "window_end"):
            path = out / f"{name}.csv"
            write_matrix_csv(path, self.ion_grid, self.rec_grid, getattr(self, name))
            files.append(path)
        manifest = self.manifest()
        manifest.update(extra_manifest or {})
        path = out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        files.append(path)
        return files


def write_matrix_csv(path, rows, cols, values) -> None:
    lines = ["gamma_ion_MHz\\gamma_rec_MHz," + ",".join(repr(float(c)) for c in cols)]
    for r, row in zip(rows, values):
        lines.append(repr(float(r)) + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sweep_grid(
    base: NVParams,
    ion_grid=None,
    rec_grid=None,
    window_grid=None,
    *,
    collection_efficiency: float = 1.0,
    threads: int = 1,
) -> SweepResult:
    """Contrast, SNR and steady-state NV0 population for each (gamma_ion, gamma_rec)."""
    ion = _check_grid("ion_grid", default_rate_grid() if ion_grid is None else ion_grid)
    rec = _check_grid("rec_grid", default_rate_grid() if rec_grid is None else rec_grid)
    ends = default_window_grid() if window_grid is None else np.asarray(window_grid, dtype=float)

    def row(gi):
        out = []
        for gr in rec:
            rep = optimize_window(
                base.replace(gamma_ion=gi, gamma_rec=gr),
                ends,
                collection_efficiency=collection_efficiency,
            )
            out.append((rep.c_esr, rep.snr, rep.p_nv0, rep.window.end))
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, ion))
    else:
        rows = [row(gi) for gi in ion]
    arr = np.array(rows, dtype=float).reshape(ion.size, rec.size, 4)
    return SweepResult(
        base, ion, rec, np.asarray(ends, float),
        arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3],
        collection_efficiency,
    )


# --- decomposition -----------------------------------------------------------

PNV0_BAND = 0.01


@dataclass(frozen=True)
class Decomposition:
    c_esr_actual: float
    c_esr_no_charge: float
    c_esr_best_at_same_pnv0: float
    delta_static: float
    delta_dynamic: float
    p_nv0: float
    band: float = PNV0_BAND
    best_point: dict | None = field(default=None, compare=False)

    def as_dict(self) -> dict:
        return asdict(self)


def decompose(base: NVParams, grid: SweepResult, band: float = PNV0_BAND) -> Decomposition:
    """Split the contrast lost to charge dynamics into static and dynamic parts.

    The best contrast at the base NV0 population is the maximum over grid points
    within ``band`` of it; the base point itself is also a candidate, so the
    dynamic part is never negative.
    """
    ends = grid.window_grid
    actual = optimize_window(base, ends, collection_efficiency=grid.collection_efficiency)
    no_charge = optimize_window(
        base.without_charge_conversion(), ends, collection_efficiency=grid.collection_efficiency
    )
    mask = np.abs(grid.p_nv0 - actual.p_nv0) <= band
    if not mask.any():
        raise EmptyBandError(
            f"no grid point has P_NV0 within {band} of {actual.p_nv0:.4f}; widen the sweep"
        )
    idx = np.argwhere(mask)
    k = int(np.argmax(grid.c_esr[mask]))
    best_point = grid.at(*idx[k])
    best = float(grid.c_esr[mask][k])
    if actual.c_esr > best:
        best = actual.c_esr
        best_point = {"gamma_ion": base.gamma_ion, "gamma_rec": base.gamma_rec,
                      "c_esr": actual.c_esr, "p_nv0": actual.p_nv0, "window_end": actual.window.end}
    return Decomposition(
        c_esr_actual=actual.c_esr,
        c_esr_no_charge=no_charge.c_esr,
        c_esr_best_at_same_pnv0=best,
        delta_static=no_charge.c_esr - best,
        delta_dynamic=best - actual.c_esr,
        p_nv0=actual.p_nv0,
        band=band,
        best_point=best_point,
    )


@dataclass(frozen=True)
class ContrastScatter:
    """Scatter of (P_NV0, C_ESR) over a sweep.

    ``bin_max_*`` are the raw maxima of each occupied P_NV0 bin. A coarse grid
    leaves some bins populated only by fast-conversion points, so those maxima
    can dip; ``envelope_c_esr`` is the running maximum taken from high to low
    P_NV0, i.e. the best contrast seen at this or any larger NV0 population.
    """

    p_nv0: np.ndarray
    c_esr: np.ndarray
    bin_max_p_nv0: np.ndarray  # P_NV0 of each occupied bin's best point
    bin_max_c_esr: np.ndarray
    envelope_c_esr: np.ndarray

    def envelope_is_monotone(self) -> bool:
        return bool(np.all(np.diff(self.envelope_c_esr) <= 0))


def contrast_vs_pnv0(grid: SweepResult, bin_width: float = 0.01) -> ContrastScatter:
    """All (P_NV0, C_ESR) points plus the per-bin maxima and their monotone envelope."""
    p = grid.p_nv0.ravel()
    c = grid.c_esr.ravel()
    if p.size == 0:
        raise InvalidParameterError("empty grid")
    nbins = int(round(1.0 / bin_width))
    bins = np.minimum((p / bin_width).astype(int), nbins - 1)
    best = []
    for b in np.unique(bins):
        members = np.flatnonzero(bins == b)
        best.append(members[np.argmax(c[members])])
    best = np.array(best)
    envelope = np.maximum.accumulate(c[best][::-1])[::-1]
    return ContrastScatter(p, c, p[best], c[best], envelope)
