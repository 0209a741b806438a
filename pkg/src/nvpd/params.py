"""Parameter containers for the seven-level NV model.

Units are fixed throughout the package: rates in MHz, times in ns and
optical powers in uW. Lifetimes are quoted in ns, so a lifetime ``tau``
corresponds to a rate of ``1000 / tau`` MHz.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import InvalidLifetimeError, InvalidParameterError

UNITS = {"rate": "MHz", "time": "ns", "power": "uW"}

# rate (MHz) x time (ns) -> dimensionless
MHZ_NS = 1e-3


def _check_rate(name, value):
    if not math.isfinite(value):
        raise InvalidParameterError(f"{name} must be finite, got {value!r}")
    if value < 0:
        raise InvalidParameterError(f"{name} must be >= 0, got {value!r}")


@dataclass(frozen=True)
class NVParams:
    """Transition rates of the seven-level NV-/NV0 model.

    ``gamma_532_nv0`` defaults to ``gamma_532 / 3`` when omitted, which is the
    constraint used when fitting power series.
    """

    gamma_532: float
    gamma_es: float
    gamma_es1_to_a1: float
    gamma_es0_to_a1: float
    gamma_a1: float
    p_a1_to_gs1: float
    gamma_ion: float = 0.0
    gamma_rec: float = 0.0
    gamma_es_nv0: float = 0.0
    gamma_532_nv0: float | None = None

    def __post_init__(self):
        if self.gamma_532_nv0 is None:
            object.__setattr__(self, "gamma_532_nv0", self.gamma_532 / 3.0)
        for f in fields(self):
            object.__setattr__(self, f.name, float(getattr(self, f.name)))
        self.validate()

    def validate(self):
        for f in fields(self):
            if f.name != "p_a1_to_gs1":
                _check_rate(f.name, getattr(self, f.name))
        p = self.p_a1_to_gs1
        if not (math.isfinite(p) and 0.0 <= p <= 1.0):
            raise InvalidParameterError(f"p_a1_to_gs1 must lie in [0, 1], got {p!r}")

    @property
    def nv0_constrained(self) -> bool:
        return self.gamma_532_nv0 == self.gamma_532 / 3.0

    def replace(self, **changes) -> "NVParams":
        """Copy with some fields changed.

        Changing ``gamma_532`` on a constrained instance keeps the NV0 pumping
        tied to it unless ``gamma_532_nv0`` is given explicitly.
        """
        if "gamma_532" in changes and "gamma_532_nv0" not in changes and self.nv0_constrained:
            changes["gamma_532_nv0"] = None
        return dataclasses.replace(self, **changes)

    def without_charge_conversion(self) -> "NVParams":
        return self.replace(gamma_ion=0.0, gamma_rec=0.0)

    def lifetimes(self) -> tuple[float, float, float]:
        """Effective (ES0, ES1, A1) lifetimes in ns, ignoring ionization."""
        return lifetimes(self)


def params_from_lifetimes(
    gamma_es: float,
    es0_tau: float,
    es1_tau: float,
    a1_tau: float,
    *,
    gamma_532: float,
    p_a1_to_gs1: float,
    gamma_ion: float = 0.0,
    gamma_rec: float = 0.0,
    gamma_es_nv0: float = 0.0,
    gamma_532_nv0: float | None = None,
) -> NVParams:
    """Build :class:`NVParams` from tabulated effective lifetimes.

    The ES lifetimes include radiative decay and intersystem crossing only:
    ``tau_ES0 = 1 / (gamma_es + gamma_es0_to_a1)`` and likewise for ES1;
    ``tau_A1 = 1 / gamma_a1``.
    """
    for name, tau in (("es0_tau", es0_tau), ("es1_tau", es1_tau), ("a1_tau", a1_tau)):
        if not (math.isfinite(tau) and tau > 0):
            raise InvalidLifetimeError(f"{name} must be positive, got {tau!r}")
    _check_rate("gamma_es", gamma_es)
    isc = []
    for name, tau in (("es0_tau", es0_tau), ("es1_tau", es1_tau)):
        g = 1.0 / (tau * MHZ_NS) - gamma_es
        # absorb round-off at the boundary tau == 1/gamma_es
        if -1e-9 * max(gamma_es, 1.0) < g < 0:
            g = 0.0
        if g < 0:
            raise InvalidLifetimeError(
                f"{name}={tau} ns is longer than the radiative lifetime "
                f"{1.0 / (gamma_es * MHZ_NS):.6g} ns implied by gamma_es={gamma_es} MHz"
            )
        isc.append(g)
    return NVParams(
        gamma_532=gamma_532,
        gamma_es=gamma_es,
        gamma_es1_to_a1=isc[1],
        gamma_es0_to_a1=isc[0],
        gamma_a1=1.0 / (a1_tau * MHZ_NS),
        p_a1_to_gs1=p_a1_to_gs1,
        gamma_ion=gamma_ion,
        gamma_rec=gamma_rec,
        gamma_es_nv0=gamma_es_nv0,
        gamma_532_nv0=gamma_532_nv0,
    )


def lifetimes(params: NVParams) -> tuple[float, float, float]:
    es0 = 1.0 / ((params.gamma_es + params.gamma_es0_to_a1) * MHZ_NS)
    es1 = 1.0 / ((params.gamma_es + params.gamma_es1_to_a1) * MHZ_NS)
    a1 = math.inf if params.gamma_a1 == 0 else 1.0 / (params.gamma_a1 * MHZ_NS)
    return es0, es1, a1


@dataclass(frozen=True)
class PowerScaling:
    """Linear-plus-quadratic dependence of the photo-induced rates on power.

    gamma_532(p) = beta_532 p
    gamma_ion(p) = beta_ion p + beta_ion2 p**2     (beta_ion2 <= 0)
    gamma_rec(p) = beta_rec p + beta_rec2 p**2     (beta_rec2 >= 0)
    """

    beta_532: float
    beta_ion: float
    beta_ion2: float = 0.0
    beta_rec: float = 0.0
    beta_rec2: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v):
                raise InvalidParameterError(f"{f.name} must be finite, got {v!r}")
            object.__setattr__(self, f.name, v)
        for name in ("beta_532", "beta_ion", "beta_rec"):
            _check_rate(name, getattr(self, name))
        if self.beta_ion2 > 0:
            raise InvalidParameterError(f"beta_ion2 must be <= 0, got {self.beta_ion2}")
        if self.beta_rec2 < 0:
            raise InvalidParameterError(f"beta_rec2 must be >= 0, got {self.beta_rec2}")

    def gamma_532(self, power):
        return self.beta_532 * power

    def gamma_ion(self, power):
        return self.beta_ion * power + self.beta_ion2 * power**2

    def gamma_rec(self, power):
        return self.beta_rec * power + self.beta_rec2 * power**2

    def max_valid_power(self) -> float:
        """Largest power for which gamma_ion(p) stays non-negative."""
        if self.beta_ion2 == 0:
            return math.inf
        return -self.beta_ion / self.beta_ion2

    def check_range(self, powers) -> None:
        pmax = max(powers)
        if pmax > self.max_valid_power() * (1 + 1e-12):
            raise InvalidParameterError(
                f"gamma_ion becomes negative above {self.max_valid_power():.6g} uW "
                f"(requested up to {pmax} uW)"
            )

    def params_at(self, power: float, intrinsic: NVParams) -> NVParams:
        """Seven-level rates at ``power``; NV0 pumping tied to gamma_532 / 3."""
        self.check_range([power])
        g532 = self.gamma_532(power)
        return intrinsic.replace(
            gamma_532=g532,
            gamma_532_nv0=g532 / 3.0,
            gamma_ion=max(self.gamma_ion(power), 0.0),
            gamma_rec=self.gamma_rec(power),
        )


# --- JSON -----------------------------------------------------------------

_KINDS = {"NVParams": NVParams, "PowerScaling": PowerScaling}


def to_dict(obj) -> dict:
    kind = type(obj).__name__
    if kind not in _KINDS:
        raise TypeError(f"cannot serialize {kind}")
    doc = {f.name: getattr(obj, f.name) for f in fields(obj)}
    doc["kind"] = kind
    doc["units"] = dict(UNITS)
    return doc


def from_dict(doc: dict, kind: str | None = None):
    doc = dict(doc)
    units = doc.pop("units", None)
    if units is not None and units != UNITS:
        raise InvalidParameterError(f"unsupported units {units!r}; expected {UNITS!r}")
    kind = doc.pop("kind", None) or kind
    if kind not in _KINDS:
        raise InvalidParameterError(f"unknown parameter kind {kind!r}")
    cls = _KINDS[kind]
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise InvalidParameterError(f"unknown {kind} keys: {', '.join(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise InvalidParameterError(str(exc)) from None


def dumps(obj, **kw) -> str:
    return json.dumps(to_dict(obj), indent=2, **kw)


def loads(text: str, kind: str | None = None):
    return from_dict(json.loads(text), kind)


def save(obj, path) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def load(path, kind: str | None = None):
    return loads(Path(path).read_text(encoding="utf-8"), kind)
