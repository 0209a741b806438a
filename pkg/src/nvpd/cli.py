"""Command-line front end: ``nvpd <command> --config run.json``.

Each run reads one JSON config. Flags only override scalar entries
(``--out``, ``--seed``, ``--threads``). Exit codes: 0 success, 2 schema or
parameter error, 3 numerical failure, 4 IO error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .contrast import contrast_vs_pnv0, decompose, default_rate_grid, default_window_grid, sweep_grid
from .core import PLTrace, SpinInit, pl_trace, readout_state
from .errors import InvalidParameterError, NVPDError, SchemaError
from .kinetics import fit_exponential_decay, fit_power_law, loglog_slope, read_decay_csv, read_power_csv
from .params import NVParams, PowerScaling, params_from_lifetimes, to_dict
from .pipeline import (
    DEFAULT_BIN_WIDTH,
    FREE_PARAMS,
    FitConfig,
    _schema_error,
    fit_global,
    fit_no_charge,
    preprocess,
    read_raw,
    synthesize,
    synthesize_bundle,
    write_curves_csv,
    write_raw,
)

log = logging.getLogger("nvpd")

EXIT_OK, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

# --- schemas -----------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_RATE_KEYS = (
    "gamma_532", "gamma_es", "gamma_es1_to_a1", "gamma_es0_to_a1", "gamma_a1",
    "p_a1_to_gs1", "gamma_ion", "gamma_rec", "gamma_es_nv0", "gamma_532_nv0",
)
_LIFETIME_KEYS = (
    "gamma_es", "es0_tau", "es1_tau", "a1_tau", "gamma_532", "p_a1_to_gs1",
    "gamma_ion", "gamma_rec", "gamma_es_nv0", "gamma_532_nv0",
)


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


PARAMS_SCHEMA = _obj({k: _NUM for k in _RATE_KEYS}, _RATE_KEYS[:6])
LIFETIMES_SCHEMA = _obj({k: _NUM for k in _LIFETIME_KEYS}, _LIFETIME_KEYS[:4] + ("p_a1_to_gs1",))
# intrinsic block for power series: no photo-induced rates
INTRINSIC_SCHEMA = {
    "oneOf": [
        _obj({k: _NUM for k in ("gamma_es", "es0_tau", "es1_tau", "a1_tau", "p_a1_to_gs1", "gamma_es_nv0")},
             ("gamma_es", "es0_tau", "es1_tau", "a1_tau", "p_a1_to_gs1")),
        _obj({k: _NUM for k in ("gamma_es", "gamma_es1_to_a1", "gamma_es0_to_a1", "gamma_a1", "p_a1_to_gs1", "gamma_es_nv0")},
             ("gamma_es", "gamma_es1_to_a1", "gamma_es0_to_a1", "gamma_a1", "p_a1_to_gs1")),
    ]
}
SCALING_SCHEMA = _obj({k: _NUM for k in ("beta_532", "beta_ion", "beta_ion2", "beta_rec", "beta_rec2")}, ("beta_532", "beta_ion"))

MODEL_SCHEMA = {
    "oneOf": [
        _obj({"params": PARAMS_SCHEMA}, ["params"]),
        _obj({"lifetimes": LIFETIMES_SCHEMA}, ["lifetimes"]),
        _obj({"scaling": SCALING_SCHEMA, "intrinsic": INTRINSIC_SCHEMA}, ["scaling", "intrinsic"]),
    ]
}
FIXED_MODEL_SCHEMA = {"oneOf": MODEL_SCHEMA["oneOf"][:2]}

GRID_SCHEMA = {
    "oneOf": [
        {"type": "array", "items": _NONNEG, "minItems": 1},
        _obj({"start": _POS, "stop": _POS, "num": {"type": "integer", "minimum": 1}}, ["start", "stop", "num"]),
    ]
}
POWERS = {"type": "array", "items": _POS, "minItems": 1}
COMMON = {"out": {"type": "string"}, "seed": {"type": ["integer", "null"], "minimum": 0},
          "threads": {"type": "integer", "minimum": 1}}

FIT_SCHEMA = _obj(
    {
        "power_list": POWERS,
        "smoothing_block": {"type": "integer", "minimum": 1},
        "t0_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "tail_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "initial": _obj({k: _NUM for k in FREE_PARAMS}),
        "bounds": _obj({k: {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2} for k in FREE_PARAMS}),
        "multistart_grid": {"type": "array", "items": _NONNEG, "minItems": 1},
        "nested_start": {"type": "boolean"},
        "model_normalization": {"enum": ["tail", "steady_state"]},
        "max_nfev": {"type": "integer", "minimum": 1},
        "ftol": _POS, "xtol": _POS, "gtol": _POS,
    }
)

SCHEMAS = {
    "simulate": _obj(
        {
            **COMMON,
            "model": MODEL_SCHEMA,
            "powers": POWERS,
            "spin_inits": {"type": "array", "items": {"enum": ["ms0", "ms1"]}, "minItems": 1},
            "duration_ns": _NONNEG,
            "dt_ns": _POS,
        },
        ["model", "duration_ns"],
    ),
    "synth": _obj(
        {
            **COMMON,
            "model": MODEL_SCHEMA,
            "powers": POWERS,
            "format": {"enum": ["raw", "pl"]},
            "duration_ns": _POS,
            "dt_ns": _POS,
            "photon_scale": {"type": ["number", "null"], "exclusiveMinimum": 0},
            "lead_ns": _NONNEG,
            "background": _NONNEG,
            "bin_width_ps": _POS,
            "tail_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        },
        ["model", "powers", "duration_ns"],
    ),
    "fit": _obj(
        {
            **COMMON,
            "traces": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "trace_dir": {"type": "string"},
            "format": {"enum": ["raw", "pl"]},
            "no_charge": {"type": "boolean"},
            "fit": FIT_SCHEMA,
        },
        ["fit"],
    ),
    "sweep": _obj(
        {
            **COMMON,
            "model": FIXED_MODEL_SCHEMA,
            "ion_grid": GRID_SCHEMA,
            "rec_grid": GRID_SCHEMA,
            "window_grid": GRID_SCHEMA,
            "collection_efficiency": _POS,
        },
        ["model"],
    ),
    "decompose": _obj(
        {
            **COMMON,
            "model": FIXED_MODEL_SCHEMA,
            "ion_grid": GRID_SCHEMA,
            "rec_grid": GRID_SCHEMA,
            "window_grid": GRID_SCHEMA,
            "collection_efficiency": _POS,
            "band": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "bin_width": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        },
        ["model"],
    ),
    "kinetics": _obj(
        {
            **COMMON,
            "decay_csv": {"oneOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}, "minItems": 1}]},
            "power_csv": {"type": "string"},
        }
    ),
}

# --- helpers -----------------------------------------------------------------


def validate_config(command: str, doc) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is None:
        return
    # descend into oneOf alternatives to name the offending leaf field
    while err.context:
        err = jsonschema.exceptions.best_match(err.context)
    raise _schema_error(err, f"{command} config")


def config_hash(doc: dict) -> str:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _grid(grid, default):
    if grid is None:
        return default()
    if isinstance(grid, dict):
        return np.geomspace(grid["start"], grid["stop"], grid["num"])
    return np.asarray(grid, dtype=float)


def _intrinsic(doc: dict) -> NVParams:
    doc = dict(doc)
    if "es0_tau" in doc:
        return params_from_lifetimes(
            doc.pop("gamma_es"), doc.pop("es0_tau"), doc.pop("es1_tau"), doc.pop("a1_tau"),
            gamma_532=0.0, **doc,
        )
    return NVParams(gamma_532=0.0, **doc)


def build_model(doc: dict):
    """``NVParams`` for fixed-rate blocks, ``(PowerScaling, NVParams)`` for power series."""
    if "params" in doc:
        return NVParams(**doc["params"])
    if "lifetimes" in doc:
        lt = dict(doc["lifetimes"])
        return params_from_lifetimes(lt.pop("gamma_es"), lt.pop("es0_tau"), lt.pop("es1_tau"), lt.pop("a1_tau"), **lt)
    return PowerScaling(**doc["scaling"]), _intrinsic(doc["intrinsic"])


def _model_at(model, power):
    if isinstance(model, NVParams):
        return model
    scaling, intrinsic = model
    return scaling.params_at(power, intrinsic)


def _resolve_path(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _manifest(command, cfg, files, out: Path, extra=None) -> dict:
    # the output location does not change results, so it stays out of the hash
    cfg = {k: v for k, v in cfg.items() if k != "out"}
    doc = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "units": {"rate": "MHz", "time": "ns", "power": "uW"},
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
    }
    doc.update(extra or {})
    _write_json(out / "manifest.json", doc)
    return doc


def _trace_name(power, spin) -> str:
    tag = "none" if power is None else f"{power:g}uW"
    return f"trace_{tag}_{SpinInit(spin).value}"


def _fmt(x) -> str:
    return repr(float(x))


# --- commands ----------------------------------------------------------------


def cmd_simulate(cfg: dict, out: Path, base: Path) -> list[Path]:
    model = build_model(cfg["model"])
    powers = cfg.get("powers")
    if powers is None:
        if not isinstance(model, NVParams):
            raise SchemaError("simulate config: field 'powers': required for a scaling model")
        powers = [None]
    spins = cfg.get("spin_inits", ["ms0", "ms1"])
    duration, dt = float(cfg["duration_ns"]), float(cfg.get("dt_ns", 1.0))
    times = np.arange(int(np.floor(duration / dt + 1e-9))) * dt
    files = []
    for p in powers:
        params = _model_at(model, p)
        for s in spins:
            tr = pl_trace(params, readout_state(params, s), times, power=p, spin_init=s)
            path = out / f"{_trace_name(p, s)}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["time_ns", "pl", "pl_raw_MHz"])
                for t, y, r in zip(tr.times, tr.values, tr.raw):
                    w.writerow([_fmt(t), _fmt(y), _fmt(r)])
            files.append(path)
    return files


def write_pl_trace(tr: PLTrace, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ns", "pl"])
        for t, y in zip(tr.times, tr.values):
            w.writerow([_fmt(t), _fmt(y)])
    side = {"power_uW": tr.power, "spin_init": tr.spin_init.value}
    _write_json(path.with_suffix(".json"), side)


PL_SIDECAR_SCHEMA = _obj({"power_uW": _POS, "spin_init": {"enum": ["ms0", "ms1"]}}, ["power_uW", "spin_init"])


def read_pl_trace(path: Path) -> PLTrace:
    side = path.with_suffix(".json")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{side}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(meta, PL_SIDECAR_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise _schema_error(exc, side) from None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
        if [h.strip() for h in header] != ["time_ns", "pl"]:
            raise SchemaError(f"{path}: expected header time_ns,pl")
        rows = np.array([[float(a), float(b)] for a, b in reader], dtype=float).reshape(-1, 2)
    return PLTrace(rows[:, 0], rows[:, 1], power=meta["power_uW"], spin_init=meta["spin_init"])


def cmd_synth(cfg: dict, out: Path, base: Path) -> list[Path]:
    model = build_model(cfg["model"])
    powers = [float(p) for p in cfg["powers"]]
    fmt = cfg.get("format", "raw")
    seed = cfg.get("seed")
    files = []
    if fmt == "pl":
        if isinstance(model, NVParams):
            raise SchemaError("synth config: field 'model': format 'pl' needs a scaling model")
        traces = synthesize_bundle(
            model[0], model[1], powers,
            duration=float(cfg["duration_ns"]),
            dt=float(cfg.get("dt_ns", 12.8)),
            photon_scale=cfg.get("photon_scale"),
            seed=seed,
            tail_fraction=float(cfg.get("tail_fraction", 0.2)),
        )
        for tr in traces:
            path = out / f"{_trace_name(tr.power, tr.spin_init)}.csv"
            write_pl_trace(tr, path)
            files += [path, path.with_suffix(".json")]
        return files
    # one child seed per trace keeps each file independent of the trace order
    seeds = np.random.SeedSequence(seed).spawn(2 * len(powers)) if seed is not None else [None] * (2 * len(powers))
    k = 0
    for p in powers:
        for s in SpinInit:
            raw = synthesize(
                model, p, s, float(cfg["duration_ns"]),
                photon_scale=cfg.get("photon_scale"),
                seed=None if seeds[k] is None else np.random.default_rng(seeds[k]),
                lead=float(cfg.get("lead_ns", 64.0)),
                background=float(cfg.get("background", 0.0)),
                bin_width=float(cfg.get("bin_width_ps", DEFAULT_BIN_WIDTH * 1e3)) * 1e-3,
            )
            k += 1
            files += list(write_raw(raw, out / f"{_trace_name(p, s)}.csv"))
    return files


def _load_traces(cfg: dict, base: Path, fit_cfg: FitConfig) -> list[PLTrace]:
    if "traces" in cfg:
        paths = [_resolve_path(base, p) for p in cfg["traces"]]
    elif "trace_dir" in cfg:
        paths = sorted(_resolve_path(base, cfg["trace_dir"]).glob("trace_*.csv"))
    else:
        raise SchemaError("fit config: field 'traces': give 'traces' or 'trace_dir'")
    if not paths:
        raise InvalidParameterError("no trace files found")
    if cfg.get("format", "raw") == "pl":
        # already cropped and normalized
        return [read_pl_trace(p) for p in paths]
    return [preprocess(read_raw(p), fit_cfg) for p in paths]


def cmd_fit(cfg: dict, out: Path, base: Path) -> list[Path]:
    fit_doc = dict(cfg["fit"])
    if "bounds" in fit_doc:
        fit_doc["bounds"] = {k: tuple(v) for k, v in fit_doc["bounds"].items()}
    fit_cfg = FitConfig(threads=int(cfg.get("threads", 1)), **fit_doc)
    traces = _load_traces(cfg, base, fit_cfg)
    if cfg.get("no_charge", False):
        result = fit_no_charge(traces, fit_cfg)
    else:
        result = fit_global(traces, fit_cfg)
    files = [out / "fit_result.json", out / "starts.csv", out / "summary.csv", out / "curves.csv"]
    _write_json(files[0], result.as_dict())
    with open(files[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["beta_ion_guess", "cost", "nfev", "status", "converged"])
        for s in result.starts:
            w.writerow(["nested" if s.beta_ion_guess is None else _fmt(s.beta_ion_guess),
                        _fmt(s.cost), s.nfev, s.status, s.converged])
    row = result.summary_row()
    with open(files[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(row))
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in row.values()])
    write_curves_csv(files[3], result, traces, fit_cfg)
    return files


def _sweep(cfg):
    base = build_model(cfg["model"])
    return base, sweep_grid(
        base,
        _grid(cfg.get("ion_grid"), default_rate_grid),
        _grid(cfg.get("rec_grid"), default_rate_grid),
        _grid(cfg.get("window_grid"), default_window_grid),
        collection_efficiency=float(cfg.get("collection_efficiency", 1.0)),
        threads=int(cfg.get("threads", 1)),
    )


def cmd_sweep(cfg: dict, out: Path, base: Path) -> list[Path]:
    _, grid = _sweep(cfg)
    files = grid.write(out)
    # grid.write emits its own manifest; the run manifest below replaces it
    return [f for f in files if f.name != "manifest.json"]


def cmd_decompose(cfg: dict, out: Path, base: Path) -> list[Path]:
    params, grid = _sweep(cfg)
    dec = decompose(params, grid, float(cfg.get("band", 0.01)))
    scatter = contrast_vs_pnv0(grid, float(cfg.get("bin_width", 0.01)))
    files = [out / "decomposition.json", out / "envelope.csv"]
    _write_json(files[0], {**dec.as_dict(), "base": to_dict(params)})
    with open(files[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["p_nv0", "bin_max_c_esr", "envelope_c_esr"])
        for p, c, e in zip(scatter.bin_max_p_nv0, scatter.bin_max_c_esr, scatter.envelope_c_esr):
            w.writerow([_fmt(p), _fmt(c), _fmt(e)])
    return files


def cmd_kinetics(cfg: dict, out: Path, base: Path) -> list[Path]:
    if "decay_csv" not in cfg and "power_csv" not in cfg:
        raise SchemaError("kinetics config: field 'decay_csv': give 'decay_csv' and/or 'power_csv'")
    doc = {}
    decays = cfg.get("decay_csv", [])
    decays = [decays] if isinstance(decays, str) else decays
    if decays:
        doc["decays"] = []
        for p in decays:
            fit = fit_exponential_decay(read_decay_csv(_resolve_path(base, p)))
            doc["decays"].append({"file": p, "r_tot_per_s": fit.rate, **fit.as_dict()})
    if "power_csv" in cfg:
        pts = read_power_csv(_resolve_path(base, cfg["power_csv"]))
        fit = fit_power_law(pts)
        pos = pts[pts[:, 1] > 0]
        doc["power_law"] = {
            "file": cfg["power_csv"],
            "form": "a*p^2 + b*p",
            "a_per_s_per_uW2": fit.a,
            "b_per_s_per_uW": fit.b,
            "residual": fit.residual,
            "loglog_slope": loglog_slope(pos[:, 0], pos[:, 1]) if len(pos) >= 2 else None,
        }
    path = out / "kinetics.json"
    _write_json(path, doc)
    return [path]


COMMANDS = {
    "simulate": cmd_simulate,
    "synth": cmd_synth,
    "fit": cmd_fit,
    "sweep": cmd_sweep,
    "decompose": cmd_decompose,
    "kinetics": cmd_kinetics,
}

# --- entry point -------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="RNG seed (overrides config 'seed')")
    common.add_argument("--threads", type=int, help="worker threads (default: $NVPD_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    ap = argparse.ArgumentParser(prog="nvpd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"nvpd {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "fit":
            sp.add_argument("--no-charge", action="store_true", help="fit without NV0 (gamma_ion = gamma_rec = 0)")
    return ap


def _effective_config(args) -> tuple[dict, Path]:
    if args.config is None:
        raise SchemaError(f"{args.command}: --config is required")
    try:
        doc = json.loads(args.config.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{args.config}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{args.config}: top level must be an object")
    doc = copy.deepcopy(doc)
    if args.out is not None:
        doc["out"] = str(args.out)
    if args.seed is not None:
        doc["seed"] = args.seed
    threads = args.threads
    if threads is None and os.environ.get("NVPD_THREADS"):
        try:
            threads = int(os.environ["NVPD_THREADS"])
        except ValueError:
            raise SchemaError(f"NVPD_THREADS must be an integer, got {os.environ['NVPD_THREADS']!r}") from None
    if threads is not None:
        doc["threads"] = threads
    if getattr(args, "no_charge", False):
        doc["no_charge"] = True
    validate_config(args.command, doc)
    return doc, args.config.resolve().parent


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg, base = _effective_config(args)
        out = _resolve_path(Path.cwd(), cfg.get("out", "out"))
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, out, base)
        _manifest(args.command, cfg, files, out)
    except (SchemaError, InvalidParameterError) as exc:
        print(f"nvpd: error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NVPDError as exc:
        print(f"nvpd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"nvpd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"nvpd: IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(out)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
