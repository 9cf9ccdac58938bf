"""Command-line front end.

Subcommands ``synth``, ``fit``, ``scan`` and ``calibrate-tau`` read a TOML
configuration (see the README for the schema) and write self-describing text
files.  Exit codes: 0 success, 1 configuration error, 2 I/O error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, calib, profiles, sweepsim
from .filters import FilterError, FilterSpec, SweepSpec, frequency_constant
from .fit import DEFAULT_FREE, FitError, FitProblem, fit_spectrum
from .forward import PARAM_NAMES, DistortionModel, ForwardError, Spectrum, evaluate
from .profiles import LineParams

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

SPECTRUM_COLUMNS = ("frequency_MHz", "signal")
RESIDUAL_COLUMNS = ("frequency_MHz", "residual")


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration schema

_NUM = (int, float)
_LINE_KEYS = {k: _NUM for k in PARAM_NAMES}

SCHEMA = {
    "synth": {
        "mode": str, "model": str, "thick": bool, "noise_sigma": _NUM, "seed": int,
        "direction": str,
    },
    "line": _LINE_KEYS,
    "filter": {"order": int, "q": _NUM, "tau_d": _NUM},
    "sweep": {"delta_nu": _NUM, "delta_t": _NUM, "start": _NUM, "stop": _NUM, "nu_d": _NUM,
              "init": str},
    "fit": {"model": str, "free": list, "correction": bool, "thick": bool, "max_nfev": int,
            "sweep_rate": _NUM, "nu_d": _NUM, "initial": dict},
    "scan": {"kind": str, "ratios": list, "delta_nu_rel": _NUM, "nu_d_rel_grid": list,
             "delta_nu_rel_grid": list, "target": _NUM, "continuous": bool},
    "calibrate": {"method": str, "bounds": list, "model": str, "free": list, "datasets": list,
                  "initial": dict},
}

_CHOICES = {
    ("synth", "mode"): ("step", "continuous"),
    ("synth", "model"): profiles.MODELS,
    ("synth", "direction"): ("up", "down", "both"),
    ("sweep", "init"): ("steady", "zero"),
    ("fit", "model"): profiles.MODELS,
    ("scan", "kind"): ("av", "width", "center", "budget"),
    ("calibrate", "method"): ("continuous", "step"),
    ("calibrate", "model"): profiles.MODELS,
}


def validate_config(cfg: dict) -> dict:
    """Reject unknown sections/keys and wrongly typed values."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a table")
    for sec, body in cfg.items():
        if sec not in SCHEMA:
            raise ConfigError(f"{sec}: unknown section")
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: must be a table")
        for key, val in body.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{sec}.{key}: unknown key")
            typ = SCHEMA[sec][key]
            # bool is an int subclass; only accept it where bool is declared
            ok = isinstance(val, typ) and (typ is bool or not isinstance(val, bool))
            if not ok:
                raise ConfigError(f"{sec}.{key}: expected {_type_name(typ)}, got {val!r}")
            choices = _CHOICES.get((sec, key))
            if choices and val not in choices:
                raise ConfigError(f"{sec}.{key}: must be one of {list(choices)}, got {val!r}")
    for sec in ("fit", "calibrate"):
        init = cfg.get(sec, {}).get("initial")
        if init is not None:
            for key, val in init.items():
                if key not in PARAM_NAMES:
                    raise ConfigError(f"{sec}.initial.{key}: unknown key")
                if not isinstance(val, _NUM) or isinstance(val, bool):
                    raise ConfigError(f"{sec}.initial.{key}: expected number")
    return cfg


def _type_name(typ):
    if typ == _NUM:
        return "number"
    return getattr(typ, "__name__", str(typ))


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return validate_config(cfg)


def _need(cfg, sec, key):
    try:
        return cfg[sec][key]
    except KeyError:
        raise ConfigError(f"{sec}.{key}: required") from None


def _filter(cfg, default=None) -> FilterSpec:
    sec = cfg.get("filter")
    if sec is None:
        if default is not None:
            return default
        raise ConfigError("filter: section required")
    order = sec.get("order", 2)
    q = sec.get("q", 0.5 if order == 2 else 0.0)
    try:
        return FilterSpec(order, float(q), float(sec.get("tau_d", 1.0)))
    except FilterError as exc:
        raise ConfigError(f"filter: {exc}") from exc


def _line(sec: dict) -> LineParams:
    try:
        return LineParams(**{k: float(v) for k, v in sec.items()})
    except profiles.ProfileError as exc:
        raise ConfigError(f"line: {exc}") from exc


# ---------------------------------------------------------------------------
# files


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def write_columns(path, columns, rows, meta: dict):
    """Text table: ``# key: json`` metadata, ``# columns:`` line, then data."""
    lines = [f"# {k}: {_dumps(v)}" for k, v in sorted(meta.items())]
    lines.append("# columns: " + " ".join(columns))
    for row in rows:
        lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return "%.17g" % v


def read_columns(path):
    meta, columns, data = {}, None, []
    with open(path, encoding="utf-8", errors="strict") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                key, sep, val = body.partition(":")
                if not sep:
                    continue
                key = key.strip()
                if key == "columns":
                    columns = val.split()
                else:
                    try:
                        meta[key] = json.loads(val)
                    except json.JSONDecodeError:
                        meta[key] = val.strip()
                continue
            try:
                data.append([float(t) for t in line.split()])
            except ValueError:
                raise OSError(f"{path}: malformed data line {line!r}") from None
    if not data or len({len(r) for r in data}) != 1:
        raise OSError(f"{path}: no data rows or ragged columns")
    return meta, columns, np.array(data)


def write_spectrum(path, spec: Spectrum, meta: dict):
    write_columns(path, SPECTRUM_COLUMNS, zip(spec.freqs, spec.signal), meta)


def read_spectrum(path) -> Spectrum:
    meta, columns, data = read_columns(path)
    if data.ndim != 2 or data.shape[1] != 2:
        raise OSError(f"{path}: expected two numeric columns")
    if columns is not None and list(columns) != list(SPECTRUM_COLUMNS):
        raise OSError(f"{path}: unexpected columns {columns}")
    try:
        return Spectrum(data[:, 0], data[:, 1], meta)
    except (ForwardError, profiles.ProfileError) as exc:
        raise OSError(f"{path}: {exc}") from exc


def write_table(path, header, rows, meta: dict):
    """Tab-separated table; the header row names every column with its unit."""
    lines = [f"# {k}: {_dumps(v)}" for k, v in sorted(meta.items())]
    lines.append("\t".join(header))
    for row in rows:
        lines.append("\t".join(_fmt(v) if not isinstance(v, str) else v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path):
    """Inverse of :func:`write_table`: ``(meta, header, rows)`` with string cells."""
    meta, header, rows = {}, None, []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if line.startswith("#"):
                key, sep, val = line[1:].strip().partition(":")
                if sep:
                    meta[key.strip()] = json.loads(val)
            elif header is None:
                header = line.split("\t")
            elif line:
                rows.append(line.split("\t"))
    if header is None:
        raise OSError(f"{path}: missing header row")
    return meta, header, rows


def _provenance(command: str, cfg: dict, **extra) -> dict:
    meta = {"generator": f"linedistort {command}", "version": __version__, "config": cfg}
    meta.update(extra)
    return meta


def _suffixed(path: Path, tag: str) -> Path:
    return path.with_name(f"{path.stem}_{tag}{path.suffix}")


# ---------------------------------------------------------------------------
# synth


def synthesize(cfg: dict, seed=None):
    """Spectra described by ``cfg`` as ``[(direction, Spectrum, meta)]``."""
    syn = cfg.get("synth", {})
    mode = syn.get("mode", "continuous")
    model = syn.get("model", "voigt")
    thick = syn.get("thick", False)
    sigma = float(syn.get("noise_sigma", 0.0))
    if sigma < 0:
        raise ConfigError("synth.noise_sigma: must be >= 0")
    seed = syn.get("seed", 0) if seed is None else seed
    direction = syn.get("direction", "up")
    p = _line(cfg.get("line", {}))
    sw = cfg.get("sweep", {})
    start, stop = float(_need(cfg, "sweep", "start")), float(_need(cfg, "sweep", "stop"))
    dnu = abs(float(_need(cfg, "sweep", "delta_nu")))
    if not stop > start or dnu == 0:
        raise ConfigError("sweep: need start < stop and delta_nu != 0")
    dirs = ["up", "down"] if direction == "both" else [direction]
    streams = np.random.SeedSequence(seed).spawn(len(dirs))
    out = []
    for d, ss in zip(dirs, streams):
        sgn = 1.0 if d == "up" else -1.0
        meta = {"mode": mode, "model": model, "thick": thick, "direction": d, "line": p,
                "noise_sigma": sigma, "seed": seed}
        if mode == "step":
            f = _filter(cfg)
            dt = float(_need(cfg, "sweep", "delta_t"))
            s = SweepSpec.covering(start, stop, sgn * dnu, dt)
            nu_d = frequency_constant(f, s.rate)

            def signal(nu):
                if thick:
                    a = evaluate(p.replace(baseline_level=0.0, baseline_slope=0.0), nu, model)
                    base = 1 + p.baseline_level + p.baseline_slope * (nu - p.nu0)
                    return np.exp(-a) * base
                return evaluate(p, nu, model)

            spec = sweepsim.simulate_step_sweep(signal, f, s, sw.get("init", "steady"))
            meta.update(filter=f, sweep=s, sweep_rate=s.rate, nu_d=nu_d)
        else:
            if "nu_d" in sw:
                nu_d = sgn * float(sw["nu_d"])
                f = _filter(cfg, FilterSpec.cascade(1.0))
                rate = nu_d / (f.tau_d * f.lag_factor)
            elif "delta_t" in sw:
                f = _filter(cfg)
                rate = sgn * dnu / float(sw["delta_t"])
                nu_d = frequency_constant(f, rate)
            else:
                raise ConfigError("sweep: continuous mode needs nu_d or delta_t")
            grid = start + dnu * np.arange(int(math.floor((stop - start) / dnu + 1e-9)) + 1)
            if sgn < 0:
                grid = grid[::-1]
            sig = evaluate(p, np.sort(grid), model, nu_d, f.q_eff, thick)
            spec = Spectrum(np.sort(grid), sig)
            meta.update(filter=f, sweep_rate=rate, nu_d=nu_d)
        if sigma > 0:
            rng = np.random.default_rng(ss)
            spec = Spectrum(spec.freqs, spec.signal + rng.normal(0.0, sigma, spec.signal.shape))
        out.append((d, spec, meta))
    return out


def cmd_synth(args, cfg):
    out = Path(args.output or "spectrum.txt")
    results = synthesize(cfg, args.seed)
    for d, spec, meta in results:
        path = _suffixed(out, d) if len(results) > 1 else out
        write_spectrum(path, spec, _provenance("synth", cfg, **meta))
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _init_from(sec: dict | None):
    if not sec:
        return None
    try:
        return LineParams(**{k: float(v) for k, v in sec.items()})
    except profiles.ProfileError as exc:
        raise ConfigError(f"initial: {exc}") from exc


def _meta_filter(meta) -> FilterSpec | None:
    f = meta.get("filter")
    if isinstance(f, dict):
        return FilterSpec(int(f["order"]), float(f["q"]), float(f["tau_d"]))
    return None


def _distortion(cfg_fit: dict, cfg: dict, meta: dict) -> DistortionModel | None:
    if not cfg_fit.get("correction", True):
        return None
    f = _filter(cfg, _meta_filter(meta))
    if "nu_d" in cfg_fit:
        return DistortionModel(f, float(cfg_fit["nu_d"]))
    rate = cfg_fit.get("sweep_rate", meta.get("sweep_rate"))
    if rate is None:
        if "nu_d" in meta:
            return DistortionModel(f, float(meta["nu_d"]))
        raise ConfigError("fit: correction needs fit.sweep_rate, fit.nu_d or spectrum metadata")
    return DistortionModel.from_sweep(f, float(rate))


def _problem(spec: Spectrum, cfg: dict) -> FitProblem:
    sec = cfg.get("fit", {})
    model = sec.get("model", spec.meta.get("model", "voigt"))
    free = tuple(sec["free"]) if "free" in sec else DEFAULT_FREE[model]
    bad = [n for n in free if n not in PARAM_NAMES]
    if bad:
        raise ConfigError(f"fit.free: unknown parameters {bad}")
    try:
        return FitProblem(
            spec, model, _distortion(sec, cfg, spec.meta), sec.get("thick"), free,
            _init_from(sec.get("initial")), sec.get("max_nfev", 200),
        )
    except (ValueError, FilterError) as exc:
        raise ConfigError(f"fit: {exc}") from exc


def _result_record(res, source) -> dict:
    return {
        "source": str(source),
        "params": res.params,
        "sigmas": res.sigmas,
        "free": list(res.free),
        "snr": res.snr,
        "rms": res.rms,
        "converged": res.converged,
        "n_iter": res.n_iter,
        "cost": res.cost,
        "message": res.message,
        "meta": res.meta,
    }


def cmd_fit(args, cfg):
    src = Path(args.spectrum)
    if src.is_dir():
        return _fit_batch(src, args, cfg)
    spec = read_spectrum(src)
    res = fit_spectrum(_problem(spec, cfg))
    out = Path(args.output or src.with_name(src.stem + "_fit.json"))
    rec = _result_record(res, src)
    rec["provenance"] = _provenance("fit", cfg, spectrum_meta=spec.meta)
    out.write_text(json.dumps(_jsonable(rec), sort_keys=True, indent=2) + "\n")
    s = spec.sorted()
    write_columns(_suffixed(out.with_suffix(".txt"), "residuals"), RESIDUAL_COLUMNS,
                  zip(s.freqs, res.residuals), _provenance("fit", cfg, source=str(src)))
    print(out)
    return EXIT_OK if res.converged else EXIT_NUMERIC


def _fit_batch(src: Path, args, cfg):
    files = sorted(p for p in src.iterdir() if p.is_file() and p.suffix in (".txt", ".dat"))
    if not files:
        raise OSError(f"{src}: no spectrum files")
    names = PARAM_NAMES
    header = ["file"] + [f"{n} [{_unit(n)}]" for n in names] + \
             [f"sigma_{n} [{_unit(n)}]" for n in names] + ["snr [1]", "converged [bool]"]
    rows, status = [], EXIT_OK
    for path in files:
        res = fit_spectrum(_problem(read_spectrum(path), cfg))
        rows.append([path.name] + [getattr(res.params, n) for n in names]
                    + [res.sigmas.get(n, math.nan) for n in names] + [res.snr, res.converged])
        if not res.converged:
            status = EXIT_NUMERIC
    out = Path(args.output or src / "fits.tsv")
    write_table(out, header, rows, _provenance("fit", cfg, source=str(src)))
    print(out)
    return status


def _unit(name):
    if name == "area":
        return "MHz"
    if name == "baseline_level":
        return "1"
    if name == "baseline_slope":
        return "1/MHz"
    return "MHz"


# ---------------------------------------------------------------------------
# scan

AV_RATIOS = [0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 100.0]


def cmd_scan(args, cfg):
    sec = cfg.get("scan", {})
    kind = args.kind or sec.get("kind")
    if kind is None:
        raise ConfigError("scan.kind: required")
    f = _filter(cfg, FilterSpec.cascade(1.0)).with_tau(1.0)
    threads = args.threads
    meta = _provenance("scan", cfg, kind=kind, filter=f)
    ratios = [float(r) for r in sec.get("ratios", AV_RATIOS)]
    dnu = sec.get("delta_nu_rel")
    cont = sec.get("continuous", False)
    if kind == "av":
        rows = [(r, sweepsim.extract_av(f, r, dnu)) for r in ratios]
        header = ["tau_d/delta_t [1]", "a_nu [1]"]
    elif kind in ("width", "center"):
        grid = sec.get("nu_d_rel_grid")
        use_ratios = None if grid is not None and "ratios" not in sec else ratios
        if cont:
            if grid is None:
                raise ConfigError("scan.nu_d_rel_grid: required for continuous scans")
            dnu, use_ratios = None, None
        elif dnu is None:
            raise ConfigError("scan.delta_nu_rel: required for step scans")
        scan = sweepsim.width_deviation_scan if kind == "width" else sweepsim.center_deviation_scan
        pts = scan(f, dnu, use_ratios, grid, threads)
        last = "relative_width_deviation [1]" if kind == "width" else "center_shift [dnu_dop]"
        header = ["tau_d/delta_t [1]", "nu_d/dnu_dop [1]", last]
        rows = [tuple(pt) for pt in pts]
    else:
        deltas = sec.get("delta_nu_rel_grid", [dnu] if dnu is not None else None)
        if not deltas:
            raise ConfigError("scan.delta_nu_rel_grid: required for budget scans")
        ratios = [r for r in ratios if r > 0]
        rep = calib.dbt_budget(f, deltas, ratios, float(sec.get("target", 1e-6)), threads)
        header = ["delta_nu/dnu_dop [1]", "tau_d/delta_t [1]", "nu_d/dnu_dop [1]",
                  "relative_width_deviation [1]", "admissible [bool]"]
        rows = [(p.delta_nu_rel, p.ratio, p.nu_d_rel, p.deviation, p.admissible)
                for p in rep.points]
        meta.update(
            target=rep.target,
            frontier={repr(d): list(v) for d, v in rep.frontier.items()},
            continuous_threshold=rep.continuous_threshold,
            warnings=rep.warnings,
        )
    out = Path(args.output or f"scan_{kind}.tsv")
    write_table(out, header, rows, meta)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate-tau


def _sweep_of(meta):
    s = meta.get("sweep")
    if isinstance(s, dict):
        return SweepSpec(float(s["delta_nu"]), float(s["delta_t"]), int(s["n_steps"]),
                         float(s["nu_start"]))
    if "sweep_rate" in meta:
        return float(meta["sweep_rate"])
    raise OSError("spectrum metadata lacks sweep information")


def cmd_calibrate(args, cfg):
    sec = cfg.get("calibrate", {})
    entries = sec.get("datasets")
    if not entries:
        raise ConfigError("calibrate.datasets: required")
    datasets, nominal = [], None
    base = Path(args.config).parent if args.config else Path(".")
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or set(e) - {"file", "nu0"} or "file" not in e:
            raise ConfigError(f"calibrate.datasets[{i}]: needs 'file' and 'nu0' only")
        path = Path(e["file"])
        path = path if path.is_absolute() else base / path
        spec = read_spectrum(path)
        datasets.append((spec, float(e.get("nu0", 0.0)), _sweep_of(spec.meta)))
        nominal = nominal or _meta_filter(spec.meta)
    f = _filter(cfg, nominal)
    model = sec.get("model", "voigt")
    free = tuple(sec["free"]) if "free" in sec else None
    bounds = tuple(float(b) for b in sec["bounds"]) if "bounds" in sec else None
    try:
        res = calib.calibrate_tau(datasets, f, sec.get("method", "continuous"), model, free,
                                  _init_from(sec.get("initial")), bounds, None, args.threads)
    except ValueError as exc:
        raise ConfigError(f"calibrate: {exc}") from exc
    out = Path(args.output or "calibration.json")
    rec = {"tau_d": res.tau_d, "sigma": res.sigma, "objective": res.objective,
           "nu_fit": res.nu_fit, "n_eval": res.n_eval, "method": res.method,
           "provenance": _provenance("calibrate-tau", cfg)}
    out.write_text(json.dumps(_jsonable(rec), sort_keys=True, indent=2) + "\n")
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags(default):
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=default, help="TOML configuration file")
    common.add_argument("--output", metavar="PATH", default=default, help="output file")
    common.add_argument("--seed", type=int, metavar="N", default=default,
                        help="noise seed (overrides config)")
    common.add_argument("--threads", type=int, metavar="N", default=default,
                        help="worker threads for scans")
    return common


def build_parser() -> argparse.ArgumentParser:
    # flags are accepted before or after the subcommand; SUPPRESS keeps the
    # subparser from resetting values given at the top level
    parser = _Parser(prog="linedistort", description=__doc__.splitlines()[0],
                     parents=[_global_flags(None)])
    common = _global_flags(argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="synthesise a recorded spectrum")
    p_fit = sub.add_parser("fit", parents=[common], help="fit a spectrum file or directory")
    p_fit.add_argument("spectrum", help="spectrum file, or directory for batch mode")
    p_scan = sub.add_parser("scan", parents=[common], help="simulation scans")
    p_scan.add_argument("kind", nargs="?", choices=("av", "width", "center", "budget"))
    sub.add_parser("calibrate-tau", parents=[common], help="calibrate the filter time constant")
    return parser


_COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "scan": cmd_scan, "calibrate-tau": cmd_calibrate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FitError, calib.CalibrationError, ForwardError, profiles.ProfileError,
            FloatingPointError, np.linalg.LinAlgError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
