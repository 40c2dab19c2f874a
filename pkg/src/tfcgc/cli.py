"""Command-line entry point.

Subcommands
-----------
simulate  write a benchmark trial set and its true coefficient trajectories
cgc       estimate one conditional causality map from a trial CSV
bench     score estimators against the theoretical maps of a benchmark
flow      net causal flow per node and time window from a set of maps

Every run writes ``config.txt`` next to its outputs. Passing that file back
with ``--config`` reproduces the run; flags given on the command line win
over values from the file.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .cgc import InvalidSpectrumError, SingularVarianceError, TFCGCMap, net_causal_flow
from .pipeline import (
    ESTIMATORS,
    RLS_FORGETTING,
    PipelineConfig,
    SystemFit,
    estimate_tfcgc,
    run_bench,
    significance_threshold,
)
from .selection import EmptyModelError
from .simkit import ScenarioConfig, generate
from .tvarx import TrialSet

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    """Bad arguments or inconsistent inputs."""


class InputError(Exception):
    """Unreadable or malformed input files."""


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one CLI run."""

    subcommand: str = ""
    # I/O
    input: str = ""
    out: str = ""
    direction: str = ""
    maps: tuple = ()
    # benchmark data
    scenario: str = "sim2"
    n_samples: int | None = None
    n_trials: int | None = None
    sigma2: float | None = None
    coupling: float = 0.5
    fs: float = 200.0
    # estimation
    estimator: str = "urols"
    estimators: tuple = ESTIMATORS
    orders: tuple = (3, 4, 5, 6)
    scale: int = 4
    lags: int = 2
    bivariate_lags: int | None = None
    d: int = 2
    n0: int = 20
    mu: float | None = None
    mu_scale: float = 1e-2
    v: float = 3.0
    max_terms: int | None = None
    rank_tol: float = 1e-10
    forgetting: float | None = None
    rls_delta: float = 1e3
    rho: float = 0.05
    n_init: int = 50
    n_freqs: int = 101
    cond_cap: float = 1e12
    # significance
    significance: bool = True
    alpha: float = 0.01
    n_perm: int = 999
    # causal flow
    band: tuple = (8.0, 14.0)
    window: int = 100
    # execution
    seed: int = 0
    threads: int = 1

    def pipeline(self, scenario=None):
        forgetting = self.forgetting
        if forgetting is None:
            forgetting = RLS_FORGETTING.get(scenario, PipelineConfig.forgetting)
        return PipelineConfig(
            estimator=self.estimator, orders=self.orders, scale=self.scale, lags=self.lags,
            bivariate_lags=self.bivariate_lags, d=self.d, n0=self.n0, mu=self.mu,
            mu_scale=self.mu_scale, v=self.v, max_terms=self.max_terms,
            rank_tol=self.rank_tol, forgetting=forgetting, rls_delta=self.rls_delta,
            rho=self.rho, n_init=self.n_init, n_freqs=self.n_freqs, cond_cap=self.cond_cap,
        )

    def scenario_config(self):
        kw = {"seed": self.seed, "fs": self.fs, "coupling": self.coupling}
        if self.n_samples is not None:
            kw["n_samples"] = self.n_samples
        if self.n_trials is not None:
            kw["n_trials"] = self.n_trials
        if self.sigma2 is not None:
            kw["sigma2"] = self.sigma2
        return ScenarioConfig.default(self.scenario, **kw)


# field name -> (scalar type, container) for text round-tripping
def _field_kinds():
    kinds = {}
    for f in fields(RunConfig):
        default = f.default
        ann = str(f.type)
        if isinstance(default, tuple) or ann == "tuple":
            elem = str
            if default and isinstance(default[0], (int, float)):
                elem = type(default[0])
            kinds[f.name] = (elem, tuple)
        elif "bool" in ann:
            kinds[f.name] = (bool, None)
        elif "int" in ann:
            kinds[f.name] = (int, "optional" if "None" in ann else None)
        elif "float" in ann:
            kinds[f.name] = (float, "optional" if "None" in ann else None)
        else:
            kinds[f.name] = (str, None)
    return kinds


KINDS = _field_kinds()


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def _parse_scalar(elem, text):
    if elem is bool:
        low = text.strip().lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return low == "true"
    return elem(text.strip())


def _parse_value(name, text):
    elem, container = KINDS[name]
    text = text.strip()
    if container == tuple:
        return tuple(_parse_scalar(elem, t) for t in text.split(",")) if text else ()
    if container == "optional" and text.lower() == "none":
        return None
    return _parse_scalar(elem, text)


def dump_config(config):
    """Serialise a :class:`RunConfig` as sorted ``key = value`` lines."""
    items = asdict(config)
    return "".join(f"{k} = {_format_value(items[k])}\n" for k in sorted(items))


def load_config(text):
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep or key not in KINDS:
            raise UsageError(f"config line {n}: unknown or malformed entry {line!r}")
        try:
            values[key] = _parse_value(key, val)
        except ValueError as exc:
            raise UsageError(f"config line {n}: {exc}") from None
    return values


# ---------------------------------------------------------------- CSV files


def write_trials(path, data):
    """Write ``trial,t,<channels>`` rows with 17 significant digits."""
    buf = io.StringIO()
    buf.write(",".join(("trial", "t") + tuple(data.channels)) + "\n")
    for w in range(data.n_trials):
        for n in range(data.n_samples):
            vals = ",".join(f"{v:.17g}" for v in data.data[w, n])
            buf.write(f"{w + 1},{n + 1},{vals}\n")
    _write_text(path, buf.getvalue())


def read_trials(path, fs):
    """Read a trial CSV; trials are ordered by their numeric label."""
    text = _read_text(path)
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[:2] != ["trial", "t"]:
        raise InputError(f"{path}: header must start with 'trial,t'")
    channels = tuple(header[2:])
    if len(set(channels)) != len(channels):
        raise InputError(f"{path}: duplicate channel names")
    trials = {}
    for n, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(header):
            raise InputError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
        try:
            trial, t = int(row[0]), int(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError:
            raise InputError(f"{path}:{n}: non-numeric field") from None
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"{path}:{n}: non-finite value")
        samples = trials.setdefault(trial, {})
        if t in samples:
            raise InputError(f"{path}:{n}: duplicate sample t={t} in trial {trial}")
        samples[t] = vals
    if not trials:
        raise InputError(f"{path}: no data rows")
    lengths = {len(s) for s in trials.values()}
    if len(lengths) != 1:
        raise InputError(f"{path}: trials have different lengths")
    N = lengths.pop()
    arr = np.empty((len(trials), N, len(channels)))
    for w, label in enumerate(sorted(trials)):
        samples = trials[label]
        if set(samples) != set(range(1, N + 1)):
            raise InputError(f"{path}: trial {label} does not cover t = 1..{N}")
        arr[w] = [samples[t] for t in range(1, N + 1)]
    return TrialSet(channels, arr, fs)


def write_map(path, tf_map):
    """Write ``t,f,gc,significant,flagged`` with one row per grid cell."""
    buf = io.StringIO()
    buf.write("t,f,gc,significant,flagged\n")
    sig = tf_map.significant
    for a, t in enumerate(tf_map.times):
        for b, f in enumerate(tf_map.freqs):
            buf.write(
                f"{int(t)},{f:.17g},{tf_map.gc[a, b]:.17g},"
                f"{int(sig[a, b])},{int(tf_map.flagged[a, b])}\n"
            )
    _write_text(path, buf.getvalue())


def read_map(path):
    """Read a map CSV back into a :class:`TFCGCMap` and its significance mask."""
    text = _read_text(path)
    try:
        table = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None
    if text.splitlines()[0].strip() != "t,f,gc,significant,flagged" or table.shape[1] != 5:
        raise InputError(f"{path}: not a causality map file")
    times = np.unique(table[:, 0])
    freqs = np.unique(table[:, 1])
    if len(times) * len(freqs) != len(table):
        raise InputError(f"{path}: map is not a full time x frequency grid")
    order = np.lexsort((table[:, 1], table[:, 0]))
    grid = table[order].reshape(len(times), len(freqs), 5)
    tf_map = TFCGCMap(times.astype(int), freqs, grid[..., 2], grid[..., 4] > 0)
    return tf_map, grid[..., 3] > 0


def _write_text(path, text):
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _read_text(path):
    try:
        return Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise InputError(f"{path}: not a text file") from None


def _metric(value):
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.17g}"


# ------------------------------------------------------------- subcommands


def parse_direction(spec):
    """Split ``"Y->X|Z"`` into ``(source, target, condition)``."""
    head, bar, condition = spec.partition("|")
    source, arrow, target = head.partition("->")
    parts = [source.strip(), target.strip(), condition.strip()]
    if not (bar and arrow) or not all(parts):
        raise UsageError(f"direction must look like 'Y->X|Z', got {spec!r}")
    if len(set(parts)) != 3:
        raise UsageError(f"direction {spec!r} repeats a channel")
    return tuple(parts)


def _out_dir(config):
    out = Path(config.out)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    return out


def cmd_simulate(config):
    out = _out_dir(config)
    data, truth = generate(config.scenario_config())
    write_trials(out / "data.csv", data)
    ch = truth.channels
    cols = [(a, b, lag) for a in range(3) for b in range(3) for lag in range(truth.coef.shape[3])]
    buf = io.StringIO()
    buf.write(",".join(["t"] + [f"{ch[a]}<-{ch[b]}@{lag + 1}" for a, b, lag in cols]) + "\n")
    for n in range(truth.coef.shape[0]):
        vals = ",".join(f"{truth.coef[n, a, b, lag]:.17g}" for a, b, lag in cols)
        buf.write(f"{n + 1},{vals}\n")
    _write_text(out / "truth.csv", buf.getvalue())
    print(f"wrote {data.n_trials} trials x {data.n_samples} samples to {out / 'data.csv'}")


def cmd_cgc(config):
    source, target, condition = parse_direction(config.direction)
    data = read_trials(config.input, config.fs)
    if len(data.channels) < 3:
        raise UsageError("conditional causality needs at least three channels")
    missing = [c for c in (source, target, condition) if c not in data.channels]
    if missing:
        raise UsageError(f"unknown channel(s) {missing}; file has {list(data.channels)}")
    out = _out_dir(config)
    sub = data.select((source, target, condition))
    system = SystemFit(sub, config.pipeline())
    tf_map = estimate_tfcgc(sub, source, target, condition, system=system)
    threshold = None
    if config.significance:
        threshold = significance_threshold(
            sub, source, target, condition, n_perm=config.n_perm, alpha=config.alpha,
            seed=config.seed, threads=config.threads, system=system,
        )
        tf_map = tf_map.with_threshold(threshold)
    write_map(out / "map.csv", tf_map)
    summary = {
        "direction": f"{source}->{target}|{condition}",
        "threshold": "none" if threshold is None else f"{threshold:.17g}",
        "max_gc": f"{tf_map.gc.max():.17g}",
        "significant_cells": str(int(tf_map.significant.sum())),
        "flagged_cells": str(int(tf_map.flagged.sum())),
        "cells": str(tf_map.gc.size),
    }
    text = "".join(f"{k} = {v}\n" for k, v in summary.items())
    _write_text(out / "summary.txt", text)
    sys.stdout.write(text)


def cmd_bench(config):
    out = _out_dir(config)
    unknown = [e for e in config.estimators if e not in ESTIMATORS]
    if unknown:
        raise UsageError(f"unknown estimator(s) {unknown}; choose from {ESTIMATORS}")
    rows = run_bench(
        config.scenario_config(), estimators=config.estimators,
        config=config.pipeline(config.scenario),
        significance=config.significance, n_perm=config.n_perm, alpha=config.alpha,
        threads=config.threads,
    )
    buf = io.StringIO()
    buf.write("direction,estimator,MAE,RMSE,PSNR\n")
    for r in rows:
        buf.write(
            f"{r['direction']},{r['estimator']},{_metric(r['MAE'])},"
            f"{_metric(r['RMSE'])},{_metric(r['PSNR'])}\n"
        )
    _write_text(out / "metrics.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())


def _parse_map_arg(spec):
    name, eq, path = spec.partition("=")
    if not eq or not path:
        raise UsageError(f"map argument must look like 'SRC->DST=path', got {spec!r}")
    head = name.partition("|")[0]
    source, arrow, target = head.partition("->")
    source, target = source.strip(), target.strip()
    if not arrow or not source or not target or source == target:
        raise UsageError(f"bad map pair {name!r}")
    return source, target, path


def causal_flow_table(maps, band, window):
    """Net causal flow per node over consecutive time windows.

    Parameters
    ----------
    maps : dict
        ``(source, target) -> (TFCGCMap, significant mask)`` for every ordered
        pair of nodes. Non-significant cells count as zero.
    band : (float, float)
        Frequency band; causality is averaged over the grid frequencies in it.
    window : int
        Window length in map rows.

    Returns
    -------
    nodes : list of str
    rows : list of (node, t_start, t_end, flow)
    """
    nodes = sorted({n for pair in maps for n in pair})
    missing = [(a, b) for a in nodes for b in nodes if a != b and (a, b) not in maps]
    if missing:
        listed = ", ".join(f"{a}->{b}" for a, b in missing)
        raise UsageError(f"incomplete map set; missing pairs: {listed}")
    if window < 1:
        raise UsageError("window must be at least one row")
    first = next(iter(maps.values()))[0]
    series = {}
    for pair, (tf_map, sig) in maps.items():
        if not (np.array_equal(tf_map.times, first.times)
                and np.array_equal(tf_map.freqs, first.freqs)):
            raise UsageError("all maps must share one time-frequency grid")
        masked = TFCGCMap(tf_map.times, tf_map.freqs, np.where(sig, tf_map.gc, 0.0),
                          tf_map.flagged)
        series[pair] = masked.band_mean(band)
    rows = []
    T = len(first.times)
    for lo in range(0, T, window):
        hi = min(lo + window, T)
        G = np.zeros((len(nodes), len(nodes)))
        for (a, b), s in series.items():
            G[nodes.index(a), nodes.index(b)] = s[lo:hi].mean()
        flow = net_causal_flow(G)
        for n, node in enumerate(nodes):
            rows.append((node, int(first.times[lo]), int(first.times[hi - 1]), float(flow[n])))
    return nodes, rows


def cmd_flow(config):
    out = _out_dir(config)
    if len(config.band) != 2 or config.band[0] > config.band[1]:
        raise UsageError("band must be two frequencies 'low,high'")
    maps = {}
    for spec in config.maps:
        source, target, path = _parse_map_arg(spec)
        if (source, target) in maps:
            raise UsageError(f"pair {source}->{target} given twice")
        maps[(source, target)] = read_map(path)
    if not maps:
        raise UsageError("no maps given")
    try:
        _, rows = causal_flow_table(maps, config.band, config.window)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    buf = io.StringIO()
    buf.write("node,t_start,t_end,flow\n")
    for node, lo, hi, cf in rows:
        buf.write(f"{node},{lo},{hi},{cf:.17g}\n")
    _write_text(out / "flow.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())


COMMANDS = {"simulate": cmd_simulate, "cgc": cmd_cgc, "bench": cmd_bench, "flow": cmd_flow}


# ------------------------------------------------------------------ parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_of(elem):
    def parse(text):
        try:
            return tuple(elem(t) for t in text.split(",") if t.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None

    return parse


def _optional(elem):
    def parse(text):
        return None if text.lower() == "none" else elem(text)

    return parse


def build_parser():
    parser = _Parser(prog="tfcgc", description="Time-frequency conditional Granger causality.")
    subs = parser.add_subparsers(dest="subcommand", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value file from an earlier run")
        p.add_argument("--out", help="existing output directory")
        p.add_argument("--seed", type=int, help="master seed (default 0)")
        p.add_argument("--threads", type=int, help="worker threads (default 1)")
        p.add_argument("-q", "--quiet", action="store_true", help="only report errors")

    def estimation(p):
        p.add_argument("--estimator", choices=ESTIMATORS)
        p.add_argument("--orders", type=_csv_of(int), help="B-spline orders, e.g. 3,4,5,6")
        p.add_argument("--scale", type=int, help="wavelet scale j")
        p.add_argument("--lags", type=int)
        p.add_argument("--bivariate-lags", type=_optional(int))
        p.add_argument("--d", type=int, help="highest weak-derivative order")
        p.add_argument("--n0", type=int, help="test-function support in samples")
        p.add_argument("--mu", type=_optional(float), help="regularisation (none = automatic)")
        p.add_argument("--mu-scale", type=float)
        p.add_argument("--v", type=float, help="APRESS adjustable parameter")
        p.add_argument("--max-terms", type=_optional(int))
        p.add_argument("--rank-tol", type=float)
        p.add_argument("--forgetting", type=_optional(float), help="RLS forgetting factor")
        p.add_argument("--rls-delta", type=float)
        p.add_argument("--rho", type=float, help="covariance tracking rate")
        p.add_argument("--n-init", type=int)
        p.add_argument("--n-freqs", type=int)
        p.add_argument("--cond-cap", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--n-perm", type=int)
        p.add_argument("--no-significance", dest="significance", action="store_const",
                       const=False, help="skip the surrogate threshold")
        p.add_argument("--fs", type=float, help="sampling rate in Hz (default 200)")

    def scenario(p):
        p.add_argument("--scenario", choices=("sim1", "sim2"))
        p.add_argument("--n-samples", type=_optional(int))
        p.add_argument("--n-trials", type=_optional(int))
        p.add_argument("--sigma2", type=_optional(float), help="noise variance of every channel")
        p.add_argument("--coupling", type=float)

    p = subs.add_parser("simulate", help="write a benchmark trial set")
    common(p)
    scenario(p)
    p.add_argument("--fs", type=float)

    p = subs.add_parser("cgc", help="estimate one causality map")
    common(p)
    p.add_argument("--input", help="trial CSV with header trial,t,<channels>")
    p.add_argument("--direction", help="'SRC->DST|COND'")
    estimation(p)

    p = subs.add_parser("bench", help="score estimators on a benchmark")
    common(p)
    scenario(p)
    estimation(p)
    p.add_argument("--estimators", type=_csv_of(str), help="comma list (default all four)")

    p = subs.add_parser("flow", help="net causal flow from pairwise maps")
    common(p)
    p.add_argument("--map", dest="maps", action="append", help="'SRC->DST=path', repeatable")
    p.add_argument("--band", type=_csv_of(float), help="'low,high' in Hz (default 8,14)")
    p.add_argument("--window", type=int, help="window length in map rows (default 100)")
    return parser


def resolve_config(args):
    """Merge built-in defaults, an optional config file and explicit flags."""
    values = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from None
        values.update(load_config(text))
    for key, val in vars(args).items():
        if key in KINDS and val is not None:
            values[key] = tuple(val) if isinstance(val, list) else val
    values["subcommand"] = args.subcommand
    config = replace(RunConfig(), **values)
    for key in ("out",) + (("input", "direction") if args.subcommand == "cgc" else ()):
        if not getattr(config, key):
            raise UsageError(f"--{key} is required")
    if config.threads < 1:
        raise UsageError("--threads must be at least 1")
    return config


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.subcommand:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                            format="%(levelname)s: %(message)s")
        config = resolve_config(args)
        out = _out_dir(config)
        COMMANDS[config.subcommand](config)
        _write_text(out / "config.txt", dump_config(config))
    except UsageError as exc:
        print(f"tfcgc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"tfcgc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SingularVarianceError, InvalidSpectrumError, EmptyModelError,
            np.linalg.LinAlgError, FloatingPointError, OverflowError) as exc:
        print(f"tfcgc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"tfcgc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
