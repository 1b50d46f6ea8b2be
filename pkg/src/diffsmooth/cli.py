"""Command-line front end.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out-dir``.
The manifest records the resolved arguments and a SHA-256 of every output so
``diffsmooth replay --manifest DIR/manifest.json`` can rerun the command and
confirm the outputs are bit-identical.

Failures print one JSON object on stderr and exit with the code of the error
class (see :mod:`diffsmooth.errors`); I/O failures exit with 8.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from .errors import DiffSmoothError, DimensionMismatchError, ValidationError
from .geodata import ColumnSchema, GeoDataset, load_csv, pairwise_distances, write_csv
from .mcmc import (ChainConfig, Priors, fit_restricted, fit_unrestricted, load_chain_csv, save_chain_csv,
                   save_summary_json, summarize)
from .risk import (DEFAULT_RHO, build_profile, continuous_weights, detect_outliers_binary, gamma_for_alpha,
                   write_verdict_csv)
from .simharness import (ExperimentSettings, SimConfig, generate_simulated, parameter_table_rows,
                         render_parameter_table, render_risk_summary, render_utility_table, run_experiment,
                         synthesize_suppressed, utility_table_rows)
from .synthesis import (offset_design, predict_points, predict_surface, read_synthetic_long, synthesize,
                        write_synthetic_long)

log = logging.getLogger("diffsmooth")

IO_EXIT_CODE = 8
REPLAY_MISMATCH_EXIT_CODE = 9

PRESETS = {
    "sim-sec4": None,
    "sf-onebed": ColumnSchema(x="lon", y="lat", response="price", covariates=("sqft",),
                              filter=("beds", "==", 1), log_response=True, standardize_covariates=True),
}
SF_FOCUS = (-122.48, 37.76)


class ReplayMismatch(DiffSmoothError):
    exit_code = REPLAY_MISMATCH_EXIT_CODE


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _gamma_value(text: str) -> float:
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'inf', got {text!r}") from None
    if not value >= 0:
        raise argparse.ArgumentTypeError("gamma must be >= 0")
    return value


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    pass


def _common(p):
    g = p.add_argument_group("run")
    g.add_argument("--config", metavar="PATH",
                   help="JSON or flat key = value file with flag values (flags win)")
    g.add_argument("--seed", type=int, default=0, help="master seed (integer) for every random stream")
    g.add_argument("--out-dir", default="diffsmooth_out", metavar="DIR", help="output directory")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="stderr log verbosity")


def _data(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", metavar="CSV", help="input records; without it the sim-sec4 design is simulated")
    g.add_argument("--schema", metavar="JSON",
                   help="column mapping (keys x, y, response, covariates, id_column, filter, "
                        "log_response, standardize_covariates, project)")
    g.add_argument("--preset", choices=sorted(PRESETS), default=None,
                   help="sim-sec4: simulated study; sf-onebed: sale-price schema (log price on sqft, beds == 1)")
    g.add_argument("--n", type=int, default=500, help="records to simulate (count) when --data is absent")
    g.add_argument("--sim-seed", type=int, default=None,
                   help="seed for simulated data (integer); defaults to --seed")


def _chain(p):
    g = p.add_argument_group("sampler")
    g.add_argument("--burnin", type=int, default=10_000, help="burn-in iterations (count)")
    g.add_argument("--iters", type=int, default=50_000, help="post-burn-in iterations (count)")
    g.add_argument("--thin", type=int, default=100, help="keep every k-th iteration (count)")
    g.add_argument("--phi-range", type=float, nargs=2, metavar=("LO", "HI"), default=None,
                   help="uniform prior support for phi (inverse distance units); "
                        "default (3/dmax, 300/dmax)")


def _risk(p, detection=True):
    g = p.add_argument_group("risk")
    if detection:
        g.add_argument("--rho", type=float, default=DEFAULT_RHO,
                       help="correlation (unitless, 0-1) whose inversion gives the outlier distance M")
        g.add_argument("--weights", choices=["binary", "continuous"], default="binary",
                       help="risk weights a_i: binary outlier flags or 1 - exp(-phi * nn distance)")
    ex = g.add_mutually_exclusive_group()
    ex.add_argument("--gamma", type=_gamma_value, default=math.inf,
                    help="smoothing strength (unitless, >= 0 or 'inf')")
    ex.add_argument("--alpha", type=float, default=None,
                    help="target shrinkage weight (unitless, 0-1) converted to gamma "
                         "with the unrestricted sigma2 and tau2 medians")


def _eval(p):
    g = p.add_argument_group("evaluation")
    g.add_argument("--epsilon", type=float, default=10_000.0,
                   help="closeness tolerance in response units on --scale (10000 = $10,000)")
    g.add_argument("--pct", type=float, default=0.10, help="relative closeness tolerance (fraction, 0.10 = 10%%)")
    g.add_argument("--scale", choices=["auto", "original", "log"], default="auto",
                   help="comparison scale: original exponentiates log responses; auto picks original "
                        "for log-modelled data")


def _synth(p):
    p.add_argument("--L", type=int, default=None,
                   help="synthetic replicates (count), evenly spaced over the retained draws; default all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffsmooth", formatter_class=_Formatter,
        description="Differentially smoothed partially synthetic geocoded data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, common=True):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)
        if common:
            _common(p)
        return p

    p = add("simulate", "simulate the isolated-record study and write data.csv")
    p.add_argument("--n", type=int, default=500, help="records to simulate (count)")
    p.add_argument("--outlier-response", type=float, default=7.08,
                   help="response pinned at the isolated record (log units)")

    p = add("fit", "fit the unrestricted or restricted model and write the chain")
    _data(p)
    _chain(p)
    _risk(p, detection=False)
    p.add_argument("--model", choices=["unrestricted", "restricted"], default="unrestricted",
                   help="which model to fit")
    p.add_argument("--outliers", metavar="JSON", help="outliers.json from the outliers command (restricted)")
    p.add_argument("--phi", type=float, default=None,
                   help="fixed phi (inverse distance units) for the restricted fit; default from --outliers")
    p.add_argument("--init-chain", metavar="CSV", help="start from the last draw of this chain")

    p = add("outliers", "flag spatial outliers from an unrestricted chain")
    _data(p)
    p.add_argument("--chain", metavar="CSV", help="unrestricted chain; phi_hat is its median phi")
    p.add_argument("--phi", type=float, default=None, help="phi_hat (inverse distance units) instead of --chain")
    p.add_argument("--rho", type=float, default=DEFAULT_RHO,
                   help="correlation (unitless, 0-1) whose inversion gives the outlier distance M")
    p.add_argument("--weights", choices=["binary", "continuous"], default="binary",
                   help="risk weights a_i: binary outlier flags or 1 - exp(-phi * nn distance)")

    p = add("synthesize", "draw partially synthetic responses from a chain")
    _data(p)
    _synth(p)
    p.add_argument("--chain", metavar="CSV", required=True, help="chain CSV written by fit")

    p = add("risk", "fraction of synthetic replicates close to the confidential value")
    _data(p)
    _eval(p)
    p.add_argument("--synthetic", metavar="CSV", required=True, help="long-format synthetic file")
    p.add_argument("--outliers", metavar="JSON", help="outliers.json for the at-risk grouping")

    p = add("utility", "analyst regression on each replicate with combined intervals")
    _data(p)
    p.add_argument("--synthetic", metavar="CSV", required=True, help="long-format synthetic file")
    p.add_argument("--design", choices=["auto", "covariates", "offsets"], default="auto",
                   help="analyst design: data covariates or |s1-0.25|, |s2-0.5| offsets; auto picks offsets "
                        "for simulated data")
    p.add_argument("--level", type=float, default=0.95, help="interval coverage (fraction)")

    p = add("surface", "posterior-mean kriging surface on a grid")
    _data(p)
    p.add_argument("--chain", metavar="CSV", required=True, help="chain CSV written by fit")
    p.add_argument("--resolution", type=int, default=100, help="grid points per axis (count)")
    p.add_argument("--quantity", choices=["response", "w"], default="response",
                   help="predicted response or spatial effect only")

    p = add("experiment", "unrestricted, restricted and suppressed fits with risk and utility tables")
    _data(p)
    _chain(p)
    _risk(p)
    _eval(p)
    _synth(p)
    p.add_argument("--no-suppressed", action="store_true", help="skip the suppressed-data refit")
    p.add_argument("--focus", type=float, nargs=2, metavar=("X", "Y"), default=None,
                   help="location (data units) whose nearest record is reported; default the isolated "
                        "simulated record, or (-122.48, 37.76) for sf-onebed")
    p.add_argument("--resolution", type=int, default=0,
                   help="surface grid points per axis (count); 0 skips the surface files")

    p = add("replay", "rerun a manifest into <manifest dir>/replay and check the outputs are bit-identical",
            common=False)
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="stderr log verbosity")
    p.add_argument("--manifest", metavar="JSON", required=True, help="manifest.json from an earlier run")
    return parser


def _read_config(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
    else:
        cp = configparser.ConfigParser()
        cp.read_string("[run]\n" + text if not text.lstrip().startswith("[") else text)
        data = {}
        for section in cp.sections():
            data.update(cp[section])
    return {k.replace("-", "_"): v for k, v in data.items()}


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None, namespace=None) -> argparse.Namespace:
    """Parse flags, filling unset ones from ``--config`` when given."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = _subparser(parser, args.command)
        known = {a.dest: a for a in sub._actions}
        overrides = {}
        for key, value in _read_config(args.config).items():
            if key not in known or key in ("config", "help"):
                raise ValidationError(f"config key {key!r} is not a flag of '{args.command}'")
            overrides[key] = _coerce(known[key], value)
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    if namespace is not None:
        namespace.__dict__.update(vars(args))
        return namespace
    return args


def _coerce(action, value):
    if isinstance(action, argparse._StoreTrueAction):
        return value if isinstance(value, bool) else str(value).strip().lower() in ("1", "true", "yes", "on")
    if action.nargs in (2, "+", "*"):
        items = value if isinstance(value, list) else str(value).replace(",", " ").split()
        return [action.type(v) if action.type else v for v in items]
    if isinstance(value, str) and action.type is not None:
        return action.type(value)
    if value is not None and action.type in (int, float):
        return action.type(value)
    return value


# ---------------------------------------------------------------------------
# Validation and shared helpers
# ---------------------------------------------------------------------------

def validate(args):
    """Check numeric parameters before any computation starts."""
    def need(cond, msg):
        if not cond:
            raise ValidationError(msg)

    get = vars(args).get  # plain dict reads, so flag-usage tracking only sees handlers
    if get("burnin") is not None:
        need(get("burnin") >= 0, "--burnin must be >= 0")
        need(get("iters") >= 1, "--iters must be >= 1")
        need(get("thin") >= 1, "--thin must be >= 1")
        need(get("thin") <= get("iters"), "--thin must not exceed --iters")
    if get("phi_range") is not None:
        lo, hi = get("phi_range")
        need(0 < lo < hi, "--phi-range needs 0 < LO < HI")
    if get("rho") is not None:
        need(0 < get("rho") < 1, "--rho must lie in (0, 1)")
    if get("alpha") is not None:
        need(0 <= get("alpha") < 1, "--alpha must lie in [0, 1)")
    if get("L") is not None:
        need(get("L") >= 1, "--L must be >= 1")
    if get("epsilon") is not None:
        need(get("epsilon") > 0, "--epsilon must be positive")
        need(get("pct") > 0, "--pct must be positive")
    if get("n") is not None:
        need(get("n") >= 10 or get("data") is not None, "--n must be >= 10")
    if get("phi") is not None:
        need(get("phi") > 0, "--phi must be positive")
    if get("resolution") is not None and get("command") == "surface":
        need(get("resolution") >= 2, "--resolution must be >= 2")
    if get("level") is not None:
        need(0 < get("level") < 1, "--level must lie in (0, 1)")


def _is_simulated(args) -> bool:
    return getattr(args, "data", None) is None


def load_dataset(args) -> GeoDataset:
    data, schema_path, preset = args.data, args.schema, args.preset
    n, seed = args.n, args.seed if args.sim_seed is None else args.sim_seed
    if data is None:
        if preset not in (None, "sim-sec4") or schema_path:
            raise ValidationError(f"--preset {preset} and --schema need --data")
        log.info("simulating %d records (seed %d)", n, seed)
        return generate_simulated(SimConfig(n=n, seed=seed))
    if schema_path:
        schema = ColumnSchema.from_dict(json.loads(Path(schema_path).read_text(encoding="utf-8")))
    elif preset == "sf-onebed":
        schema = PRESETS["sf-onebed"]
    else:
        schema = ColumnSchema()
    ds = load_csv(data, schema)
    log.info("loaded %d records from %s", ds.n, data)
    return ds


def _uses_log_scale(args) -> bool:
    if _is_simulated(args) or args.preset == "sf-onebed":
        return True
    if args.schema:
        return bool(json.loads(Path(args.schema).read_text(encoding="utf-8")).get("log_response", False))
    return False


def _scale(args) -> str:
    if args.scale != "auto":
        return args.scale
    return "original" if _uses_log_scale(args) else "log"


def _priors(args, ds, d) -> Priors:
    kw = {}
    if getattr(args, "phi_range", None) is not None:
        kw["phi_range"] = tuple(args.phi_range)
    return Priors.default(ds, d, **kw)


def _config(args) -> ChainConfig:
    return ChainConfig(n_burn=args.burnin, n_iter=args.iters, thin=args.thin, seed=args.seed)


def _analyst_design(args, ds, choice="auto"):
    if choice == "auto":
        choice = "offsets" if _is_simulated(args) else "covariates"
    if choice == "offsets":
        return offset_design(SimConfig.centers)(ds.locations), ("intercept", "abs_s1_offset", "abs_s2_offset")
    return ds.covariates, ("intercept", *ds.covariate_names)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(args, out_dir: Path, outputs, started: float) -> Path:
    resolved = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("config",)}
    doc = {
        "tool": "diffsmooth",
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "args": resolved,
        "config_file": getattr(args, "config", None),
        "outputs": {p.name: _sha256(p) for p in outputs},
        "elapsed_seconds": round(time.time() - started, 3),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def _load_outliers(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("phi_hat", "records"):
        if key not in doc:
            raise ValidationError(f"{path}: missing {key!r}; not an outliers file")
    return doc


def _align_outliers(doc, ds) -> tuple:
    by_id = {str(r["record_id"]): r for r in doc["records"]}
    missing = [rid for rid in ds.record_ids if str(rid) not in by_id]
    if missing or len(by_id) != ds.n:
        raise DimensionMismatchError("outliers file does not cover the dataset's records")
    a = np.array([by_id[str(rid)]["a_i"] for rid in ds.record_ids], dtype=float)
    at_risk = np.array([bool(by_id[str(rid)]["at_risk"]) for rid in ds.record_ids])
    return a, at_risk


def _resolve_gamma(args, sigma2, tau2) -> float:
    gamma, alpha = args.gamma, args.alpha
    if alpha is not None:
        if not (math.isfinite(sigma2) and math.isfinite(tau2)):
            raise ValidationError("--alpha needs variance estimates; run outliers with --chain")
        gamma = gamma_for_alpha(alpha, sigma2, tau2)
        log.info("alpha=%g -> gamma=%g (sigma2=%.4g, tau2=%.4g)", alpha, gamma, sigma2, tau2)
    return gamma


# ---------------------------------------------------------------------------
# Subcommands. Each returns the list of files it wrote.
# ---------------------------------------------------------------------------

def cmd_simulate(args, out: Path):
    cfg = SimConfig(n=args.n, seed=args.seed, outlier_response=args.outlier_response)
    ds = generate_simulated(cfg)
    path = write_csv(ds, out / "data.csv")
    log.info("wrote %d simulated records", ds.n)
    return [path]


def cmd_fit(args, out: Path):
    ds = load_dataset(args)
    d = pairwise_distances(ds)
    priors = _priors(args, ds, d)
    config = _config(args)
    files = []
    if _is_simulated(args):
        files.append(write_csv(ds, out / "data.csv"))
    init = load_chain_csv(args.init_chain).last() if args.init_chain else None
    outliers, phi = args.outliers, args.phi
    if args.model == "unrestricted":
        log.info("fitting unrestricted model")
        chain = fit_unrestricted(ds, priors, config, init=init, d=d)
    else:
        if not outliers:
            raise ValidationError("--model restricted needs --outliers")
        doc = _load_outliers(outliers)
        a, _ = _align_outliers(doc, ds)
        phi = phi if phi is not None else float(doc["phi_hat"])
        gamma = _resolve_gamma(args, doc.get("sigma2_hat", float("nan")), doc.get("tau2_hat", float("nan")))
        profile = build_profile(a, gamma)
        log.info("fitting restricted model (phi=%.4g, gamma=%s)", phi, gamma)
        chain = fit_restricted(ds, priors, profile, phi, init=init,
                               config=ChainConfig(**{**asdict(config), "stream": 1}), d=d)
    files.append(save_chain_csv(chain, out / f"chain_{args.model}.csv"))
    files.append(save_summary_json(chain, out / f"summary_{args.model}.json",
                                   extra={"priors": priors.to_dict()}))
    return files


def cmd_outliers(args, out: Path):
    ds = load_dataset(args)
    d = pairwise_distances(ds)
    sigma2_hat = tau2_hat = float("nan")
    phi_arg = args.phi
    if args.chain:
        chain = load_chain_csv(args.chain)
        if chain.n != ds.n:
            raise DimensionMismatchError(f"chain has {chain.n} records, data has {ds.n}")
        s = summarize(chain)
        phi_hat = s["phi"]["median"] if phi_arg is None else phi_arg
        sigma2_hat, tau2_hat = s["sigma2"]["median"], s["tau2"]["median"]
    elif phi_arg is not None:
        phi_hat = phi_arg
    else:
        raise ValidationError("outliers needs --chain or --phi")
    verdict = detect_outliers_binary(d, phi_hat, args.rho)
    a = verdict.weights if args.weights == "binary" else continuous_weights(d, phi_hat)
    log.info("phi_hat=%.4g, M=%.4g, %d at-risk records", phi_hat, verdict.threshold_M, verdict.count)
    csv_path = write_verdict_csv(out / "verdict.csv", ds.record_ids, verdict, a)
    doc = {
        "phi_hat": phi_hat, "rho": args.rho, "threshold_M": verdict.threshold_M,
        "weights": args.weights, "sigma2_hat": sigma2_hat, "tau2_hat": tau2_hat,
        "count": verdict.count,
        "records": [{"record_id": rid, "nn_distance": float(nn), "a_i": float(ai), "at_risk": bool(f)}
                    for rid, nn, ai, f in zip(ds.record_ids, verdict.nn_distance, a, verdict.at_risk)],
    }
    json_path = out / "outliers.json"
    json_path.write_text(json.dumps(doc, indent=2, default=_json_num))
    return [csv_path, json_path]


def _json_num(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


def cmd_synthesize(args, out: Path):
    ds = load_dataset(args)
    chain = load_chain_csv(args.chain)
    L = args.L
    if L is not None:
        chain = chain.thinned_to(L)
    chain_ids = [str(r) for r in chain.record_ids]
    data_ids = [str(r) for r in ds.record_ids]
    if chain_ids == data_ids:
        syn = synthesize(chain, ds, seed=args.seed)
    elif chain_ids and set(chain_ids) < set(data_ids):
        fitted = ds.subset(ds.index_of([r for r in ds.record_ids if str(r) in set(chain_ids)]))
        syn = synthesize_suppressed(chain, fitted, ds, seed=args.seed)
    else:
        raise DimensionMismatchError(f"chain covers {chain.n} records that do not match the {ds.n} data records")
    path = write_synthetic_long(syn, ds, out / f"synthetic_{syn.model_kind}.csv")
    log.info("wrote %d replicates of %d records", syn.L, syn.n)
    return [path]


def cmd_risk(args, out: Path):
    ds = load_dataset(args)
    syn = read_synthetic_long(args.synthetic)
    scale = _scale(args)
    at_risk = _align_outliers(_load_outliers(args.outliers), ds)[1] if args.outliers else None
    if syn.n != ds.n:
        raise DimensionMismatchError(f"synthetic file has {syn.n} records, data has {ds.n}")
    pct = ev.risk_within_percent(syn, ds, args.pct, scale, at_risk)
    eps = ev.risk_within_epsilon(syn, ds, args.epsilon, scale, at_risk)
    files = [pct.to_csv(out / "risk_pct.csv"), eps.to_csv(out / "risk_eps.csv")]
    files.append(ev.write_json({"pct": pct.to_dict(), "epsilon": eps.to_dict()}, out / "risk.json"))
    for rep in (pct, eps):
        g = rep.group_means()
        print(f"{rep.criterion} ({scale}): all {g['all']:.3f}, at_risk {g['at_risk']:.3f}, "
              f"not_at_risk {g['not_at_risk']:.3f}")
    return files


def cmd_utility(args, out: Path):
    ds = load_dataset(args)
    syn = read_synthetic_long(args.synthetic)
    X, names = _analyst_design(args, ds, args.design)
    if syn.n != ds.n:
        raise DimensionMismatchError(f"synthetic file has {syn.n} records, data has {ds.n}")
    reports = ev.utility_report(syn, X, names, args.level)
    real = ev.real_data_intervals(ds, X, names, args.level)
    text = ev.format_utility_table({"synthetic": reports})
    print(text)
    doc = {"combined": [r.to_dict() for r in reports], "real_data_ols": real}
    return [ev.write_json(doc, out / "utility.json"), _write_text(out / "utility.txt", text)]


def cmd_surface(args, out: Path):
    ds = load_dataset(args)
    chain = load_chain_csv(args.chain)
    if chain.n != ds.n:
        raise DimensionMismatchError(f"chain has {chain.n} records, data has {ds.n}")
    grid = predict_surface(chain, ds, args.resolution, quantity=args.quantity)
    return [grid.to_csv(out / f"surface_{chain.model_kind}.csv")]


def cmd_experiment(args, out: Path):
    ds = load_dataset(args)
    d = pairwise_distances(ds)
    priors = _priors(args, ds, d)
    config = _config(args)
    focus = None
    if _is_simulated(args):
        focus = ds.n - 1
    loc = args.focus if args.focus is not None else (SF_FOCUS if args.preset == "sf-onebed" else None)
    if loc is not None:
        focus = int(np.argmin(np.hypot(*(ds.locations - np.asarray(loc, float)).T)))
    gamma, L, run_sup = args.gamma, args.L, not args.no_suppressed
    if args.alpha is not None:
        # alpha needs the unrestricted variance estimates, so fit once, convert, and continue
        pre = fit_unrestricted(ds, priors, config, d=d)
        s = summarize(pre)
        gamma = gamma_for_alpha(args.alpha, s["sigma2"]["median"], s["tau2"]["median"])
        log.info("alpha=%g -> gamma=%g", args.alpha, gamma)
    settings = ExperimentSettings(rho=args.rho, gamma=gamma, weights=args.weights, epsilon=args.epsilon,
                                  pct=args.pct, scale=_scale(args), run_suppressed=run_sup)
    X, names = _analyst_design(args, ds)
    result = run_experiment(ds, priors, config, settings, analyst_design=lambda _pts: X,
                            design_names=names, focus_index=focus, L=L)
    files = [write_csv(ds, out / "data.csv")]
    for m, chain in result.chains.items():
        files.append(save_chain_csv(chain, out / f"chain_{m}.csv"))
        files.append(save_summary_json(chain, out / f"summary_{m}.json", extra={"priors": priors.to_dict()}))
        files.append(write_synthetic_long(result.synthetic[m], ds, out / f"synthetic_{m}.csv"))
        files.append(result.risk_pct[m].to_csv(out / f"risk_pct_{m}.csv"))
        files.append(result.risk_eps[m].to_csv(out / f"risk_eps_{m}.csv"))
    files.append(write_verdict_csv(out / "verdict.csv", ds.record_ids, result.verdict, result.profile.a))
    files.append(_write_rows(out / "parameters.csv", parameter_table_rows(result)))
    files.append(_write_rows(out / "utility.csv", utility_table_rows(result)))
    tables = "\n\n".join([render_parameter_table(result), render_utility_table(result),
                          render_risk_summary(result)])
    files.append(_write_text(out / "report.txt", tables))
    red = result.reductions()
    summary = {
        "phi_hat": result.phi_hat, "threshold_M": result.verdict.threshold_M,
        "gamma": _jsonable(gamma), "at_risk_ids": result.at_risk_ids, "focus_index": result.focus_index,
        "focus_record": ds.record_ids[result.focus_index] if result.focus_index >= 0 else None,
        "focus_summary": result.focus_summary, "surface_at_focus": result.surface_at_focus,
        "risk_groups": {m: {"pct": r.group_means(), "eps": result.risk_eps[m].group_means()}
                        for m, r in result.risk_pct.items()},
        "reductions": {k: v["groups"] for k, v in red.items()},
        "utility": {m: [r.to_dict() for r in reps] for m, reps in result.utility.items()},
        "real_data_ols": result.real_ols,
    }
    files.append(ev.write_json(summary, out / "experiment.json"))
    resolution = args.resolution
    if resolution:
        for m in ("unrestricted", "restricted"):
            if ds.p == 1:
                grid = predict_surface(result.chains[m], ds, resolution)
                files.append(grid.to_csv(out / f"surface_{m}.csv"))
    print(tables)
    return files


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text + "\n", encoding="utf-8")
    return path


def _write_rows(path: Path, rows) -> Path:
    import csv

    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def cmd_replay(args, out_unused=None):
    manifest_path = Path(args.manifest)
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    recorded = doc["args"]
    replay_dir = manifest_path.parent / "replay"
    ns = argparse.Namespace(**{k: (math.inf if v == "inf" and k in ("gamma",) else v)
                               for k, v in recorded.items()})
    ns.config = None
    ns.out_dir = str(replay_dir)
    if getattr(ns, "phi_range", None) is not None:
        ns.phi_range = list(ns.phi_range)
    files = run_command(ns)
    fresh = {p.name: _sha256(p) for p in files}
    diffs = sorted(k for k in set(fresh) | set(doc["outputs"]) if fresh.get(k) != doc["outputs"].get(k))
    if diffs:
        raise ReplayMismatch(f"replayed outputs differ: {diffs}")
    print(f"replay identical: {len(fresh)} files in {replay_dir}")
    return []


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "outliers": cmd_outliers,
    "synthesize": cmd_synthesize,
    "risk": cmd_risk,
    "utility": cmd_utility,
    "surface": cmd_surface,
    "experiment": cmd_experiment,
}


def run_command(args):
    """Validate, execute one subcommand, write its manifest; returns output paths."""
    validate(args)
    started = time.time()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = COMMANDS[args.command](args, out)
    write_manifest(args, out, files, started)
    return files


def _error_report(exc, code) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})


def main(argv=None, namespace=None) -> int:
    """Entry point; ``namespace`` lets callers observe which flags were read."""
    try:
        args = parse_args(argv, namespace)
    except DiffSmoothError as exc:
        print(_error_report(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_error_report(exc, IO_EXIT_CODE), file=sys.stderr)
        return IO_EXIT_CODE
    logging.basicConfig(level=getattr(args, "log_level", "INFO"), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            cmd_replay(args)
        else:
            run_command(args)
    except DiffSmoothError as exc:
        print(_error_report(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_error_report(exc, IO_EXIT_CODE), file=sys.stderr)
        return IO_EXIT_CODE
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
