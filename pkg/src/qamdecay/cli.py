"""
Command-line entry point (``qamdecay``).

Every subcommand accepts ``--config FILE`` plus flags that mirror config
keys; ``--set section.key=VALUE`` reaches any key.  Outputs land in
``<output_dir>/<subcommand>/`` as CSV plus ``metadata.json``.

Exit codes: 0 success, 2 partial (per-point failures, see ``run.log``),
1 fatal.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import harness, spectral
from .classical import (
    ResonanceChain,
    find_fixed_point,
    fit_resonance_params,
)
from .config import ChainSeed, ExperimentConfig, dotted, from_dict, load_config, merge
from .exceptions import QAMError
from .harness import FIGURES, Run, compare_methods, json_bytes, read_curve
from .quantum import build_circle_operator, build_complex_scaled, commensurate
from .tunneling import THEORY_METHODS, degeneracy_points

log = logging.getLogger("qamdecay")

# flag -> dotted config key
_FLAG_KEYS = {
    "kick": "map.kick", "drift": "map.drift", "sign": "map.sign",
    "inv_hbar_min": "sweep.inv_hbar_min", "inv_hbar_max": "sweep.inv_hbar_max",
    "points": "sweep.points", "values": "sweep.values", "n_max": "sweep.n_max",
    "methods": "methods", "out": "output_dir", "mode": "numerics.mode",
    "workers": "numerics.workers", "hbar": "numerics.hbar", "nu": "numerics.nu_sequence",
    "cache_dir": "cache.directory", "grid_step": "numerics.grid_step",
    "steps": "numerics.wavepacket_steps", "log2_size": "numerics.log2_size",
}


def _floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _strs(text: str) -> list:
    return [x.strip() for x in text.split(",") if x.strip()]


def _point(text: str) -> list:
    v = _floats(text)
    if len(v) != 2:
        raise argparse.ArgumentTypeError("expected THETA,J")
    return v


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (value parsed as JSON when possible)")
    g.add_argument("--out", help="output directory (output_dir)")
    g.add_argument("--mode", choices=("ci", "desk"))
    g.add_argument("--no-cache", action="store_true", help="disable the cache (cache.enabled)")
    g.add_argument("--cache-dir")
    g.add_argument("--workers", type=int)
    g.add_argument("--kick", type=float)
    g.add_argument("--drift", type=float)
    g.add_argument("--sign", choices=("plus", "minus"))
    g.add_argument("--inv-hbar-min", type=float)
    g.add_argument("--inv-hbar-max", type=float)
    g.add_argument("--points", type=int)
    g.add_argument("--values", type=_floats, help="explicit comma-separated 1/hbar grid")
    g.add_argument("--n-max", type=int)
    g.add_argument("--hbar", type=float, help="hbar for single-point commands")
    g.add_argument("--nu", type=_ints, help="comma-separated basis sizes")
    g.add_argument("--grid-step", type=float)
    g.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qamdecay", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("portrait", help="phase portrait around the island")
    p.add_argument("--seeds", type=int, default=16)
    p.add_argument("--orbit-steps", type=int)
    _common(p)

    _common(sub.add_parser("fixed-point", help="island center and its stability"))
    _common(sub.add_parser("island-area", help="island area and bounding box"))

    p = sub.add_parser("resonance-fit", help="fit (I_rs, M, v) of an r:s chain")
    p.add_argument("--r", type=int, required=True)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--s-plus", type=float)
    p.add_argument("--s-minus", type=float)
    p.add_argument("--trace", type=float)
    p.add_argument("--inner", type=_point, metavar="THETA,J")
    p.add_argument("--outer", type=_point, metavar="THETA,J")
    p.add_argument("--orbit", type=_point, metavar="THETA,J")
    _common(p)

    p = sub.add_parser("spectrum", help="eigenvalues of one operator, or stabilized states")
    p.add_argument("--basis", type=int, default=256, help="nu of the operator")
    p.add_argument("--rho", type=float, help="complex-scaling radius (integer 1/hbar only)")
    p.add_argument("--stabilized", action="store_true",
                   help="report states stable across --nu instead of one spectrum")
    _common(p)

    p = sub.add_parser("decay-sweep", help="numerical decay rates over the 1/hbar grid")
    p.add_argument("--methods", type=_strs)
    _common(p)

    p = sub.add_parser("propagate", help="coherent state from the island center")
    p.add_argument("--steps", type=int)
    p.add_argument("--log2-size", type=int)
    _common(p)

    _common(sub.add_parser("wkb", help="WKB rates at the well bottom and ground energy"))

    p = sub.add_parser("rat", help="resonance-assisted rates over the grid")
    p.add_argument("--chain", help="flat chain JSON (as written by resonance-fit)")
    p.add_argument("--r", type=int, help="fit this r:1 chain instead of --chain")
    p.add_argument("--theory", type=_strs, default=["rat_unperturbed", "rat_continuum"])
    p.add_argument("--n-i", type=int, default=0)
    p.add_argument("--area", type=float, help="island area (measured when omitted)")
    _common(p)

    p = sub.add_parser("degeneracies", help="exact degeneracies of the unperturbed ladder")
    p.add_argument("--chain", help="flat chain JSON")
    p.add_argument("--r", type=int)
    p.add_argument("--i-rs", type=float)
    p.add_argument("--n-i", type=int, default=0)
    p.add_argument("--l-max", type=int, default=3)
    p.add_argument("--area", type=float, required=True)
    _common(p)

    p = sub.add_parser("figure", help="all datasets of one figure")
    p.add_argument("name", help=", ".join(FIGURES))
    _common(p)

    p = sub.add_parser("compare", help="ratio table of decay curves")
    p.add_argument("curves", nargs="+", help="DecayCurve CSV files")
    p.add_argument("--tolerance", type=float, help="flag factor (tolerances.compare_factor)")
    _common(p)
    return ap


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def overrides_from_args(args) -> dict:
    """Config-file contents merged with flag and ``--set`` overrides."""
    out = {}
    if getattr(args, "config", None):
        load_config(args.config)  # validate; keep only the keys the file sets
        out = json.loads(Path(args.config).read_text())
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            out = merge(out, dotted(key, val))
    if getattr(args, "no_cache", False):
        out = merge(out, dotted("cache.enabled", False))
    if getattr(args, "tolerance", None) is not None:
        out = merge(out, dotted("tolerances.compare_factor", args.tolerance))
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise QAMError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out = merge(out, dotted(k.strip(), _parse_value(v)))
    return out


def _config(args) -> ExperimentConfig:
    return from_dict(overrides_from_args(args))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_portrait(args) -> Run:
    cfg = _config(args)
    run = Run(cfg, "portrait")
    fp = find_fixed_point(run.params)[0]
    steps = args.orbit_steps or run.config.numerics.portrait_steps
    run.write_csv("portrait.csv", ("theta", "j", "label"),
                  harness.portrait_rows(run.params, fp, steps, args.seeds))
    return run


def cmd_fixed_point(args) -> Run:
    run = Run(_config(args), "fixed-point")
    fp, tr, stable = find_fixed_point(run.params)
    rec = {"theta": fp.theta, "j": fp.action_j, "trace": tr, "stable": stable}
    run.write("fixed_point.json", json_bytes(rec))
    run.extra["fixed_point"] = rec
    print(json.dumps(rec))
    return run


def cmd_island_area(args) -> Run:
    run = Run(_config(args), "island-area")
    isl = harness.island_setup(run)
    rec = {"theta": isl.center.theta, "j": isl.center.action_j, "area": isl.area,
           "box": list(isl.box), "grid_step": run.config.numerics.grid_step}
    run.write("island.json", json_bytes(rec))
    print(json.dumps(rec))
    return run


def cmd_resonance_fit(args) -> Run:
    run = Run(_config(args), "resonance-fit")
    if args.s_plus is not None or args.s_minus is not None or args.trace is not None:
        if None in (args.s_plus, args.s_minus, args.trace):
            raise QAMError("--s-plus, --s-minus and --trace go together")
        rec = fit_resonance_params(args.s_plus, args.s_minus, args.trace, args.r, args.s).to_dict()
        rec["source"] = "fitted"
    else:
        isl = harness.island_setup(run)
        seed = ChainSeed(args.r, args.s, args.inner, args.outer, args.orbit)
        rec = harness.fit_chain(run, isl, seed)
    run.write("resonance.json", json_bytes(rec))
    print(json.dumps(rec, sort_keys=True))
    return run


def cmd_spectrum(args) -> Run:
    run = Run(_config(args), "spectrum")
    nm = run.config.numerics
    p = commensurate(run.params.drift, nm.hbar, run.config.sweep.n_max)
    run.extra["planck"] = {"hbar": p.hbar, "m": p.m, "n": p.n}
    if args.stabilized:
        isl = harness.island_setup(run)
        states = spectral.find_stabilized(run.params, p, nm.nu_sequence,
                                          run.config.tolerances.stabilization,
                                          dense_max=nm.dense_max)
        spectral.label_island_overlap(states, isl.box)
        rows = [(s.z.real, s.z.imag, s.gamma, s.quasienergy, s.drift_across_nu,
                 s.island_overlap, s.basis_size) for s in states]
        run.write_csv("states.csv", ("re", "im", "gamma", "w", "drift", "island_overlap", "nu"),
                      rows)
        return run
    key = harness.cache_key("matrix", run.params, p.hbar, p.m, p.n, args.basis, args.rho)
    if args.rho is None:
        U = run.cache.matrix(key, lambda: build_circle_operator(run.params, p, args.basis))
    else:
        U = run.cache.matrix(key, lambda: build_complex_scaled(run.params, p, args.rho,
                                                               args.basis, boundary="periodic"))
    spec = spectral.eigendecompose(U, vectors=False)
    run.write_csv("spectrum.csv", ("re", "im", "gamma", "w"),
                  zip(spec.eigenvalues.real, spec.eigenvalues.imag, spec.gamma, spec.quasienergy))
    return run


def cmd_decay_sweep(args) -> Run:
    run = Run(_config(args), "decay-sweep")
    isl = harness.island_setup(run)
    grid = run.config.sweep.grid()
    for method in run.config.methods:
        g = grid if method == "truncated" else harness.integer_grid(grid)
        run.write_curve(f"curve_{method}.csv", harness.sweep(run, method, g, isl))
    return run


def cmd_propagate(args) -> Run:
    run = Run(_config(args), "propagate")
    nm = run.config.numerics
    isl = harness.island_setup(run)
    p = commensurate(run.params.drift, nm.hbar, run.config.sweep.n_max)
    wd = spectral.wavepacket_decay(run.params, p, isl.center, nm.wavepacket_steps,
                                   (isl.box[2], isl.box[3]), nm.log2_size)
    run.write_csv("probes.csv", ("t", "norm", "window_prob"), wd.probes.as_rows())
    run.extra["fit"] = {"window_rate": wd.window_rate, "gamma": wd.gamma,
                        "residual": wd.residual, "hbar": p.hbar}
    return run


def cmd_wkb(args) -> Run:
    run = Run(_config(args), "wkb")
    grid = run.config.sweep.grid()
    for th in ("wkb_bottom", "wkb_ground"):
        run.write_curve(f"curve_{th}.csv",
                        harness.theory_curve(run, th, grid, pendulum=run.params.pendulum()))
    return run


def _chain_arg(args, run: Run, isl=None):
    if args.chain:
        return ResonanceChain.from_dict(json.loads(Path(args.chain).read_text()))
    if args.r is None:
        raise QAMError("give --chain FILE or --r")
    if getattr(args, "i_rs", None) is not None:
        return ResonanceChain(args.r, 1, args.i_rs, math.nan, math.nan)
    isl = isl or harness.island_setup(run)
    rec = harness.fit_chain(run, isl, ChainSeed(args.r))
    ch = harness.chain_from_record(rec)
    if ch is None:
        raise QAMError(f"could not fit the {args.r}:1 chain")
    return ch


def cmd_rat(args) -> Run:
    run = Run(_config(args), "rat")
    bad = [t for t in args.theory if t not in THEORY_METHODS or t.startswith("wkb")]
    if bad:
        raise QAMError(f"unknown RAT method(s) {bad}")
    isl = harness.island_setup(run)
    chain = _chain_arg(args, run, isl)
    area = args.area if args.area is not None else isl.area
    run.extra["chain"] = chain.to_dict()
    run.extra["island_area"] = area
    grid = run.config.sweep.grid()
    for th in args.theory:
        run.write_curve(f"curve_{th}.csv",
                        harness.theory_curve(run, th, grid, chain=chain, island_area=area,
                                             pendulum=run.params.pendulum(), n_i=args.n_i))
    return run


def cmd_degeneracies(args) -> Run:
    run = Run(_config(args), "degeneracies")
    chain = _chain_arg(args, run)
    pts = degeneracy_points(chain, args.n_i, args.l_max, args.area)
    run.write_csv("degeneracies.csv", ("inv_hbar", "l", "valid", "ladder_length"),
                  [(d.inv_hbar, d.l, d.valid, d.length) for d in pts])
    return run


def cmd_figure(args) -> Run:
    if args.name not in FIGURES:
        raise QAMError(f"unknown figure {args.name!r}; choose from {', '.join(FIGURES)}")
    return harness.run_figure(args.name, overrides_from_args(args))


def cmd_compare(args) -> Run:
    run = Run(_config(args), "compare")
    curves = [read_curve(path) for path in args.curves]
    labels = [Path(path).stem for path in args.curves]
    rep = compare_methods(curves, run.config.tolerances.compare_factor, labels)
    cols, rows = rep.table()
    run.write_csv("comparison.csv", cols, rows)
    run.extra["summary"] = rep.summary
    run.extra["inputs"] = labels
    print(json.dumps(rep.summary, sort_keys=True))
    return run


COMMANDS = {
    "portrait": cmd_portrait, "fixed-point": cmd_fixed_point, "island-area": cmd_island_area,
    "resonance-fit": cmd_resonance_fit, "spectrum": cmd_spectrum, "decay-sweep": cmd_decay_sweep,
    "propagate": cmd_propagate, "wkb": cmd_wkb, "rat": cmd_rat, "degeneracies": cmd_degeneracies,
    "figure": cmd_figure, "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = COMMANDS[args.command](args)
    except (QAMError, ValueError, OSError) as exc:
        print(f"qamdecay {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if run.files.get("metadata.json") is None:
        run.finish()
    if run.failures:
        print(f"qamdecay {args.command}: {len(run.failures)} point failure(s), see "
              f"{run.out / 'run.log'}", file=sys.stderr)
    return run.exit_code


if __name__ == "__main__":
    sys.exit(main())
