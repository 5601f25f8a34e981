"""
Figure pipelines and sweep orchestration.

A run owns an output directory, a cache and a sidecar log.  CSV and JSON
outputs are written deterministically: floats by ``repr``, keys sorted, no
timestamps.  Timestamps and per-point failures go only to ``run.log``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import spectral
from .cache import Cache, cache_key
from .classical import (
    MapParams,
    PhaseState,
    ResonanceChain,
    find_fixed_point,
    fit_resonance_params,
    island_mask,
    locate_chain,
    measure_chain_areas,
    monodromy_trace,
    find_periodic_orbit,
    phase_portrait,
    torus_layout,
)
from .config import ChainSeed, ExperimentConfig, code_version, from_dict, merge
from .exceptions import NoCommonPoints, QAMError, UnknownFigure
from .quantum import (
    commensurate,
    commensurate_inv,
    coherent_state,
    husimi,
    propagate,
)
from .spectral import DECAY_COLUMNS, DecayCurve, DecayPoint
from .tunneling import (
    build_ladder,
    continuum_rate,
    layout_energy_model,
    theory_rate,
    xi0_explicit,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# deterministic writers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_bytes(columns: Sequence[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        vals = [row[c] for c in columns] if isinstance(row, dict) else row
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue().encode()


def json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, default=_json_default,
                       allow_nan=True) + "\n").encode()


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def read_curve(path) -> DecayCurve:
    """Parse a DecayCurve CSV back into points."""
    pts = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pts.append(DecayPoint(float(row["inv_hbar_requested"]), float(row["inv_hbar_snapped"]),
                                  int(row["m"]), int(row["n"]), float(row["gamma"]),
                                  float(row["w"]), row["method"], float(row["nu_or_rho"]),
                                  float(row["overlap"])))
    return DecayCurve(pts)


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------

class Run:
    """Output directory, cache and failure log of one invocation."""

    def __init__(self, config: ExperimentConfig, name: str, subdir: Optional[str] = None):
        self.config = config.resolved()
        self.name = name
        self.out = Path(self.config.output_dir) / (subdir if subdir is not None else name)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cache = Cache(self.config.cache.directory, self.config.cache.enabled)
        self.files: dict = {}
        self.failures: list = []
        self.extra: dict = {}
        self._log = open(self.out / "run.log", "a")
        self.note(f"start {name}")

    @property
    def params(self) -> MapParams:
        m = self.config.map
        return MapParams(m.kick, m.drift, m.sign)

    def note(self, msg: str) -> None:
        self._log.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}\n")
        self._log.flush()

    def fail(self, where: str, error: str) -> None:
        self.failures.append({"where": where, "error": error})
        self.note(f"FAIL {where}: {error}")
        log.warning("%s: %s", where, error)

    def write(self, filename: str, data: bytes) -> Path:
        path = self.out / filename
        path.write_bytes(data)
        self.files[filename] = hashlib.sha256(data).hexdigest()
        return path

    def write_csv(self, filename: str, columns, rows) -> Path:
        return self.write(filename, csv_bytes(columns, rows))

    def write_curve(self, filename: str, curve: DecayCurve) -> Path:
        """Successful rows only, sorted by snapped 1/hbar then method; failures are logged."""
        good = []
        for pt in curve.points:
            if pt.error or not (np.isfinite(pt.gamma) and pt.gamma > 0):
                self.fail(f"{filename} @ 1/hbar={pt.inv_hbar_requested:.6g}",
                          pt.error or f"gamma={pt.gamma}")
            else:
                good.append(pt)
        good.sort(key=lambda p: (p.inv_hbar_snapped, p.method, p.inv_hbar_requested))
        return self.write_csv(filename, DECAY_COLUMNS, [p.row() for p in good])

    def finish(self) -> dict:
        meta = {"name": self.name, "config": self.config.to_dict(), "code_version": code_version(),
                "files": dict(sorted(self.files.items())), "failures": len(self.failures)}
        meta.update(self.extra)
        self.write("metadata.json", json_bytes(meta))
        self.note(f"done: {len(self.failures)} failure(s), cache hits {self.cache.hits}, "
                  f"misses {self.cache.misses}, corrupt {self.cache.corrupt}")
        self._log.close()
        return meta

    @property
    def exit_code(self) -> int:
        if self.extra.get("fatal"):
            return 1
        return 2 if self.failures else 0


# ---------------------------------------------------------------------------
# classical setup
# ---------------------------------------------------------------------------

@dataclass
class Island:
    center: PhaseState
    trace: float
    box: tuple
    area: float


def island_setup(run: Run) -> Island:
    P, nm = run.params, run.config.numerics

    def compute():
        fp, tr, _ = find_fixed_point(P)
        box = island_mask(P, fp, nm.island_grid_step, nm.escape_horizon).bounding_box()
        area = island_mask(P, fp, nm.grid_step, nm.area_horizon).area
        return {"theta": fp.theta, "j": fp.action_j, "trace": tr, "box": list(box), "area": area}

    d = run.cache.json(cache_key("island", P, nm.island_grid_step, nm.escape_horizon,
                                 nm.grid_step, nm.area_horizon), compute)
    return Island(PhaseState(d["theta"], d["j"]), d["trace"], tuple(d["box"]), d["area"])


def portrait_rows(P: MapParams, center: PhaseState, steps: int, n_seeds: int = 16):
    """Orbits launched along the ray theta = center + offset, out past the island."""
    offs = np.linspace(0.05, 3.0, n_seeds)
    seeds = [PhaseState(center.theta + o, center.action_j) for o in offs]
    cloud = phase_portrait(P, seeds, steps, j_center=center.action_j)
    return zip(cloud.theta, cloud.j, cloud.label)


def fit_chain(run: Run, island: Island, seed: ChainSeed) -> dict:
    """
    Fitted chain parameters with the reference values alongside.

    Returns a flat record: the fitted ResonanceChain fields, ``reference_*``
    values, and ``source`` ('fitted' or 'reference', the latter after a logged
    fit failure).
    """
    P, nm = run.params, run.config.numerics
    r, s = seed.r, seed.s

    def compute():
        try:
            if seed.inner_seed and seed.outer_seed:
                inner = PhaseState(*seed.inner_seed)
                outer = PhaseState(*seed.outer_seed)
                if seed.orbit_seed:
                    orbit = find_periodic_orbit(P, PhaseState(*seed.orbit_seed), r)
                    tr = monodromy_trace(P, orbit, r)
                else:
                    loc = locate_chain(P, island.center, r, s)
                    tr = loc.monodromy_trace
            else:
                loc = locate_chain(P, island.center, r, s)
                inner, outer, tr = loc.inner_seed, loc.outer_seed, loc.monodromy_trace
            areas = measure_chain_areas(P, island.center, r, s, inner, outer, nm.grid_step,
                                        escape_horizon=min(nm.area_horizon, 4000))
            ch = fit_resonance_params(areas.s_plus, areas.s_minus, tr, r, s)
            return {"ok": True, "chain": ch.to_dict()}
        except (QAMError, ValueError) as exc:
            return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}

    key = cache_key("chain", P, r, s, seed.inner_seed, seed.outer_seed, seed.orbit_seed,
                    nm.grid_step, nm.area_horizon, island.center.theta)
    res = run.cache.json(key, compute)
    cap = seed.reference or {}
    rec = {f"reference_{k}": cap.get(k) for k in ("i_rs", "coupling", "mass")}
    if res["ok"]:
        rec.update(res["chain"])
        rec["source"] = "fitted"
        return rec
    run.fail(f"chain {r}:{s}", res["error"])
    if not cap:
        rec.update({"r": r, "s": s, "source": "none"})
        return rec
    rec.update(ResonanceChain(r, s, cap["i_rs"], cap["mass"], cap["coupling"]).to_dict())
    rec["source"] = "reference"
    return rec


def chain_from_record(rec: dict, use_reference: bool = False) -> Optional[ResonanceChain]:
    if use_reference:
        if rec.get("reference_i_rs") is None:
            return None
        return ResonanceChain(rec["r"], rec.get("s", 1), rec["reference_i_rs"],
                              rec["reference_mass"], rec["reference_coupling"])
    if rec.get("source") == "none" or rec.get("coupling") is None:
        return None
    return ResonanceChain.from_dict(rec)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def _point_job(job: dict) -> list:
    """One snapped (m, n) point of one numerical method; runs in a worker."""
    P = MapParams(*job["params"])
    box = tuple(job["box"])
    center = PhaseState(*job["center"])
    j_window = (box[2], box[3])
    curve = spectral.sweep_decay(
        P, [job["inv_hbar"]], job["method"], selection="minimal_island", island_box=box,
        center=center, nu_sequence=job["nu_sequence"], tol=job["tol"], n_max=job["n_max"],
        rho_list=job["rho_list"], nu_cs=job["nu_cs"], wavepacket_steps=job["steps"],
        log2_size=job["log2_size"], j_window=j_window, dense_max=job["dense_max"])
    pt = curve.points[0]
    return [pt.gamma, pt.w, pt.nu_or_rho, pt.overlap, pt.error]


def sweep(run: Run, method: str, grid: Sequence[float], island: Island) -> DecayCurve:
    """
    Decay curve of one numerical method with per-point caching.

    Requests are snapped first; each distinct (m, n) is computed once, in a
    process pool when ``numerics.workers > 1``.  Results are assembled in
    request order, so the output does not depend on the worker count.
    """
    cfg, P, nm = run.config, run.params, run.config.numerics
    snapped, jobs, keys = [], {}, {}
    for req in grid:
        try:
            p = commensurate_inv(P.drift, req, cfg.sweep.n_max, cfg.sweep.snap_tolerance)
        except QAMError as exc:
            snapped.append((req, None, str(exc)))
            continue
        snapped.append((req, p, ""))
        mn = (p.m, p.n)
        if mn in jobs:
            continue
        job = {"params": [P.kick, P.drift, P.sign], "inv_hbar": p.inv_hbar, "method": method,
               "box": list(island.box), "center": [island.center.theta, island.center.action_j],
               "nu_sequence": list(nm.nu_sequence), "tol": cfg.tolerances.stabilization,
               "n_max": cfg.sweep.n_max, "rho_list": list(nm.rho_list),
               "nu_cs": nm.nu_complex_scaling, "steps": nm.wavepacket_steps,
               "log2_size": nm.log2_size, "dense_max": nm.dense_max}
        jobs[mn] = job
        keys[mn] = cache_key("point", job)
    results = {}
    todo = []
    for mn, job in jobs.items():
        raw = run.cache.get(keys[mn])
        if raw is not None:
            results[mn] = json.loads(raw.decode())
        else:
            todo.append(mn)
    if todo:
        if nm.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=nm.workers) as pool:
                outs = list(pool.map(_point_job, [jobs[mn] for mn in todo]))
        else:
            outs = [_point_job(jobs[mn]) for mn in todo]
        for mn, res in zip(todo, outs):
            results[mn] = res
            if not res[4]:  # failures are retried on the next run
                run.cache.put(keys[mn], json.dumps(res).encode())
    pts = []
    for req, p, err in snapped:
        if p is None:
            pts.append(DecayPoint(req, math.nan, 0, 0, math.nan, math.nan, method, math.nan,
                                  math.nan, err))
            continue
        g, w, nr, ov, e = results[(p.m, p.n)]
        pts.append(DecayPoint(req, p.inv_hbar, p.m, p.n, g, w, method, nr, ov, e))
    return DecayCurve(pts)


def theory_curve(run: Run, method: str, grid: Sequence[float], label: Optional[str] = None,
                 **kwargs) -> DecayCurve:
    """A theory method evaluated at the snapped grid (errors recorded per point)."""
    P, sw = run.params, run.config.sweep
    pts = []
    for req in grid:
        try:
            p = commensurate_inv(P.drift, req, sw.n_max, sw.snap_tolerance)
        except QAMError as exc:
            pts.append(DecayPoint(req, math.nan, 0, 0, math.nan, math.nan, label or method,
                                  math.nan, math.nan, str(exc)))
            continue
        try:
            g = theory_rate(method, p.inv_hbar, **kwargs)
            err = ""
        except (QAMError, ValueError, IndexError) as exc:
            g, err = math.nan, f"{type(exc).__name__}: {exc}"
        pts.append(DecayPoint(req, p.inv_hbar, p.m, p.n, g, math.nan, label or method,
                              math.nan, math.nan, err))
    return DecayCurve(pts)


def integer_grid(grid: Sequence[float]) -> list:
    """The integer values of 1/hbar inside the grid's range."""
    lo, hi = min(grid), max(grid)
    return [float(k) for k in range(math.ceil(lo), math.floor(hi) + 1)]


# ---------------------------------------------------------------------------
# figure registry
# ---------------------------------------------------------------------------

@dataclass
class FigureSpec:
    kick: float
    drift: float
    chains: list = field(default_factory=list)      # ChainSeed dicts
    methods: tuple = ("truncated",)
    theory: tuple = ()
    kind: str = "sweep"                              # 'sweep', 'theory', 'husimi', 'probes', 'excited'
    inv_hbar_range: Optional[tuple] = None


_F5_CHAIN = {"r": 4, "s": 1, "reference": {"i_rs": 0.43, "coupling": 7.275e-4, "mass": 3.866}}

FIGURES = {
    "fig3": FigureSpec(0.8, 0.7, theory=("wkb_bottom", "wkb_ground")),
    "fig4": FigureSpec(0.7, 0.5, [{"r": 11, "s": 1, "reference": {"i_rs": 0.251,
                                                               "coupling": 4.376e-8,
                                                               "mass": 2.785}}],
                       theory=("wkb_bottom", "wkb_ground", "rat_unperturbed")),
    "fig5": FigureSpec(2.5, 1.0, [_F5_CHAIN], ("truncated", "complex_scaling", "wavepacket"),
                       ("rat_unperturbed", "rat_continuum")),
    "fig6": FigureSpec(2.5, 1.0, [_F5_CHAIN], (), ("rat_unperturbed", "rat_continuum"),
                       kind="theory"),
    "fig7": FigureSpec(np.pi, 0.5, [{"r": 3, "s": 1, "reference": {"i_rs": 0.13, "coupling": 1.9e-3,
                                                                 "mass": 1.52}}],
                       theory=("rat_three",)),
    "fig8": FigureSpec(1.329, 0.5336,
                       [{"r": 6, "s": 1, "reference": {"i_rs": 0.46, "coupling": 1.8e-4,
                                                     "mass": 4.504}},
                        {"r": 7, "s": 1, "reference": {"i_rs": 0.93, "coupling": 3.1e-4,
                                                     "mass": 2.626}}],
                       theory=("rat_unperturbed",)),
    "fig9": FigureSpec(2.5, 1.0, kind="husimi"),
    "fig10": FigureSpec(2.5, 1.0, kind="probes"),
    "fig11": FigureSpec(2.5, 1.0, [_F5_CHAIN], ("truncated",),
                        ("rat_unperturbed", "rat_perturbed", "rat_semiclassical"),
                        kind="excited", inv_hbar_range=(7.0, 9.0)),
}


def figure_config(name: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults of a named figure merged with user overrides."""
    if name not in FIGURES:
        raise UnknownFigure(f"unknown figure {name!r}; choose from {', '.join(FIGURES)}")
    spec = FIGURES[name]
    base = {"map": {"kick": spec.kick, "drift": spec.drift, "sign": "minus"},
            "methods": list(spec.methods), "chains": [dict(c) for c in spec.chains]}
    if spec.inv_hbar_range is not None:
        base["sweep"] = {"inv_hbar_min": spec.inv_hbar_range[0],
                         "inv_hbar_max": spec.inv_hbar_range[1], "points": 17, "n_max": 16}
    return from_dict(merge(base, overrides or {}))


def run_figure(name: str, overrides: Optional[dict] = None) -> Run:
    """
    Compute and write every dataset needed to re-plot figure ``name``.

    Raises UnknownFigure before doing any work.  Per-point failures are logged
    and counted; the returned Run's ``exit_code`` is 2 if any occurred.
    """
    cfg = figure_config(name, overrides)
    spec = FIGURES[name]
    run = Run(cfg, name)
    try:
        island = island_setup(run)
        run.extra["island"] = {"theta": island.center.theta, "j": island.center.action_j,
                               "trace": island.trace, "box": list(island.box),
                               "area": island.area}
        run.write_csv("portrait.csv", ("theta", "j", "label"),
                      portrait_rows(run.params, island.center, run.config.numerics.portrait_steps))
        chains = [fit_chain(run, island, c) for c in run.config.chains]
        if chains:
            run.extra["chains"] = chains
        {"sweep": _fig_sweep, "theory": _fig_sweep, "husimi": _fig_husimi,
         "probes": _fig_probes, "excited": _fig_excited}[spec.kind](run, spec, island, chains)
    except QAMError as exc:
        run.fail(name, f"{type(exc).__name__}: {exc}")
        run.extra["fatal"] = True
    run.finish()
    return run


def _theory_kwargs(run: Run, island: Island, chain: Optional[ResonanceChain]) -> dict:
    return {"pendulum": run.params.pendulum(), "chain": chain, "island_area": island.area}


def _fig_sweep(run: Run, spec: FigureSpec, island: Island, chains: list) -> None:
    grid = run.config.sweep.grid()
    for method in run.config.methods:
        g = grid if method == "truncated" else integer_grid(grid)
        run.write_curve(f"curve_{method}.csv", sweep(run, method, g, island))
    for th in spec.theory:
        if th.startswith("wkb"):
            run.write_curve(f"curve_{th}.csv",
                            theory_curve(run, th, grid, **_theory_kwargs(run, island, None)))
            continue
        for rec in chains:
            suffix = "" if len(chains) == 1 else f"_{rec['r']}_{rec.get('s', 1)}"
            for use_reference, tag in ((False, ""), (True, "_reference")):
                ch = chain_from_record(rec, use_reference)
                if ch is None:
                    continue
                kw = _theory_kwargs(run, island, ch)
                if th == "rat_three":
                    curves = [theory_curve(run, "rat_unperturbed", grid, f"rat_n{k}", n_i=k, **kw)
                              for k in range(3)]
                    for k, c in enumerate(curves):
                        run.write_curve(f"curve_rat_n{k}{suffix}{tag}.csv", c)
                    run.write_curve(f"curve_rat_min{suffix}{tag}.csv", _pointwise_min(curves))
                else:
                    run.write_curve(f"curve_{th}{suffix}{tag}.csv",
                                    theory_curve(run, th, grid, **kw))
    if spec.kind == "theory":
        _continuum_table(run, island, chains, grid)


def _pointwise_min(curves: list) -> DecayCurve:
    pts = []
    for group in zip(*(c.points for c in curves)):
        ok = [p for p in group if not p.error and np.isfinite(p.gamma)]
        if ok:
            best = min(ok, key=lambda p: p.gamma)
            pts.append(DecayPoint(best.inv_hbar_requested, best.inv_hbar_snapped, best.m, best.n,
                                  best.gamma, best.w, "rat_min", best.nu_or_rho, best.overlap))
        else:
            p = group[0]
            pts.append(DecayPoint(p.inv_hbar_requested, p.inv_hbar_snapped, p.m, p.n, math.nan,
                                  math.nan, "rat_min", math.nan, math.nan, p.error))
    return DecayCurve(pts)


def _continuum_table(run: Run, island: Island, chains: list, grid) -> None:
    """Explicit vs continuum xi0 on the grid (the comparison the theory figure shows)."""
    rows = []
    ch = chain_from_record(chains[0]) if chains else None
    if ch is None:
        return
    for req in grid:
        p = commensurate_inv(run.params.drift, req, run.config.sweep.n_max,
                             run.config.sweep.snap_tolerance)
        spec = build_ladder(ch, p.hbar, island.area)
        try:
            xe = xi0_explicit(spec)
        except QAMError as exc:
            run.fail(f"xi0 @ 1/hbar={p.inv_hbar:.6g}", str(exc))
            continue
        xc, _ = continuum_rate(spec)
        rows.append((p.inv_hbar, spec.length, xe, xc, abs(xc - xe) / abs(xe)))
    run.write_csv("xi0_comparison.csv",
                  ("inv_hbar_snapped", "ladder_length", "xi0_explicit", "xi0_continuum",
                   "relative_difference"), rows)


def _single_point(run: Run):
    nm = run.config.numerics
    return commensurate(run.params.drift, nm.hbar, run.config.sweep.n_max)


def _eigenstate(run: Run, island: Island, p):
    """Stabilized island state with the largest island mass among the slowest ones."""
    nm = run.config.numerics
    states = spectral.find_stabilized(
        run.params, p, nm.nu_sequence, run.config.tolerances.stabilization,
        dense_max=nm.dense_max, select=spectral.island_selector(island.box, hbar=p.hbar,
                                                                beta=p.beta))
    return spectral.minimal_island_state(states, island.box)


def _husimi_rows(psi, island: Island, n_theta: int = 96, n_j: int = 96):
    th = np.linspace(0.0, 2 * np.pi, n_theta, endpoint=False)
    jj = np.linspace(island.center.action_j - np.pi, island.center.action_j + np.pi, n_j)
    q = husimi(psi, th, jj)
    return [(t, j, q[b, a]) for b, j in enumerate(jj) for a, t in enumerate(th)]


def _fig_husimi(run: Run, spec: FigureSpec, island: Island, chains: list) -> None:
    nm = run.config.numerics
    p = _single_point(run)
    times = sorted({t for t in (100, 1000, 16000) if t <= nm.wavepacket_steps}
                   | {nm.wavepacket_steps})
    span = (1 << nm.log2_size) * p.hbar
    psi = coherent_state(island.center, p, nm.log2_size,
                         j_center=island.center.action_j + run.params.sigma * 0.375 * span)
    snaps = propagate(psi, run.params, p, times[-1], probe_every=times[-1],
                      snapshot_times=times).snapshots
    for t in times:
        run.write_csv(f"husimi_t{t}.csv", ("theta", "j", "q"), _husimi_rows(snaps[t], island))
    try:
        st = _eigenstate(run, island, p)
        run.write_csv("husimi_eigenstate.csv", ("theta", "j", "q"),
                      _husimi_rows(st.state(), island))
        run.extra["eigenstate"] = {"gamma": st.gamma, "z_re": st.z.real, "z_im": st.z.imag,
                                   "basis_size": st.basis_size}
    except QAMError as exc:
        run.fail("eigenstate", str(exc))


def _fig_probes(run: Run, spec: FigureSpec, island: Island, chains: list) -> None:
    nm = run.config.numerics
    p = _single_point(run)
    wd = spectral.wavepacket_decay(run.params, p, island.center, nm.wavepacket_steps,
                                   (island.box[2], island.box[3]), nm.log2_size)
    run.write_csv("probes.csv", ("t", "norm", "window_prob"), wd.probes.as_rows())
    run.extra["wavepacket_fit"] = {"window_rate": wd.window_rate, "gamma": wd.gamma,
                                   "residual": wd.residual}
    try:
        st = _eigenstate(run, island, p)
        psi = st.state()
        run.write_csv("eigenstate_momentum.csv", ("j", "prob"),
                      zip(psi.j_values, np.abs(psi.amplitudes) ** 2))
        run.extra["eigenstate"] = {"gamma": st.gamma, "basis_size": st.basis_size}
    except QAMError as exc:
        run.fail("eigenstate", str(exc))


def _fig_excited(run: Run, spec: FigureSpec, island: Island, chains: list) -> None:
    grid = run.config.sweep.grid()
    rec = chains[0]
    P = run.params
    layout = torus_layout(P, island.center, np.linspace(0.05, 1.5, 30))
    model = layout_energy_model(layout)
    for use_reference, tag in ((False, ""), (True, "_reference")):
        ch = chain_from_record(rec, use_reference)
        if ch is None:
            continue
        kw = _theory_kwargs(run, island, ch)
        for th in spec.theory:
            extra = {"energy_model": model} if th == "rat_semiclassical" else {}
            run.write_curve(f"curve_{th}_excited{tag}.csv",
                            theory_curve(run, th, grid, th, n_i=1, **kw, **extra))
    if "truncated" not in run.config.methods:
        return
    nm = run.config.numerics
    cross = spectral.crossing_grid(min(grid), max(grid), run.config.sweep.n_max, P.drift)

    def compute():
        track, data = spectral.crossing_sweep(P, cross, island.box, island.center,
                                              nu_sequence=tuple(nm.nu_sequence[:2]),
                                              n_max=run.config.sweep.n_max)
        return {"x": list(track.x), "re": track.branches.real.tolist(),
                "im": track.branches.imag.tolist(), "distance": list(track.distance),
                "markers": [[m.x, m.index, m.distance] for m in track.markers]}

    key = cache_key("crossing", P, cross, island.box, list(nm.nu_sequence[:2]))
    d = run.cache.json(key, compute)
    rows = []
    pts = []
    for i, x in enumerate(d["x"]):
        p = commensurate_inv(P.drift, x, run.config.sweep.n_max)
        for b in range(len(d["re"])):
            rows.append((x, b, -d["im"][b][i], d["re"][b][i]))
        g = -d["im"][0][i]
        pts.append(DecayPoint(x, p.inv_hbar, p.m, p.n, g, d["re"][0][i], "truncated_excited",
                              float(nm.nu_sequence[1]), math.nan))
    run.write_csv("crossing_branches.csv", ("inv_hbar_snapped", "branch", "gamma", "w"), rows)
    run.write_curve("curve_truncated_excited.csv", DecayCurve(pts))
    run.extra["crossing_markers"] = [{"inv_hbar": m[0], "index": m[1], "distance": m[2]}
                                     for m in d["markers"]]


# ---------------------------------------------------------------------------
# method comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    labels: list
    rows: list            # per common point: snapped 1/hbar, gammas, max pairwise ratio, flag
    tolerance_factor: float
    summary: dict

    def table(self):
        cols = ["inv_hbar_snapped", *[f"gamma_{l}" for l in self.labels], "max_ratio", "flagged"]
        return cols, [(r["inv_hbar_snapped"], *r["gammas"], r["max_ratio"], r["flagged"])
                      for r in self.rows]


def compare_methods(curves: Sequence[DecayCurve], tolerance_factor: float = 2.0,
                    labels: Optional[Sequence[str]] = None) -> ComparisonReport:
    """
    Per-point agreement of several decay curves on their shared snapped grid.

    A point is flagged when the largest pairwise ratio of its rates exceeds
    ``tolerance_factor``.

    Raises
    ------
    NoCommonPoints
        If the curves share no snapped 1/hbar with a finite rate in each.
    """
    if len(curves) < 2:
        raise ValueError("compare_methods needs at least two curves")
    if labels is None:
        labels = []
        for i, c in enumerate(curves):
            base = c.points[0].method if c.points else f"curve{i}"
            labels.append(base if base not in labels else f"{base}_{i}")
    maps = []
    for c in curves:
        maps.append({round(p.inv_hbar_snapped, 12): p.gamma for p in c.points
                     if not p.error and np.isfinite(p.gamma) and p.gamma > 0})
    common = sorted(set.intersection(*(set(m) for m in maps)))
    if not common:
        raise NoCommonPoints("the curves share no snapped grid point with finite rates")
    rows = []
    for x in common:
        g = np.array([m[x] for m in maps])
        ratio = float(g.max() / g.min())
        rows.append({"inv_hbar_snapped": x, "gammas": [float(v) for v in g], "max_ratio": ratio,
                     "flagged": ratio > tolerance_factor})
    ratios = np.array([r["max_ratio"] for r in rows])
    summary = {"points": len(rows), "flagged": int(sum(r["flagged"] for r in rows)),
               "max_ratio": float(ratios.max()), "median_ratio": float(np.median(ratios)),
               "geometric_mean_ratio": float(np.exp(np.mean(np.log(ratios))))}
    return ComparisonReport(list(labels), rows, tolerance_factor, summary)
