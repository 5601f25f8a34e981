"""
Eigenanalysis of Floquet matrices: decay rates, stabilization across basis
size, complex-scaling scans, metastable-state selection and sweeps in 1/hbar.

An eigenvalue ``z`` of an ``n``-step operator has per-kick decay rate
``gamma = ln(1/|z|) / (2 n)`` and quasienergy ``w = -arg(z) / n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.sparse import linalg as splinalg
from scipy.spatial import cKDTree

from ._lapack import eig_unbalanced
from .classical import MapParams, PhaseState, TWO_PI, tangent_map
from .exceptions import ConvergenceFailure, EmptyCandidates, QAMError
from .quantum import (
    FloquetMatrix,
    PlanckSpec,
    WavepacketState,
    build_circle_operator,
    build_circle_sparse,
    build_complex_scaled,
    coherent_state,
    commensurate_inv,
    fit_exponential_tail,
    husimi,
    husimi_mass,
    max_entry_magnitude,
    propagate,
)

MAGNITUDE_LIMIT = 1e12
NULL_FLOOR = 1e-8

# number of eigensolves performed in this process, by kind (read by the cache tests)
SOLVE_COUNT = {"dense": 0, "shift_invert": 0}


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

def gamma_of(z, steps: int = 1):
    """Per-kick decay rate ``ln(1/|z|) / (2 steps)``."""
    with np.errstate(divide="ignore"):
        return -np.log(np.abs(z)) / (2.0 * steps)


def quasienergy_of(z, steps: int = 1):
    return -np.angle(z) / steps


@dataclass
class FloquetSpectrum:
    eigenvalues: np.ndarray
    eigenvectors: Optional[np.ndarray]
    gamma: np.ndarray
    quasienergy: np.ndarray
    steps: int
    method: str
    nu_or_rho: float
    params_hash: str = ""
    hbar: float = float("nan")
    beta: float = 0.0
    basis_size: int = 0

    def state(self, k: int) -> WavepacketState:
        return WavepacketState(self.eigenvectors[:, k], -self.basis_size, self.hbar, self.beta)


def canonical_order(z) -> np.ndarray:
    """Descending ``|z|``, then ascending ``arg z`` (rounded to make ties deterministic)."""
    z = np.asarray(z)
    return np.lexsort((np.round(np.angle(z), 12), -np.round(np.abs(z), 12)))


def eigendecompose(U: FloquetMatrix, vectors: bool = True,
                   residual_tol: float = 1e-8) -> FloquetSpectrum:
    """
    All eigenpairs of a Floquet matrix, canonically sorted.

    Raises
    ------
    ConvergenceFailure
        If LAPACK fails, entries are not finite, or a right-eigenvector
        residual exceeds ``residual_tol * ||U||_1``.
    """
    A = U.entries
    if not np.all(np.isfinite(A)):
        raise ConvergenceFailure("non-finite matrix entries", U.content_hash())
    SOLVE_COUNT["dense"] += 1
    try:
        z, V = eig_unbalanced(A, vectors)
    except linalg.LinAlgError as exc:
        raise ConvergenceFailure(str(exc), U.content_hash()) from exc
    order = canonical_order(z)
    z = z[order]
    if V is not None:
        V = V[:, order]
        V /= np.linalg.norm(V, axis=0)[None, :]
        scale = np.abs(A).sum(axis=0).max()
        limit = residual_tol * max(scale, 1e-300)
        res = np.linalg.norm(A @ V - V * z[None, :], axis=0)
        if res.max() > limit:
            raise ConvergenceFailure(
                f"eigenvector residual {res.max():.2e} exceeds {residual_tol:g}*||U||",
                U.content_hash())
    method = "complex_scaling" if U.kind == "complex_scaled" or U.rho is not None else "truncated"
    return FloquetSpectrum(z, V, gamma_of(z, U.steps_per_application),
                           quasienergy_of(z, U.steps_per_application), U.steps_per_application,
                           method, U.rho if U.rho is not None else U.basis_size, U.params_hash,
                           U.hbar, U.beta_in, U.basis_size)


def decay_rates(spectrum: FloquetSpectrum) -> np.ndarray:
    """``ln(1/|z|) / (2 n)`` with ``n`` the steps per application."""
    return gamma_of(spectrum.eigenvalues, spectrum.steps)


# ---------------------------------------------------------------------------
# stabilization across basis size
# ---------------------------------------------------------------------------

@dataclass
class StabilizedState:
    z: complex
    gamma: float
    vector: np.ndarray
    drift_across_nu: float
    island_overlap: float = float("nan")
    basis_size: int = 0
    hbar: float = float("nan")
    beta: float = 0.0
    steps: int = 1
    history: list = field(default_factory=list)

    @property
    def quasienergy(self) -> float:
        return float(-np.angle(self.z) / self.steps)

    def state(self) -> WavepacketState:
        return WavepacketState(self.vector, -self.basis_size, self.hbar, self.beta)


def _nearest(points: np.ndarray, queries: np.ndarray):
    tree = cKDTree(np.column_stack([points.real, points.imag]))
    dist, idx = tree.query(np.column_stack([queries.real, queries.imag]), k=1)
    return dist, idx


def refine_eigenvalue(A, z0: complex, v0=None, k: int = 1):
    """Eigenpair of a sparse matrix nearest ``z0`` by shift-invert Arnoldi."""
    SOLVE_COUNT["shift_invert"] += 1
    vals, vecs = splinalg.eigs(A, k=k, sigma=z0, which="LM", v0=v0, tol=1e-14,
                               maxiter=2000)
    j = int(np.argmin(np.abs(vals - z0)))
    v = vecs[:, j]
    return complex(vals[j]), v / np.linalg.norm(v)


def _embed(vec: np.ndarray, nu_from: int, nu_to: int) -> np.ndarray:
    out = np.zeros(2 * nu_to + 1, complex)
    off = nu_to - nu_from
    out[off:off + vec.size] = vec
    return out


def find_stabilized(params: MapParams, p: PlanckSpec, nu_sequence: Sequence[int],
                    tol: float = 1e-6, dense_max: int = 1024,
                    select: Optional[Callable[[np.ndarray, np.ndarray, int], np.ndarray]] = None,
                    max_refine: int = 64) -> list[StabilizedState]:
    """
    Eigenvalues of the truncated circle operator that do not move with ``nu``.

    Dense eigensolves are used for ``nu <= dense_max``; larger bases refine
    the surviving candidates by shift-invert on the banded sparse operator.
    ``select(z, vectors, nu)`` returns the indices (in priority order) of
    the dense-stage candidates worth refining; by default the smallest gamma
    come first.  At most ``max_refine`` are refined.

    Returns
    -------
    list of StabilizedState
        Sorted by ascending gamma; empty if nothing is stable.
    """
    nus = sorted(int(n) for n in nu_sequence)
    if len(nus) < 2:
        raise ValueError("need at least two basis sizes")
    if nus[0] > dense_max:
        raise ValueError("the smallest basis must be solved densely (nu <= dense_max)")
    dense = [n for n in nus if n <= dense_max]
    spectra = [eigendecompose(build_circle_operator(params, p, n)) for n in dense]
    first = spectra[0]
    # |z| ~ 0 belongs to the null space of the block edge (columns pushed out
    # of the basis by the drift), not to a resonance
    mod = np.abs(first.eigenvalues)
    cand = np.nonzero((mod < 1.0 - 1e-12) & (mod > NULL_FLOOR))[0]
    z_track = first.eigenvalues[cand].copy()
    drift = np.zeros(cand.size)
    hist = [[(nus[0], z)] for z in z_track]
    vecs = None
    for spec in spectra[1:]:
        dist, idx = _nearest(spec.eigenvalues, z_track)
        drift = np.maximum(drift, dist)
        # two tracks landing on one eigenvalue: keep the closer one
        for k in np.unique(idx):
            hits = np.nonzero(idx == k)[0]
            if hits.size > 1:
                drift[hits[hits != hits[np.argmin(dist[hits])]]] = np.inf
        z_track = spec.eigenvalues[idx]
        for h, z in zip(hist, z_track):
            h.append((int(spec.nu_or_rho), z))
        keep = drift < tol
        cand, z_track, drift, idx = cand[keep], z_track[keep], drift[keep], idx[keep]
        hist = [h for h, k in zip(hist, keep) if k]
        vecs = spec.eigenvectors[:, idx]
    last = spectra[-1]
    if vecs is None:
        vecs = first.eigenvectors[:, cand]
    nu_vec = int(last.nu_or_rho)
    sparse_nus = [n for n in nus if n > dense_max]
    if sparse_nus:
        if select is None:
            order = np.argsort(gamma_of(z_track, p.n))
        else:
            order = np.asarray(select(z_track, vecs, nu_vec), dtype=int)
        order = order[:max_refine]
        z_track, drift, vecs = z_track[order], drift[order], vecs[:, order]
        hist = [hist[i] for i in order]
        for n in sparse_nus:
            A = build_circle_sparse(params, p, n)
            new_z, new_v = [], []
            for j, z0 in enumerate(z_track):
                v0 = _embed(vecs[:, j], nu_vec, n)
                try:
                    z1, v1 = refine_eigenvalue(A, z0, v0)
                except (splinalg.ArpackError, splinalg.ArpackNoConvergence, RuntimeError):
                    z1, v1 = np.nan, v0
                new_z.append(z1)
                new_v.append(v1)
                hist[j].append((n, z1))
            new_z = np.array(new_z, complex)
            step = np.abs(new_z - z_track)
            step = np.where(np.isfinite(step), step, np.inf)
            drift = np.maximum(drift, step)
            for j in range(new_z.size):
                if np.isfinite(step[j]) and np.any(np.abs(new_z[:j] - new_z[j]) < 1e-10):
                    drift[j] = np.inf
            keep = drift < tol
            z_track, drift = new_z[keep], drift[keep]
            vecs = np.column_stack(new_v)[:, keep] if keep.any() else np.zeros((2 * n + 1, 0))
            hist = [h for h, k in zip(hist, keep) if k]
            nu_vec = n
    out = []
    for j, z in enumerate(z_track):
        g = float(gamma_of(z, p.n))
        if g <= 0:
            continue
        out.append(StabilizedState(complex(z), g, vecs[:, j], float(drift[j]), float("nan"),
                                   nu_vec, p.hbar, p.beta, p.n, hist[j]))
    out.sort(key=lambda s: s.gamma)
    return out


def overlap(probe: WavepacketState, vector_state: WavepacketState) -> float:
    """``|<probe|v>|**2`` over the momenta both states share (v normalized)."""
    if abs(probe.beta - vector_state.beta) > 1e-12:
        return 0.0
    lo = max(probe.l_start, vector_state.l_start)
    hi = min(probe.l_start + probe.amplitudes.size, vector_state.l_start + vector_state.amplitudes.size)
    if hi <= lo:
        return 0.0
    a = probe.amplitudes[lo - probe.l_start:hi - probe.l_start]
    b = vector_state.amplitudes[lo - vector_state.l_start:hi - vector_state.l_start]
    nb = np.linalg.norm(vector_state.amplitudes)
    na = np.linalg.norm(probe.amplitudes)
    return float(abs(np.vdot(a, b)) ** 2 / (na * nb) ** 2)


def select_by_overlap(states: Sequence[StabilizedState], probe: WavepacketState) -> StabilizedState:
    """Candidate with the largest overlap with ``probe``; ties go to the smaller gamma."""
    if not states:
        raise EmptyCandidates("no candidate states")
    scored = [(round(overlap(probe, s.state()), 12), -s.gamma, i) for i, s in enumerate(states)]
    return states[max(scored)[2]]


def island_cell_state(state: WavepacketState, box) -> WavepacketState:
    """
    Restriction of ``state`` to the 2 pi momentum cell centred on the island box, normalized.

    Metastable eigenvectors carry an outgoing tail that grows toward the
    basis edge, so their norm over the whole truncated basis depends on the
    basis size; the weight inside the island's own cell does not.
    """
    jc = 0.5 * (box[2] + box[3])
    j = state.j_values
    amp = np.where(np.abs(j - jc) <= np.pi, state.amplitudes, 0.0)
    nrm = np.linalg.norm(amp)
    if nrm == 0:
        return WavepacketState(amp, state.l_start, state.hbar, state.beta)
    return WavepacketState(amp / nrm, state.l_start, state.hbar, state.beta)


def island_mass(state: WavepacketState, box, n_theta: int = 96, n_j: int = 96) -> float:
    """
    Husimi mass inside the island box ``(th_lo, th_hi, j_lo, j_hi)``.

    The state is first restricted to the island's momentum cell and
    normalized there (:func:`island_cell_state`).
    """
    th = (np.arange(n_theta) + 0.5) * TWO_PI / n_theta
    j_lo, j_hi = box[2], box[3]
    jg = j_lo + (np.arange(n_j) + 0.5) * (j_hi - j_lo) / n_j
    cell = island_cell_state(state, box)
    if not np.any(cell.amplitudes):
        return 0.0
    return husimi_mass(husimi(cell, th, jg), th, jg, box)


def island_selector(box, threshold: float = 0.5, hbar: float = float("nan"), beta: float = 0.0):
    """``select`` hook for :func:`find_stabilized` ranking candidates by island mass."""
    def select(z, vecs, nu):
        mass = np.array([island_mass(WavepacketState(vecs[:, j], -nu, hbar, beta), box)
                         for j in range(vecs.shape[1])])
        good = np.nonzero(mass > threshold)[0]
        return good[np.argsort(gamma_of(z[good]))]
    return select


def label_island_overlap(states: Sequence[StabilizedState], box) -> None:
    for s in states:
        s.island_overlap = island_mass(s.state(), box)


def minimal_island_state(states: Sequence[StabilizedState], box,
                         threshold: float = 0.5) -> StabilizedState:
    """Smallest gamma among states with island Husimi mass above ``threshold``."""
    label_island_overlap(states, box)
    good = [s for s in states if s.island_overlap > threshold]
    if not good:
        raise EmptyCandidates("no stabilized state is localized on the island")
    return min(good, key=lambda s: s.gamma)


# ---------------------------------------------------------------------------
# complex scaling
# ---------------------------------------------------------------------------

@dataclass
class RhoScan:
    rhos: list
    spectra: list
    resonances: np.ndarray      # rho-stable eigenvalues (from the smallest accepted rho)
    spread: np.ndarray          # max |dz| of each resonance over the stable run
    rejected: list = field(default_factory=list)   # rho values failing the magnitude monitor


def default_rho_grid() -> list:
    return [0.90, 0.92, 0.94, 0.96, 0.98]


def scan_rho(params: MapParams, p: PlanckSpec, rho_list: Optional[Sequence[float]] = None,
             nu: int = 256, tol: float = 1e-6, min_run: int = 3,
             vectors: bool = False) -> RhoScan:
    """
    Eigenvalues of the periodic complex-scaled operator over a set of radii.

    Eigenvalues are matched across consecutive radii (from small to large
    ``rho``); those that move by less than ``tol`` over at least ``min_run``
    consecutive radii starting at the smallest accepted radius are reported as
    resonances.  Radii whose matrices exceed the magnitude limit are skipped.
    """
    rhos = sorted(default_rho_grid() if rho_list is None else rho_list)
    spectra, used, rejected = [], [], []
    for rho in rhos:
        U = build_complex_scaled(params, p, rho, nu, boundary="periodic")
        if max_entry_magnitude(U) > MAGNITUDE_LIMIT:
            rejected.append(rho)
            continue
        spectra.append(eigendecompose(U, vectors=vectors))
        used.append(rho)
    if not spectra:
        return RhoScan(used, spectra, np.zeros(0, complex), np.zeros(0), rejected)
    z = spectra[0].eigenvalues
    z = z[np.abs(z) < 1.0 - 1e-12]
    spread = np.zeros(z.size)
    run = np.ones(z.size, int)
    alive = np.ones(z.size, bool)
    cur = z.copy()
    for spec in spectra[1:]:
        if spec.nu_or_rho >= 1.0:
            break
        dist, idx = _nearest(spec.eigenvalues, cur)
        ok = alive & (dist < tol)
        run[ok] += 1
        spread[ok] = np.maximum(spread[ok], dist[ok])
        alive &= ok
        cur = spec.eigenvalues[idx]
    stable = run >= min(min_run, sum(1 for r in used if r < 1.0))
    return RhoScan(used, spectra, z[stable], spread[stable], rejected)


def match_resonance(z_target: complex, scan: RhoScan) -> tuple[complex, float]:
    """Resonance of a scan nearest ``z_target`` and its distance."""
    if scan.resonances.size == 0:
        raise EmptyCandidates("no rho-stable resonances")
    k = int(np.argmin(np.abs(scan.resonances - z_target)))
    return complex(scan.resonances[k]), float(abs(scan.resonances[k] - z_target))


# ---------------------------------------------------------------------------
# wavepacket decay rate in the eigenvalue convention
# ---------------------------------------------------------------------------

@dataclass
class WavepacketDecay:
    gamma: float            # in the eigenvalue convention ln(1/|z|)/2 per kick
    window_rate: float      # fitted decay rate of the window probability
    residual: float
    probes: object


def wavepacket_decay(params: MapParams, p: PlanckSpec, center: PhaseState, steps: int,
                     j_window: tuple[float, float], log2_size: int = 17,
                     t_min: Optional[int] = None, probe_every: int = 10,
                     absorbing: bool = True) -> WavepacketDecay:
    """
    Decay rate from the long-time window probability of a coherent state.

    The window probability of a metastable state falls like ``|z|**(2t)``,
    i.e. with rate ``4 gamma`` in the eigenvalue convention; the returned
    ``gamma`` is the fitted rate divided by 4.  The grid is offset so that
    three quarters of it lie on the side the escaping flux drifts to, and
    its ends absorb (see :func:`propagate`), so short grids can run long.
    """
    # escaping flux is accelerated along sigma * drift; give it most of the grid
    span = (1 << int(log2_size)) * p.hbar
    psi = coherent_state(center, p, log2_size,
                         j_center=center.action_j + params.sigma * 0.375 * span)
    probes = propagate(psi, params, p, steps, j_window=j_window, probe_every=probe_every,
                       absorbing=absorbing)
    t_min = steps // 2 if t_min is None else t_min
    rate, resid = fit_exponential_tail(probes.t, probes.window_prob, t_min)
    return WavepacketDecay(rate / 4.0, rate, resid, probes)


# ---------------------------------------------------------------------------
# sweeps in 1/hbar
# ---------------------------------------------------------------------------

DECAY_COLUMNS = ("inv_hbar_requested", "inv_hbar_snapped", "m", "n", "gamma", "w", "method",
                 "nu_or_rho", "overlap")


@dataclass
class DecayPoint:
    inv_hbar_requested: float
    inv_hbar_snapped: float
    m: int
    n: int
    gamma: float
    w: float
    method: str
    nu_or_rho: float
    overlap: float
    error: str = ""

    def row(self) -> dict:
        return {k: getattr(self, k) for k in DECAY_COLUMNS}


@dataclass
class DecayCurve:
    points: list

    @property
    def inv_hbar(self) -> np.ndarray:
        return np.array([pt.inv_hbar_snapped for pt in self.points])

    @property
    def gamma(self) -> np.ndarray:
        return np.array([pt.gamma for pt in self.points])

    def ok(self) -> "DecayCurve":
        return DecayCurve([pt for pt in self.points if not pt.error and np.isfinite(pt.gamma)])

    def rows(self) -> list[dict]:
        return [pt.row() for pt in self.points]


def sweep_decay(params: MapParams, inv_hbar_grid: Sequence[float], method: str = "truncated",
                selection: str = "minimal_island", island_box=None,
                center: Optional[PhaseState] = None, nu_sequence: Sequence[int] = (128, 256),
                tol: float = 1e-6, n_max: int = 16, rho_list=None, nu_cs: int = 256,
                wavepacket_steps: int = 4000, log2_size: int = 15,
                j_window: Optional[tuple[float, float]] = None,
                dense_max: int = 1024) -> DecayCurve:
    """
    Decay rate of the selected island state at each requested ``1/hbar``.

    Each request is snapped with :func:`commensurate_inv`; per-point errors
    are recorded in the row instead of aborting the sweep.

    Parameters
    ----------
    method : {'truncated', 'complex_scaling', 'wavepacket'}
    selection : {'minimal_island', 'overlap'}
        'minimal_island': smallest gamma among stabilized states whose Husimi
        mass in ``island_box`` exceeds 1/2.  'overlap': largest overlap with
        the coherent state at ``center``.
    """
    points = []
    cache: dict = {}
    for req in inv_hbar_grid:
        try:
            p = commensurate_inv(params.drift, req, n_max)
        except QAMError as exc:
            points.append(DecayPoint(req, float("nan"), 0, 0, float("nan"), float("nan"),
                                     method, float("nan"), float("nan"), str(exc)))
            continue
        key = (p.m, p.n)
        if key not in cache:
            try:
                cache[key] = _decay_point(params, p, method, selection, island_box, center,
                                          nu_sequence, tol, rho_list, nu_cs, wavepacket_steps,
                                          log2_size, j_window, dense_max)
            except QAMError as exc:
                cache[key] = (float("nan"), float("nan"), float("nan"), float("nan"), str(exc))
        g, w, nr, ov, err = cache[key]
        points.append(DecayPoint(req, p.inv_hbar, p.m, p.n, g, w, method, nr, ov, err))
    return DecayCurve(points)


def _decay_point(params, p, method, selection, box, center, nu_sequence, tol, rho_list, nu_cs,
                 wavepacket_steps, log2_size, j_window, dense_max):
    if method == "wavepacket":
        if center is None or j_window is None:
            raise ValueError("wavepacket sweeps need a center and a momentum window")
        wd = wavepacket_decay(params, p, center, wavepacket_steps, j_window, log2_size)
        return wd.gamma, float("nan"), float(1 << log2_size), float("nan"), ""
    select = None
    if selection == "minimal_island" and box is not None:
        select = island_selector(box, hbar=p.hbar, beta=p.beta)
    states = find_stabilized(params, p, nu_sequence, tol, dense_max=dense_max, select=select)
    if not states:
        raise EmptyCandidates("no stabilized states")
    if selection == "minimal_island":
        if box is None:
            raise ValueError("minimal_island selection needs the island box")
        chosen = minimal_island_state(states, box)
        ov = chosen.island_overlap
    elif selection == "overlap":
        probe = coherent_state(center, p, 12)
        chosen = select_by_overlap(states, probe)
        ov = overlap(probe, chosen.state())
    else:
        raise ValueError(f"unknown selection {selection!r}")
    if method == "truncated":
        return chosen.gamma, chosen.quasienergy, float(chosen.basis_size), ov, ""
    if method == "complex_scaling":
        scan = scan_rho(params, p, rho_list, nu_cs, tol)
        z, dist = match_resonance(chosen.z, scan)
        if dist > tol:
            raise EmptyCandidates(f"no rho-stable resonance within {tol:g} of the selected state")
        return (float(gamma_of(z, p.n)), float(quasienergy_of(z, p.n)),
                float(min(r for r in scan.rhos if r < 1.0)), ov, "")
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# avoided crossings
# ---------------------------------------------------------------------------

@dataclass
class CrossingMarker:
    x: float            # refined location
    index: int          # sweep index of the discrete minimum
    distance: float


@dataclass
class CrossingTrack:
    x: np.ndarray
    branches: np.ndarray       # (n_branches, n_points) complex: w - i gamma
    distance: np.ndarray       # inter-branch distance of branches 0 and 1
    markers: list
    ambiguous: np.ndarray      # guard-ratio failures during continuation


def _wrapped(d, period):
    if period is None:
        return d
    re = (d.real + 0.5 * period) % period - 0.5 * period
    return re + 1j * d.imag


def track_crossing(x: Sequence[float], candidates: Sequence[Sequence[complex]],
                   n_branches: int = 2, periods: Optional[Sequence[float]] = None,
                   guard_ratio: float = 3.0, start: Optional[Sequence[int]] = None,
                   features: Optional[Sequence[np.ndarray]] = None) -> CrossingTrack:
    """
    Continue branches of complex quasienergies ``w - i gamma`` through a sweep.

    Each branch moves to the nearest candidate at the next sweep point
    (quasienergy differences wrapped by ``periods`` if given).  A step whose
    second-nearest candidate is closer than ``guard_ratio`` times the nearest
    one is flagged ambiguous.

    If ``features`` is given (one ``(n_candidates, F)`` array per sweep point,
    rows normalized, e.g. flattened Husimi fields), branches are continued by
    the assignment maximizing the summed correlation with the previous
    point's features instead; a step is then flagged ambiguous when a chosen
    correlation is below ``1 - 1/guard_ratio``.

    Local minima of the distance between branches 0 and 1 are marked as
    avoided crossings; the location is refined by a parabola through the
    minimum and its neighbours.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < 3:
        raise ValueError("need at least three sweep points")
    cands = [np.asarray(c, complex) for c in candidates]
    per = [None] * len(x) if periods is None else list(periods)
    idx0 = list(range(n_branches)) if start is None else list(start)
    branches = np.empty((n_branches, len(x)), complex)
    branches[:, 0] = cands[0][idx0]
    ambiguous = np.zeros((n_branches, len(x)), bool)
    prev = list(idx0)
    for i in range(1, len(x)):
        c = cands[i]
        if features is not None:
            corr = np.abs(np.asarray(features[i - 1])[prev] @ np.asarray(features[i]).conj().T)
            rows, cols = optimize.linear_sum_assignment(-corr)
            pick = [int(cols[list(rows).index(b)]) for b in range(n_branches)]
            ambiguous[:, i] = corr[np.arange(n_branches), pick] < 1.0 - 1.0 / guard_ratio
        else:
            pick, taken = [], set()
            for b in range(n_branches):
                d = np.abs(_wrapped(c - branches[b, i - 1], per[i]))
                order = np.argsort(d)
                k = next(k for k in order if k not in taken) if len(taken) < c.size else order[0]
                taken.add(k)
                if c.size > 1:
                    second = d[order[1]] if order[0] == k else d[order[0]]
                    ambiguous[b, i] = second < guard_ratio * d[k]
                pick.append(int(k))
        branches[:, i] = c[pick]
        prev = pick
    dist = np.array([abs(_wrapped(branches[0, i] - branches[1, i], per[i])) for i in range(len(x))])
    markers = []
    for i in range(1, len(x) - 1):
        if dist[i] < dist[i - 1] and dist[i] < dist[i + 1]:
            x0, x1, x2 = x[i - 1:i + 2]
            y0, y1, y2 = dist[i - 1:i + 2]
            den = (x0 - x1) * (x0 - x2) * (x1 - x2)
            a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / den
            b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / den
            xm = -b / (2 * a) if a > 0 else x1
            markers.append(CrossingMarker(float(min(max(xm, x0), x2)), i, float(dist[i])))
    return CrossingTrack(x, branches, dist, markers, ambiguous)


# ---------------------------------------------------------------------------
# island levels and their avoided crossings
# ---------------------------------------------------------------------------

def depth_form(params: MapParams, center: PhaseState) -> np.ndarray:
    """
    Positive quadratic form invariant under the tangent map at an elliptic fixed point.

    For ``M = [[a, b], [c, d]]`` the form ``[[-c, (a-d)/2], [(a-d)/2, b]]``
    satisfies ``M^T S M = S``; its level sets are the linearized tori, so its
    Husimi expectation orders island states by depth.
    """
    (a, b), (c, d) = tangent_map(center.theta, center.action_j, params)
    S = np.array([[-c, 0.5 * (a - d)], [0.5 * (a - d), b]])
    return S if S[0, 0] > 0 else -S


@dataclass
class IslandLevels:
    """Island-localized stabilized states at one 1/hbar, ordered by depth (index = nominal n)."""

    p: PlanckSpec
    z: np.ndarray
    gamma: np.ndarray
    w: np.ndarray
    depth: np.ndarray
    mass: np.ndarray
    fields: np.ndarray          # (n_states, F) normalized Husimi fields on a common grid

    @property
    def candidates(self) -> np.ndarray:
        return self.w - 1j * self.gamma


def island_levels(params: MapParams, p: PlanckSpec, box, center: PhaseState,
                  nu_sequence: Sequence[int] = (128, 256), mass_threshold: float = 0.5,
                  n_grid: int = 64, tol: float = 1e-6) -> IslandLevels:
    """
    Stabilized states localized on the island, ordered by depth.

    The truncated basis holds near-copies of each island state on the
    neighbouring 2 pi momentum cells (equal gamma, different quasienergy);
    of each group with equal gamma (relative 1e-4) only the member with the
    largest island mass is kept.
    """
    states = find_stabilized(params, p, nu_sequence, tol)
    th = (np.arange(n_grid) + 0.5) * TWO_PI / n_grid
    jg = box[2] + (np.arange(n_grid) + 0.5) * (box[3] - box[2]) / n_grid
    S = depth_form(params, center)
    dth, dj = np.meshgrid((th - center.theta + np.pi) % TWO_PI - np.pi, jg - center.action_j)
    form = S[0, 0] * dth ** 2 + 2 * S[0, 1] * dth * dj + S[1, 1] * dj ** 2
    kept: list = []
    for s in states:
        q = husimi(island_cell_state(s.state(), box), th, jg)
        mass = husimi_mass(q, th, jg, box)
        twin = [k for k in kept if abs(k[0].gamma - s.gamma) < 1e-4 * s.gamma]
        if twin:
            if twin[0][1] >= mass:
                continue
            kept.remove(twin[0])
        kept.append((s, mass, q))
    kept = [k for k in kept if k[1] >= mass_threshold]
    depth = np.array([float((q * form).sum() / q.sum()) for _, _, q in kept])
    order = np.argsort(depth)
    kept = [kept[i] for i in order]
    fields = np.array([q.ravel() / np.linalg.norm(q) for _, _, q in kept]).reshape(len(kept), -1)
    return IslandLevels(p, np.array([k[0].z for k in kept], complex),
                        np.array([k[0].gamma for k in kept]),
                        np.array([k[0].quasienergy for k in kept]), depth[order],
                        np.array([k[1] for k in kept]), fields)


def crossing_grid(lo: float, hi: float, n: int, drift: float = 1.0) -> list:
    """Values of 1/hbar in ``[lo, hi]`` with ``drift/hbar = m/n`` in lowest terms (fixed ``n``)."""
    out = []
    for m in range(int(math.floor(lo * n / drift)), int(math.ceil(hi * n / drift)) + 1):
        v = m * drift / n
        if lo <= v <= hi and math.gcd(m, n) == 1:
            out.append(v)
    return out


def crossing_sweep(params: MapParams, inv_hbar_grid: Sequence[float], box, center: PhaseState,
                   levels: tuple = (1, 5), nu_sequence: Sequence[int] = (128, 256),
                   n_max: int = 16) -> tuple[CrossingTrack, list]:
    """
    Follow two island levels through a sweep and mark their avoided crossings.

    The levels are picked by depth rank at the first grid point and continued
    by Husimi-field correlation (quasienergies of neighbouring states are far
    closer than their change per grid step, so eigenvalue proximity alone
    cannot continue them).  Inter-branch distances use the per-kick
    quasienergy modulo ``2 pi / n``; a grid of constant ``n`` (see
    :func:`crossing_grid`) keeps that metric the same at every point.
    """
    data = [island_levels(params, commensurate_inv(params.drift, x, n_max), box, center,
                          nu_sequence) for x in inv_hbar_grid]
    track = track_crossing([d.p.inv_hbar for d in data], [d.candidates for d in data],
                           periods=[TWO_PI / d.p.n for d in data], start=list(levels),
                           features=[d.fields for d in data])
    return track, data
