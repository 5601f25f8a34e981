"""
Classical dynamics of the kicked-accelerated rotor and its Wannier-Stark pendulum.

The map acts on (theta, J) as

    theta' = theta + sigma * J            (mod 2 pi)
    J'     = J + kick * sin(theta') + sigma * drift

with ``sigma = +1`` for the plus branch and ``sigma = -1`` for the minus branch.
The angle is always updated first and the new angle enters the action update;
tangent maps use the same ordering.

Near the resonant actions J = 2 pi s the motion is locally generated by the
Wannier-Stark (WS) pendulum ``H = J**2/2 - a_eps*theta + k_eps*cos(theta)``.
All WS quantities here use the lifted angle so that the multivalued potential
is handled on a fixed branch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, optimize

from .exceptions import (
    EnergyOutOfRange,
    InconsistentInputs,
    NoFixedPoint,
    NoIsland,
    NotInIsland,
    NotPeriodic,
    QuadratureFailure,
)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class MapParams:
    """Kick strength, drift (2 pi Omega) and branch of the map."""

    kick: float
    drift: float
    sign: str = "minus"

    def __post_init__(self):
        if self.kick < 0:
            raise ValueError(f"kick must be >= 0, got {self.kick}")
        if self.drift < 0:
            raise ValueError(f"drift must be >= 0, got {self.drift}")
        if self.sign not in ("plus", "minus"):
            raise ValueError(f"sign must be 'plus' or 'minus', got {self.sign!r}")

    @property
    def sigma(self) -> int:
        return 1 if self.sign == "plus" else -1

    def pendulum(self) -> "WSPendulum":
        return WSPendulum(a_eps=self.drift, k_eps=self.kick)


@dataclass(frozen=True)
class PhaseState:
    theta: float
    action_j: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta) % TWO_PI)
        object.__setattr__(self, "action_j", float(self.action_j))


# ---------------------------------------------------------------------------
# the map
# ---------------------------------------------------------------------------

def map_step(theta, j, params: MapParams):
    """One application of the map; works elementwise on arrays."""
    sigma = params.sigma
    theta_new = np.mod(theta + sigma * j, TWO_PI)
    j_new = j + params.kick * np.sin(theta_new) + sigma * params.drift
    return theta_new, j_new


def orbit(theta0: float, j0: float, params: MapParams, steps: int):
    """Arrays ``(theta, j)`` of length ``steps + 1`` starting at the seed."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    theta = np.empty(steps + 1)
    j = np.empty(steps + 1)
    theta[0] = theta0 % TWO_PI
    j[0] = j0
    sigma, kick, drift = params.sigma, params.kick, params.drift
    th, jj = theta[0], j0
    for t in range(steps):
        th = (th + sigma * jj) % TWO_PI
        jj = jj + kick * math.sin(th) + sigma * drift
        theta[t + 1] = th
        j[t + 1] = jj
    return theta, j


def iterate_map(state: PhaseState, params: MapParams, steps: int) -> list[PhaseState]:
    """All states visited in ``steps`` iterations, the seed included."""
    theta, j = orbit(state.theta, state.action_j, params, steps)
    return [PhaseState(a, b) for a, b in zip(theta, j)]


def tangent_map(theta: float, j: float, params: MapParams) -> np.ndarray:
    """Jacobian d(theta', J')/d(theta, J) at the point (theta, J)."""
    sigma = params.sigma
    theta_new = theta + sigma * j
    c = params.kick * math.cos(theta_new)
    return np.array([[1.0, sigma], [c, 1.0 + sigma * c]])


def find_fixed_point(params: MapParams) -> tuple[PhaseState, float, bool]:
    """
    Period-1 fixed point of the map on the torus.

    Solves ``kick * sin(theta) = -sigma * drift`` with ``J = 0 (mod 2 pi)``.
    Of the two solutions the stable one (``|trace| < 2``) is returned when it
    exists, otherwise the one with the smaller ``|trace|``.

    Returns
    -------
    state, trace, stable
    """
    if params.kick < params.drift or params.kick == 0:
        raise NoFixedPoint(
            f"kick={params.kick} < drift={params.drift}: no period-1 orbit"
        )
    s = -params.sigma * params.drift / params.kick
    s = min(1.0, max(-1.0, s))
    base = math.asin(s)
    best = None
    for theta in (base, math.pi - base):
        tr = float(np.trace(tangent_map(theta, 0.0, params)))
        if best is None or abs(tr) < abs(best[1]):
            best = (theta, tr)
    theta, tr = best
    return PhaseState(theta, 0.0), tr, abs(tr) < 2.0


# ---------------------------------------------------------------------------
# portraits, periodic orbits and islands
# ---------------------------------------------------------------------------

@dataclass
class PointCloud:
    theta: np.ndarray
    j: np.ndarray
    label: np.ndarray


def reduce_action(j, j_center: float = 0.0):
    """Reduce J modulo 2 pi into ``[j_center - pi, j_center + pi)``."""
    return np.mod(np.asarray(j) - j_center + np.pi, TWO_PI) - np.pi + j_center


def phase_portrait(params: MapParams, seeds: Sequence[PhaseState], steps: int,
                   j_center: float = 0.0) -> PointCloud:
    """Orbit points of every seed, J reduced mod 2 pi around ``j_center``."""
    if len(seeds) == 0:
        raise ValueError("phase_portrait needs at least one seed")
    th0 = np.array([s.theta for s in seeds], dtype=float)
    j0 = np.array([s.action_j for s in seeds], dtype=float)
    theta = np.empty((steps + 1, len(seeds)))
    j = np.empty_like(theta)
    theta[0], j[0] = th0, j0
    for t in range(steps):
        theta[t + 1], j[t + 1] = map_step(theta[t], j[t], params)
    label = np.broadcast_to(np.arange(len(seeds)), theta.shape)
    return PointCloud(theta.T.ravel(), reduce_action(j.T.ravel(), j_center),
                      label.T.ravel().copy())


def _closure_residual(theta0, j0, theta_r, j_r):
    dth = (theta_r - theta0 + np.pi) % TWO_PI - np.pi
    dj = (j_r - j0 + np.pi) % TWO_PI - np.pi
    return np.array([dth, dj])


def monodromy_matrix(params: MapParams, point: PhaseState, r: int):
    """Product of the ``r`` tangent maps along the orbit of ``point``; also the end state."""
    th, j = point.theta, point.action_j
    m = np.eye(2)
    for _ in range(r):
        m = tangent_map(th, j, params) @ m
        th, j = map_step(th, j, params)
    return m, (th, j)


def find_periodic_orbit(params: MapParams, seed: PhaseState, r: int,
                        tol: float = 1e-10, max_iter: int = 200) -> PhaseState:
    """Damped Newton iteration on the r-step map (closure taken mod 2 pi in both variables)."""
    x = np.array([seed.theta, seed.action_j], dtype=float)

    def residual(v):
        _, (th, j) = monodromy_matrix(params, PhaseState(v[0], v[1]), r)
        return _closure_residual(v[0] % TWO_PI, v[1], th, j)

    res = residual(x)
    for _ in range(max_iter):
        if np.linalg.norm(res) < tol:
            return PhaseState(x[0], x[1])
        m, _ = monodromy_matrix(params, PhaseState(x[0], x[1]), r)
        try:
            dx = np.linalg.solve(m - np.eye(2), -res)
        except np.linalg.LinAlgError as exc:
            raise NotPeriodic("singular Newton system (parabolic orbit?)") from exc
        lam = 1.0
        while lam > 1e-6:
            trial = x + lam * dx
            res_trial = residual(trial)
            if np.linalg.norm(res_trial) < np.linalg.norm(res):
                break
            lam *= 0.5
        x, res = trial, res_trial
    if np.linalg.norm(res) < tol:
        return PhaseState(x[0], x[1])
    raise NotPeriodic(f"no period-{r} orbit near seed (residual {np.linalg.norm(res):.2e})")


def monodromy_trace(params: MapParams, orbit_point: PhaseState, r: int,
                    tol: float = 1e-8) -> float:
    """Trace of the r-step tangent map of a genuine period-r point."""
    m, (th, j) = monodromy_matrix(params, orbit_point, r)
    res = _closure_residual(orbit_point.theta, orbit_point.action_j, th, j)
    if np.linalg.norm(res) > tol:
        raise NotPeriodic(f"closure residual {np.linalg.norm(res):.2e} exceeds {tol}")
    return float(np.trace(m))


@dataclass
class IslandGrid:
    """Cell-centred grid over one 2 pi x 2 pi window and the island mask on it."""

    theta: np.ndarray
    j: np.ndarray
    mask: np.ndarray  # shape (len(j), len(theta))
    cell_area: float

    @property
    def area(self) -> float:
        return float(self.mask.sum()) * self.cell_area

    def bounding_box(self) -> tuple[float, float, float, float]:
        """``(theta_lo, theta_hi, j_lo, j_hi)``; theta_lo may be negative if the island wraps."""
        rows, cols = np.nonzero(self.mask)
        half_t = 0.5 * (self.theta[1] - self.theta[0])
        half_j = 0.5 * (self.j[1] - self.j[0])
        occupied = np.zeros(len(self.theta), bool)
        occupied[cols] = True
        # longest run of empty columns marks where the island does not wrap
        empty = ~occupied
        n = len(empty)
        best_len, best_end, run = 0, -1, 0
        for i in range(2 * n):
            if empty[i % n]:
                run += 1
                if run > best_len:
                    best_len, best_end = run, i
            else:
                run = 0
        start = (best_end + 1) % n
        th_lo = self.theta[start] - half_t
        width = (n - min(best_len, n)) * (self.theta[1] - self.theta[0])
        if th_lo > np.pi:
            th_lo -= TWO_PI
        return (th_lo, th_lo + width, self.j[rows.min()] - half_j,
                self.j[rows.max()] + half_j)


def bounded_cells(params: MapParams, theta, j, j_center: float, horizon: int,
                  half_window: float = np.pi, chunk: int = 64) -> np.ndarray:
    """Boolean array: orbit stays within ``|J - j_center| <= half_window`` for ``horizon`` steps."""
    theta = np.array(theta, dtype=float).ravel()
    j = np.array(j, dtype=float).ravel()
    alive_idx = np.arange(theta.size)
    th, jj = theta.copy(), j.copy()
    done = 0
    while done < horizon and alive_idx.size:
        n = min(chunk, horizon - done)
        ok = np.ones(alive_idx.size, bool)
        for _ in range(n):
            th, jj = map_step(th, jj, params)
            ok &= np.abs(jj - j_center) <= half_window
        done += n
        alive_idx, th, jj = alive_idx[ok], th[ok], jj[ok]
    out = np.zeros(theta.size, bool)
    out[alive_idx] = True
    return out


def _label_periodic_theta(mask: np.ndarray) -> np.ndarray:
    """Connected-component labels with periodic boundary along axis 1 (theta)."""
    labels, _ = ndimage.label(mask)
    left, right = labels[:, 0], labels[:, -1]
    pairs = {(a, b) for a, b in zip(left, right) if a and b and a != b}
    if pairs:
        parent = {}

        def find(a):
            while parent.get(a, a) != a:
                a = parent[a]
            return a

        for a, b in pairs:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        flat = labels.ravel()
        for lab in np.unique(flat[flat > 0]):
            root = find(lab)
            if root != lab:
                flat[flat == lab] = root
    return labels


def island_mask(params: MapParams, center: PhaseState, grid_step: float = 0.02,
                escape_horizon: int = 10_000) -> IslandGrid:
    """
    Flood-fill estimate of the island around ``center``.

    Every cell of a 2 pi x 2 pi grid (theta on the torus, J on the line
    centred at ``center.action_j``) is iterated for ``escape_horizon`` steps;
    cells whose J stays inside the window are bounded, and the connected
    bounded component containing the center is the island.
    """
    if not bounded_cells(params, [center.theta], [center.action_j],
                         center.action_j, escape_horizon)[0]:
        raise NotInIsland(f"orbit of {center} escapes within {escape_horizon} steps")
    n = max(8, int(round(TWO_PI / grid_step)))
    d = TWO_PI / n
    th = (np.arange(n) + 0.5) * d
    jj = center.action_j - np.pi + (np.arange(n) + 0.5) * d
    TH, JJ = np.meshgrid(th, jj)
    alive = bounded_cells(params, TH, JJ, center.action_j, escape_horizon).reshape(TH.shape)
    labels = _label_periodic_theta(alive)
    ci = min(n - 1, int((center.action_j - jj[0] + 0.5 * d) // d))
    ct = int(center.theta // d) % n
    lab = labels[ci, ct]
    if lab == 0:
        # the center cell itself may straddle the boundary on coarse grids
        window = labels[max(0, ci - 1):ci + 2, :][:, [(ct - 1) % n, ct, (ct + 1) % n]]
        nz = window[window > 0]
        if nz.size == 0:
            raise NotInIsland("no bounded cells around the center")
        lab = np.bincount(nz).argmax()
    return IslandGrid(th, jj, labels == lab, d * d)


def island_area(params: MapParams, center: PhaseState, grid_step: float = 0.02,
                escape_horizon: int = 10_000) -> float:
    """Phase-space area of the island containing ``center``."""
    return island_mask(params, center, grid_step, escape_horizon).area


# ---------------------------------------------------------------------------
# rotation numbers and the layout of tori
# ---------------------------------------------------------------------------

def rotation_numbers(params: MapParams, center: PhaseState, theta, j,
                     steps: int = 2000) -> np.ndarray:
    """Mean winding per step (in turns) of orbits around the fixed point ``center``."""
    th = np.array(theta, dtype=float).ravel()
    jj = np.array(j, dtype=float).ravel()
    x = (th - center.theta + np.pi) % TWO_PI - np.pi
    y = jj - center.action_j
    phi = np.arctan2(y, x)
    total = np.zeros_like(phi)
    for _ in range(steps):
        th, jj = map_step(th, jj, params)
        x = (th - center.theta + np.pi) % TWO_PI - np.pi
        y = jj - center.action_j
        new = np.arctan2(y, x)
        total += (new - phi + np.pi) % TWO_PI - np.pi
        phi = new
    return np.abs(total) / (TWO_PI * steps)


def torus_area(theta: np.ndarray, j: np.ndarray, center: PhaseState) -> float:
    """Area enclosed by an invariant curve sampled by orbit points (star-shaped about center)."""
    x = (np.asarray(theta) - center.theta + np.pi) % TWO_PI - np.pi
    y = np.asarray(j) - center.action_j
    order = np.argsort(np.arctan2(y, x))
    x, y = x[order], y[order]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass
class TorusLayout:
    """Actions (area / 2 pi) and angular frequencies of invariant curves of an island."""

    offsets: np.ndarray
    action: np.ndarray
    frequency: np.ndarray
    center: PhaseState


def torus_layout(params: MapParams, center: PhaseState, offsets: Sequence[float],
                 steps: int = 4000, direction: tuple[float, float] = (1.0, 0.0)) -> TorusLayout:
    """Sample tori launched along a ray from the center; area from the orbit, frequency from winding."""
    offsets = np.asarray(offsets, dtype=float)
    dth, dj = direction
    th0 = center.theta + offsets * dth
    j0 = center.action_j + offsets * dj
    rho = rotation_numbers(params, center, th0, j0, steps)
    cloud = phase_portrait(params, [PhaseState(a, b) for a, b in zip(th0, j0)], steps,
                           j_center=center.action_j)
    areas = np.empty(offsets.size)
    for i in range(offsets.size):
        sel = cloud.label == i
        areas[i] = torus_area(cloud.theta[sel], cloud.j[sel], center)
    return TorusLayout(offsets, areas / TWO_PI, TWO_PI * rho, center)


@dataclass
class ChainAreas:
    s_plus: float
    s_minus: float
    chain_area: float
    grid_step: float


def measure_chain_areas(params: MapParams, center: PhaseState, r: int, s: int,
                        inner_seed: PhaseState, outer_seed: PhaseState,
                        grid_step: float = 0.02, steps: int = 2000,
                        escape_horizon: int = 4000, lock_tol: float = 2e-3) -> ChainAreas:
    """
    Areas enclosed by the inner and outer separatrices of an r:s chain.

    Island cells are classified by their rotation number about the center:
    locked at s/r (chain islands), on the ``inner_seed`` side, or on the
    ``outer_seed`` side.  ``S-`` is the area of the inner region and
    ``S+ = S- + chain``.
    """
    target = s / r
    rho_in, rho_out = rotation_numbers(params, center, [inner_seed.theta, outer_seed.theta],
                                       [inner_seed.action_j, outer_seed.action_j], steps)
    if not (rho_in - target) * (rho_out - target) < 0:
        raise InconsistentInputs(
            f"seeds do not bracket the {r}:{s} chain (rotation {rho_in:.4f}, {rho_out:.4f})")
    grid = island_mask(params, center, grid_step, escape_horizon)
    TH, JJ = np.meshgrid(grid.theta, grid.j)
    th, jj = TH[grid.mask], JJ[grid.mask]
    rho = rotation_numbers(params, center, th, jj, steps)
    locked = np.abs(rho - target) < lock_tol
    inner_side = (rho - target) * (rho_in - target) > 0
    inner = inner_side & ~locked
    return ChainAreas(s_plus=float((inner | locked).sum()) * grid.cell_area,
                      s_minus=float(inner.sum()) * grid.cell_area,
                      chain_area=float(locked.sum()) * grid.cell_area,
                      grid_step=grid_step)


@dataclass
class ChainLocation:
    inner_seed: PhaseState
    outer_seed: PhaseState
    orbit_point: PhaseState       # a point of the elliptic period-r orbit
    monodromy_trace: float


def locate_chain(params: MapParams, center: PhaseState, r: int, s: int = 1,
                 max_offset: float = 2.5, n_offsets: int = 125, steps: int = 2000,
                 n_angles: int = 24) -> ChainLocation:
    """
    Seeds bracketing an r:s chain and its elliptic period-r orbit.

    Rotation numbers are sampled along the ray ``theta = center + offset``.
    The inner seed sits just before the first crossing of ``s/r``, the outer
    seed on the first sample past it that is clearly unlocked and still
    rotating.  The orbit is found by Newton iteration from points around the
    crossing radius on ``n_angles`` rays; the first one with ``|trace| < 2``
    that is not the center wins.
    """
    offs = np.linspace(max_offset / n_offsets, max_offset, n_offsets)
    rho = rotation_numbers(params, center, center.theta + offs,
                           np.full(offs.size, center.action_j), steps)
    d = rho - s / r
    cross = np.nonzero(np.sign(d[:-1]) != np.sign(d[1:]))[0]
    if cross.size == 0:
        raise InconsistentInputs(f"rotation number never crosses {s}/{r} along the ray")
    i0 = int(cross[0])
    outer = [k for k in range(i0 + 1, offs.size)
             if np.sign(d[k]) != np.sign(d[i0]) and abs(d[k]) > 1e-3 and rho[k] > 1e-2]
    if not outer:
        raise InconsistentInputs(f"no unlocked torus outside the {r}:{s} chain")
    inner_seed = PhaseState(center.theta + offs[max(i0 - 1, 0)], center.action_j)
    outer_seed = PhaseState(center.theta + offs[outer[0]], center.action_j)
    radii = np.linspace(offs[i0] - 0.05, offs[i0 + 1] + 0.1, 6)
    for ang in np.linspace(0.0, TWO_PI, n_angles, endpoint=False):
        for rad in radii:
            seed = PhaseState(center.theta + rad * np.cos(ang), center.action_j + rad * np.sin(ang))
            try:
                x = find_periodic_orbit(params, seed, r)
                tr = monodromy_trace(params, x, r)
            except NotPeriodic:
                continue
            dth = (x.theta - center.theta + np.pi) % TWO_PI - np.pi
            if abs(tr) < 2.0 and math.hypot(dth, x.action_j - center.action_j) > 1e-3:
                return ChainLocation(inner_seed, outer_seed, x, tr)
    raise NotPeriodic(f"no elliptic period-{r} orbit found near the {r}:{s} chain")


# ---------------------------------------------------------------------------
# Wannier-Stark pendulum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WSPendulum:
    a_eps: float
    k_eps: float

    @property
    def has_island(self) -> bool:
        return abs(self.a_eps) < abs(self.k_eps)

    def potential(self, theta):
        return -self.a_eps * np.asarray(theta) + self.k_eps * np.cos(theta)

    def dpotential(self, theta):
        return -self.a_eps - self.k_eps * np.sin(theta)

    def d2potential(self, theta):
        return -self.k_eps * np.cos(theta)


@dataclass(frozen=True)
class SeparatrixData:
    unstable_point: float
    stable_point: float
    enclosed_area: float
    turning_points: tuple[float, float]
    energy: float
    loop_points: tuple[float, float] = field(default=(0.0, 0.0))


@dataclass(frozen=True)
class _WellGeometry:
    """Lifted-angle landmarks of the well; they coincide with the [0, 2 pi) branch."""

    stable: float
    barrier: float       # lower barrier, sets the separatrix energy
    upper_barrier: float
    bottom: float        # V at the stable point
    top: float           # V at the lower barrier


def _geometry(p: WSPendulum) -> _WellGeometry:
    if p.k_eps <= 0 or p.a_eps < 0:
        raise ValueError("WS pendulum expects k_eps > 0 and a_eps >= 0")
    if not p.has_island:
        raise NoIsland(f"|a_eps|={abs(p.a_eps)} >= |k_eps|={abs(p.k_eps)}: no stable island")
    alpha = math.asin(p.a_eps / p.k_eps)
    stable = math.pi + alpha
    barrier = TWO_PI - alpha
    return _WellGeometry(stable, barrier, -alpha, float(p.potential(stable)),
                         float(p.potential(barrier)))


def ws_energy(state: PhaseState, p: WSPendulum) -> float:
    """``J**2/2 + V(theta)`` on the branch theta in [0, 2 pi)."""
    return 0.5 * state.action_j ** 2 + float(p.potential(state.theta))


def ws_fixed_points(p: WSPendulum) -> tuple[float, float]:
    """``(stable, unstable)`` angles in [0, 2 pi), classified by the sign of V''."""
    if not p.has_island:
        raise NoIsland(f"|a_eps|={abs(p.a_eps)} >= |k_eps|={abs(p.k_eps)}")
    base = math.asin(-p.a_eps / p.k_eps)
    cands = [base % TWO_PI, (math.pi - base) % TWO_PI]
    cands.sort(key=lambda t: -float(p.d2potential(t)))
    return cands[0], cands[1]


def ws_small_oscillation_frequency(p: WSPendulum) -> float:
    if not p.has_island:
        raise NoIsland(f"|a_eps|={abs(p.a_eps)} >= |k_eps|={abs(p.k_eps)}")
    return (p.k_eps ** 2 - p.a_eps ** 2) ** 0.25


def _root(f, lo, hi):
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    return optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def _gap_from(q: WSPendulum, end: float, x: float) -> float:
    """``V(end) - V(x)``, written to stay accurate when x -> end."""
    half = 0.5 * (end - x)
    return -q.a_eps * (end - x) - 2.0 * q.k_eps * math.sin(0.5 * (end + x)) * math.sin(half)


def _gauss_legendre(h, target: float, what: str) -> float:
    """``int_{-pi/2}^{pi/2} h`` by Gauss-Legendre doubling until successive values agree."""
    prev = None
    for n in (32, 64, 128, 256, 512, 1024):
        x, w = np.polynomial.legendre.leggauss(n)
        val = 0.5 * np.pi * sum(wi * h(0.5 * np.pi * xi) for xi, wi in zip(x, w))
        if prev is not None and abs(val - prev) <= target * abs(val):
            return val
        prev = val
    raise QuadratureFailure(f"{what} did not reach {target:.1e}")


def ws_separatrix(p: WSPendulum, quadrature_tol: float = 1e-9) -> SeparatrixData:
    """Separatrix of the WS pendulum by energy-level-set quadrature."""
    q = p
    g = _geometry(p)
    e_sep = g.top
    # left turning point of the loop, between the upper barrier and the well bottom
    f = lambda x: float(q.potential(x)) - e_sep
    left = g.upper_barrier if abs(f(g.upper_barrier)) < 1e-14 * abs(q.k_eps) else _root(f, g.upper_barrier, g.stable)
    area = TWO_PI * ws_action_of_energy(p, e_sep, quadrature_tol)
    a_pt, b_pt = _wkb_turning_points(q, g, g.bottom)
    return SeparatrixData(g.barrier, g.stable, area, (a_pt, b_pt), e_sep, (left, g.barrier))


def _wkb_turning_points(q: WSPendulum, g: _WellGeometry, energy: float):
    f = lambda x: float(q.potential(x)) - energy
    a_pt = g.stable if energy <= g.bottom else _root(f, g.stable, g.barrier)
    b_pt = g.barrier if energy >= g.top else _root(f, g.barrier, g.stable + TWO_PI)
    if energy >= g.top:
        a_pt = g.barrier
    return a_pt, b_pt


def well_energies(p: WSPendulum) -> tuple[float, float]:
    """``(bottom, barrier_top)`` energies of the well."""
    g = _geometry(p)
    return g.bottom, g.top


def ws_wkb_action(p: WSPendulum, energy: float, quadrature_tol: float = 1e-9) -> float:
    """
    Imaginary action across the barrier at ``energy``.

    ``S = int_A^B sqrt(2 (V - E)) dtheta`` between the inner turning point A
    of the well and the exit point B beyond the lower barrier.
    """
    q, g = p, _geometry(p)
    e = energy
    span = abs(q.k_eps) * 1e-12
    if e < g.bottom - span or e > g.top + span:
        raise EnergyOutOfRange(f"energy {energy} outside [{g.bottom}, {g.top}]")
    e = min(max(e, g.bottom), g.top)
    if e >= g.top:
        return 0.0
    a_pt, b_pt = _wkb_turning_points(q, g, e)
    mid, half_width = 0.5 * (a_pt + b_pt), 0.5 * (b_pt - a_pt)

    def h(phi):
        sn = math.sin(phi)
        x = mid + half_width * sn
        gap = -_gap_from(q, b_pt if sn > 0 else a_pt, x)
        return half_width * math.cos(phi) * math.sqrt(2.0 * max(gap, 0.0))

    return _gauss_legendre(h, quadrature_tol, "WKB action")


def _well_turning_points(q: WSPendulum, g: _WellGeometry, e: float):
    f = lambda x: float(q.potential(x)) - e
    if e <= g.bottom:
        return g.stable, g.stable
    right = g.barrier if e >= g.top else _root(f, g.stable, g.barrier)
    left = _root(f, g.upper_barrier, g.stable) if f(g.upper_barrier) > 0 else g.upper_barrier
    return left, right


def ws_action_of_energy(p: WSPendulum, energy: float, quadrature_tol: float = 1e-9) -> float:
    """Action ``(1/2 pi) * loop integral of J dtheta`` of the closed orbit at ``energy``."""
    q, g = p, _geometry(p)
    e = energy
    span = abs(q.k_eps) * 1e-12
    if e < g.bottom - span or e > g.top + span:
        raise EnergyOutOfRange(f"energy {energy} outside the island energy range")
    e = min(max(e, g.bottom), g.top)
    if e <= g.bottom:
        return 0.0
    left, right = _well_turning_points(q, g, e)
    mid, half_width = 0.5 * (left + right), 0.5 * (right - left)
    # on the separatrix the right end is the barrier, where V = e as well
    e_right = float(q.potential(right))

    def h(phi):
        # x = mid + w sin(phi): sqrt(e - V) ~ |cos(phi)| at simple turning points
        sn = math.sin(phi)
        x = mid + half_width * sn
        gap = _gap_from(q, right, x) + (e - e_right) if sn > 0 else _gap_from(q, left, x)
        return half_width * math.cos(phi) * math.sqrt(2.0 * max(gap, 0.0))

    half = _gauss_legendre(h, quadrature_tol, "action quadrature")
    return half / np.pi


def ws_energy_of_action(p: WSPendulum, action: float, quadrature_tol: float = 1e-11) -> float:
    """Inverse of :func:`ws_action_of_energy`."""
    bottom, top = well_energies(p)
    i_max = ws_action_of_energy(p, top, quadrature_tol)
    if action < 0 or action > i_max:
        raise EnergyOutOfRange(f"action {action} outside [0, {i_max}]")
    if action == 0:
        return bottom
    return optimize.brentq(lambda e: ws_action_of_energy(p, e, quadrature_tol) - action,
                           bottom, top, xtol=1e-14, rtol=1e-14)


def ws_frequency(p: WSPendulum, energy: float, quadrature_tol: float = 1e-9) -> float:
    """Angular frequency ``2 pi / T(E)`` of the closed orbit at ``energy``."""
    q, g = p, _geometry(p)
    e = energy
    if e <= g.bottom:
        return ws_small_oscillation_frequency(p)
    if e >= g.top:
        return 0.0
    left, right = _well_turning_points(q, g, e)
    mid, half_width = 0.5 * (left + right), 0.5 * (right - left)

    def h(phi):
        # x = mid + w sin(phi) removes both inverse-square-root endpoint singularities
        sn = math.sin(phi)
        x = mid + half_width * sn
        end = right if sn > 0 else left
        gap = _gap_from(q, end, x)
        if gap <= 0.0:
            slope = abs(float(q.dpotential(end)))
            return math.sqrt(half_width * (1.0 + abs(sn)) / (2.0 * slope))
        return half_width * math.cos(phi) / math.sqrt(2.0 * gap)

    # the integrand is analytic in phi: Gauss-Legendre doubling converges
    # geometrically down to the cancellation floor of e - V near the bottom
    floor = 1e-13 * abs(q.k_eps) / max(e - g.bottom, 1e-300)
    val = _gauss_legendre(h, max(quadrature_tol, floor), "period quadrature")
    half_period = val
    return np.pi / half_period


# ---------------------------------------------------------------------------
# r:s resonance chains
# ---------------------------------------------------------------------------

@dataclass
class ResonanceChain:
    r: int
    s: int
    i_rs: float
    mass: float
    coupling: float
    s_plus: float = float("nan")
    s_minus: float = float("nan")
    monodromy_trace: float = float("nan")

    @property
    def chain_freq(self) -> float:
        """Small-oscillation frequency ``r * sqrt(2 v / M)`` of the chain pendulum."""
        return self.r * math.sqrt(2.0 * self.coupling / self.mass)

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ResonanceChain":
        vals = {k: (float("nan") if d.get(k) is None else d[k])
                for k in ("s_plus", "s_minus", "monodromy_trace")}
        return cls(int(d["r"]), int(d.get("s", 1)), float(d["i_rs"]), float(d["mass"]),
                   float(d["coupling"]), **vals)


def resonance_forward(i_rs: float, mass: float, coupling: float, r: int):
    """Separatrix areas and monodromy trace implied by chain-pendulum parameters."""
    width = 8.0 * math.sqrt(2.0 * mass * coupling)
    trace = 2.0 * math.cos(r * r * math.sqrt(2.0 * coupling / mass))
    return TWO_PI * i_rs + width, TWO_PI * i_rs - width, trace


def fit_resonance_params(s_plus: float, s_minus: float, monodromy_trace: float, r: int,
                         s: int = 1) -> ResonanceChain:
    """
    Invert the chain-pendulum relations for ``(I_rs, M, v)``.

    ``S+ + S- = 4 pi I_rs``, ``S+ - S- = 16 sqrt(2 M v)`` and
    ``sqrt(2 v / M) = arccos(trace / 2) / r**2``.
    """
    if s_plus < s_minus:
        raise InconsistentInputs(f"S+ ({s_plus}) < S- ({s_minus})")
    if s_minus <= 0:
        raise InconsistentInputs("S- must be positive")
    if abs(monodromy_trace) > 2.0:
        raise InconsistentInputs(f"|trace| = {abs(monodromy_trace)} > 2: not a stable chain")
    i_rs = (s_plus + s_minus) / (4.0 * np.pi)
    sq_mv = (s_plus - s_minus) / 16.0            # sqrt(2 M v)
    sq_vm = math.acos(monodromy_trace / 2.0) / r ** 2  # sqrt(2 v / M)
    if sq_mv == 0.0:
        mass, coupling = float("nan"), 0.0
    elif sq_vm == 0.0:
        raise InconsistentInputs("parabolic monodromy with a finite chain width")
    else:
        coupling = 0.5 * sq_mv * sq_vm
        mass = sq_mv / sq_vm
    return ResonanceChain(r, s, i_rs, mass, coupling, s_plus, s_minus, monodromy_trace)
