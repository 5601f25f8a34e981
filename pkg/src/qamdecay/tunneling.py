"""
Semiclassical decay theories: Wannier-Stark WKB rates and the
single-resonance ladder of resonance-assisted tunneling (RAT).

The ladder built on an r:s chain holds the island states ``n_i, n_i + r,
..., n_i + L r``.  Rungs are labelled ``N = N_* .. N*`` relative to the
reference state ``n0`` (the admissible state closest to the resonance) and
carry the diagonal energies ``W(N) = (hbar**2 / 2M) (r N + delta_n)**2``.
All "~" relations are implemented with prefactor 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import linear_sum_assignment
from scipy.special import xlogy

from .classical import (
    TWO_PI,
    ResonanceChain,
    TorusLayout,
    WSPendulum,
    well_energies,
    ws_action_of_energy,
    ws_energy_of_action,
    ws_small_oscillation_frequency,
    ws_wkb_action,
)
from .exceptions import (
    ActionOutsideIsland,
    DegenerateSpectrum,
    DegenerateUnperturbed,
    EmptyLadder,
    EnergyOutOfRange,
    InconsistentInputs,
    NoIsland,
)

ENERGY_CHOICES = ("well_bottom", "harmonic_ground")
THEORY_METHODS = ("wkb_bottom", "wkb_ground", "rat_unperturbed", "rat_perturbed",
                  "rat_semiclassical", "rat_continuum")


# ---------------------------------------------------------------------------
# WKB
# ---------------------------------------------------------------------------

def wkb_energy(p: WSPendulum, hbar: float, energy_choice: str = "well_bottom") -> float:
    bottom, top = well_energies(p)
    if energy_choice == "well_bottom":
        return bottom
    if energy_choice == "harmonic_ground":
        e = bottom + 0.5 * hbar * ws_small_oscillation_frequency(p)
        if e >= top:
            raise EnergyOutOfRange(f"hbar*omega0/2 = {e - bottom:g} reaches the barrier top")
        return e
    raise ValueError(f"energy_choice must be one of {ENERGY_CHOICES}")


def wkb_rate(p: WSPendulum, hbar: float, energy_choice: str = "well_bottom",
             quadrature_tol: float = 1e-9) -> float:
    """
    Barrier-penetration rate ``(omega0 / 2 pi) exp(-2 S(E) / hbar)``.

    Parameters
    ----------
    energy_choice : {'well_bottom', 'harmonic_ground'}
        Energy at which the barrier action is taken: the bottom of the well or
        ``hbar omega0 / 2`` above it.
    """
    if not p.has_island:
        raise NoIsland(f"|a_eps|={abs(p.a_eps)} >= |k_eps|={abs(p.k_eps)}")
    if hbar <= 0:
        raise ValueError("hbar must be positive")
    e = wkb_energy(p, hbar, energy_choice)
    s = ws_wkb_action(p, e, quadrature_tol)
    return ws_small_oscillation_frequency(p) / TWO_PI * math.exp(-2.0 * s / hbar)


# ---------------------------------------------------------------------------
# ladder
# ---------------------------------------------------------------------------

def ladder_length(island_area: float, hbar: float, r: int) -> int:
    """``L = Int[(A / 2 pi hbar - 1) / r]`` (floor, so negative when no state fits)."""
    return math.floor((island_area / (TWO_PI * hbar) - 1.0) / r)


@dataclass
class LadderSpec:
    chain: ResonanceChain
    hbar: float
    island_area: float
    n0: int
    n_rs: float
    delta_n: float
    n_star_lo: int
    n_star_hi: int
    length: int
    n_i: int = 0

    @property
    def rungs(self) -> np.ndarray:
        """Rung labels ``N_* .. N*``."""
        return np.arange(self.n_star_lo, self.n_star_hi + 1)

    @property
    def quantum_numbers(self) -> np.ndarray:
        return self.n0 + self.chain.r * self.rungs

    @property
    def actions(self) -> np.ndarray:
        return (self.quantum_numbers + 0.5) * self.hbar


def build_ladder(chain: ResonanceChain, hbar: float, island_area: float,
                 n0_choice: Optional[int] = None, n_i: int = 0) -> LadderSpec:
    """
    Ladder of quasi-degenerate island states coupled by an r:s chain.

    Parameters
    ----------
    n0_choice : int, optional
        Reference state.  Must be congruent to ``n_i`` modulo ``r``; by
        default the congruent integer closest to ``n_rs``.
    n_i : int
        Innermost rung (0 for the ground-state ladder).

    Raises
    ------
    EmptyLadder
        If ``L < 0``.
    """
    if hbar <= 0 or island_area <= 0:
        raise ValueError("hbar and island_area must be positive")
    if n_i < 0:
        raise ValueError("n_i must be >= 0")
    r = chain.r
    L = ladder_length(island_area, hbar, r)
    if L < 0:
        raise EmptyLadder(f"island area {island_area:g} holds no state at hbar={hbar:g}")
    n_rs = chain.i_rs / hbar - 0.5
    if n0_choice is None:
        # congruent to n_i, nearest to n_rs (ties to the lower one)
        n0 = n_i + r * math.floor((n_rs - n_i) / r + 0.5)
        if n0 - n_rs >= 0.5 * r:
            n0 -= r
    else:
        n0 = int(n0_choice)
        if (n0 - n_i) % r:
            raise InconsistentInputs(f"n0={n0} is not congruent to n_i={n_i} modulo r={r}")
    lo = (n_i - n0) // r
    return LadderSpec(chain, hbar, island_area, n0, n_rs, n0 - n_rs, lo, lo + L, L, n_i)


def unperturbed_diagonal(spec: LadderSpec) -> np.ndarray:
    """``W(N) = (hbar**2 / 2M) (r N + delta_n)**2`` for ``N = N_* .. N*``."""
    r, m = spec.chain.r, spec.chain.mass
    return spec.hbar ** 2 / (2.0 * m) * (r * spec.rungs + spec.delta_n) ** 2


def pendulum_energy_model(pendulum: WSPendulum) -> Callable[[float], float]:
    """Energy as a function of action for the closed orbits of a WS pendulum well."""
    bottom, top = well_energies(pendulum)
    i_max = ws_action_of_energy(pendulum, top)

    def energy(action):
        if action < 0 or action > i_max:
            raise ActionOutsideIsland(f"action {action:g} outside [0, {i_max:g}]")
        return ws_energy_of_action(pendulum, action)

    energy.i_max = i_max
    return energy


def layout_energy_model(layout: TorusLayout) -> Callable[[float], float]:
    """
    Energy as a function of action from a sampled layout of tori.

    ``E(I) = int_0^I omega dI'`` with the trapezoid rule on the sorted
    samples (linear interpolation between them, zero action at the center).
    """
    order = np.argsort(layout.action)
    a = np.concatenate([[0.0], np.asarray(layout.action)[order]])
    w = np.asarray(layout.frequency)[order]
    w = np.concatenate([[w[0]], w])
    e = np.concatenate([[0.0], np.cumsum(0.5 * (w[1:] + w[:-1]) * np.diff(a))])

    def energy(action):
        if action < 0 or action > a[-1]:
            raise ActionOutsideIsland(f"action {action:g} outside [0, {a[-1]:g}]")
        k = min(max(int(np.searchsorted(a, action)) - 1, 0), a.size - 2)
        t = action - a[k]
        slope = (w[k + 1] - w[k]) / (a[k + 1] - a[k])
        return float(e[k] + w[k] * t + 0.5 * slope * t * t)

    energy.i_max = float(a[-1])
    return energy


def semiclassical_diagonal(spec: LadderSpec, model) -> np.ndarray:
    """
    Diagonal from quantized tori: ``e(I_n) - 2 pi hbar N s`` minus a constant.

    ``model`` is a :class:`WSPendulum` or a callable ``E(I)``.  The constant
    is chosen so the value at ``I = I_rs`` plus the uniform frequency shift
    vanishes, which makes the result agree with
    :func:`unperturbed_diagonal` to second order in ``I - I_rs``.
    """
    energy = pendulum_energy_model(model) if isinstance(model, WSPendulum) else model
    ch = spec.chain
    omega_rs = TWO_PI * ch.s / ch.r
    e_rs = energy(ch.i_rs)
    acts = spec.actions
    out = np.empty(acts.size)
    for k, (N, act) in enumerate(zip(spec.rungs, acts)):
        out[k] = (energy(act) - TWO_PI * spec.hbar * N * ch.s
                  - (e_rs + omega_rs * spec.delta_n * spec.hbar))
    return out


@dataclass
class LadderSpectrum:
    diagonal: np.ndarray
    coupling: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    by_site: np.ndarray     # by_site[m]: eigenpair localized on rung N_* + m

    @property
    def length(self) -> int:
        return self.diagonal.size - 1

    def energy(self, m: int) -> float:
        return float(self.eigenvalues[self.by_site[m]])


def ladder_eigensolve(diagonal, v: float) -> LadderSpectrum:
    """
    Eigenpairs of the tridiagonal ladder Hamiltonian with constant hopping ``v``.

    States are labelled by localization site through a one-to-one assignment
    maximizing the total weight ``sum |<N|E>|**2``, so ``m = 0`` is the state
    living on the innermost rung even when energy order says otherwise.
    """
    d = np.asarray(diagonal, dtype=float)
    if v < 0:
        raise ValueError("v must be >= 0")
    if d.size == 1:
        return LadderSpectrum(d, v, d.copy(), np.ones((1, 1)), np.zeros(1, int))
    e, vec = eigh_tridiagonal(d, np.full(d.size - 1, float(v)))
    rows, cols = linear_sum_assignment(-(vec ** 2))
    by_site = np.empty(d.size, int)
    by_site[rows] = cols
    return LadderSpectrum(d, float(v), e, vec, by_site)


def log_geometric_gap(spectrum: LadderSpectrum, m: int) -> float:
    e = spectrum.eigenvalues
    if e.size < 2:
        raise ValueError("the geometric gap needs L >= 1")
    k = spectrum.by_site[m]
    gaps = np.abs(np.delete(e, k) - e[k])
    scale = np.abs(e).max()
    if scale == 0 or gaps.min() < 1e-14 * scale:
        raise DegenerateSpectrum(f"level {m} is degenerate (min gap {gaps.min():.3g})")
    return float(np.mean(np.log(gaps)))


def geometric_gap(spectrum: LadderSpectrum, m: int) -> float:
    """``D_m = (prod_{j != m} |E_j - E_m|) ** (1/L)``."""
    return math.exp(log_geometric_gap(spectrum, m))


def log_rat_rate(spectrum: LadderSpectrum, spec: LadderSpec, m: int = 0) -> float:
    hops = spec.length - m
    v, hbar = spec.chain.coupling, spec.hbar
    base = 2.0 * math.log(v) - 2.0 * math.log(hbar)
    if hops == 0:
        return base
    return base + 2.0 * hops * (math.log(v) - log_geometric_gap(spectrum, m))


def rat_rate(spectrum: LadderSpectrum, spec: LadderSpec, m: int = 0) -> float:
    """
    ``Gamma_m = (v**2 / hbar**2) (v / D_m) ** (2 (N* - N_m))``.

    ``m`` counts rungs from the innermost one, ``N_m = N_* + m``.  The hop
    amplitude ``v`` is the chain's; the spectrum only supplies ``D_m``, so an
    unperturbed (``v = 0``) spectrum gives the explicit-gap rate.
    """
    if not 0 <= m <= spec.length:
        raise IndexError(f"m={m} outside 0..{spec.length}")
    if spectrum.diagonal.size != spec.length + 1:
        raise InconsistentInputs("spectrum and ladder sizes differ")
    return math.exp(log_rat_rate(spectrum, spec, m))


def xi0_explicit(spec: LadderSpec) -> float:
    """
    ``xi0 = ln(hbar**2 / 2 M v) + (1/L) sum_j ln|r**2 j**2 + 2 r j (n_i - n_rs)|``.

    For ``n_i = 0`` the gap terms reduce to ``r**2 j**2 - 2 n_rs r j``.  An
    empty ladder (``L = 0``) returns the first term alone.
    """
    ch = spec.chain
    r = ch.r
    head = math.log(spec.hbar ** 2 / (2.0 * ch.mass * ch.coupling))
    if spec.length == 0:
        return head
    j = np.arange(1, spec.length + 1, dtype=float)
    terms = r * r * j * j + 2.0 * r * j * (spec.n_i - spec.n_rs)
    bad = np.abs(terms) < 1e-9 * r * r * j * j
    if bad.any():
        jj = int(j[bad][0])
        raise DegenerateUnperturbed(f"rung {jj} is degenerate with the innermost state")
    return head + float(np.mean(np.log(np.abs(terms))))


def rat_rate_explicit(spec: LadderSpec) -> float:
    """``Gamma_0 = (v**2 / hbar**2) exp(-2 L xi0)`` with the explicit xi0."""
    ch = spec.chain
    return math.exp(2.0 * math.log(ch.coupling / spec.hbar) - 2.0 * spec.length * xi0_explicit(spec))


def continuum_xi0(chain: ResonanceChain, island_area: float) -> float:
    a = island_area
    if a <= 0:
        raise ValueError("island_area must be positive")
    x = TWO_PI * chain.i_rs / a
    return float(-math.log(8.0 * math.pi ** 2 * chain.mass * chain.coupling / a ** 2) - 2.0
                 + xlogy(2 * x, 2 * x) + xlogy(1 - 2 * x, abs(1 - 2 * x)))


def continuum_rate(spec: LadderSpec) -> tuple[float, float]:
    """
    Continuum-limit ``(xi0, Gamma_0)``.

    ``xi0 = -ln(8 pi**2 M v / A**2) - 2 + 2x ln 2x + (1 - 2x) ln|1 - 2x|`` with
    ``x = 2 pi I_rs / A`` and ``Gamma_0 = (v**2/hbar**2) exp(-xi0 A / (pi r hbar))``.
    """
    ch = spec.chain
    xi = continuum_xi0(ch, spec.island_area)
    expo = 2.0 * math.log(ch.coupling / spec.hbar) - xi * spec.island_area / (math.pi * ch.r * spec.hbar)
    return xi, math.exp(expo)


@dataclass
class DegeneracyPoint:
    inv_hbar: float
    l: int
    valid: bool
    length: int


def degeneracy_points(chain: ResonanceChain, n_i: int, l_max: int, area: float) -> list[DegeneracyPoint]:
    """
    Exact degeneracies of the unperturbed ladder, ``1/hbar = (2 n_i + l r + 1) / (2 I_rs)``.

    Each is valid iff the ladder at that hbar reaches rung ``l`` (``L >= l``).
    """
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    out = []
    for l in range(1, l_max + 1):
        inv = (2 * n_i + l * chain.r + 1) / (2.0 * chain.i_rs)
        L = ladder_length(area, 1.0 / inv, chain.r)
        out.append(DegeneracyPoint(inv, l, L >= l, L))
    return out


# ---------------------------------------------------------------------------
# theory curves
# ---------------------------------------------------------------------------

def theory_rate(method: str, inv_hbar: float, *, pendulum: Optional[WSPendulum] = None,
                chain: Optional[ResonanceChain] = None, island_area: Optional[float] = None,
                n_i: int = 0, m: int = 0, energy_model=None) -> float:
    """One point of a theory curve; ``method`` is one of :data:`THEORY_METHODS`."""
    hbar = 1.0 / inv_hbar
    if method in ("wkb_bottom", "wkb_ground"):
        choice = "well_bottom" if method == "wkb_bottom" else "harmonic_ground"
        return wkb_rate(pendulum, hbar, choice)
    spec = build_ladder(chain, hbar, island_area, n_i=n_i)
    if method == "rat_continuum":
        return continuum_rate(spec)[1]
    if method == "rat_unperturbed":
        return rat_rate(ladder_eigensolve(unperturbed_diagonal(spec), 0.0), spec, m)
    if method == "rat_perturbed":
        return rat_rate(ladder_eigensolve(unperturbed_diagonal(spec), chain.coupling), spec, m)
    if method == "rat_semiclassical":
        model = energy_model if energy_model is not None else pendulum
        return rat_rate(ladder_eigensolve(semiclassical_diagonal(spec, model), chain.coupling), spec, m)
    raise ValueError(f"unknown theory method {method!r}")

