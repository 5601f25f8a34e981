"""
Quantized one-step and circle operators, complex scaling, wavepackets and Husimi fields.

Momentum states are labelled by ``l + beta`` with ``J = hbar (l + beta)`` and the
one-step operator is ``U = D K F``:

* ``F``: kinetic phases ``exp(-i sigma hbar (l + beta)**2 / 2)``,
* ``K``: kick ``exp(-i kappa cos(theta))`` with ``kappa = kick / hbar``, whose
  momentum matrix is Toeplitz with entries ``(-i)**d J_d(kappa)``,
* ``D``: drift by ``sigma m / n`` quasimomentum units.  The integer part shifts
  the ladder, the fractional part moves the state to another sector.

``sigma`` is +1 for the plus branch and -1 for the minus branch of the map, so
the same kernel quantizes both branches.  Composite operators over ``n`` steps
return to the starting sector and act on a single momentum ladder.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sfft
from scipy import linalg, sparse, special

from .classical import MapParams, PhaseState, TWO_PI
from .exceptions import (
    GridOverflow,
    NoCommensurateValue,
    NonPositiveProbability,
    OutOfGrid,
    UnsupportedPlanck,
)

BESSEL_MAX_NU = 512
_IPOW = np.array([1.0, -1j, -1.0, 1j])  # (-i)**d for d mod 4


# ---------------------------------------------------------------------------
# Planck constant and commensurability
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanckSpec:
    """Effective Planck constant with ``drift = m hbar / n``."""

    hbar: float
    m: int
    n: int = 1
    beta: float = 0.0

    def __post_init__(self):
        if not self.hbar > 0:
            raise ValueError(f"hbar must be positive, got {self.hbar}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if math.gcd(int(self.m), int(self.n)) != 1:
            raise ValueError(f"m={self.m} and n={self.n} are not coprime")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "n", int(self.n))

    @property
    def drift(self) -> float:
        return self.m * self.hbar / self.n

    @property
    def inv_hbar(self) -> float:
        return 1.0 / self.hbar

    def matches(self, drift: float) -> bool:
        return abs(drift - self.drift) < 1e-12

    def with_beta(self, beta: float) -> "PlanckSpec":
        return PlanckSpec(self.hbar, self.m, self.n, beta % 1.0)


def commensurate(drift: float, hbar_target: float, n_max: int = 16,
                 rel_bound: float = 1e-3) -> PlanckSpec:
    """
    Snap ``hbar`` so that ``drift / hbar = m / n`` with ``n <= n_max``.

    Raises
    ------
    NoCommensurateValue
        If the snapped value differs from ``hbar_target`` by more than
        ``rel_bound`` (relative).
    """
    if not drift > 0:
        raise ValueError(f"drift must be positive, got {drift}")
    if not hbar_target > 0:
        raise ValueError(f"hbar must be positive, got {hbar_target}")
    ratio = Fraction(drift / hbar_target).limit_denominator(n_max)
    if ratio.numerator == 0:
        raise NoCommensurateValue(f"drift/hbar = {drift / hbar_target} rounds to zero")
    m, n = ratio.numerator, ratio.denominator
    hbar = drift * n / m
    if abs(hbar - hbar_target) > rel_bound * hbar_target:
        raise NoCommensurateValue(
            f"nearest m/n = {m}/{n} moves hbar from {hbar_target} to {hbar} "
            f"(bound {rel_bound:g} relative)")
    return PlanckSpec(hbar, m, n)


def commensurate_inv(drift: float, inv_hbar: float, n_max: int = 16,
                     rel_bound: float = 1e-3) -> PlanckSpec:
    """Same as :func:`commensurate` with the target given as ``1/hbar``."""
    return commensurate(drift, 1.0 / inv_hbar, n_max, rel_bound)


# ---------------------------------------------------------------------------
# Floquet matrices and their binary layout
# ---------------------------------------------------------------------------

KINDS = ("unitary", "truncated", "complex_scaled")


def params_hash(params: MapParams, p: PlanckSpec, **extra) -> str:
    """sha256 of a canonical JSON record of the operator parameters."""
    rec = {"kick": float(params.kick), "drift": float(params.drift), "sign": params.sign,
           "hbar": float(p.hbar), "m": p.m, "n": p.n, "beta": float(p.beta)}
    rec.update({k: (float(v) if isinstance(v, (float, np.floating)) else v)
                for k, v in extra.items()})
    return hashlib.sha256(json.dumps(rec, sort_keys=True).encode()).hexdigest()


@dataclass
class FloquetMatrix:
    """
    Matrix of an evolution operator over momentum indices ``-nu..nu``.

    ``beta_in`` labels the incoming quasimomentum sector, ``beta_out`` the
    outgoing one (equal for circle operators).
    """

    entries: np.ndarray
    basis_size: int
    steps_per_application: int
    kind: str
    hbar: float
    beta_in: float = 0.0
    beta_out: float = 0.0
    rho: Optional[float] = None
    params_hash: str = ""
    boundary: str = "block"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        dim = 2 * self.basis_size + 1
        if self.entries.shape != (dim, dim):
            raise ValueError(f"entries shape {self.entries.shape} does not match nu={self.basis_size}")

    @property
    def dim(self) -> int:
        return 2 * self.basis_size + 1

    @property
    def l_values(self) -> np.ndarray:
        return np.arange(-self.basis_size, self.basis_size + 1)

    def state(self, vector) -> "WavepacketState":
        """Wrap a column vector of this basis as a momentum state."""
        return WavepacketState(np.asarray(vector, dtype=complex), -self.basis_size,
                               self.hbar, self.beta_in)

    def content_hash(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.entries).tobytes())
        h.update(self.params_hash.encode())
        return h.hexdigest()


# header: magic, version, kind, boundary, rows, cols, nu, steps, hbar, beta_in,
# beta_out, rho (nan if unscaled), sha256 digest of the parameter record
_HEADER = struct.Struct("<4sHBBQQQQddddd32s")
_MAGIC = b"QAMF"


def matrix_bytes(U: FloquetMatrix) -> bytes:
    """
    ``U`` in the binary cache layout.

    The header (little-endian) holds the magic ``QAMF``, a format version, the
    kind and boundary codes, the matrix dimensions, ``nu``, the steps per
    application, ``hbar``, both sector labels, ``rho`` (nan when unscaled) and
    the 32-byte parameter digest.  The body is the row-major matrix as
    little-endian complex doubles.
    """
    digest = bytes.fromhex(U.params_hash) if U.params_hash else bytes(32)
    rows, cols = U.entries.shape
    head = _HEADER.pack(_MAGIC, 1, KINDS.index(U.kind), 0 if U.boundary == "block" else 1,
                        rows, cols, U.basis_size, U.steps_per_application, U.hbar,
                        U.beta_in, U.beta_out, np.nan if U.rho is None else U.rho,
                        0.0, digest)
    return head + np.ascontiguousarray(U.entries, dtype="<c16").tobytes(order="C")


def matrix_from_bytes(data: bytes, source: str = "<bytes>") -> FloquetMatrix:
    if len(data) < _HEADER.size:
        raise ValueError(f"{source}: truncated header")
    (magic, version, kind, boundary, rows, cols, nu, steps, hbar, b_in, b_out, rho,
     _, digest) = _HEADER.unpack(data[:_HEADER.size])
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{source}: not a Floquet matrix file")
    body = np.frombuffer(data, dtype="<c16", offset=_HEADER.size)
    if body.size != rows * cols:
        raise ValueError(f"{source}: truncated body ({body.size} of {rows * cols} entries)")
    return FloquetMatrix(body.reshape(rows, cols).astype(complex), int(nu), int(steps),
                         KINDS[kind], hbar, b_in, b_out, None if math.isnan(rho) else rho,
                         digest.hex() if any(digest) else "",
                         "block" if boundary == 0 else "periodic")


def save_matrix(U: FloquetMatrix, path) -> None:
    """Write ``U`` to ``path`` in the layout of :func:`matrix_bytes`."""
    with open(path, "wb") as fh:
        fh.write(matrix_bytes(U))


def load_matrix(path) -> FloquetMatrix:
    with open(path, "rb") as fh:
        return matrix_from_bytes(fh.read(), str(path))


# ---------------------------------------------------------------------------
# kick coefficients
# ---------------------------------------------------------------------------

def kick_bandwidth(kappa: float, cutoff: float = 1e-18) -> int:
    """Smallest ``D`` with ``|J_d(kappa)| < cutoff`` for every ``|d| > D``."""
    d = int(abs(kappa)) + 1
    while abs(special.jv(d, kappa)) >= cutoff or abs(special.jv(d + 1, kappa)) >= cutoff:
        d += 1
    return d


def kick_coefficients(kappa: float, d, log_scale: float = 0.0) -> np.ndarray:
    """
    ``(-i)**d J_d(kappa) exp(d * log_scale)`` for integer orders ``d``.

    The scaled product is formed in log space so that large orders with a
    growing scale factor give a clean zero instead of ``0 * inf``.
    """
    d = np.asarray(d, dtype=np.int64)
    jv = special.jv(d, kappa)
    if log_scale == 0.0:
        return _IPOW[d % 4] * jv
    with np.errstate(divide="ignore"):
        mag = np.exp(np.log(np.abs(jv)) + d * log_scale)
    return _IPOW[d % 4] * np.sign(jv) * mag


def kick_coefficients_fft(kappa: float, d, log_scale: float = 0.0,
                          n_points: Optional[int] = None) -> np.ndarray:
    """
    Same coefficients from samples of ``exp(-i kappa cos(theta - i log_scale))``.

    ``n_points`` defaults to a power of two large enough that aliasing stays
    below the Bessel cutoff.
    """
    d = np.asarray(d, dtype=np.int64)
    if n_points is None:
        span = int(np.abs(d).max()) if d.size else 0
        n_points = 1 << int(math.ceil(math.log2(2 * span + 2 * kick_bandwidth(kappa) + 2)))
    theta = TWO_PI * np.arange(n_points) / n_points
    f = np.exp(-1j * kappa * np.cos(theta - 1j * log_scale))
    c = sfft.fft(f) / n_points
    return c[d % n_points]


def _coefficients(kappa, d, log_scale, assembly, nu):
    if assembly == "auto":
        assembly = "bessel" if nu <= BESSEL_MAX_NU else "fft"
    if assembly == "bessel":
        return kick_coefficients(kappa, d, log_scale)
    if assembly == "fft":
        return kick_coefficients_fft(kappa, d, log_scale)
    raise ValueError(f"unknown assembly {assembly!r}")


def kick_matrix(kappa: float, nu: int, assembly: str = "auto", log_scale: float = 0.0) -> np.ndarray:
    """Block ``-nu..nu`` of the kick operator, entries ``c_{l - l'}``."""
    d = np.arange(0, 2 * nu + 1)
    col = _coefficients(kappa, d, log_scale, assembly, nu)
    row = _coefficients(kappa, -d, log_scale, assembly, nu)
    return linalg.toeplitz(col, row)


def _ring_kick(kappa: float, nu: int, assembly: str, log_scale: float) -> np.ndarray:
    """Circulant kick on the ring of ``2 nu + 1`` momenta (all aliases summed)."""
    size = 2 * nu + 1
    if assembly == "auto":
        assembly = "bessel" if nu <= BESSEL_MAX_NU else "fft"
    if assembly == "fft":
        theta = TWO_PI * np.arange(size) / size
        c = sfft.fft(np.exp(-1j * kappa * np.cos(theta - 1j * log_scale))) / size
    else:
        band = kick_bandwidth(kappa)
        d = np.arange(size)
        d = np.where(d > nu, d - size, d)
        c = np.zeros(size, complex)
        wraps = band // size + 1
        for k in range(-wraps, wraps + 1):
            c += kick_coefficients(kappa, d + k * size, log_scale)
    return linalg.circulant(c)


# ---------------------------------------------------------------------------
# one-step, circle and complex-scaled operators
# ---------------------------------------------------------------------------

def _sector_shift(p: PlanckSpec, sigma: int, beta: float) -> tuple[int, float]:
    """Integer index shift and outgoing sector of one drift step from sector ``beta``."""
    target = Fraction(beta).limit_denominator(10 ** 9) + Fraction(sigma * p.m, p.n)
    shift = math.floor(target)
    return shift, float(target - shift)


def kinetic_phases(p: PlanckSpec, sigma: int, beta: float, l_values) -> np.ndarray:
    x = np.asarray(l_values, dtype=float) + beta
    return np.exp(-1j * sigma * p.hbar * x * x / 2.0)


def _shift_rows(X: np.ndarray, shift: int, periodic: bool) -> np.ndarray:
    """Rows of ``X`` moved by ``shift`` (the drift factor applied from the left)."""
    if periodic:
        return np.roll(X, shift, axis=0)
    out = np.zeros_like(X)
    if shift >= 0:
        out[shift:] = X[:X.shape[0] - shift]
    else:
        out[:shift] = X[-shift:]
    return out


def build_one_step(params: MapParams, p: PlanckSpec, beta_in: Optional[float] = None,
                   nu: int = 256, boundary: str = "block",
                   assembly: str = "auto") -> FloquetMatrix:
    """
    One kick of the map in the momentum basis ``l = -nu..nu``.

    Parameters
    ----------
    beta_in : float, optional
        Incoming quasimomentum; defaults to ``p.beta``.
    boundary : {'block', 'periodic'}
        'block' takes the central block of the infinite matrix (kind
        ``truncated``); 'periodic' closes the ladder into a ring of
        ``2 nu + 1`` momenta, which gives an exactly unitary matrix.
    assembly : {'auto', 'bessel', 'fft'}
        How the kick coefficients are evaluated.
    """
    if nu < 1:
        raise ValueError("nu must be >= 1")
    beta = p.beta if beta_in is None else float(beta_in) % 1.0
    sigma = params.sigma
    l = np.arange(-nu, nu + 1)
    kappa = params.kick / p.hbar
    periodic = boundary == "periodic"
    if boundary not in ("block", "periodic"):
        raise ValueError(f"unknown boundary {boundary!r}")
    K = _ring_kick(kappa, nu, assembly, 0.0) if periodic else kick_matrix(kappa, nu, assembly)
    shift, beta_out = _sector_shift(p, sigma, beta)
    K *= kinetic_phases(p, sigma, beta, l)[None, :]
    U = _shift_rows(K, shift, periodic)
    return FloquetMatrix(U, nu, 1, "unitary" if periodic else "truncated", p.hbar, beta,
                         beta_out, None,
                         params_hash(params, p, nu=nu, beta_in=beta, op="one_step",
                                     boundary=boundary),
                         boundary)


def _one_step_sparse(params: MapParams, p: PlanckSpec, beta: float, half: int, band: int):
    """Banded one-step block on ``-half..half`` as a sparse matrix."""
    sigma = params.sigma
    size = 2 * half + 1
    kappa = params.kick / p.hbar
    d = np.arange(-band, band + 1)
    c = kick_coefficients(kappa, d)
    K = sparse.diags([np.full(size - abs(k), c[k + band]) for k in d], d.tolist(),
                     shape=(size, size), format="csr")
    F = sparse.diags(kinetic_phases(p, sigma, beta, np.arange(-half, half + 1)))
    shift, beta_out = _sector_shift(p, sigma, beta)
    D = sparse.diags(np.ones(size - abs(shift)), -shift, shape=(size, size), format="csr")
    return D @ K @ F, beta_out


def circle_sectors(params: MapParams, p: PlanckSpec) -> list[float]:
    """Sector sequence ``beta, beta + sigma m/n, ...`` visited by the n steps (mod 1)."""
    out, beta = [], p.beta
    for _ in range(p.n):
        out.append(beta)
        _, beta = _sector_shift(p, params.sigma, beta)
    return out


def build_circle_operator(params: MapParams, p: PlanckSpec, nu: int = 256,
                          boundary: str = "block", assembly: str = "auto") -> FloquetMatrix:
    """
    Composite of the ``n`` one-step operators through the sectors of one cycle.

    With ``boundary='block'`` the product is formed on a padded ladder and
    then cut to ``-nu..nu``, so the result is the central block of the exact
    composite (the factors are banded; the padding exceeds their reach).
    """
    if p.n == 1:
        U = build_one_step(params, p, p.beta, nu, boundary, assembly)
        U.params_hash = params_hash(params, p, nu=nu, op="circle", boundary=boundary)
        return U
    sectors = circle_sectors(params, p)
    if boundary == "periodic":
        U = np.eye(2 * nu + 1, dtype=complex)
        for beta in sectors:
            U = build_one_step(params, p, beta, nu, "periodic", assembly).entries @ U
        kind = "unitary"
    else:
        band = kick_bandwidth(params.kick / p.hbar)
        reach = band + abs(p.m) // p.n + 1
        half = nu + p.n * reach
        # Propagate the central unit columns split-step on a ring that is
        # wider than their total reach, so nothing wraps and the result is
        # the central block of the exact composite.
        size = sfft.next_fast_len(2 * half + 1)
        l = np.arange(size) - half
        theta = TWO_PI * np.arange(size) / size
        kick = np.exp(-1j * (params.kick / p.hbar) * np.cos(theta))[:, None]
        cols = np.zeros((size, 2 * nu + 1), dtype=complex)
        cols[half - nu:half + nu + 1] = np.eye(2 * nu + 1)
        for beta in sectors:
            cols *= kinetic_phases(p, params.sigma, beta, l)[:, None]
            cols = sfft.fft(sfft.ifft(cols, axis=0, overwrite_x=True) * kick, axis=0,
                            overwrite_x=True)
            shift, _ = _sector_shift(p, params.sigma, beta)
            cols = np.roll(cols, shift, axis=0)
        U = cols[half - nu:half + nu + 1]
        kind = "truncated"
    return FloquetMatrix(U, nu, p.n, kind, p.hbar, p.beta, p.beta, None,
                         params_hash(params, p, nu=nu, op="circle", boundary=boundary), boundary)


def build_circle_sparse(params: MapParams, p: PlanckSpec, nu: int) -> sparse.csr_matrix:
    """
    Banded sparse form of the block-truncated circle operator.

    Same matrix as ``build_circle_operator(..., boundary='block')`` up to the
    dropped kick coefficients below 1e-18; used for shift-invert refinement
    at basis sizes where dense eigensolves are too costly.
    """
    band = kick_bandwidth(params.kick / p.hbar)
    if p.n == 1:
        step, _ = _one_step_sparse(params, p, p.beta, nu, band)
        return step.tocsr()
    reach = band + abs(p.m) // p.n + 1
    half = nu + p.n * reach
    prod = sparse.identity(2 * half + 1, dtype=complex, format="csr")
    for beta in circle_sectors(params, p):
        step, _ = _one_step_sparse(params, p, beta, half, band)
        prod = step @ prod
    lo = half - nu
    return prod[lo:lo + 2 * nu + 1, lo:lo + 2 * nu + 1].tocsr()


def truncate(U: FloquetMatrix, nu_new: int) -> FloquetMatrix:
    """Central ``(2 nu_new + 1)`` block; the kind becomes ``truncated``."""
    if nu_new > U.basis_size or nu_new < 0:
        raise ValueError(f"nu_new={nu_new} outside [0, {U.basis_size}]")
    lo = U.basis_size - nu_new
    sub = U.entries[lo:lo + 2 * nu_new + 1, lo:lo + 2 * nu_new + 1].copy()
    kind = "complex_scaled" if U.kind == "complex_scaled" else "truncated"
    return FloquetMatrix(sub, nu_new, U.steps_per_application, kind, U.hbar, U.beta_in,
                         U.beta_out, U.rho, U.params_hash, U.boundary)


def complex_scaling_kicks(kick: float, rho: float) -> tuple[float, float]:
    """``(k+, k-) = (kick/2) |rho +- 1/rho|``."""
    return 0.5 * kick * abs(rho + 1.0 / rho), 0.5 * kick * abs(rho - 1.0 / rho)


def reciprocal_integer(hbar: float, tol: float = 1e-9) -> int:
    """``1/hbar`` as an integer, or UnsupportedPlanck."""
    inv = 1.0 / hbar
    k = int(round(inv))
    if k < 1 or abs(inv - k) > tol * max(1.0, inv):
        raise UnsupportedPlanck(f"complex scaling needs hbar = 1/integer, got 1/hbar = {inv}")
    return k


def build_complex_scaled(params: MapParams, p: PlanckSpec, rho: float, nu: int = 256,
                         boundary: str = "block", assembly: str = "auto") -> FloquetMatrix:
    """
    Matrix of ``h U h^-1`` with the scaling ``h = diag(rho**(sigma l))``.

    The scaling damps the momentum direction into which the drift carries
    escaping probability.  In the kick factor it amounts to evaluating the
    kick at ``theta - i sigma ln(rho)``, which splits ``cos`` into the
    ``k+ cos`` and ``k- sin`` parts; the drift factor acquires ``rho**m``.

    With ``boundary='block'`` this is a similarity of the central block and
    has the same spectrum as :func:`build_one_step`.  With
    ``boundary='periodic'`` the ladder is closed into a ring, unitary at
    ``rho = 1``; for ``rho < 1`` outgoing waves are damped before they wrap
    around and the resonances become eigenvalues.

    Raises
    ------
    UnsupportedPlanck
        Unless ``1/hbar`` is an integer and the drift is a whole number of
        ladder steps (``n = 1``).
    """
    reciprocal_integer(p.hbar)
    if p.n != 1:
        raise UnsupportedPlanck(f"complex scaling needs n = 1, got m/n = {p.m}/{p.n}")
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if boundary not in ("block", "periodic"):
        raise ValueError(f"unknown boundary {boundary!r}")
    sigma = params.sigma
    log_scale = sigma * math.log(rho)
    kappa = params.kick / p.hbar
    l = np.arange(-nu, nu + 1)
    periodic = boundary == "periodic"
    if periodic:
        K = _ring_kick(kappa, nu, assembly, log_scale)
    else:
        K = kick_matrix(kappa, nu, assembly, log_scale)
    shift, beta_out = _sector_shift(p, sigma, p.beta)
    K *= kinetic_phases(p, sigma, p.beta, l)[None, :]
    U = _shift_rows(K, shift, periodic) * rho ** (sigma * shift)
    kind = "complex_scaled" if rho < 1.0 else ("unitary" if periodic else "truncated")
    return FloquetMatrix(U, nu, 1, kind, p.hbar, p.beta, beta_out, rho,
                         params_hash(params, p, nu=nu, rho=rho, op="complex_scaled",
                                     boundary=boundary), boundary)


def max_entry_magnitude(U: FloquetMatrix) -> float:
    return float(np.abs(U.entries).max())


# ---------------------------------------------------------------------------
# wavepackets on the line
# ---------------------------------------------------------------------------

@dataclass
class WavepacketState:
    """Amplitudes over momenta ``l = l_start .. l_start + size - 1`` in sector ``beta``."""

    amplitudes: np.ndarray
    l_start: int
    hbar: float
    beta: float = 0.0

    @property
    def l_values(self) -> np.ndarray:
        return self.l_start + np.arange(self.amplitudes.size)

    @property
    def j_values(self) -> np.ndarray:
        return self.hbar * (self.l_values + self.beta)

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.amplitudes) ** 2)))

    def mean_action(self) -> float:
        w = np.abs(self.amplitudes) ** 2
        return float(np.sum(w * self.j_values) / np.sum(w))

    def copy(self) -> "WavepacketState":
        return WavepacketState(self.amplitudes.copy(), self.l_start, self.hbar, self.beta)


def momentum_grid(p: PlanckSpec, log2_size: int = 17, j_center: float = 0.0) -> tuple[int, int]:
    """``(l_start, size)`` of a ``2**log2_size`` grid centred on ``j_center``."""
    size = 1 << int(log2_size)
    l_mid = int(round(j_center / p.hbar - p.beta))
    return l_mid - size // 2, size


def coherent_amplitudes(l_values, hbar: float, beta: float, center: PhaseState,
                        squeeze: float = 1.0) -> np.ndarray:
    """Normalized Gaussian with ``dJ = sqrt(hbar/2) squeeze`` and ``dtheta dJ = hbar/2``."""
    x = np.asarray(l_values, dtype=float) + beta
    dj = math.sqrt(hbar / 2.0) * squeeze
    amp = np.exp(-((hbar * x - center.action_j) ** 2) / (4.0 * dj * dj) - 1j * x * center.theta)
    return amp / np.linalg.norm(amp)


def coherent_state(center: PhaseState, p: PlanckSpec, log2_size: int = 17,
                   squeeze: float = 1.0, j_center: Optional[float] = None) -> WavepacketState:
    """
    Coherent state at ``center`` on a ``2**log2_size`` momentum grid.

    The grid is centred on ``j_center`` (default ``center.action_j``).

    Raises
    ------
    OutOfGrid
        If the Gaussian is not contained in the grid.
    """
    l_start, size = momentum_grid(p, log2_size, center.action_j if j_center is None else j_center)
    l = l_start + np.arange(size)
    j = p.hbar * (l + p.beta)
    dj = math.sqrt(p.hbar / 2.0) * squeeze
    if not (j[0] + 8 * dj <= center.action_j <= j[-1] - 8 * dj):
        raise OutOfGrid(f"J={center.action_j} outside the grid [{j[0]}, {j[-1]}]")
    return WavepacketState(coherent_amplitudes(l, p.hbar, p.beta, center, squeeze),
                           l_start, p.hbar, p.beta)


def window_probability(psi: WavepacketState, j_window: tuple[float, float]) -> float:
    """Probability in the momentum window ``[j_lo, j_hi]``."""
    lo, hi = j_window
    j = psi.j_values
    sel = (j >= lo) & (j <= hi)
    return float(np.sum(np.abs(psi.amplitudes[sel]) ** 2))


@dataclass
class Probes:
    t: np.ndarray
    norm: np.ndarray
    window_prob: np.ndarray
    snapshots: dict = field(default_factory=dict)
    final: Optional[WavepacketState] = None

    def as_rows(self):
        return [{"t": int(a), "norm": float(b), "window_prob": float(c)}
                for a, b, c in zip(self.t, self.norm, self.window_prob)]


def propagate(psi: WavepacketState, params: MapParams, p: PlanckSpec, steps: int,
              j_window: Optional[tuple[float, float]] = None, probe_every: int = 1,
              snapshot_times: Sequence[int] = (), edge_fraction: float = 1.0 / 64,
              overflow_threshold: float = 1e-8, absorbing: bool = False) -> Probes:
    """
    Split-step evolution on the momentum line.

    Each step applies the kinetic phases, the kick in the angle representation
    (via FFT) and the drift as a shift of the ladder with sector bookkeeping.
    The FFT is exact as long as the state stays away from the grid ends,
    which is monitored on an edge band of ``edge_fraction`` of the grid.

    With ``absorbing=True`` the outer bands (four edge widths on each side)
    are damped by a smooth ``cos**2`` mask every step instead of being
    monitored: flux that has escaped is removed before it can wrap around.
    The norm then decays; probabilities inside the grid interior are exact up
    to the mask's reflection, which is negligible for a ramp of this width.

    Raises
    ------
    GridOverflow
        When the probability in the edge bands exceeds ``overflow_threshold``.
    """
    if abs(psi.hbar - p.hbar) > 1e-15:
        raise ValueError("state and PlanckSpec disagree on hbar")
    state = psi.copy()
    size = state.amplitudes.size
    edge = max(1, int(size * edge_fraction))
    sigma = params.sigma
    theta = TWO_PI * np.arange(size) / size
    kick = np.exp(-1j * (params.kick / p.hbar) * np.cos(theta))
    l_rel = np.arange(size)
    snaps = set(int(t) for t in snapshot_times)
    ts, norms, wins, snapshots = [], [], [], {}
    mask = None
    if absorbing:
        width = 4 * edge
        if 2 * width >= size:
            raise ValueError("grid too small for the absorbing layer")
        ramp = np.sin(0.5 * np.pi * (np.arange(width) + 0.5) / width) ** 2
        mask = np.ones(size)
        mask[:width] = ramp
        mask[-width:] = ramp[::-1]

    def record(t):
        a2 = np.abs(state.amplitudes) ** 2
        ts.append(t)
        norms.append(float(np.sqrt(a2.sum())))
        if j_window is not None:
            j = state.j_values
            wins.append(float(a2[(j >= j_window[0]) & (j <= j_window[1])].sum()))
        else:
            wins.append(float("nan"))
        if t in snaps:
            snapshots[t] = state.copy()

    record(0)
    c = state.amplitudes
    phases = {}
    for t in range(1, steps + 1):
        key = round(state.beta, 12)
        if key not in phases:
            x = state.l_start + l_rel + state.beta
            phases[key] = np.exp(-1j * sigma * p.hbar * x * x / 2.0)
        c = c * phases[key]
        c = sfft.ifft(c, overwrite_x=True)
        c *= kick
        c = sfft.fft(c, overwrite_x=True)
        shift, state.beta = _sector_shift(p, sigma, state.beta)
        if shift:
            c = np.roll(c, shift)
        if mask is not None:
            c *= mask
        state.amplitudes = c
        if t % probe_every == 0 or t in snaps or t == steps:
            spill = np.vdot(c[:edge], c[:edge]).real + np.vdot(c[-edge:], c[-edge:]).real
            if mask is None and spill > overflow_threshold:
                raise GridOverflow(f"edge probability {spill:.2e} at step {t}")
            record(t)
    return Probes(np.array(ts), np.array(norms), np.array(wins), snapshots, state)


def fit_exponential_tail(t, p_t, t_min: int = 0) -> tuple[float, float]:
    """
    Least-squares rate of ``ln p_t`` against ``t`` for ``t >= t_min``.

    Returns
    -------
    rate : float
        Minus the fitted slope.
    residual : float
        RMS deviation of ``ln p_t`` from the line.
    """
    t = np.asarray(t, dtype=float)
    p_t = np.asarray(p_t, dtype=float)
    sel = t >= t_min
    if sel.sum() < 2:
        raise ValueError("need at least two points past t_min")
    if np.any(p_t[sel] <= 0):
        raise NonPositiveProbability("non-positive probability in the fitted tail")
    y = np.log(p_t[sel])
    slope, icpt = np.polyfit(t[sel], y, 1)
    resid = y - (slope * t[sel] + icpt)
    return float(-slope), float(np.sqrt(np.mean(resid ** 2)))


# ---------------------------------------------------------------------------
# Husimi functions
# ---------------------------------------------------------------------------

def husimi(psi: WavepacketState, theta_grid, j_grid, squeeze: float = 1.0) -> np.ndarray:
    """
    Husimi field ``|<theta, J | psi>|**2 / (2 pi hbar)`` on ``j_grid x theta_grid``.

    Coherent states use the same widths as :func:`coherent_state`; the field
    integrates to the norm of ``psi`` over an enclosing grid.
    """
    theta_grid = np.asarray(theta_grid, dtype=float)
    j_grid = np.asarray(j_grid, dtype=float)
    hbar = psi.hbar
    dj = math.sqrt(hbar / 2.0) * squeeze
    j_all = psi.j_values
    reach = 9.0 * dj
    keep = (j_all >= j_grid.min() - reach) & (j_all <= j_grid.max() + reach)
    x = (psi.l_values + psi.beta)[keep]
    amp = psi.amplitudes[keep]
    jl = j_all[keep]
    # squared norm of the sampled coherent state (ladder spacing hbar << dj)
    norm2 = hbar / (dj * math.sqrt(2 * np.pi))
    phase = np.exp(1j * np.outer(x, theta_grid))          # (l, theta)
    out = np.empty((j_grid.size, theta_grid.size))
    for i, jv in enumerate(j_grid):
        g = np.exp(-((jl - jv) ** 2) / (4 * dj * dj)) * amp
        out[i] = np.abs(g @ phase) ** 2
    return out * norm2 / (TWO_PI * hbar)


def husimi_mass(q: np.ndarray, theta_grid, j_grid, box) -> float:
    """Discrete integral of a Husimi field inside ``(theta_lo, theta_hi, j_lo, j_hi)``."""
    theta_grid = np.asarray(theta_grid)
    j_grid = np.asarray(j_grid)
    dth = theta_grid[1] - theta_grid[0]
    djj = j_grid[1] - j_grid[0]
    t_lo, t_hi, j_lo, j_hi = box
    # boxes may straddle theta = 0 (t_lo < 0 or t_hi > 2 pi)
    tw = (theta_grid - t_lo) % TWO_PI
    tsel = tw <= (t_hi - t_lo)
    jsel = (j_grid >= j_lo) & (j_grid <= j_hi)
    return float(q[np.ix_(jsel, tsel)].sum() * dth * djj)
