import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from qamdecay.classical import MapParams, PhaseState
from qamdecay.exceptions import (GridOverflow, NoCommensurateValue, NonPositiveProbability,
                                 OutOfGrid, UnsupportedPlanck)
from qamdecay.quantum import (FloquetMatrix, PlanckSpec, WavepacketState, build_circle_operator,
                              build_circle_sparse, build_complex_scaled, build_one_step,
                              coherent_state, commensurate, commensurate_inv,
                              complex_scaling_kicks, fit_exponential_tail, husimi, husimi_mass,
                              kick_coefficients, kick_matrix, load_matrix, propagate, save_matrix,
                              truncate, window_probability)

FIG5 = MapParams(2.5, 1.0)


# -- commensurability --------------------------------------------------------

def test_commensurate_quarter():
    p = commensurate(1.0, 0.25)
    assert (p.m, p.n) == (4, 1) and p.hbar == 0.25


def test_commensurate_fractional():
    p = commensurate_inv(1.0, 8.2)
    assert (p.m, p.n) == (41, 5)
    assert abs(p.drift - 1.0) < 1e-12


def test_commensurate_irrational_rejected():
    with pytest.raises(NoCommensurateValue):
        commensurate(1.0, 1 / math.pi, n_max=16, rel_bound=1e-6)


def test_commensurate_snaps_within_bound():
    p = commensurate_inv(1.0, 8.2001, rel_bound=1e-3)
    assert (p.m, p.n) == (41, 5)
    assert abs(p.hbar - 5 / 41) < 1e-15


def test_planck_spec_validation():
    with pytest.raises(ValueError):
        PlanckSpec(0.1, 4, 2)
    with pytest.raises(ValueError):
        PlanckSpec(0.1, 1, 1, beta=1.0)


# -- kick factor --------------------------------------------------------------

def _fourier_kick(kappa, nu):
    # independent oracle: Fourier coefficients of exp(-i kappa cos theta) on 4 nu points
    npts = 4 * nu
    theta = 2 * np.pi * np.arange(npts) / npts
    c = np.fft.fft(np.exp(-1j * kappa * np.cos(theta))) / npts
    l = np.arange(-nu, nu + 1)
    return c[(l[:, None] - l[None, :]) % npts]


@pytest.mark.parametrize("kappa,nu", [(10.0, 64), (20.5, 128), (2.5, 32)])
def test_kick_matches_fourier_oracle(kappa, nu):
    K = kick_matrix(kappa, nu, "bessel")
    assert np.abs(K - _fourier_kick(kappa, nu)).max() < 1e-10


@pytest.mark.parametrize("kappa,nu", [(10.0, 100), (40.0, 300)])
def test_bessel_and_fft_assembly_agree(kappa, nu):
    assert np.abs(kick_matrix(kappa, nu, "bessel") - kick_matrix(kappa, nu, "fft")).max() < 1e-10


def test_kick_coefficient_phase():
    d = np.arange(-5, 6)
    assert np.allclose(kick_coefficients(3.0, d), (-1j) ** d * special.jv(d, 3.0))


def test_zero_kick_is_diagonal_up_to_shift():
    p = PlanckSpec(0.25, 4)
    U = build_one_step(MapParams(0.0, 1.0), p, nu=20).entries
    # minus branch: column l lands on row l - 4
    nz = np.argwhere(np.abs(U) > 1e-14)
    assert np.all(nz[:, 0] - nz[:, 1] == -4)
    assert np.allclose(np.abs(U[nz[:, 0], nz[:, 1]]), 1.0)


def test_one_step_interior_columns_unitary():
    p = PlanckSpec(0.25, 4)
    U = build_one_step(FIG5, p, nu=256).entries
    cols = U[:, 128:385]
    assert np.abs(np.linalg.norm(cols, axis=0) - 1).max() < 1e-8


def test_ring_is_unitary():
    p = PlanckSpec(0.25, 4)
    U = build_one_step(FIG5, p, nu=64, boundary="periodic").entries
    assert np.abs(U.conj().T @ U - np.eye(U.shape[0])).max() < 1e-10


# -- circle operator ------------------------------------------------------------

def test_circle_n1_equals_one_step():
    p = PlanckSpec(0.25, 4)
    a = build_circle_operator(FIG5, p, nu=64).entries
    b = build_one_step(FIG5, p, nu=64).entries
    assert np.array_equal(a, b)


def test_circle_fractional_interior_unitary():
    p = commensurate_inv(1.0, 8.2)
    U = build_circle_operator(FIG5, p, nu=768)
    assert U.steps_per_application == 5
    mid = U.entries[:, 768 - 256:768 + 257]
    assert np.abs(np.linalg.norm(mid, axis=0) - 1).max() < 1e-8


def test_circle_sparse_matches_dense():
    p = commensurate_inv(1.0, 7.5)
    dense = build_circle_operator(FIG5, p, nu=80).entries
    assert np.abs(build_circle_sparse(FIG5, p, 80).toarray() - dense).max() < 1e-14


def test_free_circle_eigenphases():
    p = PlanckSpec(0.3, 0)
    U = build_circle_operator(MapParams(0.0, 0.0), p, nu=10)
    l = np.arange(-10, 11)
    assert np.allclose(np.diag(U.entries), np.exp(1j * 0.3 * l * l / 2))


def test_circle_spectrum_independent_of_start_sector():
    p = commensurate_inv(1.0, 2.4)          # m/n = 12/5
    q = p.with_beta((p.beta - p.m / p.n) % 1.0)   # start one minus-branch step later
    ev = lambda s: np.sort_complex(np.linalg.eigvals(
        build_circle_operator(MapParams(1.2, 1.0), s, nu=40, boundary="periodic").entries))
    a, b = ev(p), ev(q)
    d = np.abs(a[:, None] - b[None, :]).min(axis=1)
    assert d.max() < 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ring_circle_preserves_norm(seed):
    p = commensurate_inv(1.0, 3.5)
    U = build_circle_operator(MapParams(1.0, 1.0), p, nu=30, boundary="periodic").entries
    rng = np.random.default_rng(seed)
    v = rng.normal(size=61) + 1j * rng.normal(size=61)
    assert abs(np.linalg.norm(U @ v) - np.linalg.norm(v)) < 1e-10 * np.linalg.norm(v)


# -- truncation -----------------------------------------------------------------

def test_truncate_identity_and_norm_bound():
    p = PlanckSpec(0.25, 4)
    U = build_one_step(FIG5, p, nu=100)
    same = truncate(U, 100)
    assert np.array_equal(same.entries, U.entries) and same.kind == "truncated"
    for nu in (10, 40, 99):
        assert np.linalg.norm(truncate(U, nu).entries, 2) <= 1 + 1e-10


def test_truncate_rejects_growth():
    U = build_one_step(FIG5, PlanckSpec(0.25, 4), nu=10)
    with pytest.raises(ValueError):
        truncate(U, 11)


# -- complex scaling --------------------------------------------------------------

def test_complex_scaling_kick_split():
    kp, km = complex_scaling_kicks(2.5, 0.9)
    assert abs(kp - 1.25 * (0.9 + 1 / 0.9)) < 1e-14 and abs(kp - 2.5139) < 1e-4
    assert abs(km - 1.25 * (1 / 0.9 - 0.9)) < 1e-14 and abs(km - 0.2639) < 1e-4


def test_complex_scaling_restitutes_unitary():
    p = PlanckSpec(0.25, 4)
    a = build_complex_scaled(FIG5, p, 1.0, nu=60).entries
    b = build_one_step(FIG5, p, nu=60).entries
    assert np.abs(a - b).max() < 1e-12


def test_complex_scaling_block_is_similarity():
    p = PlanckSpec(0.25, 4)
    a = build_complex_scaled(FIG5, p, 0.9, nu=30).entries
    b = build_one_step(FIG5, p, nu=30).entries
    h = np.diag(0.9 ** (-np.arange(-30, 31)))      # minus branch
    assert np.abs(a - h @ b @ np.linalg.inv(h)).max() < 1e-10 * np.abs(a).max()


def test_complex_scaled_real_exponential_factor():
    # e^{k- sin theta} in the angle representation is real and positive
    _, km = complex_scaling_kicks(2.5, 0.7)
    theta = np.linspace(0, 2 * np.pi, 50)
    assert np.all(np.exp(km * np.sin(theta)) > 0)


def test_complex_scaling_needs_reciprocal_integer():
    with pytest.raises(UnsupportedPlanck):
        build_complex_scaled(FIG5, commensurate_inv(1.0, 8.2), 0.9)
    with pytest.raises(UnsupportedPlanck):
        build_complex_scaled(FIG5, PlanckSpec(0.4, 5, 2), 0.9)


# -- binary cache ------------------------------------------------------------------

def test_matrix_round_trip(tmp_path):
    U = build_complex_scaled(FIG5, PlanckSpec(0.25, 4), 0.9, nu=12, boundary="periodic")
    path = tmp_path / "u.qamf"
    save_matrix(U, path)
    V = load_matrix(path)
    assert np.array_equal(U.entries, V.entries)
    assert (V.basis_size, V.kind, V.rho, V.params_hash, V.boundary) == \
        (U.basis_size, U.kind, U.rho, U.params_hash, U.boundary)
    assert V.content_hash() == U.content_hash()


def test_matrix_header_layout(tmp_path):
    U = build_one_step(FIG5, PlanckSpec(0.25, 4), nu=3)
    path = tmp_path / "u.qamf"
    save_matrix(U, path)
    raw = path.read_bytes()
    assert raw[:4] == b"QAMF"
    body = np.frombuffer(raw[-49 * 16:], dtype="<c16").reshape(7, 7)
    assert np.array_equal(body, U.entries)


# -- coherent states, windows, Husimi -----------------------------------------------

def test_coherent_state_moments():
    p = PlanckSpec(0.25, 4)
    c = PhaseState(1.0, 0.7)
    psi = coherent_state(c, p, log2_size=10)
    assert abs(psi.norm - 1) < 1e-12
    assert abs(psi.mean_action() - 0.7) <= p.hbar


def test_coherent_state_out_of_grid():
    with pytest.raises(OutOfGrid):
        coherent_state(PhaseState(0.0, 50.0), PlanckSpec(0.25, 4), log2_size=6, j_center=0.0)


def test_windows():
    p = PlanckSpec(0.25, 4)
    psi = coherent_state(PhaseState(2.0, 1.0), p, log2_size=9)
    j = psi.j_values
    assert abs(window_probability(psi, (j[0], j[-1])) - 1) < 1e-12
    a = window_probability(psi, (j[0], 1.1))
    b = window_probability(psi, (1.1 + 1e-9, j[-1]))
    assert abs(a + b - 1) < 1e-12


def test_husimi_peaks_at_center_and_normalizes():
    p = PlanckSpec(0.05, 20)
    c = PhaseState(2.0, 0.3)
    psi = coherent_state(c, p, log2_size=10)
    th = np.linspace(0, 2 * np.pi, 128, endpoint=False)
    jg = np.linspace(-1.0, 1.6, 131)
    q = husimi(psi, th, jg)
    assert q.min() >= 0
    i, k = np.unravel_index(np.argmax(q), q.shape)
    assert abs(jg[i] - 0.3) <= jg[1] - jg[0] and abs(th[k] - 2.0) <= th[1] - th[0]
    mass = husimi_mass(q, th, jg, (0, 2 * np.pi, jg[0], jg[-1]))
    assert 0.95 <= mass <= 1.05


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_husimi_nonnegative(seed):
    rng = np.random.default_rng(seed)
    amp = rng.normal(size=40) + 1j * rng.normal(size=40)
    psi = WavepacketState(amp, -20, 0.2, 0.0)
    q = husimi(psi, np.linspace(0, 6, 17), np.linspace(-3, 3, 19))
    assert np.all(q >= 0)


def test_husimi_mass_wraps_theta():
    th = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    jg = np.array([0.0, 1.0])
    q = np.ones((2, 8))
    assert husimi_mass(q, th, jg, (-1.0, 1.0, -0.5, 0.5)) == \
        pytest.approx(3 * (th[1] - th[0]) * 1.0)


# -- propagation -----------------------------------------------------------------------

def test_free_evolution_keeps_distribution():
    p = PlanckSpec(0.25, 0)
    psi = coherent_state(PhaseState(1.0, 0.0), p, log2_size=8)
    pr = propagate(psi, MapParams(0.0, 0.0), p, 50)
    assert np.allclose(np.abs(pr.final.amplitudes), np.abs(psi.amplitudes), atol=1e-12)


def test_drift_translates_rigidly():
    p = PlanckSpec(0.25, 4)
    params = MapParams(0.0, 1.0)
    psi = coherent_state(PhaseState(1.0, 0.0), p, log2_size=9)
    pr = propagate(psi, params, p, 7)
    fin = pr.final
    assert fin.l_start == psi.l_start
    assert abs(fin.mean_action() - (psi.mean_action() + 7 * params.sigma * params.drift)) < 1e-10
    # 28 ladder steps in the branch direction on the fixed grid
    assert np.allclose(np.abs(np.roll(psi.amplitudes, 7 * params.sigma * 4)),
                       np.abs(fin.amplitudes), atol=1e-12)


def test_fractional_drift_mean_momentum():
    p = commensurate_inv(1.0, 2.4)
    psi = coherent_state(PhaseState(0.0, 0.0), p, log2_size=9)
    pr = propagate(psi, MapParams(0.0, 1.0), p, 10)
    assert abs(pr.final.mean_action() + 10.0) < 1e-9


def test_norm_conserved_with_kick():
    p = PlanckSpec(0.25, 4)
    psi = coherent_state(PhaseState(0.5, 0.0), p, log2_size=12)
    pr = propagate(psi, MapParams(2.5, 0.0), p, 300, probe_every=50)
    assert np.abs(pr.norm - 1).max() < 1e-10


def test_grid_overflow():
    p = PlanckSpec(0.25, 4)
    psi = coherent_state(PhaseState(0.5, 0.0), p, log2_size=8)
    with pytest.raises(GridOverflow):
        propagate(psi, MapParams(0.0, 1.0), p, 200)


def test_probes_rows():
    p = PlanckSpec(0.25, 4)
    psi = coherent_state(PhaseState(0.5, 0.0), p, log2_size=10)
    pr = propagate(psi, FIG5, p, 20, j_window=(-2, 2), probe_every=5)
    rows = pr.as_rows()
    assert [r["t"] for r in rows] == [0, 5, 10, 15, 20]
    assert set(rows[0]) == {"t", "norm", "window_prob"}


# -- tail fits ---------------------------------------------------------------------------

def test_fit_single_exponential():
    t = np.arange(0, 1000, 10)
    rate, res = fit_exponential_tail(t, np.exp(-0.01 * t), 0)
    assert abs(rate - 0.01) < 1e-12 and res < 1e-10


def test_fit_two_exponentials():
    t = np.arange(0, 4000, 5)
    p_t = 0.7 * np.exp(-0.05 * t) + 0.3 * np.exp(-0.001 * t)
    rate, _ = fit_exponential_tail(t, p_t, 800)
    assert abs(rate - 0.001) < 0.01 * 0.001


def test_fit_rejects_zero():
    with pytest.raises(NonPositiveProbability):
        fit_exponential_tail([0, 1, 2], [1.0, 0.0, 0.5], 0)


def test_floquet_matrix_kind_validation():
    with pytest.raises(ValueError):
        FloquetMatrix(np.eye(3, dtype=complex), 1, 1, "bogus", 0.25, 0.0, 0.0, None, "", "block")
