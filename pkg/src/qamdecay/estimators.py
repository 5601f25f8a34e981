"""
Estimator-style wrappers: ``fit`` does the classical set-up, ``predict``
maps an array of ``1/hbar`` values to decay rates.

The wrappers follow the scikit-learn conventions (constructor arguments are
stored verbatim, fitted state carries a trailing underscore, ``get_params`` /
``set_params``) without depending on it.
"""
from __future__ import annotations

import inspect
import math
from typing import Optional

import numpy as np

from . import spectral
from .classical import (
    MapParams,
    ResonanceChain,
    find_fixed_point,
    fit_resonance_params,
    island_area,
    island_mask,
    locate_chain,
    measure_chain_areas,
)
from .exceptions import QAMError
from .tunneling import theory_rate


class _Estimator:
    def get_params(self, deep: bool = True) -> dict:
        names = [p for p in inspect.signature(type(self).__init__).parameters if p != "self"]
        return {n: getattr(self, n) for n in names}

    def set_params(self, **params):
        valid = self.get_params()
        for k, v in params.items():
            if k not in valid:
                raise ValueError(f"invalid parameter {k!r} for {type(self).__name__}")
            setattr(self, k, v)
        return self

    def _check_fitted(self):
        if not getattr(self, "fitted_", False):
            raise RuntimeError(f"{type(self).__name__} is not fitted; call fit() first")

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"

    @property
    def params_(self) -> MapParams:
        return MapParams(self.kick, self.drift, self.sign)


def _as_grid(inv_hbar) -> np.ndarray:
    x = np.atleast_1d(np.asarray(inv_hbar, dtype=float)).ravel()
    if np.any(x <= 0):
        raise ValueError("1/hbar must be positive")
    return x


class WKBDecayModel(_Estimator):
    """WKB tunneling rate out of the Wannier-Stark well."""

    def __init__(self, kick: float = 0.8, drift: float = 0.7, sign: str = "minus",
                 energy_choice: str = "well_bottom"):
        self.kick = kick
        self.drift = drift
        self.sign = sign
        self.energy_choice = energy_choice

    def fit(self, X=None, y=None):
        self.pendulum_ = self.params_.pendulum()
        if not self.pendulum_.has_island:
            raise QAMError("the pendulum has no well for these parameters")
        self.fitted_ = True
        return self

    def predict(self, inv_hbar) -> np.ndarray:
        self._check_fitted()
        method = "wkb_bottom" if self.energy_choice == "well_bottom" else "wkb_ground"
        return np.array([theory_rate(method, x, pendulum=self.pendulum_)
                         for x in _as_grid(inv_hbar)])


class RATDecayModel(_Estimator):
    """
    Resonance-assisted rate of the n_i-th island state.

    When ``chain`` is None, ``fit`` measures the r:s chain of the map and the
    island area; a given chain is used as is (``island_area`` still measured
    unless supplied).  Points where the theory is undefined predict nan.
    """

    def __init__(self, kick: float = 2.5, drift: float = 1.0, sign: str = "minus",
                 r: int = 4, s: int = 1, chain: Optional[ResonanceChain] = None,
                 island_area: Optional[float] = None, method: str = "rat_unperturbed",
                 n_i: int = 0, grid_step: float = 0.02):
        self.kick = kick
        self.drift = drift
        self.sign = sign
        self.r = r
        self.s = s
        self.chain = chain
        self.island_area = island_area
        self.method = method
        self.n_i = n_i
        self.grid_step = grid_step

    def fit(self, X=None, y=None):
        P = self.params_
        fp = None
        if self.chain is None or self.island_area is None:
            fp = find_fixed_point(P)[0]
        if self.chain is None:
            loc = locate_chain(P, fp, self.r, self.s)
            areas = measure_chain_areas(P, fp, self.r, self.s, loc.inner_seed, loc.outer_seed,
                                        self.grid_step)
            self.chain_ = fit_resonance_params(areas.s_plus, areas.s_minus,
                                               loc.monodromy_trace, self.r, self.s)
        else:
            self.chain_ = self.chain
        self.island_area_ = (self.island_area if self.island_area is not None
                             else island_area(P, fp, self.grid_step))
        self.fitted_ = True
        return self

    def predict(self, inv_hbar) -> np.ndarray:
        self._check_fitted()
        out = []
        for x in _as_grid(inv_hbar):
            try:
                out.append(theory_rate(self.method, x, chain=self.chain_,
                                       island_area=self.island_area_, n_i=self.n_i,
                                       pendulum=self.params_.pendulum()))
            except QAMError:
                out.append(math.nan)
        return np.array(out)


class FloquetDecayEstimator(_Estimator):
    """
    Numerical decay rate of the slowest island state (truncated basis,
    complex scaling or wavepacket), ``1/hbar`` snapped to commensurate values.
    """

    def __init__(self, kick: float = 2.5, drift: float = 1.0, sign: str = "minus",
                 method: str = "truncated", nu_sequence=(128, 256), n_max: int = 16,
                 tol: float = 1e-6, wavepacket_steps: int = 2000, log2_size: int = 14):
        self.kick = kick
        self.drift = drift
        self.sign = sign
        self.method = method
        self.nu_sequence = nu_sequence
        self.n_max = n_max
        self.tol = tol
        self.wavepacket_steps = wavepacket_steps
        self.log2_size = log2_size

    def fit(self, X=None, y=None):
        P = self.params_
        self.center_ = find_fixed_point(P)[0]
        self.box_ = island_mask(P, self.center_, 0.05, 2000).bounding_box()
        self.fitted_ = True
        return self

    def predict(self, inv_hbar) -> np.ndarray:
        self._check_fitted()
        curve = self.sweep(inv_hbar)
        return np.array([pt.gamma if not pt.error else math.nan for pt in curve.points])

    def sweep(self, inv_hbar) -> spectral.DecayCurve:
        """Full DecayCurve (snapped values, quasienergies, per-point errors)."""
        self._check_fitted()
        return spectral.sweep_decay(
            self.params_, list(_as_grid(inv_hbar)), self.method, island_box=self.box_,
            center=self.center_, nu_sequence=self.nu_sequence, tol=self.tol, n_max=self.n_max,
            wavepacket_steps=self.wavepacket_steps, log2_size=self.log2_size,
            j_window=(self.box_[2], self.box_[3]))
