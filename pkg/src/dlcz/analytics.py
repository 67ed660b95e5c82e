"""Closed-form predictions for the connected state and the preparation rates.

The connection formulas assume both input pairs share the same field-2
statistics p'_ij with p'10 = p'01, and keep every term of the expressions
(no small-p expansion) unless a function is labeled leading-order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from scipy.optimize import brentq

from .records import ClickRecord
from .tomography import (
    ReducedDensityMatrix,
    estimate_diagonals,
    fit_fringe,
    fringe_from_records,
    h_parameter,
)

SYMMETRY_TOL = 0.05  # relative mismatch allowed between p'10 and p'01


@dataclass(frozen=True)
class PairStats:
    """Field-2 click statistics of one prepared pair (unit detection convention)."""

    p00: float
    p01: float
    p10: float
    p11: float

    def __post_init__(self):
        for k in ("p00", "p01", "p10", "p11"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if self.p00 + self.p01 + self.p10 + self.p11 > 1 + 1e-9:
            raise ValueError("probabilities sum to more than 1")

    @property
    def h(self) -> float:
        return self.p11 / (self.p10 * self.p01)

    @classmethod
    def symmetric(cls, p10: float, h: float) -> PairStats:
        """Pair with p'10 = p'01 and p'11 = h p'10^2; p'00 takes the rest."""
        p11 = h * p10 * p10
        return cls(1.0 - 2 * p10 - p11, p10, p10, p11)


@dataclass(frozen=True)
class ConnectionPrediction:
    p_swap: float  # per-attempt probability of a single swap click
    p00: float
    p01: float
    p10: float
    p11: float

    @property
    def h(self) -> float:
        return self.p11 / (self.p10 * self.p01)


@dataclass(frozen=True)
class RateModelParams:
    q: float
    memory_window: int
    trial_period: float = 0.575  # microseconds
    duty_cycle: float = 4.0 / 25.0
    swap_success: float = 0.1

    def __post_init__(self):
        if not 0 < self.q <= 1:
            raise ValueError(f"q must be in (0, 1], got {self.q}")
        if self.memory_window < 1:
            raise ValueError("memory_window must be >= 1")
        if not self.trial_period > 0:
            raise ValueError("trial_period must be > 0")
        if not 0 < self.duty_cycle <= 1:
            raise ValueError("duty_cycle must be in (0, 1]")
        if not 0 <= self.swap_success <= 1:
            raise ValueError("swap_success must be in [0, 1]")


@dataclass(frozen=True)
class RatePrediction:
    rate_no_control: float  # Hz
    rate_with_control: float  # Hz
    enhancement: float
    prep_no_control: float  # per trial
    prep_with_control: float  # per trial


def _check_symmetric(stats: PairStats, tol: float):
    if stats.p10 <= 0:
        raise ValueError("p'10 must be > 0")
    if abs(stats.p10 - stats.p01) > tol * max(stats.p10, stats.p01):
        raise ValueError(f"p'10={stats.p10} and p'01={stats.p01} differ by more than {tol:.0%}")


def predict_connection_diagonals(stats: PairStats, tol: float = SYMMETRY_TOL) -> ConnectionPrediction:
    """Diagonals of the connected pair, keeping all terms.

    p' = p'10, p10 = p01 = (p'10^2 + p'11 p'00 + p'11 p'10) / (2 p'),
    p11 = p'11 (p'11 + 2 p'10) / (2 p'), p00 takes the rest.
    """
    _check_symmetric(stats, tol)
    pp = stats.p10
    p10 = 0.5 * (stats.p10**2 + stats.p11 * stats.p00 + stats.p11 * stats.p10) / pp
    p11 = 0.5 * stats.p11 * (stats.p11 + 2 * stats.p10) / pp
    return ConnectionPrediction(pp, 1.0 - 2 * p10 - p11, p10, p10, p11)


def predict_connection_leading_order(stats: PairStats, tol: float = SYMMETRY_TOL) -> ConnectionPrediction:
    """Leading-order forms p10 ~ p'10 / 2 and p11 ~ p'11."""
    _check_symmetric(stats, tol)
    p10, p11 = stats.p10 / 2, stats.p11
    return ConnectionPrediction(stats.p10, 1.0 - 2 * p10 - p11, p10, p10, p11)


def predict_h_after_connection(h_prime: float, p10_prime: float) -> float:
    """h of the connected pair from the full expressions."""
    if h_prime < 0:
        raise ValueError("h' must be >= 0")
    if not 0 < p10_prime < 0.5:
        raise ValueError("p'10 must be in (0, 1/2)")
    return predict_connection_diagonals(PairStats.symmetric(p10_prime, h_prime)).h


def h_limit(h_prime: float) -> float:
    """Small-p'10 limit of the full expression: 4h' / (1 + h')^2."""
    return 4 * h_prime / (1 + h_prime) ** 2


def h_leading_order(h_prime: float) -> float:
    return 4 * h_prime


def predict_ideal_state() -> ReducedDensityMatrix:
    """Equal mixture of vacuum and a maximally entangled single excitation."""
    return ReducedDensityMatrix(0.5, 0.25, 0.25, 0.0, 0.25)


def _prep_per_trial(q: float, window: int) -> float:
    # renewal argument: from an empty state a trial either prepares both pairs
    # (q^2), stores one (2q(1-q)) or does nothing; a stored pair waits up to
    # window - 1 further trials for the other one
    x = 1.0 - (1.0 - q) ** (window - 1)
    return (q * q + 2 * q * (1 - q) * x) / (1 + 2 * (1 - q) * x)


def predict_rates(params: RateModelParams) -> RatePrediction:
    """Connection rates without and with conditional control.

    Without control both pairs must herald in the same trial (q^2). With
    control the first pair to herald is held for up to ``memory_window``
    trials; the per-trial preparation rate is the exact renewal-process value
    for independent geometric herald times.
    """
    no = params.q**2
    with_ = _prep_per_trial(params.q, params.memory_window)
    scale = params.swap_success * params.duty_cycle / (params.trial_period * 1e-6)
    return RatePrediction(no * scale, with_ * scale, with_ / no, no, with_)


def q_for_rate(target_hz: float, memory_window: int, **kwargs) -> float:
    """Per-pair herald probability giving ``target_hz`` with conditional control."""

    def f(q):
        return predict_rates(RateModelParams(q, memory_window, **kwargs)).rate_with_control - target_hz

    return brentq(f, 1e-12, 1.0, xtol=1e-15)


def compare_mc_vs_analytic(
    records: Iterable[ClickRecord],
    stats: PairStats | ConnectionPrediction,
    visibility: float | None = None,
) -> dict[str, float]:
    """z-scores (MC - analytic) / sigma_MC for the diagonals, h and optionally V.

    ``records`` are conditioned final records; 0-degree ones feed the
    diagonals and 22.5-degree ones the visibility.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to compare")
    pred = stats if isinstance(stats, ConnectionPrediction) else predict_connection_diagonals(stats)
    zero = [r for r in records if r.config_angle == "0"]
    diag = estimate_diagonals(zero)
    out = {}
    for k in ("p00", "p01", "p10", "p11"):
        err = diag.errors[k]
        delta = getattr(diag, k) - getattr(pred, k)
        out[k] = delta / err if err > 0 else (0.0 if delta == 0 else math.copysign(math.inf, delta))
    if diag.p10 > 0 and diag.p01 > 0:
        e = diag.errors
        h, h_err = h_parameter(diag.p10, diag.p01, diag.p11, e["p10"], e["p01"], e["p11"])
        out["h"] = (h - pred.h) / h_err if h_err > 0 else 0.0
    if visibility is not None:
        fit = fit_fringe(fringe_from_records([r for r in records if r.config_angle == "22.5"]))
        out["V"] = (fit.visibility - visibility) / fit.visibility_err
    return out


def flagged(zscores: Mapping[str, float], limit: float = 4.0) -> list[str]:
    return [k for k, z in zscores.items() if not abs(z) < limit]
