"""Reduced density matrix, visibility and concurrence from click records.

The restricted two-mode matrix in the basis |00>, |01>, |10>, |11> is

    [[p00, 0,   0,   0  ],
     [0,   p01, d,   0  ],
     [0,   d*,  p10, 0  ],
     [0,   0,   0,   p11]]

with (left, right) index order; ``p10`` means a click on the left detector only.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .records import ClickRecord

DIAGONALS = ("p00", "p01", "p10", "p11")


@dataclass(frozen=True)
class Diagonals:
    p00: float
    p01: float
    p10: float
    p11: float
    errors: Mapping[str, float]
    n: int

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in DIAGONALS}


@dataclass(frozen=True)
class ReducedDensityMatrix:
    p00: float
    p01: float
    p10: float
    p11: float
    d: complex
    errors: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for k in DIAGONALS:
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        for k, v in self.errors.items():
            if not v >= 0:
                raise ValueError(f"error on {k} must be >= 0")

    @property
    def P(self) -> float:
        return self.p00 + self.p01 + self.p10 + self.p11

    @property
    def physical(self) -> bool:
        return abs(self.d) ** 2 <= self.p01 * self.p10 * (1 + 1e-12)

    def error(self, name: str) -> float:
        return float(self.errors.get(name, 0.0))

    def scaled(self, factor: float) -> ReducedDensityMatrix:
        errs = {k: v * factor for k, v in self.errors.items()}
        return ReducedDensityMatrix(
            self.p00 * factor, self.p01 * factor, self.p10 * factor, self.p11 * factor, self.d * factor, errs
        )

    def matrix(self) -> np.ndarray:
        m = np.diag([self.p00, self.p01, self.p10, self.p11]).astype(complex)
        m[1, 2] = self.d
        m[2, 1] = np.conj(self.d)
        return m


@dataclass(frozen=True)
class FringeData:
    """Per-phase single-click counts of the two interference detectors.

    ``coincidences`` counts trials where both detectors clicked; they belong
    to neither fringe point.
    """

    phases: np.ndarray  # radians
    n_c: np.ndarray
    n_d: np.ndarray
    coincidences: np.ndarray | None = None

    def __post_init__(self):
        phases = np.asarray(self.phases, dtype=float)
        n_c = np.asarray(self.n_c, dtype=np.int64)
        n_d = np.asarray(self.n_d, dtype=np.int64)
        if not (phases.shape == n_c.shape == n_d.shape) or phases.ndim != 1:
            raise ValueError("phases, n_c and n_d must be 1-d arrays of equal length")
        if (n_c < 0).any() or (n_d < 0).any():
            raise ValueError("counts must be >= 0")
        coinc = np.zeros_like(n_c) if self.coincidences is None else np.asarray(self.coincidences, dtype=np.int64)
        object.__setattr__(self, "phases", phases)
        object.__setattr__(self, "n_c", n_c)
        object.__setattr__(self, "n_d", n_d)
        object.__setattr__(self, "coincidences", coinc)

    @property
    def totals(self) -> np.ndarray:
        return self.n_c + self.n_d

    @property
    def p(self) -> np.ndarray:
        tot = self.totals
        return np.divide(self.n_c, tot, out=np.zeros(len(tot)), where=tot > 0)

    @property
    def p_err(self) -> np.ndarray:
        tot = self.totals
        p = self.p
        return np.sqrt(np.divide(p * (1 - p), tot, out=np.zeros(len(tot)), where=tot > 0))


@dataclass(frozen=True)
class FringeFit:
    visibility: float
    visibility_err: float
    phase_offset: float  # radians, in (-pi, pi]
    phase_offset_err: float
    mean: float
    clamped: bool


@dataclass(frozen=True)
class Concurrence:
    C: float
    C_err: float
    signed: float
    signed_err: float


def _binomial(k: int, n: int) -> tuple[float, float]:
    p = k / n
    return p, math.sqrt(p * (1 - p) / n)


def diagonals_from_counts(counts: Mapping[tuple[int, int], int]) -> Diagonals:
    n = int(sum(counts.values()))
    if n <= 0:
        raise ValueError("no trials to estimate diagonals from")
    vals, errs = {}, {}
    for (c, d) in ((0, 0), (0, 1), (1, 0), (1, 1)):
        vals[f"p{c}{d}"], errs[f"p{c}{d}"] = _binomial(int(counts.get((c, d), 0)), n)
    return Diagonals(errors=errs, n=n, **vals)


def estimate_diagonals(records: Iterable[ClickRecord]) -> Diagonals:
    """Relative frequencies of the four 0-degree outcomes with binomial errors.

    Detection efficiencies are not corrected for.
    """
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for r in records:
        if r.config_angle != "0":
            raise ValueError("diagonal estimation needs 0-degree records only")
        counts[r.outcome] += 1
    return diagonals_from_counts(counts)


def fringe_from_records(records: Iterable[ClickRecord]) -> FringeData:
    tallies: dict[float, list[int]] = defaultdict(lambda: [0, 0, 0])
    for r in records:
        if r.config_angle != "22.5":
            raise ValueError("fringe data needs 22.5-degree records only")
        t = tallies[r.phase_deg]
        if r.d2c and r.d2d:
            t[2] += 1
        elif r.d2c:
            t[0] += 1
        elif r.d2d:
            t[1] += 1
    phases = sorted(tallies)
    return FringeData(
        np.radians(phases),
        [tallies[p][0] for p in phases],
        [tallies[p][1] for p in phases],
        [tallies[p][2] for p in phases],
    )


def fit_fringe(data: FringeData) -> FringeFit:
    """Weighted least-squares fit of p(phi) = A (1 + V cos(phi - phi0)).

    Linearized as A + B cos(phi) + C sin(phi). Weights use the binomial
    variance with a (k + 1/2)/(n + 1) estimate so that points at p = 0 or 1
    keep a finite weight. The visibility is clamped to [0, 1].
    """
    mask = data.totals > 0
    phases, n, k = data.phases[mask], data.totals[mask], data.n_c[mask]
    distinct = np.unique(np.round(np.mod(phases, 2 * np.pi), 12))
    if len(distinct) < 4:
        raise ValueError(f"need at least 4 distinct phases with counts, got {len(distinct)}")
    if np.ptp(phases) < np.pi - 1e-9:
        raise ValueError("phases must span at least pi")
    p = k / n
    p_reg = (k + 0.5) / (n + 1.0)
    sigma2 = p_reg * (1 - p_reg) / n
    X = np.column_stack([np.ones_like(phases), np.cos(phases), np.sin(phases)])
    W = 1.0 / sigma2
    XtWX = X.T @ (X * W[:, None])
    if np.linalg.cond(XtWX) > 1e12:
        raise ValueError("degenerate fringe design matrix")
    cov = np.linalg.inv(XtWX)
    a, b, c = cov @ (X.T @ (W * p))
    if a <= 0:
        raise ValueError("fitted fringe mean is not positive")
    r = math.hypot(b, c)
    v = r / a
    if r > 0:
        grad = np.array([-r / a**2, b / (r * a), c / (r * a)])
        v_err = math.sqrt(max(grad @ cov @ grad, 0.0))
        g_phi = np.array([0.0, -c / r**2, b / r**2])
        phi_err = math.sqrt(max(g_phi @ cov @ g_phi, 0.0))
    else:
        v_err = math.sqrt(0.5 * (cov[1, 1] + cov[2, 2])) / a
        phi_err = math.pi
    clamped = v > 1.0
    return FringeFit(min(v, 1.0), v_err, math.atan2(c, b), phi_err, float(a), clamped)


def coherence_from_visibility(
    V: float, p10: float, p01: float, V_err: float = 0.0, p10_err: float = 0.0, p01_err: float = 0.0
) -> tuple[float, float]:
    """d = V (p10 + p01) / 2 with errors added in quadrature."""
    if not 0.0 <= V <= 1.0:
        raise ValueError(f"visibility must be in [0, 1], got {V}")
    s = p10 + p01
    d = V * s / 2
    err = 0.5 * math.sqrt((s * V_err) ** 2 + V**2 * (p10_err**2 + p01_err**2))
    return d, err


def reconstruct(
    diagonals: Diagonals | Iterable[ClickRecord],
    fringe: FringeData | FringeFit,
) -> ReducedDensityMatrix:
    """Assemble the restricted matrix; d is real and nonnegative."""
    if not isinstance(diagonals, Diagonals):
        diagonals = estimate_diagonals(diagonals)
    fit = fringe if isinstance(fringe, FringeFit) else fit_fringe(fringe)
    e = diagonals.errors
    d, d_err = coherence_from_visibility(fit.visibility, diagonals.p10, diagonals.p01, fit.visibility_err, e["p10"], e["p01"])
    errs = dict(e)
    errs["d"] = d_err
    return ReducedDensityMatrix(diagonals.p00, diagonals.p01, diagonals.p10, diagonals.p11, d, errs)


def concurrence(rho: ReducedDensityMatrix) -> Concurrence:
    """C = max(2|d| - 2 sqrt(p00 p11), 0) / P, plus the signed numerator."""
    P = rho.P
    if P <= 0:
        raise ValueError("matrix has zero trace")
    root = math.sqrt(rho.p00 * rho.p11)
    signed = 2 * abs(rho.d) - 2 * root
    var = 4 * rho.error("d") ** 2
    if root > 0:
        var += (rho.p11 / root * rho.error("p00")) ** 2 + (rho.p00 / root * rho.error("p11")) ** 2
    signed_err = math.sqrt(var)
    if signed > 0:
        return Concurrence(signed / P, signed_err / P, signed, signed_err)
    return Concurrence(0.0, 0.0, signed, signed_err)


def h_parameter(
    p10: float, p01: float, p11: float, p10_err: float = 0.0, p01_err: float = 0.0, p11_err: float = 0.0
) -> tuple[float, float]:
    """h = p11 / (p10 p01); h < 1 rules out classical (coherent-state) fields."""
    if p10 <= 0 or p01 <= 0:
        raise ValueError("p10 and p01 must be > 0")
    h = p11 / (p10 * p01)
    err = math.hypot(p11_err / (p10 * p01), h * (p10_err / p10), h * (p01_err / p01))
    return h, err


def efficiency_corrected(rho: ReducedDensityMatrix, eta_left: float, eta_right: float) -> ReducedDensityMatrix:
    """Undo detection losses on the single- and two-photon terms.

    Vacuum is left unchanged. Each term is divided by the efficiencies of the
    photons it contains, so the signed concurrence numerator keeps its sign.
    """
    if not (0 < eta_left <= 1 and 0 < eta_right <= 1):
        raise ValueError("efficiencies must be in (0, 1]")
    f = {"p00": 1.0, "p10": 1 / eta_left, "p01": 1 / eta_right, "p11": 1 / (eta_left * eta_right),
         "d": 1 / math.sqrt(eta_left * eta_right)}
    errs = {k: v * f.get(k, 1.0) for k, v in rho.errors.items()}
    return ReducedDensityMatrix(
        rho.p00, rho.p01 * f["p01"], rho.p10 * f["p10"], rho.p11 * f["p11"], rho.d * f["d"], errs
    )


def split_by_sign(records: Sequence[ClickRecord]) -> dict[str, list[ClickRecord]]:
    out: dict[str, list[ClickRecord]] = {"+": [], "-": []}
    for r in records:
        if r.sign is not None:
            out[r.sign].append(r)
    return out
