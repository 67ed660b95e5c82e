"""Truncated Fock-space linear optics on pure multimode states.

States are dense complex arrays with one axis per mode, so the basis is
ordered lexicographically over photon-number tuples in ``mode_labels`` order.
Non-unitary events (loss, detection) follow a pure-state trajectory picture:
each has a finite list of outcome branches, and the sampling functions draw
one branch from the Born rule with an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import comb, factorial, sqrt
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_TRUNCATION = 2
LEAK_TOLERANCE = 1e-6
# branches lighter than this are dropped from enumerations
BRANCH_FLOOR = 1e-300


class TruncationError(ValueError):
    """Raised when an operation pushes too much weight past the Fock cutoff."""


@dataclass(frozen=True, eq=False)
class StateVector:
    """Pure state over a truncated multimode Fock basis.

    ``amplitudes`` has shape ``(truncation + 1,) * len(mode_labels)``; the
    entry at index ``(n_1, ..., n_k)`` is the amplitude of ``|n_1 ... n_k>``.
    """

    mode_labels: tuple[str, ...]
    truncation: int
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        labels = tuple(self.mode_labels)
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate mode labels in {labels}")
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")
        amps = np.array(self.amplitudes, dtype=np.complex128)
        expected = (self.truncation + 1,) * len(labels)
        if amps.shape != expected:
            raise ValueError(f"amplitude shape {amps.shape} != {expected}")
        amps.setflags(write=False)
        object.__setattr__(self, "mode_labels", labels)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def n_modes(self) -> int:
        return len(self.mode_labels)

    def axis(self, mode: str) -> int:
        try:
            return self.mode_labels.index(mode)
        except ValueError:
            raise KeyError(f"unknown mode {mode!r}; have {self.mode_labels}") from None

    def amplitude(self, occupation: Sequence[int]) -> complex:
        occupation = tuple(occupation)
        if len(occupation) != self.n_modes:
            raise ValueError("occupation length does not match number of modes")
        if any(n < 0 or n > self.truncation for n in occupation):
            return 0j
        return complex(self.amplitudes[occupation])

    def norm(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def photon_distribution(self, mode: str) -> np.ndarray:
        """Marginal photon-number distribution of one mode."""
        ax = self.axis(mode)
        probs = self.probabilities()
        other = tuple(i for i in range(self.n_modes) if i != ax)
        return probs.sum(axis=other) if other else probs

    def mean_photons(self, mode: str) -> float:
        dist = self.photon_distribution(mode)
        return float(np.dot(np.arange(dist.size), dist) / dist.sum())

    def as_dict(self, tol: float = 0.0) -> dict[tuple[int, ...], complex]:
        out = {}
        for idx in zip(*np.nonzero(np.abs(self.amplitudes) > tol)):
            out[tuple(int(i) for i in idx)] = complex(self.amplitudes[idx])
        return out

    def normalized(self) -> StateVector:
        n = self.norm()
        if n <= 0:
            raise ValueError("cannot normalize a zero vector")
        return StateVector(self.mode_labels, self.truncation, self.amplitudes / sqrt(n))

    def fidelity(self, other: StateVector) -> float:
        """|<self|other>|^2 for states on the same modes (reordered if needed)."""
        other = reorder(other, self.mode_labels)
        if other.truncation != self.truncation:
            other = with_truncation(other, self.truncation)
        ov = np.vdot(self.amplitudes, other.amplitudes)
        return float(abs(ov) ** 2 / (self.norm() * other.norm()))


@dataclass(frozen=True)
class DetectorSpec:
    """Single-photon detector: efficiency, dark-count probability per gate."""

    efficiency: float = 1.0
    dark_prob: float = 0.0
    number_resolving: bool = False

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must be in [0, 1], got {self.efficiency}")
        if not 0.0 <= self.dark_prob <= 1.0:
            raise ValueError(f"dark_prob must be in [0, 1], got {self.dark_prob}")

    def click_given_photons(self, n: int) -> float:
        return 1.0 - (1.0 - self.dark_prob) * (1.0 - self.efficiency) ** n


# -- construction --------------------------------------------------------------


def vacuum_state(mode_labels: Sequence[str], truncation: int = DEFAULT_TRUNCATION) -> StateVector:
    labels = tuple(mode_labels)
    if not labels:
        raise ValueError("need at least one mode")
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    amps = np.zeros((truncation + 1,) * len(labels), dtype=np.complex128)
    amps[(0,) * len(labels)] = 1.0
    return StateVector(labels, truncation, amps)


def fock_state(
    occupation: Mapping[str, int] | Sequence[int],
    mode_labels: Sequence[str],
    truncation: int = DEFAULT_TRUNCATION,
) -> StateVector:
    labels = tuple(mode_labels)
    if isinstance(occupation, Mapping):
        occ = tuple(int(occupation.get(m, 0)) for m in labels)
    else:
        occ = tuple(int(n) for n in occupation)
    if len(occ) != len(labels):
        raise ValueError("occupation does not match modes")
    if max(occ) > truncation:
        raise TruncationError(f"occupation {occ} exceeds truncation {truncation}")
    state = vacuum_state(labels, truncation)
    amps = np.zeros_like(state.amplitudes)
    amps[occ] = 1.0
    return StateVector(labels, truncation, amps)


def superposition(
    terms: Mapping[Sequence[int], complex],
    mode_labels: Sequence[str],
    truncation: int = DEFAULT_TRUNCATION,
    normalize: bool = True,
) -> StateVector:
    labels = tuple(mode_labels)
    amps = np.zeros((truncation + 1,) * len(labels), dtype=np.complex128)
    for occ, a in terms.items():
        amps[tuple(occ)] += a
    state = StateVector(labels, truncation, amps)
    return state.normalized() if normalize else state


def reorder(state: StateVector, mode_labels: Sequence[str]) -> StateVector:
    labels = tuple(mode_labels)
    if labels == state.mode_labels:
        return state
    if sorted(labels) != sorted(state.mode_labels):
        raise ValueError(f"cannot reorder {state.mode_labels} as {labels}")
    perm = [state.axis(m) for m in labels]
    return StateVector(labels, state.truncation, np.transpose(state.amplitudes, perm))


def relabel(state: StateVector, mapping: Mapping[str, str]) -> StateVector:
    labels = tuple(mapping.get(m, m) for m in state.mode_labels)
    return StateVector(labels, state.truncation, state.amplitudes)


def with_truncation(state: StateVector, truncation: int, tol: float = LEAK_TOLERANCE) -> StateVector:
    """Pad or cut the Fock cutoff; cutting fails if it drops more than ``tol``."""
    if truncation == state.truncation:
        return state
    k = state.n_modes
    if truncation > state.truncation:
        pad = [(0, truncation - state.truncation)] * k
        return StateVector(state.mode_labels, truncation, np.pad(state.amplitudes, pad))
    kept = state.amplitudes[(slice(0, truncation + 1),) * k]
    out = StateVector(state.mode_labels, truncation, kept)
    total = state.norm()
    leak = total - out.norm()
    if leak > tol * total:
        raise TruncationError(f"cutting to truncation {truncation} drops weight {leak:.3g}")
    return out.normalized() if leak > 0 else out


def tensor(a: StateVector, b: StateVector) -> StateVector:
    overlap = set(a.mode_labels) & set(b.mode_labels)
    if overlap:
        raise ValueError(f"modes {sorted(overlap)} present in both states")
    t = max(a.truncation, b.truncation)
    a, b = with_truncation(a, t), with_truncation(b, t)
    amps = np.multiply.outer(a.amplitudes, b.amplitudes)
    return StateVector(a.mode_labels + b.mode_labels, t, amps)


def add_modes(state: StateVector, labels: Iterable[str]) -> StateVector:
    labels = tuple(labels)
    if not labels:
        return state
    return tensor(state, vacuum_state(labels, state.truncation))


def mode_is_vacuum(state: StateVector, mode: str, tol: float = 1e-14) -> bool:
    dist = state.photon_distribution(mode)
    return float(dist[1:].sum()) <= tol * float(dist.sum())


def remove_vacuum_mode(state: StateVector, mode: str) -> StateVector:
    """Drop a mode that carries no photons."""
    if not mode_is_vacuum(state, mode):
        raise ValueError(f"mode {mode!r} is not in vacuum")
    return _slice(state, mode, 0)


def _slice(state: StateVector, mode: str, n: int) -> StateVector:
    ax = state.axis(mode)
    labels = state.mode_labels[:ax] + state.mode_labels[ax + 1:]
    return StateVector(labels, state.truncation, np.take(state.amplitudes, n, axis=ax))


# -- unitaries -----------------------------------------------------------------


@lru_cache(maxsize=256)
def _beamsplitter_tensor(truncation: int, transmittance: float, phase: float) -> np.ndarray:
    # creation operators: a+ -> t a+ + r b+,  b+ -> -conj(r) a+ + t b+
    t = sqrt(transmittance)
    r = np.exp(1j * phase) * sqrt(1.0 - transmittance)
    rc = -np.conj(r)
    d = truncation + 1
    out = np.zeros((d, d, d, d), dtype=np.complex128)
    for n in range(d):
        for m in range(d):
            norm_in = 1.0 / sqrt(factorial(n) * factorial(m))
            for k in range(n + 1):
                ck = comb(n, k) * t**k * r ** (n - k)
                if ck == 0:
                    continue
                for j in range(m + 1):
                    cj = comb(m, j) * rc**j * t ** (m - j)
                    if cj == 0:
                        continue
                    na, nb = k + j, n + m - k - j
                    if na > truncation or nb > truncation:
                        continue
                    out[na, nb, n, m] += norm_in * ck * cj * sqrt(factorial(na) * factorial(nb))
    out.setflags(write=False)
    return out


def _apply_two_mode(state: StateVector, mode_a: str, mode_b: str, op: np.ndarray) -> np.ndarray:
    ia, ib = state.axis(mode_a), state.axis(mode_b)
    psi = np.moveaxis(state.amplitudes, (ia, ib), (0, 1))
    out = np.tensordot(op, psi, axes=([2, 3], [0, 1]))
    return np.moveaxis(out, (0, 1), (ia, ib))


def apply_beamsplitter(
    state: StateVector,
    mode_a: str,
    mode_b: str,
    transmittance: float = 0.5,
    phase: float = 0.0,
    leak_tol: float = LEAK_TOLERANCE,
) -> StateVector:
    """Mix two modes on a beamsplitter.

    Creation operators transform as ``a+ -> sqrt(T) a+ + e^{i phase} sqrt(1-T) b+``
    and ``b+ -> -e^{-i phase} sqrt(1-T) a+ + sqrt(T) b+``. Weight pushed above
    the truncation is discarded and the state renormalized; more than
    ``leak_tol`` of the total raises :class:`TruncationError`.
    """
    if mode_a == mode_b:
        raise ValueError("beamsplitter needs two distinct modes")
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError(f"transmittance must be in [0, 1], got {transmittance}")
    state.axis(mode_a), state.axis(mode_b)
    op = _beamsplitter_tensor(state.truncation, float(transmittance), float(phase))
    amps = _apply_two_mode(state, mode_a, mode_b, op)
    before = state.norm()
    out = StateVector(state.mode_labels, state.truncation, amps)
    leak = before - out.norm()
    if leak > leak_tol * before:
        raise TruncationError(
            f"beamsplitter on ({mode_a}, {mode_b}) leaks {leak:.3g} past truncation "
            f"{state.truncation}"
        )
    if leak > 1e-15 * before:
        out = StateVector(out.mode_labels, out.truncation, out.amplitudes * sqrt(before / out.norm()))
    return out


def apply_phase(state: StateVector, mode: str, phase: float) -> StateVector:
    ax = state.axis(mode)
    factors = np.exp(1j * phase * np.arange(state.truncation + 1))
    shape = [1] * state.n_modes
    shape[ax] = -1
    return StateVector(state.mode_labels, state.truncation, state.amplitudes * factors.reshape(shape))


def transfer_mode(state: StateVector, source: str, target: str, phase: float = 0.0) -> StateVector:
    """Swap the contents of ``source`` into an empty ``target`` with e^{i n phase}.

    This is the perfect state-transfer (swap) map restricted to an empty target;
    the source is left in vacuum.
    """
    if not mode_is_vacuum(state, target):
        raise ValueError(f"target mode {target!r} is occupied")
    isrc, itgt = state.axis(source), state.axis(target)
    psi = np.moveaxis(state.amplitudes, (isrc, itgt), (0, 1))
    out = np.zeros_like(psi)
    factors = np.exp(1j * phase * np.arange(state.truncation + 1))
    out[0, :, ...] = psi[:, 0, ...] * factors.reshape((-1,) + (1,) * (psi.ndim - 2))
    out = np.moveaxis(out, (0, 1), (isrc, itgt))
    return StateVector(state.mode_labels, state.truncation, out)


# -- loss ----------------------------------------------------------------------


@lru_cache(maxsize=512)
def _loss_kraus(truncation: int, efficiency: float) -> tuple[np.ndarray, ...]:
    d = truncation + 1
    ops = []
    for k in range(d):
        K = np.zeros((d, d))
        for n in range(k, d):
            K[n - k, n] = sqrt(comb(n, k) * efficiency ** (n - k) * (1.0 - efficiency) ** k)
        K.setflags(write=False)
        ops.append(K)
    return tuple(ops)


def loss_branches(state: StateVector, mode: str, efficiency: float) -> list[tuple[float, int, StateVector]]:
    """All trajectories of a pure-loss channel on ``mode``.

    Returns ``(probability, photons_lost, normalized posterior)`` per branch,
    equivalent to coupling the mode to an empty ancilla on a beamsplitter of
    transmittance ``efficiency`` and projecting the ancilla on ``k`` photons.
    """
    if not 0.0 <= efficiency <= 1.0:
        raise ValueError(f"efficiency must be in [0, 1], got {efficiency}")
    ax = state.axis(mode)
    if efficiency == 1.0:
        return [(1.0, 0, state)]
    total = state.norm()
    out = []
    psi = np.moveaxis(state.amplitudes, ax, 0)
    for k, K in enumerate(_loss_kraus(state.truncation, float(efficiency))):
        amps = np.tensordot(K, psi, axes=([1], [0]))
        w = float(np.vdot(amps, amps).real)
        if w <= BRANCH_FLOOR:
            continue
        amps = np.moveaxis(amps, 0, ax) / sqrt(w)
        out.append((w / total, k, StateVector(state.mode_labels, state.truncation, amps)))
    return out


def apply_loss(
    state: StateVector, mode: str, efficiency: float, rng: np.random.Generator
) -> tuple[StateVector, int]:
    branches = loss_branches(state, mode, efficiency)
    prob, lost, post = branches[_choose([b[0] for b in branches], rng)]
    return post, lost


# -- detection -----------------------------------------------------------------


def detection_branches(
    state: StateVector, mode: str, spec: DetectorSpec
) -> list[tuple[float, int, StateVector]]:
    """Outcome branches of detecting ``mode``; the mode is removed afterwards.

    For a threshold detector the outcome is 0/1. A number-resolving detector
    reports the count of detected photons plus one if a dark count fires.
    Branches are indexed by the photon number ``n`` present before detection,
    since lost photons end up in the environment.
    """
    ax = state.axis(mode)
    total = state.norm()
    psi = np.moveaxis(state.amplitudes, ax, 0)
    rest = state.mode_labels[:ax] + state.mode_labels[ax + 1:]
    eta, dark = spec.efficiency, spec.dark_prob
    out = []
    for n in range(state.truncation + 1):
        amps = psi[n]
        w = float(np.vdot(amps, amps).real)
        if w <= BRANCH_FLOOR:
            continue
        post = StateVector(rest, state.truncation, amps / sqrt(w)) if rest else _scalar_state(state.truncation)
        w /= total
        if spec.number_resolving:
            for m in range(n + 1):
                pm = comb(n, m) * eta**m * (1.0 - eta) ** (n - m)
                if pm * (1.0 - dark) > 0:
                    out.append((w * pm * (1.0 - dark), m, post))
                if pm * dark > 0:
                    out.append((w * pm * dark, m + 1, post))
        else:
            pc = spec.click_given_photons(n)
            if pc > 0:
                out.append((w * pc, 1, post))
            if pc < 1:
                out.append((w * (1.0 - pc), 0, post))
    return out


def _scalar_state(truncation: int) -> StateVector:
    return StateVector((), truncation, np.ones((), dtype=np.complex128))


def click_probability(state: StateVector, mode: str, spec: DetectorSpec) -> float:
    dist = state.photon_distribution(mode)
    pc = np.array([spec.click_given_photons(n) for n in range(dist.size)])
    return float(np.dot(dist, pc) / dist.sum())


def no_click_probability(state: StateVector, mode: str, spec: DetectorSpec) -> float:
    dist = state.photon_distribution(mode)
    pn = np.array([(1.0 - spec.dark_prob) * (1.0 - spec.efficiency) ** n for n in range(dist.size)])
    return float(np.dot(dist, pn) / dist.sum())


def detect(state: StateVector, mode: str, spec: DetectorSpec, rng: np.random.Generator) -> tuple[int, StateVector]:
    """Sample one detection; returns the reported outcome and the posterior."""
    branches = detection_branches(state, mode, spec)
    _, outcome, post = branches[_choose([b[0] for b in branches], rng)]
    return outcome, post


def detect_threshold(
    state: StateVector, mode: str, spec: DetectorSpec, rng: np.random.Generator
) -> tuple[bool, StateVector]:
    outcome, post = detect(state, mode, spec, rng)
    return bool(outcome), post


def _choose(weights: Sequence[float], rng: np.random.Generator) -> int:
    cum = np.cumsum(weights)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(idx, len(weights) - 1)
