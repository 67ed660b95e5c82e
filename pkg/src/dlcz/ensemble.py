"""Write, storage and read processes of a single atomic ensemble.

The collective spin excitation is one bosonic mode. Writing correlates it with
field 1 like a two-mode squeezer; storage is amplitude damping; reading swaps
the excitation into field 2 followed by a retrieval loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .photonics import (
    StateVector,
    add_modes,
    apply_loss,
    loss_branches,
    mode_is_vacuum,
    transfer_mode,
)

DECAY_SHAPES = ("exponential", "gaussian")


@dataclass(frozen=True)
class EnsembleParams:
    p: float = 0.01
    retrieval_efficiency: float = 0.1
    coherence_time: float = 15.0  # microseconds; math.inf disables decay
    decay_shape: str = "exponential"
    write_phase: float = 0.0
    read_phase: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p < 0.5:
            raise ValueError(f"p must be in [0, 0.5), got {self.p}")
        if not 0.0 <= self.retrieval_efficiency <= 1.0:
            raise ValueError(f"retrieval_efficiency must be in [0, 1], got {self.retrieval_efficiency}")
        if not self.coherence_time > 0:
            raise ValueError(f"coherence_time must be > 0, got {self.coherence_time}")
        if self.decay_shape not in DECAY_SHAPES:
            raise ValueError(f"decay_shape must be one of {DECAY_SHAPES}, got {self.decay_shape!r}")
        for name in ("write_phase", "read_phase"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def write_attempt(
    state: StateVector,
    atomic_mode: str,
    field1_mode: str,
    params: EnsembleParams,
    max_pairs: int | None = None,
) -> StateVector:
    """Weak write pulse: |0,0> -> sum_n (sqrt(p) e^{i beta})^n |n,n>, renormalized.

    The series is cut at ``max_pairs`` excitations (default: the truncation).
    """
    if not 0.0 <= params.p < 0.5:
        raise ValueError(f"p must be in [0, 0.5), got {params.p}")
    if not (mode_is_vacuum(state, atomic_mode) and mode_is_vacuum(state, field1_mode)):
        raise ValueError("write_attempt needs the atomic and field-1 modes in vacuum")
    kmax = state.truncation if max_pairs is None else min(max_pairs, state.truncation)
    ia, i1 = state.axis(atomic_mode), state.axis(field1_mode)
    psi = np.moveaxis(state.amplitudes, (ia, i1), (0, 1))
    out = np.zeros_like(psi)
    lam = math.sqrt(params.p) * np.exp(1j * params.write_phase)
    for n in range(kmax + 1):
        out[n, n] = psi[0, 0] * lam**n
    out = np.moveaxis(out, (0, 1), (ia, i1))
    return StateVector(state.mode_labels, state.truncation, out).normalized()


def survival(delay_us: float, params: EnsembleParams) -> float:
    """Probability that a stored excitation survives ``delay_us``."""
    if delay_us < 0:
        raise ValueError(f"delay must be >= 0, got {delay_us}")
    if delay_us == 0 or math.isinf(params.coherence_time):
        return 1.0
    x = delay_us / params.coherence_time
    return math.exp(-x) if params.decay_shape == "exponential" else math.exp(-x * x)


def decoherence_branches(state: StateVector, atomic_mode: str, delay_us: float, params: EnsembleParams):
    return loss_branches(state, atomic_mode, survival(delay_us, params))


def store_and_decohere(
    state: StateVector,
    atomic_mode: str,
    delay_us: float,
    params: EnsembleParams,
    rng: np.random.Generator,
) -> StateVector:
    s = survival(delay_us, params)
    if s == 1.0:
        state.axis(atomic_mode)
        return state
    return apply_loss(state, atomic_mode, s, rng)[0]


def _map_to_field(state: StateVector, atomic_mode: str, field2_mode: str, params: EnsembleParams) -> StateVector:
    if field2_mode not in state.mode_labels:
        state = add_modes(state, [field2_mode])
    elif not mode_is_vacuum(state, field2_mode):
        raise ValueError(f"field-2 mode {field2_mode!r} is occupied")
    return transfer_mode(state, atomic_mode, field2_mode, params.read_phase)


def readout_branches(state: StateVector, atomic_mode: str, field2_mode: str, params: EnsembleParams):
    """Deterministic branch list of :func:`read_out` as (prob, lost, state)."""
    mapped = _map_to_field(state, atomic_mode, field2_mode, params)
    return loss_branches(mapped, field2_mode, params.retrieval_efficiency)


def read_out(
    state: StateVector,
    atomic_mode: str,
    field2_mode: str,
    params: EnsembleParams,
    rng: np.random.Generator,
) -> StateVector:
    """Strong read pulse: atomic excitation -> field 2 with phase delta, then retrieval loss.

    The field-2 mode is created if absent; the atomic mode is left in vacuum.
    """
    mapped = _map_to_field(state, atomic_mode, field2_mode, params)
    return apply_loss(mapped, field2_mode, params.retrieval_efficiency, rng)[0]
