"""Heralded pair generation, asynchronous preparation, connection and final readout.

Two pairs of ensembles are used: ``Up = (I2, R)`` and ``Down = (I1, L)``. The
first member of each pair is the one read out at the connection stage. For a
pair (first, second) the heralded state is

    |0_first 1_second> +/- e^{i eta} |1_first 0_second>,
    eta = (beta_first - beta_second) + (theta_first - theta_second),

with ``+`` when the detector watching the second field-1 port clicks.

Every stochastic step has an exact branch enumeration (used for caching and as
an oracle) and a sampled form driven by an explicit ``Generator``.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import photonics as ph
from .ensemble import (
    EnsembleParams,
    decoherence_branches,
    read_out,
    readout_branches,
    store_and_decohere,
    survival,
    write_attempt,
)
from .records import ANGLES, SWAP_SIGNS, ClickRecord

ENSEMBLES = ("L", "I1", "I2", "R")
PAIRS = {"Up": ("I2", "R"), "Down": ("I1", "L")}
# (plus, minus) detectors; plus watches the second member's field-1 port
HERALD_DETECTORS = {"Up": ("D1a", "D1b"), "Down": ("D1c", "D1d")}
SWAP_DETECTORS = ("D2b", "D2a")
FINAL_DETECTORS = ("D2c", "D2d")
DETECTOR_IDS = ("D1a", "D1b", "D1c", "D1d", "D2a", "D2b", "D2c", "D2d")
SCENARIOS = ("generate", "connect", "tomography")
# connection branches lighter than this are not kept in the cached tables
PRUNE = 1e-16


class TrialBudgetExceeded(RuntimeError):
    pass


def _default_ensembles():
    return {name: EnsembleParams() for name in ENSEMBLES}


def _default_detectors():
    return {d: ph.DetectorSpec(efficiency=1.0, dark_prob=1e-5) for d in DETECTOR_IDS}


@dataclass(frozen=True, eq=False)
class NetworkConfig:
    """Physical parameters of the four-ensemble setup.

    Phases are in radians, times in microseconds. ``memory_window`` defaults
    to the shortest coherence time divided by the trial period.
    """

    ensembles: Mapping[str, EnsembleParams] = field(default_factory=_default_ensembles)
    field1_phases: Mapping[str, float] = field(default_factory=lambda: {n: 0.0 for n in ENSEMBLES})
    gamma: float = 0.0
    phase_jitter: float = math.radians(2.0)
    detectors: Mapping[str, ph.DetectorSpec] = field(default_factory=_default_detectors)
    trial_period: float = 0.575
    memory_window: int | None = None
    duty_cycle: float = 4.0 / 25.0
    extinction: float = 1e-3
    mode_overlap: float = 0.9
    max_excitations: int = 2
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        ens = dict(self.ensembles)
        if set(ens) != set(ENSEMBLES):
            raise ValueError(f"ensembles must be exactly {ENSEMBLES}, got {sorted(ens)}")
        phases = {n: 0.0 for n in ENSEMBLES}
        phases.update(self.field1_phases)
        if set(phases) != set(ENSEMBLES):
            raise ValueError("field1_phases has unknown ensembles")
        dets = _default_detectors()
        unknown = set(self.detectors) - set(DETECTOR_IDS)
        if unknown:
            raise ValueError(f"unknown detectors {sorted(unknown)}")
        dets.update(self.detectors)
        if not all(math.isfinite(v) for v in [self.gamma, self.phase_jitter, *phases.values()]):
            raise ValueError("all phases must be finite")
        if self.phase_jitter < 0:
            raise ValueError("phase_jitter must be >= 0")
        if not self.trial_period > 0:
            raise ValueError("trial_period must be > 0")
        if self.memory_window is not None and self.memory_window < 1:
            raise ValueError("memory_window must be >= 1")
        if not 0 < self.duty_cycle <= 1:
            raise ValueError("duty_cycle must be in (0, 1]")
        if not 0 <= self.extinction < 1:
            raise ValueError("extinction must be in [0, 1)")
        if not 0 <= self.mode_overlap <= 1:
            raise ValueError("mode_overlap must be in [0, 1]")
        if self.max_excitations < 1:
            raise ValueError("max_excitations must be >= 1")
        object.__setattr__(self, "ensembles", ens)
        object.__setattr__(self, "field1_phases", phases)
        object.__setattr__(self, "detectors", dets)

    @classmethod
    def uniform(
        cls,
        p: float = 0.01,
        retrieval_efficiency: float = 0.1,
        coherence_time: float = 15.0,
        decay_shape: str = "exponential",
        detector: ph.DetectorSpec | None = None,
        **kwargs,
    ) -> NetworkConfig:
        """Four identical ensembles and identical detectors."""
        params = EnsembleParams(p, retrieval_efficiency, coherence_time, decay_shape)
        kwargs.setdefault("ensembles", {n: params for n in ENSEMBLES})
        if detector is not None:
            dets = {d: detector for d in DETECTOR_IDS}
            dets.update(kwargs.pop("detectors", {}))
            kwargs["detectors"] = dets
        return cls(**kwargs)

    @property
    def window(self) -> int:
        if self.memory_window is not None:
            return self.memory_window
        tau = min(e.coherence_time for e in self.ensembles.values())
        if math.isinf(tau):
            return sys.maxsize
        return max(1, int(tau // self.trial_period))

    @property
    def truncation(self) -> int:
        return 2 * self.max_excitations

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_cache"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


@dataclass(frozen=True)
class HeraldEvent:
    pair_id: str
    detector_id: str
    trial_index: int
    state: ph.StateVector = field(repr=False)
    branch: int | None = None

    def __post_init__(self):
        if self.detector_id not in HERALD_DETECTORS[self.pair_id]:
            raise ValueError(f"{self.detector_id} is not a herald detector of {self.pair_id}")

    @property
    def sign(self) -> str:
        return "+" if self.detector_id == HERALD_DETECTORS[self.pair_id][0] else "-"


@dataclass(frozen=True)
class HeraldBranch:
    prob: float
    detector_id: str
    state: ph.StateVector = field(repr=False)


@dataclass(frozen=True)
class HeraldStats:
    """Exact per-trial outcome distribution of one pair's herald stage."""

    pair_id: str
    branches: tuple[HeraldBranch, ...]
    p_none: float
    p_veto: float

    @property
    def q(self) -> float:
        return float(sum(b.prob for b in self.branches))


@dataclass(frozen=True)
class PreparedPairs:
    up: HeraldEvent
    down: HeraldEvent
    total_trials: int
    delay_trials: Mapping[str, int]
    delays: Mapping[str, float]


@dataclass(frozen=True)
class ConnectionEvent:
    """Outcome of the connection stage.

    ``swap_detector`` is ``D2a``/``D2b`` for a single click, else ``none`` or
    ``veto``; ``sign`` is the combined parity (None without a single click).
    ``modes`` names the two remaining ensembles (left, right).
    """

    swap_detector: str
    sign: str | None
    state: ph.StateVector = field(repr=False)
    herald_signs: str
    delays: Mapping[str, float]
    trial_index: int = 0
    jitter: float = 0.0
    modes: tuple[str, str] = ("L", "R")
    # posterior before the jitter phase; shared with the cached tables
    base_state: ph.StateVector | None = field(default=None, repr=False, compare=False)


def _vetoed(count_a: int, count_b: int) -> bool:
    """Both detectors fired, or a number-resolving one saw more than one photon."""
    return bool(count_a and count_b) or count_a > 1 or count_b > 1


# -- single pair ---------------------------------------------------------------


def _pair_modes(pair_id: str) -> tuple[str, str, str, str]:
    if pair_id not in PAIRS:
        raise ValueError(f"pair_id must be one of {tuple(PAIRS)}, got {pair_id!r}")
    first, second = PAIRS[pair_id]
    return first, "1" + first, second, "1" + second


def _pair_written(config: NetworkConfig, pair_id: str) -> ph.StateVector:
    first, f1, second, f2 = _pair_modes(pair_id)
    st = ph.vacuum_state([first, f1, second, f2], config.truncation)
    for atom, fld in ((first, f1), (second, f2)):
        st = write_attempt(st, atom, fld, config.ensembles[atom], config.max_excitations)
        st = ph.apply_phase(st, fld, config.field1_phases[atom])
    return ph.apply_beamsplitter(st, f1, f2, 0.5, 0.0)


def herald_distribution(config: NetworkConfig, pair_id: str) -> HeraldStats:
    key = ("herald", pair_id)
    if key in config._cache:
        return config._cache[key]
    first, f1, second, f2 = _pair_modes(pair_id)
    plus, minus = HERALD_DETECTORS[pair_id]
    st = _pair_written(config, pair_id)
    branches, p_none, p_veto = [], 0.0, 0.0
    for w1, c_plus, s1 in ph.detection_branches(st, f2, config.detectors[plus]):
        for w2, c_minus, s2 in ph.detection_branches(s1, f1, config.detectors[minus]):
            w = w1 * w2
            if _vetoed(c_plus, c_minus):
                p_veto += w
            elif not (c_plus or c_minus):
                p_none += w
            else:
                post = ph.with_truncation(s2, config.max_excitations)
                branches.append(HeraldBranch(w, plus if c_plus else minus, post))
    stats = HeraldStats(pair_id, tuple(branches), p_none, p_veto)
    config._cache[key] = stats
    return stats


def herald_pair(
    config: NetworkConfig, pair_id: str, rng: np.random.Generator, trial_index: int = 0
) -> HeraldEvent | None:
    """One write trial on a pair; returns the heralded state iff exactly one detector clicks."""
    first, f1, second, f2 = _pair_modes(pair_id)
    plus, minus = HERALD_DETECTORS[pair_id]
    st = _pair_written(config, pair_id)
    c_plus, st = ph.detect(st, f2, config.detectors[plus], rng)
    c_minus, st = ph.detect(st, f1, config.detectors[minus], rng)
    if _vetoed(c_plus, c_minus) or not (c_plus or c_minus):
        return None
    st = ph.with_truncation(st, config.max_excitations)
    return HeraldEvent(pair_id, plus if c_plus else minus, trial_index, st)


def _pick(cum: np.ndarray, rng: np.random.Generator) -> int:
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    return min(idx, len(cum) - 1)


def _herald_cum(config: NetworkConfig, pair_id: str) -> np.ndarray:
    key = ("herald_cum", pair_id)
    if key not in config._cache:
        stats = herald_distribution(config, pair_id)
        config._cache[key] = np.cumsum([b.prob for b in stats.branches])
    return config._cache[key]


def _draw_herald(config: NetworkConfig, pair_id: str, rng, trial_index: int) -> HeraldEvent:
    stats = herald_distribution(config, pair_id)
    idx = _pick(_herald_cum(config, pair_id), rng)
    b = stats.branches[idx]
    return HeraldEvent(pair_id, b.detector_id, trial_index, b.state, idx)


def prepare_pairs_async(
    config: NetworkConfig, rng: np.random.Generator, max_trials: int | None = None
) -> PreparedPairs:
    """Prepare both pairs under conditional control.

    Each pair heralds after a geometric number of trials. The first pair to
    herald is stored; if the other has not heralded within ``window`` trials
    (the herald trial included) the stored pair is dropped and both restart.
    Sampling the herald times directly is equivalent to the trial-by-trial
    loop because failed trials leave no trace.
    """
    q_up = herald_distribution(config, "Up").q
    q_down = herald_distribution(config, "Down").q
    if q_up <= 0 or q_down <= 0:
        raise TrialBudgetExceeded("a pair can never herald with these parameters")
    window = config.window
    elapsed = 0
    while True:
        t_up = int(rng.geometric(q_up))
        t_down = int(rng.geometric(q_down))
        gap = abs(t_up - t_down)
        if gap < window:
            break
        elapsed += min(t_up, t_down) + window - 1
        if max_trials is not None and elapsed > max_trials:
            raise TrialBudgetExceeded(f"no preparation within {max_trials} trials")
    total = elapsed + max(t_up, t_down)
    if max_trials is not None and total > max_trials:
        raise TrialBudgetExceeded(f"no preparation within {max_trials} trials")
    up = _draw_herald(config, "Up", rng, elapsed + t_up)
    down = _draw_herald(config, "Down", rng, elapsed + t_down)
    delay_trials = {"Up": max(0, t_down - t_up), "Down": max(0, t_up - t_down)}
    delays = {}
    for pair_id, (a, b) in PAIRS.items():
        delays[a] = delays[b] = delay_trials[pair_id] * config.trial_period
    return PreparedPairs(up, down, total, delay_trials, delays)


# -- connection ----------------------------------------------------------------


def _pair_after_readout(config: NetworkConfig, pair_id: str, state: ph.StateVector, delay_us: float):
    """Branches (prob, state over ('2'+first, second)) after storage and reading ``first``."""
    first, _, second, _ = _pair_modes(pair_id)
    branches = [(1.0, state)]
    if delay_us > 0:
        for ens in (first, second):
            params = config.ensembles[ens]
            branches = [
                (w * wl, sl) for w, s in branches for wl, _, sl in decoherence_branches(s, ens, delay_us, params)
            ]
    out = []
    for w, s in branches:
        for wl, _, sl in readout_branches(s, first, "2" + first, config.ensembles[first]):
            out.append((w * wl, ph.remove_vacuum_mode(sl, first)))
    return out


def _connection_branches(config: NetworkConfig, up_list, down_list):
    plus, minus = SWAP_DETECTORS
    o = config.mode_overlap
    flips = [((1 + o) / 2, 0.0), ((1 - o) / 2, math.pi)] if o < 1 else [(1.0, 0.0)]
    probs, labels, states = [], [], []
    for wu, su in up_list:
        for wd, sd in down_list:
            st = ph.with_truncation(ph.tensor(su, sd), config.truncation)
            st = ph.apply_phase(st, "2I2", config.gamma)
            for wf, flip in flips:
                w0 = wu * wd * wf
                if w0 <= PRUNE:
                    continue
                sf = ph.apply_phase(st, "2I2", flip) if flip else st
                sf = ph.apply_beamsplitter(sf, "2I1", "2I2", 0.5, 0.0)
                for w1, c_plus, s1 in ph.detection_branches(sf, "2I2", config.detectors[plus]):
                    for w2, c_minus, s2 in ph.detection_branches(s1, "2I1", config.detectors[minus]):
                        w = w0 * w1 * w2
                        if w <= PRUNE:
                            continue
                        if _vetoed(c_plus, c_minus):
                            label = "veto"
                        elif c_plus:
                            label = plus
                        elif c_minus:
                            label = minus
                        else:
                            label = "none"
                        post = ph.with_truncation(ph.reorder(s2, ("L", "R")), config.max_excitations)
                        probs.append(w)
                        labels.append(label)
                        states.append(post)
    return np.array(probs), labels, states


def _pair_table(config: NetworkConfig, event: HeraldEvent, delay_trials: int):
    """Readout branches of one pair plus a cache key (None if not cacheable)."""
    delay_us = delay_trials * config.trial_period
    first, _, second, _ = _pair_modes(event.pair_id)
    if all(survival(delay_us, config.ensembles[e]) == 1.0 for e in (first, second)):
        delay_trials, delay_us = 0, 0.0
    if event.branch is None:
        return _pair_after_readout(config, event.pair_id, event.state, delay_us), None
    key = ("pair", event.pair_id, event.branch, delay_trials)
    if key not in config._cache:
        config._cache[key] = _pair_after_readout(config, event.pair_id, event.state, delay_us)
    return config._cache[key], key[2:]


def _connection_table(config: NetworkConfig, prepared: PreparedPairs):
    """(probs, labels, states, cumulative probs) for a prepared configuration."""
    up, up_key = _pair_table(config, prepared.up, prepared.delay_trials["Up"])
    down, down_key = _pair_table(config, prepared.down, prepared.delay_trials["Down"])
    if up_key is None or down_key is None:
        probs, labels, states = _connection_branches(config, up, down)
        return probs, labels, states, np.cumsum(probs)
    key = ("connect", up_key, down_key)
    if key not in config._cache:
        probs, labels, states = _connection_branches(config, up, down)
        config._cache[key] = (probs, labels, states, np.cumsum(probs))
    return config._cache[key]


def connection_table(config: NetworkConfig, prepared: PreparedPairs):
    """Exact connection-stage branches ``(probs, swap_labels, posteriors)``.

    Cached when both herald events come from the cached herald distribution.
    """
    return _connection_table(config, prepared)[:3]


def _swap_sign(herald_signs: str, label: str) -> str | None:
    if label not in SWAP_SIGNS:
        return None
    return "-" if (herald_signs + SWAP_SIGNS[label]).count("-") % 2 else "+"


def connection_outcome(
    config: NetworkConfig, prepared: PreparedPairs, rng: np.random.Generator
) -> ConnectionEvent:
    """Read I1 and I2, interfere fields 2 and record the swap detectors.

    Always returns an event; ``swap_detector`` is ``none``/``veto`` when the
    connection did not herald. A gaussian phase jitter drawn per trial is added
    to the overall phase of the remaining pair.
    """
    _, labels, states, cum = _connection_table(config, prepared)
    idx = _pick(cum, rng)
    return _connection_event(config, prepared, labels[idx], states[idx], rng)


def _connection_event(config, prepared, label, post, rng) -> ConnectionEvent:
    base = post
    jitter = float(rng.normal(0.0, config.phase_jitter)) if config.phase_jitter > 0 else 0.0
    if jitter:
        post = ph.apply_phase(post, "L", jitter)
    herald_signs = prepared.up.sign + prepared.down.sign
    return ConnectionEvent(
        label, _swap_sign(herald_signs, label), post, herald_signs, dict(prepared.delays),
        prepared.total_trials, jitter, base_state=base,
    )


def connect_pairs(
    config: NetworkConfig, prepared: PreparedPairs, rng: np.random.Generator
) -> ConnectionEvent | None:
    event = connection_outcome(config, prepared, rng)
    return event if event.sign is not None else None


def swap_success_probability(config: NetworkConfig, prepared: PreparedPairs) -> float:
    probs, labels, _ = connection_table(config, prepared)
    return float(sum(w for w, lab in zip(probs, labels) if lab in SWAP_SIGNS) / probs.sum())


# -- final measurement ---------------------------------------------------------


def _check_angle(angle: str) -> str:
    angle = str(angle)
    if angle not in ANGLES:
        raise ValueError(f"waveplate angle must be one of {ANGLES}, got {angle!r}")
    return angle


def _final_read_branches(config: NetworkConfig, state: ph.StateVector, modes: Sequence[str]):
    left, right = modes
    st = ph.with_truncation(state, config.truncation)
    branches = [(1.0, st)]
    for atom, fld in ((left, "2L"), (right, "2R")):
        nxt = []
        for w, s in branches:
            for wl, _, sl in readout_branches(s, atom, fld, config.ensembles[atom]):
                nxt.append((w * wl, ph.remove_vacuum_mode(sl, atom)))
        branches = nxt
    return branches


def _final_optics(config: NetworkConfig, st: ph.StateVector, angle: str, phase: float, flip: float):
    if config.extinction > 0:
        st = ph.apply_beamsplitter(st, "2L", "2R", 1.0 - config.extinction, 0.0)
    if angle == "22.5":
        st = ph.apply_phase(st, "2L", phase + flip)
        st = ph.apply_beamsplitter(st, "2L", "2R", 0.5, 0.0)
    return st


def final_click_probabilities(
    config: NetworkConfig,
    state: ph.StateVector,
    angle: str,
    phase: float = 0.0,
    modes: Sequence[str] = ("L", "R"),
) -> dict[tuple[int, int], float]:
    """Exact distribution of (D2c, D2d) clicks for a given remaining-pair state."""
    angle = _check_angle(angle)
    o = config.mode_overlap
    flips = [((1 + o) / 2, 0.0), ((1 - o) / 2, math.pi)] if (angle == "22.5" and o < 1) else [(1.0, 0.0)]
    dc, dd = (config.detectors[d] for d in FINAL_DETECTORS)
    out = {(0, 0): 0.0, (0, 1): 0.0, (1, 0): 0.0, (1, 1): 0.0}
    for w, st in _final_read_branches(config, state, modes):
        for wf, flip in flips:
            sf = _final_optics(config, st, angle, phase, flip)
            for w1, c, s1 in ph.detection_branches(sf, "2L", dc):
                for w2, d, _ in ph.detection_branches(s1, "2R", dd):
                    out[(c, d)] += w * wf * w1 * w2
    return out


def measure_final(
    config: NetworkConfig,
    event: ConnectionEvent,
    waveplate_angle: str,
    phase: float,
    rng: np.random.Generator,
) -> ClickRecord:
    """Read both remaining ensembles and detect fields 2 at the chosen waveplate angle.

    ``"0"`` detects the two fields separately (diagonal statistics); ``"22.5"``
    shifts the left field by ``phase`` and mixes both on a 50/50 splitter.
    """
    angle = _check_angle(waveplate_angle)
    left, right = event.modes
    st = ph.with_truncation(event.state, config.truncation)
    for atom, fld in ((left, "2L"), (right, "2R")):
        st = read_out(st, atom, fld, config.ensembles[atom], rng)
        st = ph.remove_vacuum_mode(st, atom)
    flip = 0.0
    if angle == "22.5" and config.mode_overlap < 1 and rng.random() < (1 - config.mode_overlap) / 2:
        flip = math.pi
    st = _final_optics(config, st, angle, phase, flip)
    dc, dd = (config.detectors[d] for d in FINAL_DETECTORS)
    c, st = ph.detect_threshold(st, "2L", dc, rng)
    d, _ = ph.detect_threshold(st, "2R", dd, rng)
    return ClickRecord(
        trial_index=event.trial_index,
        herald_signs=event.herald_signs,
        swap_detector=event.swap_detector,
        config_angle=angle,
        phase_deg=math.degrees(phase),
        d2c=c,
        d2d=d,
    )


def _final_rows(config: NetworkConfig, base: ph.StateVector, modes: tuple[str, str]) -> np.ndarray:
    """Readout branches of a cached posterior as rows sqrt(w) psi over (2L, 2R)."""
    key = ("final_rows", id(base), modes)
    hit = config._cache.get(key)
    if hit is not None and hit[0] is base:
        return hit[1]
    rows = []
    for w, st in _final_read_branches(config, base, modes):
        st = ph.with_truncation(ph.reorder(st, ("2L", "2R")), config.truncation)
        rows.append(math.sqrt(w) * st.amplitudes.reshape(-1))
    rows = np.array(rows)
    config._cache[key] = (base, rows)
    return rows


def _final_matrices(config: NetworkConfig):
    key = ("final_ops",)
    if key not in config._cache:
        t = config.truncation
        d = t + 1
        ext = ph._beamsplitter_tensor(t, 1.0 - config.extinction, 0.0).reshape(d * d, d * d)
        half = ph._beamsplitter_tensor(t, 0.5, 0.0).reshape(d * d, d * d)
        n_left = np.repeat(np.arange(d), d)
        n_right = np.tile(np.arange(d), d)
        dc, dd = (config.detectors[x] for x in FINAL_DETECTORS)
        no_c = np.array([1.0 - dc.click_given_photons(n) for n in n_left])
        no_d = np.array([1.0 - dd.click_given_photons(n) for n in n_right])
        povm = np.stack([no_c * no_d, no_c * (1 - no_d), (1 - no_c) * no_d, (1 - no_c) * (1 - no_d)])
        config._cache[key] = (ext, half, n_left, povm)
    return config._cache[key]


def _final_outcome_probs(config: NetworkConfig, rows: np.ndarray, angle: str, phase: float, jitter: float):
    """Probabilities of (00, 01, 10, 11) for jitter applied before the extinction leak."""
    ext, half, n_left, povm = _final_matrices(config)
    amps = rows * np.exp(1j * jitter * n_left) if jitter else rows
    amps = amps @ ext.T
    if angle == "0":
        dens = (np.abs(amps) ** 2).sum(axis=0)
        return povm @ dens
    o = config.mode_overlap
    flips = [((1 + o) / 2, 0.0), ((1 - o) / 2, math.pi)] if o < 1 else [(1.0, 0.0)]
    dens = 0.0
    for wf, flip in flips:
        out = (amps * np.exp(1j * (phase + flip) * n_left)) @ half.T
        dens = dens + wf * (np.abs(out) ** 2).sum(axis=0)
    return povm @ dens


def _measure_final_cached(config, event: ConnectionEvent, angle: str, phase: float, rng) -> tuple[bool, bool]:
    rows = _final_rows(config, event.base_state, event.modes)
    probs = _final_outcome_probs(config, rows, angle, phase, event.jitter)
    k = _pick(np.cumsum(probs), rng)
    return bool(k >> 1), bool(k & 1)


# -- batch driver --------------------------------------------------------------


def settings_for(scenario: str, phases_deg: Sequence[float]) -> list[tuple[str, float]]:
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    out = [("0", 0.0)]
    if scenario in ("generate", "tomography"):
        out += [("22.5", float(p)) for p in phases_deg]
    return out


def event_rng(master_seed: int, setting: int, index: int) -> np.random.Generator:
    """Independent substream for one event, derived from the master seed."""
    return np.random.default_rng([int(master_seed), int(setting), int(index)])


def _generate_event(config: NetworkConfig, rng, max_trials) -> ConnectionEvent:
    stats = herald_distribution(config, "Down")
    if stats.q <= 0:
        raise TrialBudgetExceeded("the pair can never herald with these parameters")
    trials = int(rng.geometric(stats.q))
    if max_trials is not None and trials > max_trials:
        raise TrialBudgetExceeded(f"no herald within {max_trials} trials")
    herald = _draw_herald(config, "Down", rng, trials)
    state = herald.state
    jitter = float(rng.normal(0.0, config.phase_jitter)) if config.phase_jitter > 0 else 0.0
    if jitter:
        state = ph.apply_phase(state, "L", jitter)
    return ConnectionEvent(
        "-", herald.sign, state, herald.sign, {}, trials, jitter, modes=("L", "I1"), base_state=herald.state
    )


def simulate_event(
    config: NetworkConfig,
    scenario: str,
    rng: np.random.Generator,
    conditioned: bool = True,
    max_trials: int | None = None,
) -> ConnectionEvent:
    """Run trials until one event usable for the final measurement is produced."""
    if scenario == "generate":
        return _generate_event(config, rng, max_trials)
    spent = 0
    while True:
        budget = None if max_trials is None else max_trials - spent
        prepared = prepare_pairs_async(config, rng, budget)
        spent += prepared.total_trials
        _, labels, states, cum = _connection_table(config, prepared)
        idx = _pick(cum, rng)
        if not conditioned or labels[idx] in SWAP_SIGNS:
            event = _connection_event(config, prepared, labels[idx], states[idx], rng)
            return replace(event, trial_index=spent)
        if max_trials is not None and spent >= max_trials:
            raise TrialBudgetExceeded(f"no connection within {max_trials} trials")


@dataclass(frozen=True)
class _Table:
    labels: list
    states: list
    cum: np.ndarray
    p_swap: float
    swap_idx: np.ndarray
    swap_cum: np.ndarray


def _table_by_key(config: NetworkConfig, iu: int, du: int, idn: int, dd: int) -> _Table:
    key = ("table", iu, du, idn, dd)
    hit = config._cache.get(key)
    if hit is not None:
        return hit
    up_stats, down_stats = herald_distribution(config, "Up"), herald_distribution(config, "Down")
    bu, bd = up_stats.branches[iu], down_stats.branches[idn]
    prepared = PreparedPairs(
        HeraldEvent("Up", bu.detector_id, 0, bu.state, iu),
        HeraldEvent("Down", bd.detector_id, 0, bd.state, idn),
        0,
        {"Up": du, "Down": dd},
        {},
    )
    probs, labels, states, cum = _connection_table(config, prepared)
    swap_idx = np.array([i for i, lab in enumerate(labels) if lab in SWAP_SIGNS], dtype=int)
    swap_w = probs[swap_idx] if len(swap_idx) else np.zeros(0)
    table = _Table(labels, states, cum, float(swap_w.sum() / probs.sum()), swap_idx, np.cumsum(swap_w))
    config._cache[key] = table
    return table


def _batched_connection(
    config: NetworkConfig, rng: np.random.Generator, conditioned: bool, max_trials: int | None, batch: int = 64
) -> ConnectionEvent:
    """Same distribution as looping prepare_pairs_async + connection_outcome.

    Preparation rounds are drawn in vectorized batches; failed connection
    attempts only need the per-table swap probability, not a posterior.
    """
    up_stats, down_stats = herald_distribution(config, "Up"), herald_distribution(config, "Down")
    q_up, q_down = up_stats.q, down_stats.q
    if q_up <= 0 or q_down <= 0:
        raise TrialBudgetExceeded("a pair can never herald with these parameters")
    cum_up, cum_down = _herald_cum(config, "Up"), _herald_cum(config, "Down")
    window = config.window
    decays = {
        pid: any(not math.isinf(config.ensembles[e].coherence_time) for e in PAIRS[pid]) for pid in PAIRS
    }
    spent = 0
    while True:
        t_up = rng.geometric(q_up, batch)
        t_down = rng.geometric(q_down, batch)
        u_up = rng.random(batch) * cum_up[-1]
        u_down = rng.random(batch) * cum_down[-1]
        u_swap = rng.random(batch)
        i_up = np.minimum(np.searchsorted(cum_up, u_up, side="right"), len(cum_up) - 1)
        i_down = np.minimum(np.searchsorted(cum_down, u_down, side="right"), len(cum_down) - 1)
        gap = np.abs(t_up - t_down)
        for k in range(batch):
            if gap[k] >= window:
                spent += int(min(t_up[k], t_down[k])) + window - 1
                if max_trials is not None and spent > max_trials:
                    raise TrialBudgetExceeded(f"no connection within {max_trials} trials")
                continue
            spent += int(max(t_up[k], t_down[k]))
            if max_trials is not None and spent > max_trials:
                raise TrialBudgetExceeded(f"no connection within {max_trials} trials")
            wait = {"Up": int(max(0, t_down[k] - t_up[k])), "Down": int(max(0, t_up[k] - t_down[k]))}
            du = wait["Up"] if decays["Up"] else 0
            dd = wait["Down"] if decays["Down"] else 0
            table = _table_by_key(config, int(i_up[k]), du, int(i_down[k]), dd)
            if conditioned and u_swap[k] >= table.p_swap:
                continue
            if conditioned:
                idx = int(table.swap_idx[_pick(table.swap_cum, rng)])
            else:
                idx = _pick(table.cum, rng)
            bu, bd = up_stats.branches[i_up[k]], down_stats.branches[i_down[k]]
            prepared = PreparedPairs(
                HeraldEvent("Up", bu.detector_id, 0, bu.state, int(i_up[k])),
                HeraldEvent("Down", bd.detector_id, 0, bd.state, int(i_down[k])),
                spent,
                wait,
                {e: wait[pid] * config.trial_period for pid in PAIRS for e in PAIRS[pid]},
            )
            return _connection_event(config, prepared, table.labels[idx], table.states[idx], rng)


def run_trials(
    config: NetworkConfig,
    scenario: str,
    n_events: int,
    master_seed: int,
    phases_deg: Sequence[float] = tuple(range(0, 360, 45)),
    conditioned: bool = True,
    max_trials: int | None = None,
) -> list[ClickRecord]:
    """Simulate ``n_events`` final measurements per measurement setting.

    Settings are the 0 degree configuration plus, for ``generate`` and
    ``tomography``, the 22.5 degree configuration at each scan phase. Each
    event uses its own substream keyed by (seed, setting, index), so the output
    is independent of execution order. ``trial_index`` is the running total
    of write trials within a setting. ``max_trials`` bounds each event.
    """
    if n_events < 1:
        raise ValueError("n_events must be >= 1")
    records = []
    for s_idx, (angle, phase_deg) in enumerate(settings_for(scenario, phases_deg)):
        running = 0
        for i in range(n_events):
            rng = event_rng(master_seed, s_idx, i)
            if scenario == "generate":
                event = _generate_event(config, rng, max_trials)
            else:
                event = _batched_connection(config, rng, conditioned, max_trials)
            c, d = _measure_final_cached(config, event, angle, math.radians(phase_deg), rng)
            running += event.trial_index
            records.append(ClickRecord(running, event.herald_signs, event.swap_detector, angle, float(phase_deg), c, d))
    return records


# -- exact statistics (oracles) ----------------------------------------------------


def pair_field_statistics(config: NetworkConfig, pair_id: str = "Down"):
    """Exact click statistics of one heralded pair read out immediately.

    Index order is (first, second): ``p10`` means a click for the member read
    at the connection stage only. Final detectors D2c/D2d are used.
    """
    from .analytics import PairStats

    first, _, second, _ = _pair_modes(pair_id)
    stats = herald_distribution(config, pair_id)
    cfg = _without_final_optics(config)
    total = {(0, 0): 0.0, (0, 1): 0.0, (1, 0): 0.0, (1, 1): 0.0}
    for b in stats.branches:
        probs = final_click_probabilities(cfg, b.state, "0", 0.0, modes=(first, second))
        for k, v in probs.items():
            total[k] += b.prob * v
    norm = sum(total.values())
    return PairStats(
        p00=total[(0, 0)] / norm, p01=total[(0, 1)] / norm, p10=total[(1, 0)] / norm, p11=total[(1, 1)] / norm
    )


def _without_final_optics(config: NetworkConfig) -> NetworkConfig:
    key = ("bare",)
    if key not in config._cache:
        config._cache[key] = replace(config, extinction=0.0)
    return config._cache[key]


def exact_connection_statistics(
    config: NetworkConfig, angle: str = "0", phase: float = 0.0, sign: str | None = None
) -> dict[str, float]:
    """Exact final click statistics conditioned on a single swap click.

    Storage delays and phase jitter are ignored, so this is exact only without
    decoherence and jitter. ``sign`` restricts to one combined sign. Keys:
    ``swap`` (probability of the conditioning event given preparation) and
    ``p00``, ``p01``, ``p10``, ``p11`` in (left, right) order.
    """
    up_stats = herald_distribution(config, "Up")
    down_stats = herald_distribution(config, "Down")
    total = {(0, 0): 0.0, (0, 1): 0.0, (1, 0): 0.0, (1, 1): 0.0}
    swap = 0.0
    q_up, q_down = up_stats.q, down_stats.q
    for iu, bu in enumerate(up_stats.branches):
        for idn, bd in enumerate(down_stats.branches):
            w = (bu.prob / q_up) * (bd.prob / q_down)
            up = HeraldEvent("Up", bu.detector_id, 0, bu.state, iu)
            down = HeraldEvent("Down", bd.detector_id, 0, bd.state, idn)
            prepared = PreparedPairs(up, down, 0, {"Up": 0, "Down": 0}, {e: 0.0 for e in ENSEMBLES})
            probs, labels, states = connection_table(config, prepared)
            for wc, lab, st in zip(probs, labels, states):
                s = _swap_sign(up.sign + down.sign, lab)
                if s is None or (sign is not None and s != sign):
                    continue
                swap += w * wc
                for k, v in final_click_probabilities(config, st, angle, phase).items():
                    total[k] += w * wc * v
    out = {"swap": swap}
    for (c, d), v in total.items():
        out[f"p{c}{d}"] = v / swap
    return out
