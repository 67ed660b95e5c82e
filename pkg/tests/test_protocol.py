import math
import pickle
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from conftest import ideal_config

from dlcz import analytics as an
from dlcz import photonics as ph
from dlcz import protocol as pr
from dlcz import tomography as tm
from dlcz.ensemble import EnsembleParams
from dlcz.records import format_records


def _phased_config(beta, theta, delta=None, p=1e-3, **kwargs):
    delta = delta or {n: 0.0 for n in pr.ENSEMBLES}
    base = ideal_config(p=p, **kwargs)
    ens = {
        n: EnsembleParams(p, base.ensembles[n].retrieval_efficiency, math.inf, write_phase=beta[n], read_phase=delta[n])
        for n in pr.ENSEMBLES
    }
    return pr.NetworkConfig(
        ensembles=ens, field1_phases=theta, gamma=base.gamma, phase_jitter=0.0, detectors=base.detectors,
        extinction=0.0, mode_overlap=1.0,
    )


BETA = {"L": 0.3, "I1": -0.5, "I2": 1.1, "R": 0.2}
THETA = {"L": -0.4, "I1": 0.25, "I2": 0.0, "R": 0.9}


class TestNetworkConfig:
    def test_defaults(self):
        cfg = pr.NetworkConfig()
        assert cfg.trial_period == 0.575
        assert cfg.window == int(15.0 // 0.575)
        assert cfg.duty_cycle == pytest.approx(0.16)
        assert cfg.extinction == 1e-3 and cfg.mode_overlap == 0.9
        assert cfg.phase_jitter == pytest.approx(math.radians(2))

    @pytest.mark.parametrize(
        "kwargs",
        [dict(gamma=math.nan), dict(memory_window=0), dict(phase_jitter=-1.0), dict(extinction=1.0),
         dict(detectors={"Dx": ph.DetectorSpec()}), dict(field1_phases={"X": 0.0})],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValueError):
            pr.NetworkConfig(**kwargs)

    def test_pickle_drops_cache(self):
        cfg = ideal_config()
        pr.herald_distribution(cfg, "Up")
        clone = pickle.loads(pickle.dumps(cfg))
        assert clone._cache == {} and cfg._cache


class TestHerald:
    @pytest.mark.parametrize("pair_id", ["Up", "Down"])
    @pytest.mark.parametrize("sign_index, sign", [(0, 1), (1, -1)])
    def test_posterior_is_entangled_state(self, pair_id, sign_index, sign):
        cfg = _phased_config(BETA, THETA)
        first, second = pr.PAIRS[pair_id]
        eta = (BETA[first] - BETA[second]) + (THETA[first] - THETA[second])
        det = pr.HERALD_DETECTORS[pair_id][sign_index]
        stats = pr.herald_distribution(cfg, pair_id)
        branches = [b for b in stats.branches if b.detector_id == det]
        weight = sum(b.prob for b in branches)
        target = ph.superposition({(0, 1): 1, (1, 0): sign * np.exp(1j * eta)}, [first, second])
        fid = sum(b.prob * target.fidelity(b.state) for b in branches) / weight
        assert fid > 0.998

    def test_herald_probability_small_p(self):
        p, eta_det = 1e-4, 0.6
        cfg = ideal_config(p=p, detector=ph.DetectorSpec(eta_det))
        q = pr.herald_distribution(cfg, "Up").q
        assert q == pytest.approx(2 * p * eta_det, rel=5e-3)

    def test_distribution_matches_brute_force(self):
        # independent check: click probabilities of the two ports on the written state
        cfg = ideal_config(p=0.05, detector=ph.DetectorSpec(0.7, 0.01))
        st = pr._pair_written(cfg, "Down")
        spec = cfg.detectors["D1c"]
        dist = st.probabilities()
        axes = st.mode_labels.index("1L"), st.mode_labels.index("1I1")
        total = 0.0
        for idx in np.ndindex(dist.shape):
            n_plus, n_minus = idx[axes[0]], idx[axes[1]]
            c = spec.click_given_photons(n_plus)
            m = spec.click_given_photons(n_minus)
            total += dist[idx] * (c * (1 - m) + m * (1 - c))
        stats = pr.herald_distribution(cfg, "Down")
        assert stats.q == pytest.approx(total, abs=1e-14)
        assert stats.q + stats.p_none + stats.p_veto == pytest.approx(1.0, abs=1e-14)

    def test_sampled_route_matches_distribution(self):
        cfg = ideal_config(p=0.1, detector=ph.DetectorSpec(0.5, 0.02))
        rng = np.random.default_rng(8)
        n = 20_000
        events = [pr.herald_pair(cfg, "Up", rng) for _ in range(n)]
        plus = sum(1 for e in events if e is not None and e.sign == "+")
        minus = sum(1 for e in events if e is not None and e.sign == "-")
        stats = pr.herald_distribution(cfg, "Up")
        p_plus = sum(b.prob for b in stats.branches if b.detector_id == "D1a")
        p_minus = stats.q - p_plus
        for k, p in ((plus, p_plus), (minus, p_minus)):
            assert abs(k - n * p) < 4 * math.sqrt(n * p * (1 - p))

    def test_no_click_gives_none(self):
        cfg = ideal_config(p=0.0)
        assert pr.herald_pair(cfg, "Up", np.random.default_rng(0)) is None

    def test_bad_pair(self):
        with pytest.raises(ValueError):
            pr.herald_pair(ideal_config(), "Left", np.random.default_rng(0))


def _trial_loop_preparation(q, window, rng):
    """Naive trial-by-trial preparation with a stored pair held for ``window`` trials."""
    trials, stored_at = 0, None
    while True:
        trials += 1
        up, down = rng.random() < q, rng.random() < q
        if stored_at is None:
            if up and down:
                return trials
            if (up or down) and window > 1:
                stored_at = (trials, "Up" if up else "Down")
            continue
        other = down if stored_at[1] == "Up" else up
        if other:
            return trials
        if trials - stored_at[0] >= window - 1:
            stored_at = None


class TestPreparation:
    def test_window_one_needs_simultaneous_heralds(self):
        cfg = ideal_config(p=0.02, memory_window=1)
        q = pr.herald_distribution(cfg, "Up").q
        rng = np.random.default_rng(2)
        n = 4000
        trials = [pr.prepare_pairs_async(cfg, rng).total_trials for _ in range(n)]
        mean = 1 / q**2
        sd = math.sqrt(1 - q**2) / q**2
        assert abs(np.mean(trials) - mean) < 4 * sd / math.sqrt(n)

    def test_unbounded_window_is_max_of_geometrics(self):
        cfg = ideal_config(p=0.02, memory_window=10**9)
        q = pr.herald_distribution(cfg, "Up").q
        rng = np.random.default_rng(3)
        trials = np.array([pr.prepare_pairs_async(cfg, rng).total_trials for _ in range(20_000)])
        expected = 2 / q - 1 / (1 - (1 - q) ** 2)
        assert abs(trials.mean() - expected) < 4 * trials.std() / math.sqrt(len(trials))

    @pytest.mark.parametrize("window", [1, 5, 26])
    def test_matches_trial_loop_and_renewal_rate(self, window):
        q = 0.05
        rng = np.random.default_rng(window)
        naive = np.array([_trial_loop_preparation(q, window, rng) for _ in range(6000)])
        expected = 1 / an._prep_per_trial(q, window)
        assert abs(naive.mean() - expected) < 4 * naive.std() / math.sqrt(len(naive))
        cfg = ideal_config(p=0.0, memory_window=window)
        cfg._cache[("herald", "Up")] = pr.HeraldStats("Up", (pr.HeraldBranch(q, "D1a", None),), 1 - q, 0.0)
        cfg._cache[("herald", "Down")] = pr.HeraldStats("Down", (pr.HeraldBranch(q, "D1c", None),), 1 - q, 0.0)
        fast = np.array([pr.prepare_pairs_async(cfg, rng).total_trials for _ in range(6000)])
        assert abs(fast.mean() - expected) < 4 * fast.std() / math.sqrt(len(fast))

    def test_delays_are_gap_times_period(self):
        cfg = pr.NetworkConfig.uniform(p=0.05)
        rng = np.random.default_rng(4)
        for _ in range(50):
            prep = pr.prepare_pairs_async(cfg, rng)
            gap = abs(prep.up.trial_index - prep.down.trial_index)
            assert gap < cfg.window
            assert max(prep.delay_trials.values()) == gap
            stored = "Up" if prep.up.trial_index < prep.down.trial_index else "Down"
            for e in pr.PAIRS[stored]:
                assert prep.delays[e] == pytest.approx(gap * cfg.trial_period)

    def test_budget(self):
        cfg = ideal_config(p=1e-4)
        with pytest.raises(pr.TrialBudgetExceeded):
            pr.prepare_pairs_async(cfg, np.random.default_rng(0), max_trials=5)


class TestConnection:
    def test_success_half_with_number_resolving_detectors(self):
        pnr = ph.DetectorSpec(number_resolving=True)
        cfg = ideal_config(p=1e-4, detectors={"D2a": pnr, "D2b": pnr})
        ex = pr.exact_connection_statistics(cfg)
        assert ex["swap"] == pytest.approx(0.5, abs=1e-3)

    def test_threshold_detectors_keep_a_third_vacuum(self):
        # bunched photon pairs also fire a threshold detector, with weight 1/4 vs 1/2
        ex = pr.exact_connection_statistics(ideal_config(p=1e-4))
        assert ex["swap"] == pytest.approx(0.75, abs=1e-3)
        assert ex["p00"] == pytest.approx(1 / 3, abs=1e-3)
        assert ex["p01"] == pytest.approx(1 / 3, abs=1e-3)

    @pytest.mark.parametrize("eta", [0.02, 0.1, 0.5])
    def test_weak_swap_detection_approaches_equal_mixture(self, eta):
        weak = ph.DetectorSpec(eta)
        ex = pr.exact_connection_statistics(ideal_config(p=1e-4, detectors={"D2a": weak, "D2b": weak}))
        assert ex["p00"] == pytest.approx((2 - eta) / (4 - eta), abs=1e-3)

    @pytest.mark.parametrize("sign", ["+", "-"])
    def test_connected_state_phase(self, sign):
        # with PNR swap detectors the posterior is |01> + s e^{i xi} |10>
        pnr = ph.DetectorSpec(number_resolving=True)
        cfg = ideal_config(p=1e-4, detectors={"D2a": pnr, "D2b": pnr}, gamma=0.4)
        s = 1 if sign == "+" else -1
        # at the interference angle the left-detector probability is (1 - s cos(phi + xi)) / 2
        xi = 0.4
        for phi in (0.0, 1.0, 2.5):
            ex = pr.exact_connection_statistics(cfg, "22.5", phi, sign=sign)
            assert ex["p10"] == pytest.approx(0.5 * (1 - s * math.cos(phi + xi)), abs=2e-3)

    def test_sampled_outcome_matches_table(self):
        cfg = ideal_config(p=0.02)
        rng = np.random.default_rng(9)
        prep = pr.prepare_pairs_async(cfg, rng)
        probs, labels, _ = pr.connection_table(cfg, prep)
        expected = Counter()
        for w, lab in zip(probs, labels):
            expected[lab] += w / probs.sum()
        n = 5000
        seen = Counter(pr.connection_outcome(cfg, prep, rng).swap_detector for _ in range(n))
        for lab, p in expected.items():
            assert abs(seen[lab] - n * p) < 4 * math.sqrt(n * p * (1 - p)) + 1

    def test_connect_pairs_returns_none_without_click(self):
        cfg = ideal_config(p=0.02, detectors={"D2a": ph.DetectorSpec(0.0), "D2b": ph.DetectorSpec(0.0)})
        prep = pr.prepare_pairs_async(cfg, np.random.default_rng(1))
        assert pr.connect_pairs(cfg, prep, np.random.default_rng(2)) is None

    def test_batched_driver_matches_reference_loop(self):
        cfg = pr.NetworkConfig.uniform(p=0.05, retrieval_efficiency=0.3)
        n = 3000
        ref, fast = Counter(), Counter()
        ref_trials, fast_trials = [], []
        for i in range(n):
            rng = np.random.default_rng([1, i])
            ev = pr.simulate_event(cfg, "connect", rng)
            ref[ev.sign] += 1
            ref_trials.append(ev.trial_index)
            ev = pr._batched_connection(cfg, np.random.default_rng([2, i]), True, None)
            fast[ev.sign] += 1
            fast_trials.append(ev.trial_index)
        a, b = np.array(ref_trials), np.array(fast_trials)
        assert abs(a.mean() - b.mean()) < 4 * math.hypot(a.std(), b.std()) / math.sqrt(n)
        assert abs(ref["+"] - fast["+"]) < 4 * math.sqrt(2 * n * 0.25)


class TestFinalMeasurement:
    def _event(self, state):
        return pr.ConnectionEvent("D2b", "+", state, "++", {}, 1, base_state=state)

    def test_bell_state_interferes_fully(self):
        cfg = ideal_config()
        bell = ph.superposition({(0, 1): 1, (1, 0): 1}, ["L", "R"])
        probs = pr.final_click_probabilities(cfg, bell, "22.5", 0.0)
        assert probs[(0, 1)] == pytest.approx(1.0, abs=1e-12)
        rng = np.random.default_rng(0)
        recs = [pr.measure_final(cfg, self._event(bell), "22.5", 0.0, rng) for _ in range(50)]
        assert all(r.outcome == (0, 1) for r in recs)

    def test_vacuum_gives_dark_counts_only(self):
        dark = ph.DetectorSpec(1.0, 0.01)
        cfg = ideal_config(detector=dark)
        vac = ph.vacuum_state(["L", "R"])
        probs = pr.final_click_probabilities(cfg, vac, "0")
        assert probs[(1, 0)] == pytest.approx(0.01 * 0.99)
        assert probs[(1, 1)] == pytest.approx(1e-4)
        probs = pr.final_click_probabilities(ideal_config(), vac, "22.5", 0.3)
        assert probs[(0, 0)] == 1.0

    def test_equal_mixture_at_zero_degrees(self):
        cfg = ideal_config()
        bell = ph.superposition({(0, 1): 1, (1, 0): 1}, ["L", "R"])
        vac = ph.vacuum_state(["L", "R"])
        pb, pv = (pr.final_click_probabilities(cfg, s, "0") for s in (bell, vac))
        mix = {k: 0.5 * (pb[k] + pv[k]) for k in pb}
        assert mix[(1, 0)] + mix[(0, 1)] == pytest.approx(0.5)
        assert mix[(1, 1)] == 0.0

    def test_invalid_angle(self):
        with pytest.raises(ValueError):
            pr.measure_final(ideal_config(), self._event(ph.vacuum_state(["L", "R"])), "45", 0.0, np.random.default_rng())

    @pytest.mark.parametrize("angle, phase", [("0", 0.0), ("22.5", 0.0), ("22.5", 2.0)])
    def test_three_routes_agree(self, angle, phase):
        cfg = pr.NetworkConfig.uniform(p=0.05, retrieval_efficiency=0.6, extinction=0.01, mode_overlap=0.8)
        state = ph.superposition({(0, 1): 1, (1, 0): 0.8j, (1, 1): 0.3, (0, 0): 0.5, (2, 0): 0.2}, ["L", "R"])
        jitter = 0.3
        jittered = ph.apply_phase(state, "L", jitter)
        exact = pr.final_click_probabilities(cfg, jittered, angle, phase)
        event = pr.ConnectionEvent("D2b", "+", jittered, "++", {}, 1, jitter, base_state=state)
        fast = pr._final_outcome_probs(cfg, pr._final_rows(cfg, state, ("L", "R")), angle, phase, jitter)
        np.testing.assert_allclose(fast, [exact[k] for k in ((0, 0), (0, 1), (1, 0), (1, 1))], atol=1e-12)
        rng = np.random.default_rng(6)
        n = 6000
        seen = Counter(pr.measure_final(cfg, event, angle, phase, rng).outcome for _ in range(n))
        for k, p in exact.items():
            assert abs(seen[k] - n * p) < 4 * math.sqrt(n * p * (1 - p)) + 1


class TestRunTrials:
    def test_deterministic(self):
        cfg = pr.NetworkConfig.uniform(p=0.05)
        a = pr.run_trials(cfg, "tomography", 30, 17, phases_deg=(0, 90, 180, 270))
        b = pr.run_trials(pr.NetworkConfig.uniform(p=0.05), "tomography", 30, 17, phases_deg=(0, 90, 180, 270))
        assert format_records(a) == format_records(b)
        c = pr.run_trials(cfg, "tomography", 30, 18, phases_deg=(0, 90, 180, 270))
        assert format_records(a) != format_records(c)

    def test_rejects_zero_events(self):
        with pytest.raises(ValueError):
            pr.run_trials(ideal_config(), "connect", 0, 1)

    def test_unknown_scenario(self):
        with pytest.raises(ValueError):
            pr.run_trials(ideal_config(), "purify", 1, 1)

    def test_record_labels(self):
        recs = pr.run_trials(pr.NetworkConfig.uniform(p=0.05), "tomography", 20, 1, phases_deg=(0, 90, 180, 270))
        assert len(recs) == 20 * 5
        assert {r.config_angle for r in recs} == {"0", "22.5"}
        assert all(r.swap_detector in pr.SWAP_SIGNS and len(r.herald_signs) == 2 for r in recs)
        gen = pr.run_trials(pr.NetworkConfig.uniform(p=0.05), "generate", 10, 1, phases_deg=(0, 90, 180, 270))
        assert all(r.swap_detector == "-" and r.sign == r.herald_signs for r in gen)

    def test_trial_index_accumulates(self):
        recs = pr.run_trials(pr.NetworkConfig.uniform(p=0.05), "connect", 50, 3)
        idx = [r.trial_index for r in recs]
        assert idx == sorted(idx) and idx[0] > 0

    def test_budget_exceeded(self):
        with pytest.raises(pr.TrialBudgetExceeded):
            pr.run_trials(pr.NetworkConfig.uniform(p=1e-4), "connect", 5, 1, max_trials=10)

    def test_connect_matches_exact_statistics(self):
        cfg = ideal_config(p=0.02)
        n = 20_000
        recs = pr.run_trials(cfg, "connect", n, 5)
        diag = tm.estimate_diagonals(recs)
        ex = pr.exact_connection_statistics(cfg)
        for k in tm.DIAGONALS:
            p = ex[k]
            assert abs(getattr(diag, k) - p) < 4 * math.sqrt(p * (1 - p) / n) + 1e-12

    def test_common_phase_shift_leaves_statistics_unchanged(self):
        shift = 0.77
        delta = {"L": 0.1, "I1": -0.3, "I2": 0.6, "R": 0.0}
        base = _phased_config(BETA, THETA, delta, p=0.05, retrieval_efficiency=0.5)
        moved = _phased_config(
            {k: v + shift for k, v in BETA.items()}, {k: v + shift for k, v in THETA.items()},
            {k: v + shift for k, v in delta.items()}, p=0.05, retrieval_efficiency=0.5,
        )
        for angle, phase in (("0", 0.0), ("22.5", 0.0), ("22.5", 1.3)):
            for sign in ("+", "-"):
                a = pr.exact_connection_statistics(base, angle, phase, sign)
                b = pr.exact_connection_statistics(moved, angle, phase, sign)
                for k in a:
                    assert abs(a[k] - b[k]) < 1e-12

    def test_flipping_one_herald_shifts_fringe_by_pi(self):
        cfg = ideal_config(p=1e-3, gamma=0.5)
        recs = pr.run_trials(cfg, "tomography", 1500, 21)
        offsets = {}
        for sign in ("+", "-"):
            rows = [r for r in recs if r.config_angle == "22.5" and r.sign == sign]
            offsets[sign] = tm.fit_fringe(tm.fringe_from_records(rows))
        diff = (offsets["+"].phase_offset - offsets["-"].phase_offset) % (2 * math.pi)
        err = math.hypot(offsets["+"].phase_offset_err, offsets["-"].phase_offset_err)
        assert abs(diff - math.pi) < max(4 * err, 0.02)
        # flipping a herald detector flips the combined sign used above
        rec = recs[0]
        flipped = ("-" if rec.herald_signs[0] == "+" else "+") + rec.herald_signs[1:]
        assert replace(rec, herald_signs=flipped).sign != rec.sign


class TestPairStatistics:
    def test_half_retrieval_in_each_mode(self):
        cfg = pr.NetworkConfig.uniform(p=1e-4, detector=ph.DetectorSpec())
        stats = pr.pair_field_statistics(cfg)
        assert stats.p10 == pytest.approx(0.05, rel=1e-3)
        assert stats.p01 == pytest.approx(stats.p10)
        assert stats.h < 0.01
