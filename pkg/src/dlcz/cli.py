"""Command-line front end: parse an INI-style run file, simulate or predict, write reports.

Example run file::

    [run]
    scenario = tomography
    n_events = 2000
    master_seed = 7
    phase_scan = 0, 45, 90, 135, 180, 225, 270, 315

    [physics]
    p = 0.1

Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 trial budget exceeded.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import analytics as an
from . import photonics as ph
from . import protocol as pr
from . import tomography as tm
from .ensemble import DECAY_SHAPES, EnsembleParams
from .records import ClickRecord, read_records, write_records

SCENARIOS = ("generate", "connect", "tomography", "predict", "rates")
EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_BUDGET = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _float(lo=-math.inf, hi=math.inf, lo_open=False, hi_open=False):
    def conv(text: str) -> float:
        v = float(text)
        if math.isnan(v):
            raise ValueError("not a number")
        if v < lo or v > hi or (lo_open and v == lo) or (hi_open and v == hi):
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            raise ValueError(f"must be in {lb}{lo}, {hi}{rb}")
        return v

    return conv


def _int(lo: int):
    def conv(text: str) -> int:
        v = int(text)
        if v < lo:
            raise ValueError(f"must be >= {lo}")
        return v

    return conv


def _choice(options: Sequence[str]):
    def conv(text: str) -> str:
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text

    return conv


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be a boolean")


def _phases(text: str) -> tuple[float, ...]:
    vals = tuple(float(x) for x in text.replace(",", " ").split())
    if not vals or not all(math.isfinite(v) for v in vals):
        raise ValueError("must be a non-empty list of finite angles in degrees")
    return vals


def _optional(conv):
    def wrapped(text: str):
        return None if text.lower() in ("", "none", "auto") else conv(text)

    return wrapped


_prob = _float(0.0, 1.0)
_nonneg = _float(0.0)

# section -> key -> (converter, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {
        "scenario": (_choice(SCENARIOS), "tomography"),
        "n_events": (_int(1), 1000),
        "master_seed": (_int(0), 0),
        "max_trials": (_optional(_int(1)), None),
        "phase_scan": (_phases, tuple(range(0, 360, 45))),
        "conditioned": (_bool, True),
    },
    "physics": {
        "p": (_float(0.0, 0.5, hi_open=True), 0.01),
        "retrieval_efficiency": (_prob, 0.1),
        "coherence_time_us": (_float(0.0, lo_open=True), 15.0),
        "decay_shape": (_choice(DECAY_SHAPES), "exponential"),
        "detector_efficiency": (_prob, 1.0),
        "dark_prob": (_prob, 1e-5),
        "swap_detector_efficiency": (_optional(_prob), None),
        "trial_period_ns": (_float(0.0, lo_open=True), 575.0),
        "duty_cycle": (_float(0.0, 1.0, lo_open=True), 4.0 / 25.0),
        "memory_window": (_optional(_int(1)), None),
        "phase_jitter_deg": (_nonneg, 2.0),
        "extinction": (_float(0.0, 1.0, hi_open=True), 1e-3),
        "mode_overlap": (_prob, 0.9),
        "gamma_deg": (_float(), 0.0),
        "max_excitations": (_int(1), 2),
    },
    "predict": {
        "p00": (_optional(_prob), None),
        "p01": (_optional(_prob), None),
        "p10": (_optional(_prob), None),
        "p11": (_optional(_prob), None),
        "visibility": (_optional(_prob), None),
        "p00_err": (_nonneg, 0.0),
        "p01_err": (_nonneg, 0.0),
        "p10_err": (_nonneg, 0.0),
        "p11_err": (_nonneg, 0.0),
        "visibility_err": (_nonneg, 0.0),
        "pair_p10": (_optional(_float(0.0, 0.5, lo_open=True, hi_open=True)), None),
        "pair_p11": (_optional(_prob), None),
    },
    "rates": {
        "q": (_optional(_float(0.0, 1.0, lo_open=True)), None),
        "target_rate_hz": (_optional(_float(0.0, lo_open=True)), None),
        "memory_window": (_optional(_int(1)), None),
        "swap_success": (_prob, 0.1),
    },
    "output": {
        "dir": (str, "out"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    scenario: str
    n_events: int
    master_seed: int
    max_trials: int | None
    phase_scan: tuple[float, ...]
    conditioned: bool
    physics: dict = field(default_factory=dict)
    predict: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    out_dir: str = "out"

    def network_config(self) -> pr.NetworkConfig:
        phys = self.physics
        params = EnsembleParams(
            phys["p"], phys["retrieval_efficiency"], phys["coherence_time_us"], phys["decay_shape"]
        )
        det = ph.DetectorSpec(phys["detector_efficiency"], phys["dark_prob"])
        detectors = {d: det for d in pr.DETECTOR_IDS}
        if phys["swap_detector_efficiency"] is not None:
            swap = ph.DetectorSpec(phys["swap_detector_efficiency"], phys["dark_prob"])
            detectors.update({d: swap for d in pr.SWAP_DETECTORS})
        return pr.NetworkConfig(
            ensembles={n: params for n in pr.ENSEMBLES},
            gamma=math.radians(phys["gamma_deg"]),
            phase_jitter=math.radians(phys["phase_jitter_deg"]),
            detectors=detectors,
            trial_period=phys["trial_period_ns"] / 1000.0,
            memory_window=phys["memory_window"],
            duty_cycle=phys["duty_cycle"],
            extinction=phys["extinction"],
            mode_overlap=phys["mode_overlap"],
            max_excitations=phys["max_excitations"],
        )


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
        elif section and line and line[0] not in "#;" and ("=" in line or ":" in line):
            key = line.replace(":", "=", 1).split("=", 1)[0].strip().lower()
            lines.setdefault((section, key), no)
    return lines


def parse_config(text: str) -> RunConfig:
    """Validate run-file text; unknown sections or keys and duplicates are rejected."""
    parser = configparser.ConfigParser(strict=True, interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc}") from None
    where = _key_lines(text)
    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
    for section, keys in SCHEMA.items():
        values[section] = {k: default for k, (_, default) in keys.items()}
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            line = where.get((section, key))
            at = f" (line {line})" if line else ""
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}{at}")
            try:
                values[section][key] = keys[key][0](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"invalid {section}.{key}{at}: {exc}") from None
    run = values["run"]
    cfg = RunConfig(
        scenario=run["scenario"],
        n_events=run["n_events"],
        master_seed=run["master_seed"],
        max_trials=run["max_trials"],
        phase_scan=run["phase_scan"],
        conditioned=run["conditioned"],
        physics=values["physics"],
        predict=values["predict"],
        rates=values["rates"],
        out_dir=values["output"]["dir"],
    )
    _check_scenario_inputs(cfg)
    return cfg


def _check_scenario_inputs(cfg: RunConfig):
    if cfg.scenario == "predict":
        pr_ = cfg.predict
        table = [pr_[k] for k in ("p00", "p01", "p10", "p11")]
        pair = [pr_["pair_p10"], pr_["pair_p11"]]
        if all(v is None for v in table + pair):
            raise ConfigError("scenario predict needs [predict] p00..p11 or pair_p10/pair_p11")
        if any(v is None for v in table) and any(v is not None for v in table):
            raise ConfigError("[predict] needs all of p00, p01, p10, p11")
        if any(v is None for v in pair) and any(v is not None for v in pair):
            raise ConfigError("[predict] needs both pair_p10 and pair_p11")
    if cfg.scenario == "rates":
        if (cfg.rates["q"] is None) == (cfg.rates["target_rate_hz"] is None):
            raise ConfigError("scenario rates needs exactly one of rates.q and rates.target_rate_hz")
    if cfg.scenario in ("tomography", "generate"):
        try:
            span = max(cfg.phase_scan) - min(cfg.phase_scan)
        except ValueError:
            span = 0.0
        if len(set(x % 360 for x in cfg.phase_scan)) < 4 or span < 180:
            raise ConfigError("run.phase_scan needs at least 4 distinct phases spanning 180 degrees")
    try:
        cfg.network_config()
    except ValueError as exc:
        raise ConfigError(f"invalid physics: {exc}") from None


# -- reports ---------------------------------------------------------------------


def _num(x: float) -> float:
    return float(x)


def _sign_report(records: Sequence[ClickRecord]) -> dict[str, Any]:
    zero = [r for r in records if r.config_angle == "0"]
    fringe = [r for r in records if r.config_angle == "22.5"]
    out: dict[str, Any] = {"n_diagonal": len(zero), "n_fringe": len(fringe)}
    if not zero:
        return out
    diag = tm.estimate_diagonals(zero)
    for k in tm.DIAGONALS:
        out[k] = _num(getattr(diag, k))
        out[k + "_err"] = _num(diag.errors[k])
    if diag.p10 > 0 and diag.p01 > 0:
        h, h_err = tm.h_parameter(diag.p10, diag.p01, diag.p11, diag.errors["p10"], diag.errors["p01"], diag.errors["p11"])
        out["h"], out["h_err"] = _num(h), _num(h_err)
    if fringe:
        data = tm.fringe_from_records(fringe)
        try:
            fit = tm.fit_fringe(data)
        except ValueError as exc:
            out["fringe_error"] = str(exc)
            return out
        out["visibility"], out["visibility_err"] = _num(fit.visibility), _num(fit.visibility_err)
        out["visibility_clamped"] = bool(fit.clamped)
        out["phase_offset_deg"] = _num(math.degrees(fit.phase_offset))
        out["phase_offset_err_deg"] = _num(math.degrees(fit.phase_offset_err))
        out["coincidences_22_5"] = int(data.coincidences.sum())
        rho = tm.reconstruct(diag, fit)
        conc = tm.concurrence(rho)
        out["d"], out["d_err"] = _num(abs(rho.d)), _num(rho.error("d"))
        out["signed_concurrence"], out["signed_concurrence_err"] = _num(conc.signed), _num(conc.signed_err)
        out["C"], out["C_err"] = _num(conc.C), _num(conc.C_err)
        out["physical"] = bool(rho.physical)
    return out


def report_from_records(records: Sequence[ClickRecord], scenario: str) -> dict[str, Any]:
    """Report dictionary computed only from the click records."""
    by_sign = tm.split_by_sign(records)
    report: dict[str, Any] = {"scenario": scenario, "n_records": len(records)}
    if records:
        report["unconditioned"] = _sign_report(records) if any(r.sign is None for r in records) else None
    for sign, name in (("+", "plus"), ("-", "minus")):
        report[name] = _sign_report(by_sign[sign])
    return {k: v for k, v in report.items() if v is not None}


def fringe_csv(records: Sequence[ClickRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase_deg", "n_c", "n_d", "p", "p_err"])
    fringe = [r for r in records if r.config_angle == "22.5"]
    if fringe:
        data = tm.fringe_from_records(fringe)
        for phi, nc, nd, p, pe in zip(data.phases, data.n_c, data.n_d, data.p, data.p_err):
            w.writerow([repr(float(round(math.degrees(phi), 9))), int(nc), int(nd), repr(float(p)), repr(float(pe))])
    return buf.getvalue()


def predict_report(cfg: RunConfig) -> dict[str, Any]:
    pp = cfg.predict
    out: dict[str, Any] = {"scenario": "predict"}
    if pp["p00"] is not None:
        errs = {k: pp[k + "_err"] for k in tm.DIAGONALS}
        table: dict[str, Any] = {k: pp[k] for k in tm.DIAGONALS}
        h, h_err = tm.h_parameter(pp["p10"], pp["p01"], pp["p11"], errs["p10"], errs["p01"], errs["p11"])
        table.update(h=h, h_err=h_err)
        if pp["visibility"] is not None:
            d, d_err = tm.coherence_from_visibility(
                pp["visibility"], pp["p10"], pp["p01"], pp["visibility_err"], errs["p10"], errs["p01"]
            )
            errs["d"] = d_err
            rho = tm.ReducedDensityMatrix(pp["p00"], pp["p01"], pp["p10"], pp["p11"], d, errs)
            conc = tm.concurrence(rho)
            table.update(
                d=d, d_err=d_err, signed_concurrence=conc.signed, signed_concurrence_err=conc.signed_err,
                C=conc.C, C_err=conc.C_err,
            )
        out["measured"] = table
    if pp["pair_p10"] is not None:
        p10, p11 = pp["pair_p10"], pp["pair_p11"]
        stats = an.PairStats(1.0 - 2 * p10 - p11, p10, p10, p11)
        exact = an.predict_connection_diagonals(stats)
        lead = an.predict_connection_leading_order(stats)
        out["connection"] = {
            "pair_h": stats.h,
            "p_swap": exact.p_swap,
            **{k: getattr(exact, k) for k in tm.DIAGONALS},
            "h": exact.h,
            "h_small_p_limit": an.h_limit(stats.h),
            "leading_order": {**{k: getattr(lead, k) for k in tm.DIAGONALS}, "h": an.h_leading_order(stats.h)},
        }
    ideal = an.predict_ideal_state()
    out["ideal"] = {**{k: getattr(ideal, k) for k in tm.DIAGONALS}, "d": ideal.d, "C": tm.concurrence(ideal).C}
    return out


def rates_report(cfg: RunConfig) -> dict[str, Any]:
    net = cfg.network_config()
    r = cfg.rates
    window = r["memory_window"] if r["memory_window"] is not None else net.window
    kwargs = dict(trial_period=net.trial_period, duty_cycle=net.duty_cycle, swap_success=r["swap_success"])
    q = r["q"] if r["q"] is not None else an.q_for_rate(r["target_rate_hz"], window, **kwargs)
    pred = an.predict_rates(an.RateModelParams(q, window, **kwargs))
    return {
        "scenario": "rates",
        "q": q,
        "memory_window": window,
        "rate_no_control_hz": pred.rate_no_control,
        "rate_with_control_hz": pred.rate_with_control,
        "enhancement": pred.enhancement,
        "prep_no_control_per_trial": pred.prep_no_control,
        "prep_with_control_per_trial": pred.prep_with_control,
    }


def dump_report(report: dict[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.scenario == "predict":
        (out / "report.json").write_text(dump_report(predict_report(cfg)), encoding="utf-8")
        return EXIT_OK
    if cfg.scenario == "rates":
        (out / "report.json").write_text(dump_report(rates_report(cfg)), encoding="utf-8")
        return EXIT_OK
    records = pr.run_trials(
        cfg.network_config(), cfg.scenario, cfg.n_events, cfg.master_seed, cfg.phase_scan,
        conditioned=cfg.conditioned, max_trials=cfg.max_trials,
    )
    write_records(records, out / "records.csv")
    (out / "report.json").write_text(dump_report(report_from_records(records, cfg.scenario)), encoding="utf-8")
    if cfg.scenario != "connect":
        by_sign = tm.split_by_sign(records)
        (out / "fringe_plus.csv").write_text(fringe_csv(by_sign["+"]), encoding="utf-8")
        (out / "fringe_minus.csv").write_text(fringe_csv(by_sign["-"]), encoding="utf-8")
        if not cfg.conditioned:
            (out / "fringe_all.csv").write_text(fringe_csv(records), encoding="utf-8")
    return EXIT_OK


def recompute_report(records_path: str | Path, scenario: str) -> str:
    """Report text rebuilt from a records file; equals the in-run report."""
    return dump_report(report_from_records(read_records(records_path), scenario))


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="dlcz", description="Simulate and analyze heralded ensemble entanglement.")
    ap.add_argument("--config", help="run file (INI format)")
    ap.add_argument("--seed", type=int, help="override run.master_seed")
    ap.add_argument("--out", help="override output.dir")
    ap.add_argument("--scenario", choices=SCENARIOS, help="override run.scenario")
    args = ap.parse_args(argv)
    try:
        text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    overrides = []
    if args.scenario:
        overrides.append(f"scenario = {args.scenario}")
    if args.seed is not None:
        overrides.append(f"master_seed = {args.seed}")
    try:
        cfg = parse_config(_apply_overrides(text, overrides, args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        status = run(cfg)
    except pr.TrialBudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {cfg.scenario} outputs to {cfg.out_dir}")
    return status


def _apply_overrides(text: str, run_lines: list[str], out_dir: str | None) -> str:
    parser = configparser.ConfigParser(strict=True, interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text)
    except configparser.Error:
        return text  # let parse_config report it with line numbers
    for line in run_lines:
        key, value = (s.strip() for s in line.split("=", 1))
        if not parser.has_section("run"):
            parser.add_section("run")
        parser.set("run", key, value)
    if out_dir is not None:
        if not parser.has_section("output"):
            parser.add_section("output")
        parser.set("output", "dir", out_dir)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


if __name__ == "__main__":
    sys.exit(main())
