import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ideal_config(p=1e-3, **kwargs):
    """Lossless readout, perfect detectors, no decoherence, jitter or optical imperfections."""
    import math

    from dlcz import photonics as ph
    from dlcz.protocol import NetworkConfig

    defaults = dict(
        retrieval_efficiency=1.0,
        coherence_time=math.inf,
        detector=ph.DetectorSpec(),
        phase_jitter=0.0,
        extinction=0.0,
        mode_overlap=1.0,
    )
    defaults.update(kwargs)
    return NetworkConfig.uniform(p=p, **defaults)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion and print it."""

    def record(number: int, ok: bool, detail: str):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
