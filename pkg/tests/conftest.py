import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from byolab.audio_io import Waveform

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SR = 16000


def sine(freq, seconds=1.0, sr=SR, amp=1.0, phase=0.0):
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase), sr)


def sawtooth(freq, seconds=1.0, sr=SR, amp=0.5):
    # band-limited: partials stop below Nyquist
    t = np.arange(int(round(seconds * sr))) / sr
    x = np.zeros_like(t)
    k = 1
    while k * freq < sr / 2:
        x += np.sin(2 * np.pi * k * freq * t) / k
        k += 1
    return Waveform(amp * x / np.max(np.abs(x)), sr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(number, passed, detail):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
