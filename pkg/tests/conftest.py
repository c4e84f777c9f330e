"""Shared fixtures and hypothesis strategies."""

from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from hwcodesign.arch import ArchitectureConfig, HardwareSpec, WorkloadSpec
from hwcodesign.loss import PAPER_APPENDIX_C

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def coeffs():
    return PAPER_APPENDIX_C


@pytest.fixture
def workload():
    return WorkloadSpec(batch=1, seq_in=1024, seq_out=16)


@pytest.fixture
def hardware():
    return HardwareSpec(peak_flops=1e13, bandwidth=5e10, memory_budget=4e9)


def arch_strategy(min_width: float = 64.0, max_width: float = 8192.0):
    return st.builds(
        ArchitectureConfig,
        layers=st.floats(1, 128),
        width=st.floats(min_width, max_width),
        ffn_ratio=st.floats(0, 32),
        activation_rate=st.floats(1 / 64, 1.0),
        gqa=st.floats(1, 64),
    )


def workload_strategy():
    return st.builds(WorkloadSpec, batch=st.integers(1, 16), seq_in=st.integers(1, 8192),
                     seq_out=st.integers(1, 1024))


def hardware_strategy():
    return st.builds(
        HardwareSpec,
        peak_flops=st.floats(1e11, 1e16),
        bandwidth=st.floats(1e9, 1e13),
        memory_budget=st.floats(1e8, 1e12),
        b_w=st.sampled_from([1.0, 2.0, 4.0]),
        b_a=st.sampled_from([1.0, 2.0, 4.0]),
        b_kv=st.sampled_from([1.0, 2.0, 4.0]),
    )


# Acceptance lines are collected here and repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
