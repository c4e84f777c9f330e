"""Dominance, frontier construction, adaptive search and reproduction checks."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hwcodesign.arch import ArchitectureConfig, HardwareSpec, WorkloadSpec
from hwcodesign.errors import InfeasibleError, ValidationError
from hwcodesign.loss import PAPER_APPENDIX_C
from hwcodesign.pareto import (
    FRONTIER_CSV_HEADER,
    ParetoPoint,
    SearchOptions,
    brute_force_frontier,
    build_frontier,
    depth_monotone,
    dominates,
    enumerate_frontier,
    hypervolume,
    latency_at_loss,
    parameter_traces,
    reproduction_report,
    search_pareto,
)
from hwcodesign.roofline import memory_footprint
from hwcodesign.space import SearchSpace, neighbours

ARCH = ArchitectureConfig(8, 1024, 4, 1, 1)
HW = HardwareSpec(1e13, 5e10)
WL = WorkloadSpec(1, 1024, 16)
SMALL = SearchSpace(depths=(4, 12, 24), widths=(768, 1536, 3072))


def _pt(loss, latency, memory=1.0, arch=ARCH, objective="decode", precision="fp16"):
    return ParetoPoint(arch, loss, latency, memory, objective, precision)


def _random_points(rng, n, grid=None):
    out = []
    for i in range(n):
        if grid:
            loss, lat = float(rng.integers(1, grid)), float(rng.integers(1, grid))
        else:
            loss, lat = float(rng.uniform(1, 5)), float(rng.uniform(1e-3, 1))
        arch = ArchitectureConfig(1 + i, 1024, 4, 1, 1)
        out.append(_pt(loss, lat, float(rng.integers(1, 4)), arch))
    return out


# Dominance

def test_equal_points_do_not_dominate():
    assert not dominates(_pt(1.0, 1.0), _pt(1.0, 1.0))


def test_one_strict_one_tie_dominates():
    assert dominates(_pt(1.0, 2.0), _pt(1.5, 2.0))


def test_dominance_requires_matching_tags():
    with pytest.raises(ValueError):
        dominates(_pt(1.0, 1.0), _pt(1.0, 1.0, objective="prefill"))
    with pytest.raises(ValueError):
        dominates(_pt(1.0, 1.0), _pt(1.0, 1.0, precision="int8"))


def test_antisymmetry_over_random_pairs():
    rng = np.random.default_rng(0)
    coords = rng.integers(1, 6, size=(10_000, 4)).astype(float)
    for l1, t1, l2, t2 in coords:
        a, b = _pt(l1, t1), _pt(l2, t2)
        assert not (dominates(a, b) and dominates(b, a))


def test_point_validation():
    with pytest.raises(ValidationError):
        _pt(math.nan, 1.0)
    with pytest.raises(ValidationError):
        _pt(1.0, 0.0)


# Frontier construction

def test_single_point_frontier():
    assert len(build_frontier([_pt(2.0, 1.0)])) == 1


def test_dominance_chain_collapses_to_one():
    chain = [_pt(1.0 + k, 1.0 + k) for k in range(5)]
    front = build_frontier(chain)
    assert len(front) == 1 and front.points[0].loss == 1.0


def test_empty_and_mixed_inputs_rejected():
    with pytest.raises(ValidationError):
        build_frontier([])
    with pytest.raises(ValueError):
        build_frontier([_pt(1.0, 1.0), _pt(1.0, 1.0, objective="total")])


def test_sort_and_scan_matches_quadratic_filter_on_1000_points():
    rng = np.random.default_rng(1)
    pts = _random_points(rng, 1000)
    assert build_frontier(pts).points == brute_force_frontier(pts)


@given(st.integers(0, 2**32 - 1), st.integers(1, 80), st.sampled_from([None, 4, 10]))
def test_sort_and_scan_matches_quadratic_filter(seed, n, grid):
    pts = _random_points(np.random.default_rng(seed), n, grid)
    front = build_frontier(pts)
    assert front.points == brute_force_frontier(pts)
    assert front.dominated_count == n - len(front)


@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_frontier_shape(seed, n):
    front = build_frontier(_random_points(np.random.default_rng(seed), n, 8))
    lats = [p.latency for p in front.points]
    losses = [p.loss for p in front.points]
    assert all(a < b for a, b in zip(lats, lats[1:]))
    assert all(a > b for a, b in zip(losses, losses[1:]))
    for a, b in itertools.permutations(front.points, 2):
        assert not dominates(a, b)


@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_adding_dominated_point_changes_nothing(seed, n):
    pts = _random_points(np.random.default_rng(seed), n)
    front = build_frontier(pts)
    worst = front.points[0]
    extra = _pt(worst.loss + 1.0, worst.latency + 1.0, arch=ArchitectureConfig(999, 1024, 4, 1, 1))
    assert build_frontier(pts + [extra]).points == front.points


def test_duplicate_coordinates_keep_smaller_memory_then_theta():
    a = _pt(1.0, 1.0, memory=3.0, arch=ArchitectureConfig(4, 1024, 4, 1, 1))
    b = _pt(1.0, 1.0, memory=2.0, arch=ArchitectureConfig(8, 1024, 4, 1, 1))
    c = _pt(1.0, 1.0, memory=2.0, arch=ArchitectureConfig(6, 1024, 4, 1, 1))
    assert build_frontier([a, b, c]).points == [c]


def test_hypervolume():
    pts = [_pt(3.0, 1.0), _pt(2.0, 2.0), _pt(1.0, 3.0)]
    # Staircase areas: (4-1)*(4-3) + (4-2)*(3-2) + (4-3)*(2-1)
    assert hypervolume(pts, 4.0, 4.0) == pytest.approx(6.0)
    assert hypervolume([_pt(5.0, 1.0)], 4.0, 4.0) == 0.0


# Search

def test_small_space_adaptive_equals_enumeration():
    for objective in ("prefill", "decode", "total"):
        exact = enumerate_frontier(SMALL, PAPER_APPENDIX_C, HW, WL, objective, "fp16", False)
        found = search_pareto(SMALL, PAPER_APPENDIX_C, HW, WL, objective, "fp16",
                              SearchOptions(initial=60, full_verify=False))
        assert found.key_set() == exact.key_set()


def test_search_is_seed_deterministic():
    opts = SearchOptions(seed=5, initial=80)
    a = search_pareto(SMALL, PAPER_APPENDIX_C, HW, WL, "decode", "fp16", opts)
    b = search_pareto(SMALL, PAPER_APPENDIX_C, HW, WL, "decode", "fp16", opts)
    assert a.to_csv() == b.to_csv()
    assert a.provenance == b.provenance


def test_thread_count_does_not_change_result():
    one = search_pareto(SMALL, PAPER_APPENDIX_C, HW, WL, "total", "int8", SearchOptions(initial=50))
    four = search_pareto(SMALL, PAPER_APPENDIX_C, HW, WL, "total", "int8", SearchOptions(initial=50, threads=4))
    assert one.to_csv() == four.to_csv()


def test_hypervolume_never_falls_across_rounds():
    front = search_pareto(SMALL, PAPER_APPENDIX_C, HW, WL, "decode", "fp16",
                          SearchOptions(initial=20, hv_tol=None))
    hvs = [r["hypervolume"] for r in front.provenance]
    assert all(b >= a * (1 - 1e-12) for a, b in zip(hvs, hvs[1:]))


def test_memory_budget_filters_frontier():
    hw = HardwareSpec(1e13, 5e10, memory_budget=2e9)
    front = enumerate_frontier(SMALL, PAPER_APPENDIX_C, hw, WL, "decode", "fp16")
    assert all(p.memory <= 2e9 for p in front.points)
    assert all(memory_footprint(p.arch, hw.with_precision("fp16")) <= 2e9 for p in front.points)
    with pytest.raises(InfeasibleError):
        enumerate_frontier(SMALL, PAPER_APPENDIX_C, HardwareSpec(1e13, 5e10, 1e3), WL)


def test_bad_objective_rejected():
    with pytest.raises(ValidationError):
        search_pareto(SMALL, PAPER_APPENDIX_C, HW, WL, "energy")
    with pytest.raises(ValidationError):
        enumerate_frontier(SMALL, PAPER_APPENDIX_C, HW, WL, "energy")


def test_full_mode_latency_attached():
    front = enumerate_frontier(SMALL, PAPER_APPENDIX_C, HW, WL, "prefill", "fp16")
    assert all(p.latency_full >= p.latency * (1 - 1e-12) for p in front.points)


def test_int8_halves_decode_frontier_latency():
    fp16 = enumerate_frontier(SMALL, PAPER_APPENDIX_C, HW, WL, "decode", "fp16", False)
    int8 = enumerate_frontier(SMALL, PAPER_APPENDIX_C, HW, WL, "decode", "int8", False)
    assert fp16.key_set() == int8.key_set()
    for a, b in zip(fp16.points, int8.points):
        assert a.latency == pytest.approx(2 * b.latency, rel=1e-12)
        assert latency_at_loss(int8, a.loss) < a.latency


def test_neighbours_cover_diagonals():
    nbs = neighbours(SMALL, (1, 1, 2, 2, 0))
    assert len(nbs) == 3 ** 4 - 1
    assert (0, 0, 1, 1, 0) in nbs
    assert len(neighbours(SMALL, (0, 0, 0, 0, 0))) == 2 ** 4 - 1


# Output

def test_csv_layout():
    front = enumerate_frontier(SMALL, PAPER_APPENDIX_C, HW, WL, "decode", "fp16")
    lines = front.to_csv().splitlines()
    assert tuple(lines[0].split(",")) == FRONTIER_CSV_HEADER
    assert len(lines) == len(front) + 1
    two = front.to_csv(two_column=True).splitlines()
    assert two[0] == "latency_s,loss" and len(two[1].split(",")) == 2


def test_traces_and_soft_depth_diagnostic():
    front = enumerate_frontier(SMALL, PAPER_APPENDIX_C, HW, WL, "decode", "fp16")
    traces = parameter_traces(front)
    assert len(traces) == len(front)
    assert {"layers", "width", "experts_total", "ffn_ratio"} <= set(traces[0])
    assert isinstance(depth_monotone(front), bool)


def test_reproduction_report_fields():
    report = reproduction_report(PAPER_APPENDIX_C, HW, WL, SMALL)
    for key in ("moe_share_of_decode_frontier", "prefers_largest_pool_top1", "int8_dominates",
                "sensitivities"):
        assert key in report
    assert 0 <= report["moe_share_of_decode_frontier"] <= 1
    assert report["int8_dominates"]
