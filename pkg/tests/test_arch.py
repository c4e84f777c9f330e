"""Architecture types and the per-layer cost coefficients."""

from __future__ import annotations

import math

import mpmath
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hwcodesign.arch import (
    ArchitectureConfig,
    HardwareSpec,
    WorkloadSpec,
    average_context,
    coefficient_partials,
    gamma,
    kv_correction,
    kv_correction_raw,
    snap_to_grid,
    xi_f,
    xi_w_all,
    xi_w_dec,
    xi_w_eff,
    xi_f_raw,
    xi_w_all_raw,
    xi_w_dec_raw,
    xi_w_eff_raw,
)
from hwcodesign.errors import ValidationError
from hwcodesign.space import SearchSpace

from .conftest import arch_strategy, hardware_strategy, workload_strategy


def arch(r=4.0, gqa=1.0, rho=1.0, d=1024.0, l=16.0):
    return ArchitectureConfig(layers=l, width=d, ffn_ratio=r, activation_rate=rho, gqa=gqa)


# Direct substitution

def test_xi_f_values():
    assert xi_f(arch(r=4, gqa=1)) == 32
    assert xi_f(arch(r=0, gqa=8)) == 4.5


def test_xi_w_dec_values():
    assert xi_w_dec(arch(r=4, gqa=1)) == 16
    assert xi_w_dec(arch(r=8 / 3, gqa=2)) == pytest.approx(11, rel=1e-15)


def test_xi_w_all_values():
    assert xi_w_all(arch(r=4, gqa=1, rho=0.25)) == 52
    assert xi_w_all(arch(r=2, gqa=4, rho=1)) == 8.5


def test_xi_w_all_grows_without_bound_as_rho_shrinks():
    values = [xi_w_all(arch(rho=rho)) for rho in (1.0, 0.1, 0.01, 1e-4, 1e-8)]
    assert all(a < b for a, b in zip(values, values[1:]))
    assert values[-1] > 1e8


def test_zero_context_removes_kv_term():
    assert kv_correction_raw(1024, 1, 0.0, 2, 2) == 0.0
    assert xi_w_eff_raw(4, 1, 1024, 0.0, 2, 2) == xi_w_dec_raw(4, 1)


def test_xi_w_eff_example_matches_high_precision_oracle():
    # Independent term-by-term evaluation at 50 significant digits.
    mpmath.mp.dps = 50
    s_bar = mpmath.mpf(1024) + (mpmath.mpf(16) + 1) / 2
    delta = 2 * s_bar * 2 / (1 * mpmath.mpf(1024) * 2)
    expected = 2 + mpmath.mpf(2) / 1 + 3 * mpmath.mpf(4) + delta
    a, wl, hw = arch(), WorkloadSpec(1, 1024, 16), HardwareSpec(1e13, 5e10)
    assert xi_w_dec(a) == 16
    assert kv_correction(a, wl, hw) == pytest.approx(float(delta), rel=1e-15)
    assert xi_w_eff(a, wl, hw) == pytest.approx(float(expected), rel=1e-15)
    assert xi_w_eff(a, wl, hw) == pytest.approx(18.0166015625, rel=1e-15)


def test_doubling_gqa_halves_kv_term():
    wl, hw = WorkloadSpec(), HardwareSpec(1e13, 5e10)
    assert kv_correction(arch(gqa=4), wl, hw) == pytest.approx(kv_correction(arch(gqa=2), wl, hw) / 2)


def test_gamma_is_effective_coefficient_times_weight_bytes():
    a, wl, hw = arch(gqa=2, r=3), WorkloadSpec(1, 500, 20), HardwareSpec(1e13, 5e10, b_w=1, b_kv=2)
    assert gamma(a, wl, hw) == pytest.approx(xi_w_eff(a, wl, hw) * a.width ** 2 * hw.b_w, rel=1e-14)


def test_rho_partial_example():
    parts = coefficient_partials(arch(r=1, rho=0.5), WorkloadSpec(), HardwareSpec(1e13, 5e10))
    assert parts["xi_w_all"]["rho"] == -12


# Properties

@given(arch_strategy())
def test_flops_coefficient_is_twice_decode_coefficient(a):
    assert xi_f(a) == 2 * xi_w_dec(a)


@given(arch_strategy())
def test_dense_storage_equals_decode_coefficient(a):
    dense = a.with_(activation_rate=1.0)
    assert xi_w_all(dense) == xi_w_dec(dense)


@given(arch_strategy(), workload_strategy(), hardware_strategy())
def test_coefficients_bounded_below_and_monotone(a, wl, hw):
    values = (xi_f(a), xi_w_dec(a), xi_w_all(a), xi_w_eff(a, wl, hw))
    assert all(v >= 2 for v in values)
    more_gqa = a.with_(gqa=a.gqa * 1.5)
    more_r = a.with_(ffn_ratio=a.ffn_ratio + 0.5)
    assert xi_f(more_gqa) <= xi_f(a) and xi_w_dec(more_gqa) <= xi_w_dec(a)
    assert xi_w_all(more_gqa) <= xi_w_all(a) and xi_w_eff(more_gqa, wl, hw) <= xi_w_eff(a, wl, hw)
    assert xi_f(more_r) >= xi_f(a) and xi_w_dec(more_r) >= xi_w_dec(a)
    assert xi_w_all(more_r) >= xi_w_all(a) and xi_w_eff(more_r, wl, hw) >= xi_w_eff(a, wl, hw)


@given(st.integers(0, 100_000), st.integers(1, 5_000))
def test_average_context_matches_arithmetic_series(s_in, s_out):
    total = sum(s_in + t for t in range(1, s_out + 1))
    assert s_out * average_context(s_in, s_out) == total


@given(arch_strategy())
def test_sparsity_only_enters_storage(a):
    parts = coefficient_partials(a, WorkloadSpec(), HardwareSpec(1e13, 5e10))
    assert parts["xi_f"]["rho"] == 0 and parts["xi_w_dec"]["rho"] == 0 and parts["xi_w_eff"]["rho"] == 0


def _raw(name, v, wl, hw):
    r, g, rho, d = v["r"], v["gqa"], v["rho"], v["d"]
    if name == "xi_f":
        return xi_f_raw(r, g)
    if name == "xi_w_dec":
        return xi_w_dec_raw(r, g)
    if name == "xi_w_all":
        return xi_w_all_raw(r, rho, g)
    return xi_w_eff_raw(r, g, d, wl.s_bar, hw.b_w, hw.b_kv)


@given(arch_strategy(), workload_strategy(), hardware_strategy())
def test_partials_match_central_differences(a, wl, hw):
    parts = coefficient_partials(a, wl, hw)
    point = {"r": a.ffn_ratio, "gqa": a.gqa, "rho": a.activation_rate, "d": a.width}
    for name, table in parts.items():
        scale = abs(_raw(name, point, wl, hw))
        for var, analytic in table.items():
            h = 1e-6 * max(1.0, abs(point[var]))
            up, dn = dict(point), dict(point)
            up[var] += h
            dn[var] -= h
            fd = (_raw(name, up, wl, hw) - _raw(name, dn, wl, hw)) / (2 * h)
            assert fd == pytest.approx(analytic, rel=1e-6, abs=1e-9 * scale), (name, var)


# Validation and structure

@pytest.mark.parametrize("kwargs", [
    dict(activation_rate=0.0), dict(activation_rate=1.5), dict(gqa=0.5), dict(ffn_ratio=-1.0),
    dict(layers=0.0), dict(width=-3.0), dict(layers=math.nan),
])
def test_invalid_architectures_rejected(kwargs):
    base = dict(layers=4, width=256, ffn_ratio=2.0)
    base.update(kwargs)
    with pytest.raises(ValidationError):
        ArchitectureConfig(**base)


def test_structure_consistency_checks():
    a = ArchitectureConfig.from_structure(8, 1024, 8 / 3, n_heads=16, n_kv_heads=4,
                                          experts_total=16, experts_active=2)
    assert a.gqa == 4 and a.activation_rate == 0.125
    assert a.ffn_ratio == pytest.approx(16 / 3)
    assert a.kv_dim == 256
    with pytest.raises(ValidationError):
        ArchitectureConfig(8, 1024, 4, activation_rate=0.5, experts_total=8, experts_active=2)
    with pytest.raises(ValidationError):
        ArchitectureConfig(8, 1024, 4, gqa=2, n_heads=16, n_kv_heads=4)
    with pytest.raises(ValidationError):
        ArchitectureConfig(8, 1000, 4, gqa=4, n_heads=16, n_kv_heads=4, head_dim=64)
    with pytest.raises(ValidationError):
        ArchitectureConfig.from_structure(8, 1024, 4, n_heads=16, n_kv_heads=32)


def test_json_round_trips():
    a = ArchitectureConfig.from_structure(8, 1024, 8 / 3, n_heads=16, n_kv_heads=4,
                                          experts_total=16, experts_active=2)
    assert ArchitectureConfig.from_dict(a.to_dict()) == a
    hw = HardwareSpec(1e13, 5e10, 4e9, 1, 2, 1)
    assert HardwareSpec.from_dict(hw.to_dict()) == hw
    assert HardwareSpec.from_dict({"peak_flops": 1, "bandwidth_bytes_per_s": 2}).memory_budget == math.inf
    with pytest.raises(ValidationError):
        HardwareSpec.from_dict({"peak_flops": 1, "bandwidth_bytes_per_s": 2, "bogus": 3})
    wl = WorkloadSpec(2, 10, 3)
    assert WorkloadSpec.from_dict(wl.to_dict()) == wl


@pytest.mark.parametrize("kwargs", [dict(batch=0), dict(seq_in=-1), dict(seq_in=0, seq_out=0),
                                    dict(batch=1.5)])
def test_invalid_workloads_rejected(kwargs):
    with pytest.raises(ValidationError):
        WorkloadSpec(**kwargs)


def test_hardware_precision_presets():
    hw = HardwareSpec(1e13, 5e10)
    assert hw.with_precision("int8").b_w == 1 and hw.with_precision("fp32").b_kv == 4
    assert hw.ridge_point == 200
    with pytest.raises(ValidationError):
        hw.with_precision("fp8")
    with pytest.raises(ValidationError):
        HardwareSpec(0, 1)


def test_snap_picks_nearest_feasible_configuration():
    space = SearchSpace()
    configs = space.configurations()
    target = configs[100]
    assert snap_to_grid(target, configs) == target
    nudged = target.with_(layers=target.layers * 1.01, n_heads=None, n_kv_heads=None, head_dim=None,
                          experts_total=None, experts_active=None)
    assert snap_to_grid(nudged, configs) == target
    small = snap_to_grid(nudged, configs, feasible=lambda c: c.layers <= 4)
    assert small.layers == 4
    with pytest.raises(ValidationError):
        snap_to_grid(nudged, configs, feasible=lambda c: False)


def test_snap_ties_prefer_fewer_parameters():
    a = arch(l=10, d=1000)
    lower = arch(l=5, d=1000)
    upper = arch(l=20, d=1000)
    assert snap_to_grid(a, [upper, lower]) == lower
