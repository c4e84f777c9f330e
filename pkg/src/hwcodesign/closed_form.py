"""Constrained-optimal architectures for the six constraint cases plus a brute-force oracle.

Cases (d is fixed per solve; a free width is handled by an outer sweep):

* ``D1`` decode latency only        rho = rho_min, l saturates the decode budget
* ``P1`` prefill latency only       rho = rho_min, l saturates the prefill budget
* ``D2``/``P2`` memory only         rho from the width-sparsity law, l saturates memory
* ``D3`` decode latency + memory    rho and l saturate both, (r, gqa) from Newton on KKT
* ``P3`` prefill latency + memory   same with the prefill budget

For the single-constraint cases r and gqa appear on both sides of their stationarity
formulas (through xi and Gamma), so they are resolved by damped fixed-point iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .arch import (
    ArchitectureConfig,
    HardwareSpec,
    WorkloadSpec,
    alpha_attn_raw,
    coefficient_partials,
    kv_correction_raw,
    snap_to_grid,
    xi_f_raw,
    xi_w_all_raw,
    xi_w_dec_raw,
)
from .errors import ConvergenceError, InfeasibleError, ValidationError, ValidityError
from .loss import ScalingLawCoefficients, loss_partials, loss_raw, predict_loss
from .regimes import Budgets, RegimeLabel, relative_slacks

log = logging.getLogger(__name__)

CASES = ("D1", "D2", "D3", "P1", "P2", "P3")
CASE_CONSTRAINTS = {
    "D1": ("decode",),
    "P1": ("prefill",),
    "D2": ("memory",),
    "P2": ("memory",),
    "D3": ("decode", "memory"),
    "P3": ("prefill", "memory"),
}
LABEL_TO_CASE = {
    "decode_latency_only": "D1",
    "prefill_latency_only": "P1",
    "memory_only": "D2",
    "decode_plus_memory": "D3",
    "prefill_plus_memory": "P3",
}

DEFAULT_WIDTHS = (768, 1024, 1280, 1536, 1792, 2048, 2304, 2560, 3072)

FIXED_POINT_DAMPING = 0.5
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 10_000
NEWTON_STARTS = 8
NEWTON_TOL = 1e-13
NEWTON_MAX_ITER = 200


@dataclass(frozen=True)
class Bounds:
    """Box for the continuous decision variables."""

    layers: tuple[float, float] = (1e-6, 1e9)
    width: tuple[float, float] = (256.0, 16384.0)
    ffn_ratio: tuple[float, float] = (1e-2, 100.0)
    gqa: tuple[float, float] = (1.0, 64.0)

    def __post_init__(self) -> None:
        for name in ("layers", "width", "ffn_ratio", "gqa"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValidationError(f"bounds for {name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.gqa[0] < 1:
            raise ValidationError("gqa lower bound must be >= 1")


@dataclass(frozen=True)
class TheoryInputs:
    coeffs: ScalingLawCoefficients
    budgets: Budgets
    hardware: HardwareSpec
    workload: WorkloadSpec
    rho_min: float = 1.0 / 16
    bounds: Bounds = Bounds()
    width: float | None = 1024.0
    width_mode: str = "grid"
    width_grid: tuple[float, ...] = DEFAULT_WIDTHS

    def __post_init__(self) -> None:
        if not 0 < self.rho_min <= 1:
            raise ValidationError(f"rho_min must lie in (0, 1], got {self.rho_min}")
        if self.width is not None and self.width <= 0:
            raise ValidationError("width must be > 0")
        if self.width_mode not in ("grid", "continuous"):
            raise ValidationError(f"width_mode must be 'grid' or 'continuous', got {self.width_mode!r}")
        if self.width is None and self.width_mode == "grid" and not self.width_grid:
            raise ValidationError("width grid is empty")

    @property
    def s_bar(self) -> float:
        return self.workload.s_bar

    def with_budgets(self, budgets: Budgets) -> "TheoryInputs":
        return replace(self, budgets=budgets)

    def with_width(self, width: float) -> "TheoryInputs":
        return replace(self, width=float(width))


@dataclass
class OptimalSolution:
    arch: ArchitectureConfig
    case: str
    loss: float
    multipliers: dict[str, float] = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    iters: int = 0
    clamped: tuple[str, ...] = ()
    regime: str | None = None
    snapped: ArchitectureConfig | None = None
    loss_snapped: float | None = None
    fallback: bool = False

    @property
    def theta(self) -> dict:
        return {k: float(v) for k, v in self.arch.to_dict().items()}

    def to_dict(self) -> dict:
        return {
            "case": self.case,
            "regime": self.regime,
            "theta": self.theta,
            "theta_snapped": None if self.snapped is None else self.snapped.to_dict(),
            "loss": self.loss,
            "loss_snapped": self.loss_snapped,
            "multipliers": self.multipliers,
            "residuals": self.residuals,
            "clamped": list(self.clamped),
            "fixed_point_iters": self.iters,
            "fallback_to_oracle": self.fallback,
        }


# Constraint loads on raw numbers (theory paths assume batch 1 in decode).

def _loads(l, d, r, rho, g, inputs: TheoryInputs):
    hw = inputs.hardware
    pre = l * xi_f_raw(r, g) * d * d
    dec = l * xi_w_dec_raw(r, g) * d * d * hw.b_w + 2.0 * l * inputs.s_bar * d * hw.b_kv / g
    mem = l * xi_w_all_raw(r, rho, g) * d * d * hw.b_w
    return {"prefill": pre, "decode": dec, "memory": mem}


def _budget(name: str, budgets: Budgets) -> float | None:
    if name == "prefill":
        return budgets.F_bar_p
    if name == "decode":
        return budgets.M_bar_d
    return budgets.M_budget if budgets.has_memory else None


def saturating_layers(d, r, rho, g, inputs: TheoryInputs, constraints) -> float | np.ndarray:
    """Largest l meeting every listed constraint (l enters each load linearly)."""
    unit = _loads(1.0, d, r, rho, g, inputs)
    l = np.inf
    for name in constraints:
        budget = _budget(name, inputs.budgets)
        if budget is None:
            raise ValidationError(f"constraint {name!r} has no budget")
        l = np.minimum(l, budget / unit[name])
    return l


def constraint_partials(name: str, arch: ArchitectureConfig, inputs: TheoryInputs) -> dict[str, float]:
    """Partials of a constraint load with respect to l, d, r, rho and gqa."""
    hw, wl = inputs.hardware, inputs.workload
    parts = coefficient_partials(arch, wl, hw)
    l, d = arch.layers, arch.width
    if name == "prefill":
        xi = xi_f_raw(arch.ffn_ratio, arch.gqa)
        p, scale = parts["xi_f"], 1.0
    elif name == "decode":
        xi = xi_w_dec_raw(arch.ffn_ratio, arch.gqa) + kv_correction_raw(d, arch.gqa, inputs.s_bar, hw.b_w, hw.b_kv)
        p, scale = parts["xi_w_eff"], hw.b_w
    elif name == "memory":
        xi = xi_w_all_raw(arch.ffn_ratio, arch.activation_rate, arch.gqa)
        p, scale = parts["xi_w_all"], hw.b_w
    else:
        raise ValidationError(f"unknown constraint {name!r}")
    return {
        "l": xi * d * d * scale,
        "d": l * scale * (2.0 * d * xi + d * d * p["d"]),
        "r": l * d * d * scale * p["r"],
        "rho": l * d * d * scale * p["rho"],
        "gqa": l * d * d * scale * p["gqa"],
    }


# Closed-form pieces

def aggregate_gradient(coeffs: ScalingLawCoefficients, rho, d):
    """D~ = k_rho * rho**a_rho * d**(b_2 - b_1) + k_d."""
    return coeffs.kappa_rho * rho ** coeffs.alpha_rho * d ** (coeffs.beta_2 - coeffs.beta_1) + coeffs.kappa_d


def width_sparsity_rho(coeffs: ScalingLawCoefficients, d) -> float:
    """Unclamped memory-only optimum rho*(d)."""
    c = coeffs
    if not c.sparsity_law_valid:
        raise ValidityError(
            f"memory-only activation rate needs alpha_rho > alpha_r (got {c.alpha_rho} <= {c.alpha_r})")
    if c.kappa_rho <= 0:
        raise ValidityError("memory-only activation rate needs kappa_rho > 0")
    base = c.alpha_r * c.kappa_d / ((c.alpha_rho - c.alpha_r) * c.kappa_rho)
    return base ** (1.0 / c.alpha_rho) * d ** ((c.beta_1 - c.beta_2) / c.alpha_rho)


def width_sparsity_slope(coeffs: ScalingLawCoefficients) -> float:
    """d log rho* / d log d."""
    return (coeffs.beta_1 - coeffs.beta_2) / coeffs.alpha_rho


def dual_decode_rho(r, gqa, eta, delta):
    """Activation rate saturating both the decode and memory budgets.

    Dividing the two saturated constraints gives (xi_dec + delta) / xi_all = eta, which is
    linear in xi_all. With ``delta = 0`` this reduces to 3*eta*r / (a(1-eta) + 3r).
    """
    a = alpha_attn_raw(gqa)
    xi_all = (a + 3.0 * r + delta) / eta
    return 3.0 * r / (xi_all - a)


def dual_decode_rho_quadratic(r, gqa, eta, delta):
    """Root of eta*x**2 - (a + 3r)*x - delta = 0 mapped to rho.

    Kept for comparison only: the quadratic form does not saturate both constraints when
    ``delta > 0``; it agrees with :func:`dual_decode_rho` at ``delta = 0``.
    """
    a = alpha_attn_raw(gqa)
    b = a + 3.0 * r
    xi_all = (b + math.sqrt(b * b + 4.0 * eta * delta)) / (2.0 * eta)
    return 3.0 * r / (xi_all - a)


def dual_decode_rho_simplified(r, gqa, eta):
    a = alpha_attn_raw(gqa)
    return 3.0 * eta * r / (a * (1.0 - eta) + 3.0 * r)


def dual_prefill_rho(r, gqa, eta_p, b_w):
    """Activation rate saturating both the prefill and memory budgets."""
    if eta_p * b_w >= 2.0:
        raise ValidityError(f"prefill+memory case requires eta_p * b_w < 2, got {eta_p * b_w:.6g}")
    a = alpha_attn_raw(gqa)
    return 3.0 * eta_p * b_w * r / (a * (2.0 - eta_p * b_w) + 6.0 * r)


def _pow_root(log_value: float, exponent_plus_one: float) -> float:
    with np.errstate(over="ignore", under="ignore"):
        return float(np.exp(log_value / exponent_plus_one))


def _safe_log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _single_update(case: str, r: float, g: float, d: float, inputs: TheoryInputs, rho: float):
    """One application of the case's (r, gqa) stationarity formulas."""
    c, hw, b = inputs.coeffs, inputs.hardware, inputs.budgets
    al, ar, am = c.alpha_l, c.alpha_r, c.alpha_m
    dt = aggregate_gradient(c, rho, d)
    lk = _safe_log(al * c.kappa_l)
    lm = _safe_log(am * c.kappa_m)
    if case == "D1":
        M = b.M_bar_d
        gam = xi_w_dec_raw(r, g) * d * d * hw.b_w + 2.0 * inputs.s_bar * d * hw.b_kv / g
        lr = (_safe_log(ar * dt) - math.log(3.0) - lk + al * math.log(M)
              - (al - 1) * math.log(gam) - (2 + c.beta_2) * math.log(d) - math.log(hw.b_w))
        lg = (math.log(2.0) + lk - lm + (al - 1) * math.log(gam) + am * math.log(d)
              - al * math.log(M) + math.log(d * d * hw.b_w + inputs.s_bar * d * hw.b_kv))
    elif case == "P1":
        F = b.F_bar_p
        xi = xi_f_raw(r, g)
        lr = (_safe_log(ar * dt) - math.log(6.0) - lk + al * math.log(F)
              - (al - 1) * math.log(xi) - (2 * al + c.beta_2) * math.log(d))
        lg = (math.log(4.0) + lk - lm + (al - 1) * math.log(xi) + (2 * al + am) * math.log(d)
              - al * math.log(F))
    elif case in ("D2", "P2"):
        M = b.M_budget
        xi = xi_w_all_raw(r, rho, g)
        lr = (_safe_log(ar * dt * rho) - math.log(3.0) - lk + al * math.log(M)
              - (al - 1) * math.log(xi) - (2 * al + c.beta_2) * math.log(d) - al * math.log(hw.b_w))
        lg = (math.log(2.0) + lk - lm + (al - 1) * math.log(xi) + (2 * al + am) * math.log(d)
              + al * math.log(hw.b_w) - al * math.log(M))
    else:
        raise ValidationError(f"no fixed-point update for case {case}")
    r_new = _pow_root(lr, ar + 1.0) if ar + 1.0 > 0 else math.inf
    g_new = _pow_root(lg, am + 1.0) if am + 1.0 > 0 else math.inf
    return r_new, g_new


def _case_rho(case: str, d: float, inputs: TheoryInputs) -> tuple[float, bool]:
    if case in ("D1", "P1"):
        return inputs.rho_min, True
    raw = width_sparsity_rho(inputs.coeffs, d)
    rho = min(max(raw, inputs.rho_min), 1.0)
    return rho, rho != raw


def _require_budgets(case: str, budgets: Budgets) -> None:
    for name in CASE_CONSTRAINTS[case]:
        if _budget(name, budgets) is None:
            raise ValidationError(f"case {case} needs a {name} budget")


def _fixed_point(case: str, d: float, inputs: TheoryInputs, rho: float, r_fixed: float | None = None):
    """Damped iteration of the (r, gqa) updates; ``r_fixed`` pins the FFN ratio."""
    bnd = inputs.bounds
    r_lo, r_hi = bnd.ffn_ratio
    g_lo, g_hi = bnd.gqa
    r = r_fixed if r_fixed is not None else min(max(8.0 / 3.0, r_lo), r_hi)
    g = g_lo
    lam = FIXED_POINT_DAMPING
    r_want = g_want = None
    it = 0
    for it in range(1, FIXED_POINT_MAX_ITER + 1):
        r_want, g_want = _single_update(case, r, g, d, inputs, rho)
        r_new = r if r_fixed is not None else (1 - lam) * r + lam * min(max(r_want, r_lo), r_hi)
        g_new = (1 - lam) * g + lam * min(max(g_want, g_lo), g_hi)
        change = max(abs(r_new - r) / r, abs(g_new - g) / g)
        r, g = r_new, g_new
        if change < FIXED_POINT_TOL:
            return r, g, r_want, g_want, True, it
    return r, g, r_want, g_want, False, it


def _memory_tradeoff(case: str, d: float, inputs: TheoryInputs, rho: float, r: float):
    """Stationarity of (l, rho) on the memory budget with r held at ``r``.

    Returns the normalised residual dL/drho - (dL/dl / dM/dl) dM/drho together with the
    gqa value and iteration count of the inner fixed point.
    """
    _, g, _, _, converged, it = _fixed_point(case, d, inputs, rho, r_fixed=r)
    if not converged:
        raise ConvergenceError(f"inner gqa iteration for {case} did not converge at rho={rho:g}")
    l = float(saturating_layers(d, r, rho, g, inputs, ("memory",)))
    arch = ArchitectureConfig(layers=l, width=d, ffn_ratio=r, activation_rate=rho, gqa=g)
    lp = loss_partials(arch, inputs.coeffs)
    cp = constraint_partials("memory", arch, inputs)
    trade = lp["l"] * cp["rho"] / cp["l"]
    return (lp["rho"] - trade) / (abs(lp["rho"]) + abs(trade)), g, it


def _refine_rho_with_fixed_r(case: str, d: float, inputs: TheoryInputs, r: float):
    """Activation rate on the memory budget once the FFN ratio sits on a bound.

    The width-sparsity optimum comes from balancing the r and rho conditions, which no
    longer holds when r is pinned. Here rho solves its own condition against l instead,
    by a bracketed root search in log rho over [rho_min, 1].
    """
    lo, hi = math.log(inputs.rho_min), 0.0
    f_lo = _memory_tradeoff(case, d, inputs, math.exp(lo), r)[0]
    f_hi = _memory_tradeoff(case, d, inputs, math.exp(hi), r)[0]
    if f_lo >= 0:
        return inputs.rho_min, True
    if f_hi <= 0:
        return 1.0, True
    root = brentq(lambda u: _memory_tradeoff(case, d, inputs, math.exp(u), r)[0], lo, hi,
                  xtol=1e-14, rtol=1e-14)
    return math.exp(root), False


def _solve_single(case: str, d: float, inputs: TheoryInputs) -> OptimalSolution:
    bnd = inputs.bounds
    rho, rho_clamped = _case_rho(case, d, inputs)
    r_lo, r_hi = bnd.ffn_ratio
    g_lo, g_hi = bnd.gqa
    r, g, r_want, g_want, converged, it = _fixed_point(case, d, inputs, rho)
    r_clamped = r_want is not None and not (r_lo <= r_want <= r_hi)
    if converged and r_clamped and case in ("D2", "P2"):
        r = r_lo if r_want < r_lo else r_hi
        rho, rho_clamped = _refine_rho_with_fixed_r(case, d, inputs, r)
        _, g, r_want, g_want, converged, extra = _fixed_point(case, d, inputs, rho, r_fixed=r)
        it += extra
        if r_lo <= r_want <= r_hi:
            log.warning("%s at d=%g: FFN ratio left its bound after re-solving rho", case, d)
    clamped = []
    if rho_clamped:
        clamped.append("rho")
    if r_want is not None and not (r_lo <= r_want <= r_hi):
        clamped.append("ffn_ratio")
    if g_want is not None and not (g_lo <= g_want <= g_hi):
        clamped.append("gqa")

    constraint = CASE_CONSTRAINTS[case]
    if not converged:
        log.warning("fixed point for %s at d=%g did not converge; using the oracle", case, d)
        arch, loss = numerical_oracle(inputs.with_width(d), constraint)
        sol = _finish(case, arch, inputs, constraint, clamped, it)
        sol.fallback = True
        return sol

    l = float(saturating_layers(d, r, rho, g, inputs, constraint))
    l_lo, l_hi = bnd.layers
    if not l_lo <= l <= l_hi:
        clamped.append("layers")
        l = min(max(l, l_lo), l_hi)
    arch = ArchitectureConfig(layers=l, width=d, ffn_ratio=r, activation_rate=rho, gqa=g)
    return _finish(case, arch, inputs, constraint, clamped, it)


# Dual cases

def _dual_state(case: str, r: float, g: float, d: float, inputs: TheoryInputs):
    """rho and l for given (r, gqa); both constraints saturate unless rho leaves its box."""
    b, hw = inputs.budgets, inputs.hardware
    if case == "D3":
        delta = kv_correction_raw(d, g, inputs.s_bar, hw.b_w, hw.b_kv)
        raw = dual_decode_rho(r, g, b.eta, delta)
        latency = "decode"
    else:
        raw = dual_prefill_rho(r, g, b.eta_p, hw.b_w)
        latency = "prefill"
    if not raw > 0:
        raw = math.inf  # memory budget cannot bind before the latency budget
    rho = min(max(raw, inputs.rho_min), 1.0)
    l = float(saturating_layers(d, r, rho, g, inputs, (latency, "memory")))
    return rho, l, rho != raw, latency


def _dual_residual(case, u, d, inputs, free):
    """Lagrangian stationarity in log r and log gqa, scaled by the loss."""
    r, g = math.exp(u[0]), math.exp(u[1])
    rho, l, rho_clamped, latency = _dual_state(case, r, g, d, inputs)
    arch = ArchitectureConfig(layers=l, width=d, ffn_ratio=r, activation_rate=rho, gqa=g)
    lp = loss_partials(arch, inputs.coeffs)
    cl = constraint_partials(latency, arch, inputs)
    cm = constraint_partials("memory", arch, inputs)
    if not rho_clamped:
        mu_m = -lp["rho"] / cm["rho"]
        mu_t = -(lp["l"] + mu_m * cm["l"]) / cl["l"]
    else:
        loads = _loads(l, d, r, rho, g, inputs)
        mem_binding = loads["memory"] / inputs.budgets.M_budget >= loads[latency] / _budget(latency, inputs.budgets)
        if mem_binding:
            mu_m, mu_t = -lp["l"] / cm["l"], 0.0
        else:
            mu_m, mu_t = 0.0, -lp["l"] / cl["l"]
    scale = predict_loss(arch, inputs.coeffs)
    res = np.array([
        r * (lp["r"] + mu_t * cl["r"] + mu_m * cm["r"]),
        g * (lp["gqa"] + mu_t * cl["gqa"] + mu_m * cm["gqa"]),
    ]) / scale
    return res, arch, {"mu_T": mu_t, "mu_M": mu_m}, rho_clamped


def _newton(case, u0, d, inputs):
    lo = np.log([inputs.bounds.ffn_ratio[0], inputs.bounds.gqa[0]])
    hi = np.log([inputs.bounds.ffn_ratio[1], inputs.bounds.gqa[1]])
    u = np.clip(np.array(u0, dtype=float), lo, hi)
    free = np.ones(2, dtype=bool)
    R, *_ = _dual_residual(case, u, d, inputs, free)
    for it in range(1, NEWTON_MAX_ITER + 1):
        # Release a bound whose multiplier has the wrong sign.
        for k in range(2):
            at_lo, at_hi = u[k] <= lo[k], u[k] >= hi[k]
            if at_lo and R[k] < 0 or at_hi and R[k] > 0:
                free[k] = True
            elif (at_lo and R[k] >= 0) or (at_hi and R[k] <= 0):
                free[k] = False
        idx = np.flatnonzero(free)
        if idx.size == 0 or np.linalg.norm(R[idx]) < NEWTON_TOL:
            return u, it, True
        J = np.empty((2, 2))
        for k in range(2):
            h = 1e-6
            up, um = u.copy(), u.copy()
            up[k] = min(u[k] + h, hi[k])
            um[k] = max(u[k] - h, lo[k])
            J[:, k] = (_dual_residual(case, up, d, inputs, free)[0]
                       - _dual_residual(case, um, d, inputs, free)[0]) / (up[k] - um[k])
        sub = J[np.ix_(idx, idx)]
        try:
            step_sub = np.linalg.solve(sub, -R[idx])
        except np.linalg.LinAlgError:
            step_sub = -R[idx]
        step = np.zeros(2)
        step[idx] = step_sub
        norm0 = np.linalg.norm(R[idx])
        t = 1.0
        for _ in range(40):
            trial = np.clip(u + t * step, lo, hi)
            R_trial, *_ = _dual_residual(case, trial, d, inputs, free)
            if np.linalg.norm(R_trial[idx]) < norm0 * (1 - 1e-4 * t) or t < 1e-9:
                break
            t *= 0.5
        if np.allclose(trial, u, rtol=0, atol=1e-15):
            return u, it, np.linalg.norm(R[idx]) < 1e-9
        u, R = trial, R_trial
    return u, NEWTON_MAX_ITER, False


def _pinned_rho_residual(case, u, d, inputs, rho):
    """Both budgets binding with rho held on a bound.

    Unknowns are log r and log gqa. The first equation makes the two constraints bind at
    the same depth; the second is r-stationarity with the multipliers taken from the l
    and gqa conditions.
    """
    r, g = math.exp(u[0]), math.exp(u[1])
    latency = "decode" if case == "D3" else "prefill"
    unit = _loads(1.0, d, r, rho, g, inputs)
    lat_budget = _budget(latency, inputs.budgets)
    mem_budget = inputs.budgets.M_budget
    ratio = math.log(unit[latency] / lat_budget) - math.log(unit["memory"] / mem_budget)
    l = min(lat_budget / unit[latency], mem_budget / unit["memory"])
    arch = ArchitectureConfig(layers=l, width=d, ffn_ratio=r, activation_rate=rho, gqa=g)
    lp = loss_partials(arch, inputs.coeffs)
    cl = constraint_partials(latency, arch, inputs)
    cm = constraint_partials("memory", arch, inputs)
    A = np.array([[cl["l"], cm["l"]], [cl["gqa"], cm["gqa"]]])
    try:
        mu = np.linalg.solve(A, -np.array([lp["l"], lp["gqa"]]))
    except np.linalg.LinAlgError:
        mu = np.array([math.nan, math.nan])
    stat = r * (lp["r"] + mu[0] * cl["r"] + mu[1] * cm["r"]) / predict_loss(arch, inputs.coeffs)
    return np.array([ratio, stat]), arch, {"mu_T": float(mu[0]), "mu_M": float(mu[1])}


def _solve_pinned_rho(case, d, inputs, rho, seeds):
    """Newton on :func:`_pinned_rho_residual`; returns (arch, iters) or None."""
    lo = np.log([inputs.bounds.ffn_ratio[0], inputs.bounds.gqa[0]])
    hi = np.log([inputs.bounds.ffn_ratio[1], inputs.bounds.gqa[1]])
    best = None
    for r0, g0 in seeds:
        u = np.clip(np.log([r0, g0]), lo, hi)
        R = _pinned_rho_residual(case, u, d, inputs, rho)[0]
        for it in range(1, NEWTON_MAX_ITER + 1):
            if not np.all(np.isfinite(R)):
                break
            if np.linalg.norm(R) < NEWTON_TOL:
                _, arch, mu = _pinned_rho_residual(case, u, d, inputs, rho)
                latency = "decode" if case == "D3" else "prefill"
                pull = (loss_partials(arch, inputs.coeffs)["rho"]
                        + mu["mu_T"] * constraint_partials(latency, arch, inputs)["rho"]
                        + mu["mu_M"] * constraint_partials("memory", arch, inputs)["rho"])
                # On the lower bound the Lagrangian must rise with rho, on the upper fall.
                bound_ok = pull >= 0 if rho < 1.0 else pull <= 0
                if mu["mu_T"] >= 0 and mu["mu_M"] >= 0 and bound_ok:
                    loss = predict_loss(arch, inputs.coeffs)
                    if best is None or (loss, arch.theta()) < best[0]:
                        best = ((loss, arch.theta()), arch, it)
                break
            J = np.empty((2, 2))
            h = 1e-6
            for k in range(2):
                up, um = u.copy(), u.copy()
                up[k] = min(u[k] + h, hi[k])
                um[k] = max(u[k] - h, lo[k])
                J[:, k] = (_pinned_rho_residual(case, up, d, inputs, rho)[0]
                           - _pinned_rho_residual(case, um, d, inputs, rho)[0]) / (up[k] - um[k])
            try:
                step = np.linalg.solve(J, -R)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            norm0 = np.linalg.norm(R)
            while t > 1e-9:
                trial = np.clip(u + t * step, lo, hi)
                R_trial = _pinned_rho_residual(case, trial, d, inputs, rho)[0]
                if np.all(np.isfinite(R_trial)) and np.linalg.norm(R_trial) < norm0 * (1 - 1e-4 * t):
                    break
                t *= 0.5
            if t <= 1e-9:
                break
            u, R = trial, R_trial
    return None if best is None else (best[1], best[2])


def _solve_dual(case: str, d: float, inputs: TheoryInputs) -> OptimalSolution:
    b = inputs.budgets
    if case == "P3":
        if b.eta_p * inputs.hardware.b_w >= 2.0:
            raise ValidityError(
                f"prefill+memory case requires eta_p * b_w < 2, got {b.eta_p * inputs.hardware.b_w:.6g}")
    seeds = []
    single_cases = ("D1" if case == "D3" else "P1", "D2")
    for sc in single_cases:
        try:
            s = _solve_single(sc, d, inputs)
            seeds.append((s.arch.ffn_ratio, s.arch.gqa))
        except (ValidityError, ValidationError):
            continue
    if not seeds:
        seeds.append((8.0 / 3.0, inputs.bounds.gqa[0]))
    base_r, base_g = seeds[0]
    for fr, fg in ((2.0, 1.0), (0.5, 1.0), (1.0, 4.0), (4.0, 4.0), (0.25, 1.0), (1.0, 16.0)):
        if len(seeds) >= NEWTON_STARTS:
            break
        seeds.append((base_r * fr, base_g * fg))
    seeds = seeds[:NEWTON_STARTS]

    best = None
    for i, (r0, g0) in enumerate(seeds):
        u, iters, ok = _newton(case, (math.log(r0), math.log(g0)), d, inputs)
        R, arch, mult, rho_clamped = _dual_residual(case, u, d, inputs, np.ones(2, bool))
        loss = predict_loss(arch, inputs.coeffs)
        key = (not ok, loss, arch.theta())
        if best is None or key < best[0]:
            best = (key, u, iters, ok, arch, rho_clamped)
    _, u, iters, ok, arch, rho_clamped = best
    if not ok:
        # Both budgets may bind with rho on a bound; the switching residual above cannot
        # represent that, so solve the pinned system directly.
        found = []
        for rho in (inputs.rho_min, 1.0):
            pinned = _solve_pinned_rho(case, d, inputs, rho, seeds)
            if pinned is not None:
                found.append((predict_loss(pinned[0], inputs.coeffs), pinned[0].theta(), pinned))
        if found:
            arch, extra = min(found, key=lambda t: t[:2])[2]
            iters += extra
            ok, rho_clamped = True, True
    if not ok:
        raise ConvergenceError(f"{case} Newton solve did not converge at d={d}", best=arch)
    clamped = []
    if rho_clamped:
        clamped.append("rho")
    r_lo, r_hi = inputs.bounds.ffn_ratio
    g_lo, g_hi = inputs.bounds.gqa
    if arch.ffn_ratio <= r_lo * (1 + 1e-12) or arch.ffn_ratio >= r_hi * (1 - 1e-12):
        clamped.append("ffn_ratio")
    if arch.gqa <= g_lo * (1 + 1e-12) or arch.gqa >= g_hi * (1 - 1e-12):
        clamped.append("gqa")
    return _finish(case, arch, inputs, CASE_CONSTRAINTS[case], clamped, iters)


def _finish(case, arch, inputs, constraints, clamped, iters) -> OptimalSolution:
    free = ["layers", "ffn_ratio", "gqa", "rho"]
    if case in ("D1", "P1"):
        free.remove("rho")
    free = [v for v in free if v not in clamped]
    kkt = kkt_residuals(arch, inputs, constraints, free)
    slacks = relative_slacks(arch, inputs.budgets, inputs.workload, inputs.hardware)
    residuals = {
        "stationarity": kkt["components"],
        "stationarity_norm": kkt["relative_norm"],
        "slack": {k: v for k, v in slacks.items() if v is not None},
    }
    return OptimalSolution(
        arch=arch,
        case=case,
        loss=predict_loss(arch, inputs.coeffs),
        multipliers=kkt["multipliers"],
        residuals=residuals,
        iters=iters,
        clamped=tuple(clamped),
    )


def _solve_fixed_width(case: str, d: float, inputs: TheoryInputs) -> OptimalSolution:
    if case in ("D3", "P3"):
        return _solve_dual(case, d, inputs)
    return _solve_single(case, d, inputs)


def solve_case(case: str, inputs: TheoryInputs) -> OptimalSolution:
    """Stationary architecture for one constraint case."""
    case = case.upper()
    if case not in CASES:
        raise ValidationError(f"case must be one of {CASES}, got {case!r}")
    _require_budgets(case, inputs.budgets)
    if case in ("D2", "P2") and not inputs.coeffs.sparsity_law_valid:
        raise ValidityError(
            f"case {case} requires alpha_rho > alpha_r "
            f"(got alpha_rho={inputs.coeffs.alpha_rho}, alpha_r={inputs.coeffs.alpha_r})")
    if case == "P3" and inputs.budgets.eta_p * inputs.hardware.b_w >= 2.0:
        raise ValidityError(
            f"case P3 requires eta_p * b_w < 2, got {inputs.budgets.eta_p * inputs.hardware.b_w:.6g}")

    if inputs.width is not None:
        return _solve_fixed_width(case, float(inputs.width), inputs)

    if inputs.width_mode == "grid":
        best = None
        for d in inputs.width_grid:
            try:
                sol = _solve_fixed_width(case, float(d), inputs)
            except (ConvergenceError, ValidityError) as exc:
                log.info("width %g skipped: %s", d, exc)
                continue
            key = (sol.loss, sol.arch.theta())
            if best is None or key < best[0]:
                best = (key, sol)
        if best is None:
            raise InfeasibleError(f"case {case} has no solution on the width grid")
        return best[1]

    lo, hi = inputs.bounds.width
    res = minimize_scalar(lambda x: _solve_fixed_width(case, math.exp(x), inputs).loss,
                          bounds=(math.log(lo), math.log(hi)), method="bounded",
                          options={"xatol": 1e-8})
    return _solve_fixed_width(case, math.exp(float(res.x)), inputs)


# KKT verification

def _fd_loss_gradient(arch: ArchitectureConfig, coeffs: ScalingLawCoefficients, h: float = 1e-5):
    base = {"l": arch.layers, "d": arch.width, "r": arch.ffn_ratio, "rho": arch.activation_rate, "gqa": arch.gqa}
    grad = {}
    for name, x in base.items():
        step = h * max(1.0, abs(x))
        up, dn = dict(base), dict(base)
        up[name] = x + step
        dn[name] = x - step
        f_up = float(loss_raw(up["l"], up["d"], up["r"], up["rho"], up["gqa"], coeffs))
        f_dn = float(loss_raw(dn["l"], dn["d"], dn["r"], dn["rho"], dn["gqa"], coeffs))
        grad[name] = (f_up - f_dn) / (2 * step)
    return grad


_VAR_KEYS = {"layers": "l", "width": "d", "ffn_ratio": "r", "rho": "rho", "activation_rate": "rho", "gqa": "gqa"}


def kkt_residuals(arch: ArchitectureConfig, inputs: TheoryInputs, constraints, free_vars) -> dict:
    """Lagrangian gradient over ``free_vars`` with least-squares multipliers.

    Loss partials come from central differences; constraint partials from the analytic
    coefficient table. Components are scaled by the variable (elasticities) so that the
    relative norm is unit-free.
    """
    grad = _fd_loss_gradient(arch, inputs.coeffs)
    keys = [_VAR_KEYS[v] for v in free_vars]
    values = {"l": arch.layers, "d": arch.width, "r": arch.ffn_ratio, "rho": arch.activation_rate, "gqa": arch.gqa}
    if not keys:
        return {"components": {}, "relative_norm": 0.0, "multipliers": {}}
    g = np.array([values[k] * grad[k] for k in keys])
    names = {"prefill": "mu_T", "decode": "mu_T", "memory": "mu_M"}
    cols = []
    for c in constraints:
        cp = constraint_partials(c, arch, inputs)
        cols.append([values[k] * cp[k] for k in keys])
    if cols:
        A = np.array(cols).T
        mu, *_ = np.linalg.lstsq(A, -g, rcond=None)
        res = g + A @ mu
    else:
        mu = np.empty(0)
        res = g
    gnorm = float(np.linalg.norm(g))
    rel = float(np.linalg.norm(res) / gnorm) if gnorm > 0 else float(np.linalg.norm(res))
    return {
        "components": {k: float(v) for k, v in zip(keys, res)},
        "relative_norm": rel,
        "multipliers": {names[c]: float(m) for c, m in zip(constraints, mu)},
    }


# Oracle

ORACLE_POINTS = 17
ORACLE_ROUNDS = 3
ORACLE_SHRINK = 4.0


def numerical_oracle(inputs: TheoryInputs, constraints=None, points: int = ORACLE_POINTS,
                     rounds: int = ORACLE_ROUNDS) -> tuple[ArchitectureConfig, float]:
    """Grid search with local refinement over (r, gqa, rho[, d]); l is eliminated.

    Loss falls with depth, so for each grid point the best depth is the largest one
    meeting every constraint (capped at the layer bound).
    """
    if constraints is None:
        constraints = tuple(n for n in ("prefill", "decode", "memory")
                            if _budget(n, inputs.budgets) is not None)
    bnd = inputs.bounds
    axes = {
        "r": bnd.ffn_ratio,
        "gqa": bnd.gqa,
        "rho": (inputs.rho_min, 1.0),
    }
    if inputs.width is None:
        axes["d"] = bnd.width
    else:
        axes["d"] = (float(inputs.width), float(inputs.width))
    log_box = {k: (math.log(lo), math.log(hi)) for k, (lo, hi) in axes.items()}

    def evaluate(box):
        grids = [np.linspace(lo, hi, points) if hi > lo else np.array([lo]) for lo, hi in box.values()]
        mesh = np.meshgrid(*grids, indexing="ij")
        r, g, rho, d = (np.exp(m).ravel() for m in mesh)
        l = np.full_like(r, bnd.layers[1])
        if constraints:
            l = np.minimum(l, saturating_layers(d, r, rho, g, inputs, constraints))
        ok = l >= bnd.layers[0]
        loss = np.where(ok, loss_raw(np.maximum(l, 1e-300), d, r, rho, g, inputs.coeffs), np.inf)
        k = int(np.argmin(loss))
        return loss[k], (l[k], d[k], r[k], rho[k], g[k])

    best_loss, best = evaluate(log_box)
    if not math.isfinite(best_loss):
        raise InfeasibleError("no grid point satisfies the constraints")
    box = dict(log_box)
    for _ in range(rounds):
        center = {"r": math.log(best[2]), "gqa": math.log(best[4]), "rho": math.log(best[3]), "d": math.log(best[1])}
        new_box = {}
        for k, (lo, hi) in box.items():
            half = (hi - lo) / 2.0 / ORACLE_SHRINK
            full_lo, full_hi = log_box[k]
            c = center[k]
            new_box[k] = (max(full_lo, c - half), min(full_hi, c + half))
        box = new_box
        cand_loss, cand = evaluate(box)
        if cand_loss <= best_loss:
            best_loss, best = cand_loss, cand
    l, d, r, rho, g = (float(v) for v in best)
    arch = ArchitectureConfig(layers=l, width=d, ffn_ratio=r, activation_rate=min(rho, 1.0), gqa=max(g, 1.0))
    return arch, float(best_loss)


# Regime classification and dispatch

def _corner(inputs: TheoryInputs, cheapest: bool) -> ArchitectureConfig:
    bnd = inputs.bounds
    if inputs.width is not None:
        d = float(inputs.width)
    elif inputs.width_mode == "grid":
        d = float(min(inputs.width_grid) if cheapest else max(inputs.width_grid))
    else:
        d = bnd.width[0] if cheapest else bnd.width[1]
    if cheapest:
        return ArchitectureConfig(bnd.layers[0], d, bnd.ffn_ratio[0], 1.0, bnd.gqa[1])
    return ArchitectureConfig(bnd.layers[1], d, bnd.ffn_ratio[1], inputs.rho_min, bnd.gqa[0])


def _feasible(arch, inputs, tol=1e-9) -> tuple[bool, dict]:
    slacks = relative_slacks(arch, inputs.budgets, inputs.workload, inputs.hardware)
    ok = all(v is None or v >= -tol for v in slacks.values())
    return ok, {k: v for k, v in slacks.items() if v is not None}


def _memory_case(budgets: Budgets) -> str:
    return "P2" if budgets.M_bar_d is None and budgets.F_bar_p is not None else "D2"


def classify_active_set(inputs: TheoryInputs) -> RegimeLabel:
    """Verified regime label from single- and dual-constraint solves."""
    label, _, diag = _active_set(inputs)
    b = inputs.budgets
    return RegimeLabel(label, "active_set", b.eta, b.eta_p, diag)


def _active_set(inputs: TheoryInputs):
    b = inputs.budgets
    present = [n for n in ("prefill", "decode", "memory") if _budget(n, b) is not None]
    diag: dict = {"tested": {}}

    ok, slacks = _feasible(_corner(inputs, cheapest=True), inputs)
    if not ok:
        diag["slacks"] = slacks
        return "infeasible", None, diag
    ok, slacks = _feasible(_corner(inputs, cheapest=False), inputs)
    if ok:
        diag["slacks"] = slacks
        return "unconstrained", None, diag

    single = {"prefill": "P1", "decode": "D1", "memory": _memory_case(b)}
    feasible = []
    for name in present:
        case = single[name]
        try:
            sol = solve_case(case, inputs)
        except (ValidityError, ConvergenceError, InfeasibleError) as exc:
            diag["tested"][case] = {"error": str(exc)}
            continue
        ok, slacks = _feasible(sol.arch, inputs)
        diag["tested"][case] = {"feasible": ok, "loss": sol.loss, "slacks": slacks}
        if ok:
            feasible.append((sol.loss, sol.arch.theta(), case, sol))
    if not feasible and "memory" in present:
        for name, case in (("decode", "D3"), ("prefill", "P3")):
            if name not in present:
                continue
            try:
                sol = solve_case(case, inputs)
            except (ValidityError, ConvergenceError, InfeasibleError) as exc:
                diag["tested"][case] = {"error": str(exc)}
                continue
            ok, slacks = _feasible(sol.arch, inputs)
            diag["tested"][case] = {"feasible": ok, "loss": sol.loss, "slacks": slacks}
            if ok:
                feasible.append((sol.loss, sol.arch.theta(), case, sol))
    if not feasible:
        # The box holds feasible points (cheapest corner passed), so the binding set lies
        # outside the theory cases, e.g. prefill and decode together. Use the oracle.
        return _oracle_regime(inputs, present, diag)
    feasible.sort(key=lambda t: (t[0], t[1]))
    _, _, case, sol = feasible[0]
    diag["slacks"] = sol.residuals.get("slack", {})
    diag["selected_case"] = case
    label = {"D1": "decode_latency_only", "P1": "prefill_latency_only", "D2": "memory_only",
             "P2": "memory_only", "D3": "decode_plus_memory", "P3": "prefill_plus_memory"}[case]
    return label, sol, diag


BINDING_TOL = 1e-4


def _oracle_regime(inputs: TheoryInputs, present, diag):
    arch, loss = numerical_oracle(inputs, tuple(present))
    ok, slacks = _feasible(arch, inputs)
    binding = [n for n, v in slacks.items() if v < BINDING_TOL]
    diag["slacks"] = slacks
    diag["binding"] = binding
    diag["selected_case"] = "oracle"
    if "memory" in binding:
        label = ("decode_plus_memory" if "decode" in binding
                 else "prefill_plus_memory" if "prefill" in binding else "memory_only")
    elif "decode" in binding:
        label = "decode_latency_only"
    elif "prefill" in binding:
        label = "prefill_latency_only"
    else:
        label = "unconstrained"
    clamped = ["rho"] if arch.activation_rate <= inputs.rho_min else []
    sol = _finish("oracle", arch, inputs, tuple(binding), clamped, 0)
    sol.fallback = True
    return label, sol, diag


def solve_auto(inputs: TheoryInputs, method: str = "active_set", low: float = 0.5,
               high: float = 2.0) -> OptimalSolution:
    """Classify the regime and solve the matching case."""
    if method == "active_set":
        label, sol, diag = _active_set(inputs)
        if label == "infeasible":
            raise InfeasibleError("no architecture in the bounds box meets every budget")
        if label == "unconstrained":
            arch, loss = numerical_oracle(inputs, ())
            sol = OptimalSolution(arch=arch, case="unconstrained", loss=loss)
        sol.regime = label
        return sol
    if method == "ratio_heuristic":
        from .regimes import classify_regime

        label = classify_regime(inputs.budgets, "ratio_heuristic", low, high).label
        case = LABEL_TO_CASE[label]
        if case == "D2":
            case = _memory_case(inputs.budgets)
        sol = solve_case(case, inputs)
        sol.regime = label
        return sol
    raise ValidationError(f"unknown regime method {method!r}")


def attach_snapped(sol: OptimalSolution, inputs: TheoryInputs, space=None) -> OptimalSolution:
    """Snap to the nearest discrete configuration that meets every budget."""
    from .space import SearchSpace

    space = space or SearchSpace()

    def feasible(cand):
        return _feasible(cand, inputs, tol=0.0)[0]

    try:
        sol.snapped = snap_to_grid(sol.arch, space.configurations(), feasible)
        sol.loss_snapped = predict_loss(sol.snapped, inputs.coeffs)
    except ValidationError:
        sol.snapped, sol.loss_snapped = None, None
    return sol
